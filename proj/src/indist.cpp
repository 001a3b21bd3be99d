#include "odeid/indist.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

namespace odeid {

namespace {

std::map<std::string, int> state_slots(const OdeModel& E) {
    std::map<std::string, int> slots;
    for (int i = 0; i < E.n(); ++i) slots[E.state[i]] = i;
    slots["t"] = E.n();
    return slots;
}

struct CompiledRhs {
    std::vector<CompiledExpr> g0;
    std::vector<std::vector<CompiledExpr>> f, g;
    int n = 0, mu = 0, mw = 0;
};

CompiledRhs compile_rhs(const OdeModel& E) {
    CompiledRhs r;
    r.n = E.n();
    r.mu = E.mu();
    r.mw = E.mw();
    auto slots = state_slots(E);
    for (const auto& e : E.g0) r.g0.emplace_back(e, slots);
    for (const auto& fi : E.f) {
        std::vector<CompiledExpr> c;
        for (const auto& e : fi) c.emplace_back(e, slots);
        r.f.push_back(std::move(c));
    }
    for (const auto& gj : E.g) {
        std::vector<CompiledExpr> c;
        for (const auto& e : gj) c.emplace_back(e, slots);
        r.g.push_back(std::move(c));
    }
    return r;
}

// cubic interpolation on a uniform grid (Catmull-Rom, clamped ends)
double interp_cubic(const std::vector<double>& ts, const std::vector<double>& vs, double t) {
    const std::size_t n = ts.size();
    if (n == 1) return vs[0];
    double h = ts[1] - ts[0];
    double s = (t - ts[0]) / h;
    long i = static_cast<long>(std::floor(s));
    i = std::max(0L, std::min(static_cast<long>(n) - 2, i));
    double u = s - static_cast<double>(i);
    auto at = [&](long k) {
        k = std::max(0L, std::min(static_cast<long>(n) - 1, k));
        return vs[static_cast<std::size_t>(k)];
    };
    double p0 = at(i - 1), p1 = at(i), p2 = at(i + 1), p3 = at(i + 2);
    double a = -0.5 * p0 + 1.5 * p1 - 1.5 * p2 + 0.5 * p3;
    double b = p0 - 2.5 * p1 + 2.0 * p2 - 0.5 * p3;
    double c = -0.5 * p0 + 0.5 * p2;
    return ((a * u + b) * u + c) * u + p1;
}

}  // namespace

SimSetup resolve_scenario(const OdeModel& E, const Scenario& sc) {
    SimSetup sim;
    sim.t0 = sc.t_begin;
    sim.t1 = sc.t_end;
    std::map<std::string, int> tslot{{"t", 0}};
    auto profile_for = [&](const std::string& name) -> Expr {
        UiOrigin origin{name, 0};
        auto it = E.ui_origin.find(name);
        if (it != E.ui_origin.end()) origin = it->second;
        auto pit = sc.tv_profiles.find(origin.base_name);
        if (pit == sc.tv_profiles.end()) {
            // also accept a profile under the derived name itself
            pit = sc.tv_profiles.find(name);
            if (pit == sc.tv_profiles.end())
                throw ModelValidationError("scenario lacks a profile for input '" +
                                           origin.base_name + "'");
        }
        Expr p = pit->second;
        for (int k = 0; k < origin.derivative_order; ++k) p = differentiate(p, "t");
        return p;
    };
    for (int i = 0; i < E.n(); ++i) {
        const std::string& name = E.state[i];
        double v = 0;
        if (sc.initial.count(name)) {
            v = sc.initial.at(name);
        } else if (sc.params.count(name)) {
            v = sc.params.at(name);
        } else if (E.state_origin_tv.count(name)) {
            // promoted input: value at t0 from its profile (with derivatives)
            const UiOrigin& origin = E.state_origin_tv.at(name);
            auto pit = sc.tv_profiles.find(origin.base_name);
            if (pit == sc.tv_profiles.end())
                throw ModelValidationError("scenario lacks a profile for '" + origin.base_name + "'");
            Expr p = pit->second;
            for (int k = 0; k < origin.derivative_order; ++k) p = differentiate(p, "t");
            v = evaluate_double(p, {{"t", sim.t0}});
        } else {
            throw ModelValidationError("scenario does not determine state '" + name + "'");
        }
        sim.x0.push_back(v);
    }
    for (const auto& u : E.known_inputs) sim.u_profiles.emplace_back(profile_for(u), tslot);
    for (const auto& w : E.unknown_inputs) sim.w_profiles.emplace_back(profile_for(w), tslot);
    return sim;
}

namespace {

// One RK4 pass over [t0, t1] recording on the reporting grid. `wfun` supplies
// the unknown inputs (profile or interpolated transformed profile).
bool rk4_run(const CompiledRhs& rhs, const std::vector<CompiledExpr>& uprof,
             const std::function<void(double, double*)>& wfun, const std::vector<double>& x0,
             double t0, double t1, long steps, int grid_points, double blowup_limit,
             Trajectory& out, const std::vector<CompiledExpr>* outputs) {
    const int n = rhs.n;
    std::vector<double> x = x0;
    std::vector<double> vars(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> u(static_cast<std::size_t>(rhs.mu), 0.0);
    std::vector<double> w(static_cast<std::size_t>(rhs.mw), 0.0);
    std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
    const double dt = (t1 - t0) / static_cast<double>(steps);
    const long per_grid = steps / (grid_points - 1);

    auto deriv = [&](double t, const std::vector<double>& xs, std::vector<double>& dx) {
        for (int i = 0; i < n; ++i) vars[static_cast<std::size_t>(i)] = xs[static_cast<std::size_t>(i)];
        vars[static_cast<std::size_t>(n)] = t;
        double tv[1] = {t};
        for (int k = 0; k < rhs.mu; ++k) u[static_cast<std::size_t>(k)] = uprof[static_cast<std::size_t>(k)].eval(tv);
        wfun(t, w.data());
        for (int i = 0; i < n; ++i) {
            double v = rhs.g0[static_cast<std::size_t>(i)].eval(vars.data());
            for (int k = 0; k < rhs.mu; ++k)
                v += u[static_cast<std::size_t>(k)] * rhs.f[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)].eval(vars.data());
            for (int j = 0; j < rhs.mw; ++j)
                v += w[static_cast<std::size_t>(j)] * rhs.g[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)].eval(vars.data());
            dx[static_cast<std::size_t>(i)] = v;
        }
    };
    auto record = [&](double t) {
        out.t.push_back(t);
        out.states.push_back(x);
        if (outputs) {
            for (int i = 0; i < n; ++i) vars[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)];
            vars[static_cast<std::size_t>(n)] = t;
            std::vector<double> ys;
            for (const auto& oc : *outputs) ys.push_back(oc.eval(vars.data()));
            out.outputs.push_back(std::move(ys));
        }
    };
    record(t0);
    for (long sidx = 0; sidx < steps; ++sidx) {
        double t = t0 + dt * static_cast<double>(sidx);
        deriv(t, x, k1);
        for (int i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k1[i];
        deriv(t + 0.5 * dt, tmp, k2);
        for (int i = 0; i < n; ++i) tmp[i] = x[i] + 0.5 * dt * k2[i];
        deriv(t + 0.5 * dt, tmp, k3);
        for (int i = 0; i < n; ++i) tmp[i] = x[i] + dt * k3[i];
        deriv(t + dt, tmp, k4);
        for (int i = 0; i < n; ++i)
            x[i] += dt / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
        for (int i = 0; i < n; ++i)
            if (!std::isfinite(x[i]) || std::fabs(x[i]) > blowup_limit) return false;
        if ((sidx + 1) % per_grid == 0) record(t0 + dt * static_cast<double>(sidx + 1));
    }
    return true;
}

double traj_rel_diff(const Trajectory& a, const Trajectory& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.outputs.size(); ++i) {
        for (std::size_t j = 0; j < a.outputs[i].size(); ++j) {
            double scale = 1e-12;
            for (const auto& row : a.outputs) scale = std::max(scale, std::fabs(row[j]));
            worst = std::max(worst, std::fabs(a.outputs[i][j] - b.outputs[i][j]) / scale);
        }
    }
    return worst;
}

}  // namespace

Trajectory integrate_model_dense(const OdeModel& E, const SimSetup& sim, int grid_points,
                                 double dt, double tol_refine, double blowup_limit,
                                 Trajectory* dense_out) {
    CompiledRhs rhs = compile_rhs(E);
    auto slots = state_slots(E);
    std::vector<CompiledExpr> outputs;
    for (const auto& h : E.outputs) outputs.emplace_back(h, slots);
    std::vector<CompiledExpr> wprof = sim.w_profiles;
    auto wfun = [&](double t, double* w) {
        double tv[1] = {t};
        for (std::size_t j = 0; j < wprof.size(); ++j) w[j] = wprof[j].eval(tv);
    };

    const double span = sim.t1 - sim.t0;
    long base_steps;
    if (dt > 0) {
        base_steps = static_cast<long>(std::ceil(span / dt));
    } else {
        base_steps = 4L * (grid_points - 1);
    }
    auto round_steps = [&](long s) {
        long per = (s + grid_points - 2) / (grid_points - 1);
        return per * static_cast<long>(grid_points - 1);
    };
    base_steps = round_steps(base_steps);

    auto finish = [&](Trajectory&& accepted, long steps) -> Trajectory {
        if (dense_out) {
            long dense_steps = std::min(steps, 1L << 16);
            dense_steps = round_steps(dense_steps);
            Trajectory dense;
            rk4_run(rhs, sim.u_profiles, wfun, sim.x0, sim.t0, sim.t1, dense_steps,
                    static_cast<int>(dense_steps + 1), blowup_limit, dense, &outputs);
            *dense_out = std::move(dense);
        }
        return std::move(accepted);
    };

    Trajectory prev;
    bool have_prev = false;
    long prev_steps = base_steps;
    for (int refine = 0; refine < 16; ++refine) {
        Trajectory cur;
        bool ok = rk4_run(rhs, sim.u_profiles, wfun, sim.x0, sim.t0, sim.t1, base_steps,
                          grid_points, blowup_limit, cur, &outputs);
        if (ok && have_prev && traj_rel_diff(prev, cur) <= tol_refine)
            return finish(std::move(cur), base_steps);
        if (ok) {
            prev = std::move(cur);
            have_prev = true;
            prev_steps = base_steps;
        } else {
            have_prev = false;
        }
        if (dt > 0 && ok) return finish(std::move(prev), prev_steps);
        base_steps *= 2;
        if (base_steps > (1L << 24))
            throw NonConvergence("integration failed to converge while refining the step");
    }
    throw NonConvergence("integration failed to converge while refining the step");
}

Trajectory integrate_model(const OdeModel& E, const SimSetup& sim, int grid_points, double dt,
                           double tol_refine, double blowup_limit) {
    return integrate_model_dense(E, sim, grid_points, dt, tol_refine, blowup_limit, nullptr);
}

bool check_commutativity(const OdeModel& E, const VectorField& xi,
                         const std::vector<Expr>& uchi, const RankOracle& oracle) {
    // [xi, g0 + sum f u + sum g w] + sum g^j uchi_j
    VectorField field = E.g0;
    for (int k = 0; k < E.mu(); ++k)
        for (int i = 0; i < E.n(); ++i)
            field[i] = add2(field[i], mul2(E.f[k][i], make_var(E.known_inputs[k])));
    for (int j = 0; j < E.mw(); ++j)
        for (int i = 0; i < E.n(); ++i)
            field[i] = add2(field[i], mul2(E.g[j][i], make_var(E.unknown_inputs[j])));
    VectorField br = lie_bracket(xi, field, E.state);
    for (int j = 0; j < E.mw(); ++j) {
        if (uchi[j].is_zero()) continue;
        for (int i = 0; i < E.n(); ++i) br[i] = add2(br[i], mul2(E.g[j][i], uchi[j]));
    }
    for (const auto& comp : br) {
        if (!is_identically_zero(comp, oracle.zero_opt())) return false;
    }
    return true;
}

std::pair<VectorField, std::vector<Expr>> commutativity_normalize(
    const OdeModel& E, const VectorField& xi, const std::vector<Expr>& uchi,
    const RankOracle& oracle, bool* found) {
    if (found) *found = true;
    if (check_commutativity(E, xi, uchi, oracle)) return {xi, uchi};
    for (int i = 0; i < E.n(); ++i) {
        Expr f = make_var(E.state[static_cast<std::size_t>(i)]);
        VectorField xs;
        std::vector<Expr> us;
        for (const auto& c : xi) xs.push_back(simplify(mul2(f, c)));
        for (const auto& c : uchi) us.push_back(simplify(mul2(f, c)));
        try {
            if (check_commutativity(E, xs, us, oracle)) return {xs, us};
        } catch (const InconclusiveSingular&) {
        }
    }
    if (found) *found = false;
    return {xi, uchi};
}

std::vector<double> canonicity_flow(const std::vector<double>& w, int m, int i, double tau) {
    std::vector<double> out = w;
    out[static_cast<std::size_t>(m + i - 1)] += tau;
    return out;
}

namespace {

// nonuniform cubic Hermite interpolant with finite-difference slopes
struct Hermite {
    std::vector<double> t, y, m;
    void build(const std::vector<double>& ts, const std::vector<double>& ys) {
        t = ts;
        y = ys;
        const std::size_t n = t.size();
        m.assign(n, 0.0);
        if (n == 1) return;
        for (std::size_t i = 0; i < n; ++i) {
            if (i == 0) {
                m[i] = (y[1] - y[0]) / (t[1] - t[0]);
            } else if (i + 1 == n) {
                m[i] = (y[n - 1] - y[n - 2]) / (t[n - 1] - t[n - 2]);
            } else {
                double h0 = t[i] - t[i - 1], h1 = t[i + 1] - t[i];
                double d0 = (y[i] - y[i - 1]) / h0, d1 = (y[i + 1] - y[i]) / h1;
                m[i] = (d0 * h1 + d1 * h0) / (h0 + h1);
            }
        }
    }
    double eval(double x) const {
        const std::size_t n = t.size();
        if (n == 1) return y[0];
        std::size_t lo = 0, hi = n - 1;
        if (x <= t[0]) {
            hi = 1;
        } else if (x >= t[n - 1]) {
            lo = n - 2;
        } else {
            while (hi - lo > 1) {
                std::size_t mid = (lo + hi) / 2;
                if (t[mid] <= x) lo = mid;
                else hi = mid;
            }
        }
        double h = t[lo + 1] - t[lo];
        double u = (x - t[lo]) / h;
        double h00 = (1 + 2 * u) * (1 - u) * (1 - u);
        double h10 = u * (1 - u) * (1 - u);
        double h01 = u * u * (3 - 2 * u);
        double h11 = u * u * (u - 1);
        return h00 * y[lo] + h10 * h * m[lo] + h01 * y[lo + 1] + h11 * h * m[lo + 1];
    }
};

}  // namespace

TrajectoryBundle symmetry_flow(const OdeModel& E, const Scenario& sc, const VectorField& xi,
                               const std::vector<Expr>& uchi, const FlowSpec& spec,
                               const RankOracle& oracle) {
    TrajectoryBundle bundle;
    bundle.model = E;
    bundle.scenario_name = "";
    const int n = E.n();
    const int mw = E.mw();
    SimSetup sim = resolve_scenario(E, sc);
    bundle.commutativity_ok = check_commutativity(E, xi, uchi, oracle);

    // moved components decide the admissibility (positivity) requirements
    for (int i = 0; i < n; ++i)
        if (!is_identically_zero(xi[i], oracle.zero_opt())) bundle.moved_states.push_back(i);
    for (int j = 0; j < mw; ++j)
        if (!is_identically_zero(uchi[j], oracle.zero_opt())) bundle.moved_uis.push_back(j);

    Trajectory dense;
    bundle.baseline = integrate_model_dense(E, sim, spec.grid_points, spec.dt, spec.tol / 10.0,
                                            spec.blowup_limit, &dense);
    const std::size_t gp = bundle.baseline.t.size();
    for (std::size_t ti = 0; ti < gp; ++ti) {
        double tv[1] = {bundle.baseline.t[ti]};
        std::vector<double> ws;
        for (auto& wp : sim.w_profiles) ws.push_back(wp.eval(tv));
        bundle.w_baseline.push_back(std::move(ws));
    }
    const std::size_t dp = dense.t.size();
    std::vector<std::vector<double>> dense_w;
    for (std::size_t ti = 0; ti < dp; ++ti) {
        double tv[1] = {dense.t[ti]};
        std::vector<double> ws;
        for (auto& wp : sim.w_profiles) ws.push_back(wp.eval(tv));
        dense_w.push_back(std::move(ws));
    }

    std::vector<CompiledExpr> outputs;
    {
        auto slots = state_slots(E);
        for (const auto& h : E.outputs) outputs.emplace_back(h, slots);
    }
    CompiledRhs rhs = compile_rhs(E);

    std::vector<double> taus = spec.taus;
    if (std::find(taus.begin(), taus.end(), 0.0) == taus.end()) taus.insert(taus.begin(), 0.0);

    // anchor bookkeeping shared across branches: flow results per dense index
    std::vector<std::size_t> base_anchor_idx;
    {
        std::size_t stride =
            std::max<std::size_t>(1, (dp - 1) / static_cast<std::size_t>(spec.flow_points - 1));
        for (std::size_t i = 0; i + 1 < dp; i += stride) base_anchor_idx.push_back(i);
        base_anchor_idx.push_back(dp - 1);
    }

    std::vector<std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>>>
        pending_anchor;
    for (double tau : taus) {
        TauBranch branch;
        branch.tau = tau;
        long tau_steps =
            spec.dtau > 0 ? std::max(1L, static_cast<long>(std::ceil(std::fabs(tau) / spec.dtau)))
                          : std::max(128L, static_cast<long>(std::ceil(std::fabs(tau) / 0.01)));

        bool blown = false;
        std::string reason;
        // tau-flow from the baseline point at dense index gi
        auto flow_at = [&](std::size_t gi) {
            std::vector<double> x(dense.states[gi]);
            std::vector<double> w(dense_w[gi]);
            auto [xs, ws] = flow_point(E, xi, uchi, x, w, dense.t[gi], tau,
                                       tau == 0 ? 1 : tau_steps);
            return std::make_pair(xs, ws);
        };
        auto ok_point = [&](const std::vector<double>& xs, const std::vector<double>& ws,
                            std::string* why) {
            for (double v : xs)
                if (!std::isfinite(v) || std::fabs(v) > spec.blowup_limit) {
                    *why = "flow left the bounded region";
                    return false;
                }
            for (double v : ws)
                if (!std::isfinite(v) || std::fabs(v) > spec.blowup_limit) {
                    *why = "flow left the bounded region";
                    return false;
                }
            if (spec.enforce_positivity) {
                for (int i : bundle.moved_states)
                    if (xs[static_cast<std::size_t>(i)] < -1e-12) {
                        *why = "component " + E.state[static_cast<std::size_t>(i)] +
                               " left the positive region";
                        return false;
                    }
                for (int j : bundle.moved_uis)
                    if (ws[static_cast<std::size_t>(j)] < -1e-12) {
                        *why = "input " + E.unknown_inputs[static_cast<std::size_t>(j)] +
                               " left the positive region";
                        return false;
                    }
            }
            return true;
        };

        // adaptive anchor set: refine where the interpolant misses the flow
        std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>> anchor;
        for (std::size_t gi : base_anchor_idx) {
            auto fs = flow_at(gi);
            if (!ok_point(fs.first, fs.second, &reason)) {
                blown = true;
                break;
            }
            anchor[gi] = std::move(fs);
        }
        if (!blown && tau != 0) {
            std::vector<double> wscale(static_cast<std::size_t>(mw), 1e-12);
            for (const auto& [gi, fs] : anchor)
                for (int j = 0; j < mw; ++j)
                    wscale[static_cast<std::size_t>(j)] =
                        std::max(wscale[static_cast<std::size_t>(j)],
                                 std::fabs(fs.second[static_cast<std::size_t>(j)]));
            const double refine_tol = spec.tol / 20.0;
            for (int pass = 0; pass < 24 && !blown; ++pass) {
                // interpolants from the current anchors
                std::vector<double> ats;
                std::vector<std::size_t> aidx;
                for (const auto& [gi, fs] : anchor) {
                    (void)fs;
                    ats.push_back(dense.t[gi]);
                    aidx.push_back(gi);
                }
                std::vector<Hermite> winterp(static_cast<std::size_t>(mw));
                for (int j = 0; j < mw; ++j) {
                    std::vector<double> col;
                    for (std::size_t k = 0; k < aidx.size(); ++k)
                        col.push_back(anchor[aidx[k]].second[static_cast<std::size_t>(j)]);
                    winterp[static_cast<std::size_t>(j)].build(ats, col);
                }
                std::vector<std::size_t> to_add;
                for (std::size_t k = 0; k + 1 < aidx.size(); ++k) {
                    if (aidx[k + 1] - aidx[k] < 2) continue;
                    std::size_t mid = (aidx[k] + aidx[k + 1]) / 2;
                    auto fs = flow_at(mid);
                    if (!ok_point(fs.first, fs.second, &reason)) {
                        blown = true;
                        break;
                    }
                    bool bad = false;
                    for (int j = 0; j < mw && !bad; ++j) {
                        double pred = winterp[static_cast<std::size_t>(j)].eval(dense.t[mid]);
                        double truev = fs.second[static_cast<std::size_t>(j)];
                        if (std::fabs(pred - truev) >
                            refine_tol * wscale[static_cast<std::size_t>(j)])
                            bad = true;
                    }
                    if (bad) {
                        anchor[mid] = std::move(fs);
                        to_add.push_back(mid);
                        if (anchor.size() > 20000) {
                            blown = true;
                            reason = "flow interpolation did not converge";
                        }
                    }
                }
                if (to_add.empty() || blown) break;
            }
        }
        if (blown) {
            branch.admissible = false;
            branch.inadmissible_reason = reason;
            bundle.branches.push_back(std::move(branch));
            pending_anchor.push_back({});
            continue;
        }
        pending_anchor.push_back(std::move(anchor));
        bundle.branches.push_back(std::move(branch));
        continue;
    }
    // unify the anchor sets of the admissible branches so all flows share one
    // time grid
    std::set<std::size_t> union_idx(base_anchor_idx.begin(), base_anchor_idx.end());
    for (const auto& amap : pending_anchor)
        for (const auto& [gi, fs] : amap) {
            (void)fs;
            union_idx.insert(gi);
        }
    bundle.flow_times.clear();
    for (std::size_t gi : union_idx) {
        bundle.flow_times.push_back(dense.t[gi]);
        bundle.flow_baseline_states.push_back(dense.states[gi]);
        bundle.flow_baseline_w.push_back(dense_w[gi]);
    }

    for (std::size_t bi = 0; bi < bundle.branches.size(); ++bi) {
        TauBranch& branch = bundle.branches[bi];
        if (!branch.admissible) continue;
        auto& anchor = pending_anchor[bi];
        const double tau = branch.tau;
        long tau_steps =
            spec.dtau > 0 ? std::max(1L, static_cast<long>(std::ceil(std::fabs(tau) / spec.dtau)))
                          : std::max(128L, static_cast<long>(std::ceil(std::fabs(tau) / 0.01)));
        std::string reason;
        bool blown = false;
        for (std::size_t gi : union_idx) {
            if (anchor.count(gi)) continue;
            std::vector<double> x(dense.states[gi]);
            std::vector<double> w(dense_w[gi]);
            auto fs = flow_point(E, xi, uchi, x, w, dense.t[gi], tau,
                                 tau == 0 ? 1 : tau_steps);
            anchor[gi] = std::move(fs);
        }
        std::vector<double> ats;
        for (std::size_t gi : union_idx) {
            ats.push_back(dense.t[gi]);
            branch.flow_states.push_back(anchor[gi].first);
            branch.flow_w.push_back(anchor[gi].second);
        }
        (void)blown;
        (void)reason;

        if (spec.flows_only) continue;

        // re-integrate the dynamics from x'(t0, tau) with the interpolated w'
        std::vector<Hermite> winterp(static_cast<std::size_t>(mw));
        for (int j = 0; j < mw; ++j) {
            std::vector<double> col;
            for (const auto& fw : branch.flow_w) col.push_back(fw[static_cast<std::size_t>(j)]);
            winterp[static_cast<std::size_t>(j)].build(ats, col);
        }
        auto wfun = [&](double t, double* w) {
            for (int j = 0; j < mw; ++j) w[j] = winterp[static_cast<std::size_t>(j)].eval(t);
        };
        {
            Trajectory prev;
            bool have_prev = false;
            long base_steps = 4L * static_cast<long>(gp - 1);
            for (int refine = 0; refine < 16; ++refine) {
                Trajectory cur;
                bool ok = rk4_run(rhs, sim.u_profiles, wfun, branch.flow_states.front(), sim.t0,
                                  sim.t1, base_steps, static_cast<int>(gp), spec.blowup_limit, cur,
                                  &outputs);
                if (ok && have_prev && traj_rel_diff(prev, cur) <= spec.tol / 10.0) {
                    branch.reintegrated = cur;
                    break;
                }
                if (ok) {
                    prev = std::move(cur);
                    have_prev = true;
                } else {
                    have_prev = false;
                }
                base_steps *= 2;
                if (refine == 15 || base_steps > (1L << 24)) {
                    branch.admissible = false;
                    branch.inadmissible_reason = "re-integration did not converge";
                    break;
                }
            }
        }
        if (branch.admissible) {
            double worst = 0;
            for (std::size_t ti = 0; ti < bundle.baseline.outputs.size(); ++ti)
                for (std::size_t j = 0; j < bundle.baseline.outputs[ti].size(); ++j) {
                    double scale = 1e-12;
                    for (const auto& row : bundle.baseline.outputs)
                        scale = std::max(scale, std::fabs(row[j]));
                    worst = std::max(worst, std::fabs(bundle.baseline.outputs[ti][j] -
                                                      branch.reintegrated.outputs[ti][j]) /
                                                scale);
                }
            branch.max_rel_dev = worst;
        }
    }
    return bundle;
}

std::pair<std::vector<double>, std::vector<double>> flow_point(
    const OdeModel& E, const VectorField& xi, const std::vector<Expr>& uchi,
    const std::vector<double>& x, const std::vector<double>& w, double t, double tau,
    long steps) {
    const int n = E.n();
    const int mw = E.mw();
    auto slots = state_slots(E);
    std::map<std::string, int> fslots = slots;
    for (int j = 0; j < mw; ++j) fslots[E.unknown_inputs[j]] = n + 1 + j;
    std::vector<CompiledExpr> xi_c, uchi_c;
    for (const auto& e : xi) xi_c.emplace_back(e, fslots);
    for (const auto& e : uchi) uchi_c.emplace_back(e, fslots);
    std::vector<double> joint(static_cast<std::size_t>(n + 1 + mw));
    for (int i = 0; i < n; ++i) joint[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)];
    joint[static_cast<std::size_t>(n)] = t;
    for (int j = 0; j < mw; ++j) joint[static_cast<std::size_t>(n + 1 + j)] = w[static_cast<std::size_t>(j)];
    if (tau != 0) {
        if (steps <= 0) steps = std::max(256L, static_cast<long>(std::ceil(std::fabs(tau) / 0.005)));
        double dtau = tau / static_cast<double>(steps);
        std::vector<double> k1(joint.size()), k2(joint.size()), k3(joint.size()), k4(joint.size()),
            tmp(joint.size());
        auto deriv = [&](const std::vector<double>& js, std::vector<double>& dx) {
            for (int i = 0; i < n; ++i)
                dx[static_cast<std::size_t>(i)] = xi_c[static_cast<std::size_t>(i)].eval(js.data());
            dx[static_cast<std::size_t>(n)] = 0;
            for (int j = 0; j < mw; ++j)
                dx[static_cast<std::size_t>(n + 1 + j)] =
                    uchi_c[static_cast<std::size_t>(j)].eval(js.data());
        };
        for (long s = 0; s < steps; ++s) {
            deriv(joint, k1);
            for (std::size_t i = 0; i < joint.size(); ++i) tmp[i] = joint[i] + 0.5 * dtau * k1[i];
            deriv(tmp, k2);
            for (std::size_t i = 0; i < joint.size(); ++i) tmp[i] = joint[i] + 0.5 * dtau * k2[i];
            deriv(tmp, k3);
            for (std::size_t i = 0; i < joint.size(); ++i) tmp[i] = joint[i] + dtau * k3[i];
            deriv(tmp, k4);
            for (std::size_t i = 0; i < joint.size(); ++i)
                joint[i] += dtau / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
        }
    }
    std::vector<double> xs(joint.begin(), joint.begin() + n);
    std::vector<double> ws(joint.begin() + n + 1, joint.end());
    return {xs, ws};
}

CertifyReport certify_indistinguishability(const TrajectoryBundle& bundle, double tol) {
    CertifyReport rep;
    rep.tol = tol;
    rep.pass = true;
    for (const auto& br : bundle.branches) {
        if (!br.admissible) {
            ++rep.inadmissible_branches;
            continue;
        }
        ++rep.admissible_branches;
        if (br.max_rel_dev > rep.worst) {
            rep.worst = br.max_rel_dev;
            rep.worst_tau = br.tau;
        }
        if (br.max_rel_dev > tol) rep.pass = false;
    }
    if (rep.admissible_branches == 0) rep.pass = false;
    return rep;
}

// ---------------------------------------------------------------------------
// Closed forms from the worked examples
// ---------------------------------------------------------------------------

std::map<std::string, double> closed_form(const std::string& key,
                                          const std::map<std::string, double>& base, double tau) {
    auto get = [&](const std::string& name) {
        auto it = base.find(name);
        if (it == base.end()) throw Error("closed_form: missing baseline value '" + name + "'");
        return it->second;
    };
    std::map<std::string, double> out;
    if (key == "hiv") {
        double T_U = get("T_U"), T_I = get("T_I"), V = get("V");
        double rho = get("rho"), delta = get("delta"), N = get("N");
        double eta = get("eta");
        double ert = std::exp(rho * tau);
        double denom_delta = (rho - delta) * ert + delta;
        if (std::fabs(denom_delta) < 1e-300) throw DomainError("hiv closed form singular at tau");
        out["T_U'"] = T_U + T_I - T_I / rho * (delta * std::exp(-rho * tau) + rho - delta);
        out["T_I'"] = T_I / rho * (delta * std::exp(-rho * tau) + rho - delta);
        out["V'"] = V;
        out["lambda'"] = get("lambda");
        out["rho'"] = rho;
        out["delta'"] = delta * rho / denom_delta;
        out["N'"] = N * ert;
        out["c'"] = get("c");
        double num = eta * T_U * V * rho * ert +
                     (T_I * delta * delta - T_I * delta * rho - eta * T_U * V * delta) * (ert - 1);
        double den = V * (T_I * delta + T_U * rho) * ert - V * T_I * delta;
        if (std::fabs(den) < 1e-300) throw DomainError("hiv closed form singular at tau");
        out["eta'"] = num / den;
        return out;
    }
    if (key == "seiar_sym1") {
        double S = get("S"), R = get("R"), beta = get("beta");
        if (std::fabs(S + tau) < 1e-300) throw DomainError("seiar closed form singular at tau");
        out["S'"] = S + tau;
        out["E'"] = get("E");
        out["I'"] = get("I");
        out["A'"] = get("A");
        out["R'"] = R - tau;
        out["mu1'"] = get("mu1");
        out["mu2'"] = get("mu2");
        out["gamma'"] = get("gamma");
        out["p'"] = get("p");
        out["beta'"] = beta * S / (S + tau);
        return out;
    }
    if (key == "seiar_sym2") {
        double S = get("S"), E = get("E"), I = get("I"), A = get("A");
        double gamma = get("gamma"), beta = get("beta");
        double et = std::exp(tau);
        out["S'"] = S + E * (1 - std::exp(-tau));
        out["E'"] = E * std::exp(-tau);
        out["I'"] = I;
        out["A'"] = A;
        out["R'"] = get("R");
        out["mu1'"] = get("mu1");
        out["mu2'"] = get("mu2");
        out["gamma'"] = gamma * et;
        out["p'"] = get("p");
        double mu = gamma * E / (A + I);
        double den = E - (E + S) * et;
        if (std::fabs(den) < 1e-300) throw DomainError("seiar closed form singular at tau");
        out["beta'"] = (mu * (1 - et) - S * beta) / den;
        return out;
    }
    auto toggle_set = [&](int side, int variant) {
        // side 1: (x2, W1, n1, k1, k01); side 2 mirrors the roles
        std::string xs = side == 1 ? "x2" : "x1";
        std::string Ws = side == 1 ? "W1" : "W2";
        std::string ns = side == 1 ? "n1" : "n2";
        std::string ks = side == 1 ? "k1" : "k2";
        std::string k0s = side == 1 ? "k01" : "k02";
        double x = get(xs), W = get(Ws), nn = get(ns), kk = get(ks), k0 = get(k0s);
        double q = std::pow(x / W, nn);
        double Wp = 0, kp = kk, k0p = k0, np = nn;
        if (variant == 1) {
            double num = 1 - nn * (1 + q) * tau;
            double den = q + nn * q * tau + nn * tau;
            if (num / den <= 0) throw DomainError("toggle closed form outside admissible tau");
            Wp = x * std::pow(num / den, 1.0 / nn);
            k0p = k0 + nn * kk * tau;
        } else if (variant == 2) {
            double den = (1 + q) * std::exp(nn * tau) - 1;
            if (den <= 0) throw DomainError("toggle closed form outside admissible tau");
            Wp = x * std::pow(1.0 / den, 1.0 / nn);
            kp = kk * std::exp(nn * tau);
        } else {
            Wp = x * std::exp(std::exp(-tau) * std::log(W / x));
            np = nn * std::exp(tau);
        }
        out[Ws + "'"] = Wp;
        out[ks + "'"] = kp;
        out[k0s + "'"] = k0p;
        out[ns + "'"] = np;
        return out;
    };
    if (key == "toggle_set1") return toggle_set(1, 1);
    if (key == "toggle_set2") return toggle_set(1, 2);
    if (key == "toggle_set3") return toggle_set(1, 3);
    if (key == "toggle_set4") return toggle_set(2, 1);
    if (key == "toggle_set5") return toggle_set(2, 2);
    if (key == "toggle_set6") return toggle_set(2, 3);
    throw UnknownModel(key);
}

double locate_blowup_tau(const OdeModel& E, const Scenario& sc, const VectorField& xi,
                         const std::vector<Expr>& uchi, bool positive_direction,
                         const FlowSpec& specIn, const RankOracle& oracle, double tau_max) {
    FlowSpec spec = specIn;
    spec.flows_only = true;
    if (spec.dtau <= 0) spec.dtau = 5e-4;
    auto admissible = [&](double tau) {
        spec.taus = {tau};
        TrajectoryBundle b = symmetry_flow(E, sc, xi, uchi, spec, oracle);
        for (const auto& br : b.branches)
            if (br.tau == tau) return br.admissible;
        return false;
    };
    double sign = positive_direction ? 1.0 : -1.0;
    double lo = 0.0, hi = 0.0;
    double step = 0.25;
    while (std::fabs(hi) < tau_max) {
        double cand = hi + sign * step;
        if (!admissible(cand)) {
            lo = hi;
            hi = cand;
            break;
        }
        hi = cand;
    }
    if (lo == hi) throw NonConvergence("no admissibility boundary found within range");
    // bisect between the last admissible (lo) and first inadmissible (hi)
    for (int it = 0; it < 48 && std::fabs(hi - lo) > 2e-4; ++it) {
        double mid = 0.5 * (lo + hi);
        if (admissible(mid)) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

namespace {

std::vector<int> resolve_single_symmetry(const OdeModel& E, const IdentifiabilityResult& ident,
                                         int ci, const RankOracle& oracle) {
    const auto& syms = ident.state_symmetries;
    std::vector<int> sensitive;
    for (std::size_t s = 0; s < syms.size(); ++s)
        if (!is_identically_zero(syms[s][static_cast<std::size_t>(ci)], oracle.zero_opt()))
            sensitive.push_back(static_cast<int>(s));
    if (sensitive.empty())
        throw NoSensitivity("component '" + E.state[static_cast<std::size_t>(ci)] +
                            "' is observable; its flow is flat");
    if (sensitive.size() > 1)
        throw MultipleSymmetries("component '" + E.state[static_cast<std::size_t>(ci)] +
                                 "' is moved by several symmetries");
    const int si = sensitive[0];
    for (std::size_t s = 0; s < syms.size(); ++s) {
        if (static_cast<int>(s) == si) continue;
        for (int i = 0; i < E.n(); ++i) {
            bool moved_by_si = !is_identically_zero(
                syms[static_cast<std::size_t>(si)][static_cast<std::size_t>(i)], oracle.zero_opt());
            if (!moved_by_si) continue;
            if (!is_identically_zero(syms[s][static_cast<std::size_t>(i)], oracle.zero_opt()))
                throw MultipleSymmetries("symmetries overlap on component " +
                                         E.state[static_cast<std::size_t>(i)]);
        }
    }
    return {si};
}

}  // namespace

RecoveryReport single_symmetry_recovery_at(const OdeModel& E, const IdentifiabilityResult& ident,
                                           const std::string& component,
                                           const RecoveryAnchors& anchors, double measured,
                                           const RankOracle& oracle) {
    const int ci = E.state_index(component);
    const int si = resolve_single_symmetry(E, ident, ci, oracle)[0];
    const VectorField& xi = ident.state_symmetries[static_cast<std::size_t>(si)];
    std::vector<Expr> uchi(static_cast<std::size_t>(E.mw()), zero());
    for (const auto& us : ident.ui_symmetries) {
        if (us.kind != UiSymmetry::Kind::Unobservability) continue;
        bool same = true;
        for (int i = 0; i < E.n(); ++i)
            if (!expr_eq(us.source_xi[static_cast<std::size_t>(i)], xi[static_cast<std::size_t>(i)]))
                same = false;
        if (same) uchi = us.components;
    }
    // flow-compatible rescaling when one exists; the t*-slice orbit is the
    // same either way, the t0 transport needs it
    auto [xin, uchin] = commutativity_normalize(E, xi, uchi, oracle);

    auto slots = state_slots(E);
    std::map<std::string, int> fslots = slots;
    for (int j = 0; j < E.mw(); ++j) fslots[E.unknown_inputs[j]] = E.n() + 1 + j;
    std::vector<CompiledExpr> xi_c, uchi_c;
    for (const auto& e : xin) xi_c.emplace_back(e, fslots);
    for (const auto& e : uchin) uchi_c.emplace_back(e, fslots);

    auto flow_from = [&](const std::vector<double>& xa, const std::vector<double>& wa, double ta,
                         double tau) {
        std::vector<double> joint(static_cast<std::size_t>(E.n() + 1 + E.mw()));
        for (int i = 0; i < E.n(); ++i) joint[static_cast<std::size_t>(i)] = xa[static_cast<std::size_t>(i)];
        joint[static_cast<std::size_t>(E.n())] = ta;
        for (int j = 0; j < E.mw(); ++j)
            joint[static_cast<std::size_t>(E.n() + 1 + j)] = wa[static_cast<std::size_t>(j)];
        long steps = std::max(256L, static_cast<long>(std::ceil(std::fabs(tau) / 0.005)));
        double dtau = tau / static_cast<double>(steps);
        if (tau == 0) return joint;
        std::vector<double> k1(joint.size()), k2(joint.size()), k3(joint.size()), k4(joint.size()),
            tmp(joint.size());
        auto deriv = [&](const std::vector<double>& js, std::vector<double>& dx) {
            for (int i = 0; i < E.n(); ++i)
                dx[static_cast<std::size_t>(i)] = xi_c[static_cast<std::size_t>(i)].eval(js.data());
            dx[static_cast<std::size_t>(E.n())] = 0;
            for (int j = 0; j < E.mw(); ++j)
                dx[static_cast<std::size_t>(E.n() + 1 + j)] =
                    uchi_c[static_cast<std::size_t>(j)].eval(js.data());
        };
        for (long s = 0; s < steps; ++s) {
            deriv(joint, k1);
            for (std::size_t i = 0; i < joint.size(); ++i) tmp[i] = joint[i] + 0.5 * dtau * k1[i];
            deriv(tmp, k2);
            for (std::size_t i = 0; i < joint.size(); ++i) tmp[i] = joint[i] + 0.5 * dtau * k2[i];
            deriv(tmp, k3);
            for (std::size_t i = 0; i < joint.size(); ++i) tmp[i] = joint[i] + dtau * k3[i];
            deriv(tmp, k4);
            for (std::size_t i = 0; i < joint.size(); ++i)
                joint[i] += dtau / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]);
        }
        return joint;
    };
    auto f = [&](double tau) {
        return flow_from(anchors.x_star, anchors.w_star, anchors.t_star,
                         tau)[static_cast<std::size_t>(ci)] -
               measured;
    };

    // bracket on a grid, then bisect, then polish with a secant step
    const double T = 8.0;
    const int grid = 64;
    double lo = 0, hi = 0;
    bool found = false;
    double prev_tau = -T, prev_val = f(-T);
    for (int k = 1; k <= grid && !found; ++k) {
        double tau = -T + 2 * T * static_cast<double>(k) / grid;
        double val = f(tau);
        if (std::isfinite(prev_val) && std::isfinite(val) && prev_val * val <= 0) {
            lo = prev_tau;
            hi = tau;
            found = true;
        }
        prev_tau = tau;
        prev_val = val;
    }
    if (!found) throw NonConvergence("no group parameter matches the measurement");
    double flo = f(lo);
    for (int it = 0; it < 60 && hi - lo > 1e-10; ++it) {
        double mid = 0.5 * (lo + hi);
        double fm = f(mid);
        if (flo * fm <= 0) {
            hi = mid;
        } else {
            lo = mid;
            flo = fm;
        }
    }
    double tau_hat = 0.5 * (lo + hi);
    for (int it = 0; it < 8; ++it) {
        double f1 = f(tau_hat);
        double h = std::max(1e-7, 1e-7 * std::fabs(tau_hat));
        double df = (f(tau_hat + h) - f(tau_hat - h)) / (2 * h);
        if (df == 0) break;
        double next = tau_hat - f1 / df;
        if (!std::isfinite(next) || std::fabs(next - tau_hat) < 1e-9) {
            tau_hat = next;
            break;
        }
        tau_hat = next;
    }

    RecoveryReport rep;
    rep.tau = tau_hat;
    rep.symmetry_index = si;
    rep.measured_component = component;
    rep.measured_value = measured;
    rep.t_star = anchors.t_star;
    rep.commutativity_ok = check_commutativity(E, xin, uchin, oracle);
    std::vector<double> star_flow = flow_from(anchors.x_star, anchors.w_star, anchors.t_star,
                                              tau_hat);
    std::vector<double> x0flow = flow_from(anchors.x0, anchors.w0, anchors.t0, tau_hat);
    for (int i = 0; i < E.n(); ++i) {
        bool moved = !is_identically_zero(xi[static_cast<std::size_t>(i)], oracle.zero_opt());
        if (!moved) continue;
        rep.recovered_at_tstar[E.state[static_cast<std::size_t>(i)]] =
            star_flow[static_cast<std::size_t>(i)];
        rep.recovered_at_t0[E.state[static_cast<std::size_t>(i)]] =
            x0flow[static_cast<std::size_t>(i)];
    }
    for (int j = 0; j < E.mw(); ++j) {
        if (is_identically_zero(uchi[static_cast<std::size_t>(j)], oracle.zero_opt())) continue;
        rep.recovered_w_at_tstar[E.unknown_inputs[static_cast<std::size_t>(j)]] =
            star_flow[static_cast<std::size_t>(E.n() + 1 + j)];
    }
    return rep;
}

RecoveryReport single_symmetry_recovery(const OdeModel& E, const Scenario& sc,
                                        const IdentifiabilityResult& ident,
                                        const std::string& component, double t_star,
                                        double measured, const FlowSpec& spec,
                                        const RankOracle& oracle) {
    SimSetup sim = resolve_scenario(E, sc);
    Trajectory base =
        integrate_model(E, sim, spec.grid_points, spec.dt, spec.tol / 10.0, spec.blowup_limit);
    RecoveryAnchors anchors;
    anchors.t_star = t_star;
    anchors.t0 = base.t[0];
    for (int i = 0; i < E.n(); ++i) {
        std::vector<double> col;
        for (const auto& row : base.states) col.push_back(row[static_cast<std::size_t>(i)]);
        anchors.x_star.push_back(interp_cubic(base.t, col, t_star));
    }
    anchors.x0 = base.states[0];
    {
        double tv[1] = {t_star};
        double t0v[1] = {base.t[0]};
        for (int j = 0; j < E.mw(); ++j) {
            anchors.w_star.push_back(sim.w_profiles[static_cast<std::size_t>(j)].eval(tv));
            anchors.w0.push_back(sim.w_profiles[static_cast<std::size_t>(j)].eval(t0v));
        }
    }
    return single_symmetry_recovery_at(E, ident, component, anchors, measured, oracle);
}

}  // namespace odeid
