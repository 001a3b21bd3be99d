#include "odeid/uio.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

namespace odeid {

namespace {

std::string join_names(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ",";
        s += v[i];
    }
    return s;
}

void trace_push(std::vector<TraceRecord>* trace, const std::string& op,
                std::map<std::string, std::string> data) {
    if (trace) trace->push_back(TraceRecord{op, std::move(data)});
}

}  // namespace

SymMatrix reconstructability_matrix(const OdeModel& E, const std::vector<Expr>& lambdas) {
    SymMatrix rm;
    rm.reserve(lambdas.size());
    for (const auto& lam : lambdas) {
        std::vector<Expr> row;
        row.reserve(E.g.size());
        for (const auto& gj : E.g) row.push_back(lie_scalar(gj, lam, E.state));
        rm.push_back(std::move(row));
    }
    return rm;
}

RankResult deg_w(const OdeModel& E, const Codistribution& omega, const RankOracle& oracle) {
    std::vector<Expr> lambdas = omega.potential_list();
    SymMatrix rm = reconstructability_matrix(E, lambdas);
    if (rm.empty() || E.mw() == 0) {
        RankResult r;
        r.witness.seed = oracle.seed;
        return r;
    }
    return generic_rank_matrix(rm, oracle);
}

std::vector<Expr> select_htilde(const OdeModel& E, const Codistribution& omega, int m,
                                const RankOracle& oracle, std::vector<int>* chosen) {
    std::vector<Expr> lambdas = omega.potential_list();
    if (m == 0) return {};
    SymMatrix rm = reconstructability_matrix(E, lambdas);
    RankResult rr = generic_rank_matrix(rm, oracle);
    if (rr.rank < m) throw RankDeficient("selection cannot reach requested rank");
    auto dpt = rr.witness.as_double();
    std::vector<std::vector<double>> num(rm.size());
    for (std::size_t i = 0; i < rm.size(); ++i)
        for (const auto& e : rm[i]) num[i].push_back(evaluate_double(e, dpt));

    std::vector<Expr> out;
    std::vector<std::vector<double>> picked;
    auto rank_of = [&](const std::vector<std::vector<double>>& rows) {
        SymMatrix dummy;  // numeric-only rank via Eigen path
        std::vector<std::vector<double>> copy = rows;
        // small local elimination
        int rank = 0;
        std::size_t nr = copy.size(), nc = nr ? copy[0].size() : 0;
        std::vector<bool> used(nr, false);
        for (std::size_t c = 0; c < nc; ++c) {
            std::size_t piv = nr;
            double best = 1e-9;
            for (std::size_t r2 = 0; r2 < nr; ++r2)
                if (!used[r2] && std::fabs(copy[r2][c]) > best) {
                    best = std::fabs(copy[r2][c]);
                    piv = r2;
                }
            if (piv == nr) continue;
            used[piv] = true;
            ++rank;
            for (std::size_t r2 = 0; r2 < nr; ++r2) {
                if (r2 == piv || copy[r2][c] == 0) continue;
                double f = copy[r2][c] / copy[piv][c];
                for (std::size_t c2 = 0; c2 < nc; ++c2) copy[r2][c2] -= f * copy[piv][c2];
            }
        }
        return rank;
    };
    for (std::size_t i = 0; i < lambdas.size() && static_cast<int>(out.size()) < m; ++i) {
        auto trial = picked;
        trial.push_back(num[i]);
        if (rank_of(trial) > rank_of(picked)) {
            picked = std::move(trial);
            out.push_back(lambdas[i]);
            if (chosen) chosen->push_back(static_cast<int>(i));
        }
    }
    if (static_cast<int>(out.size()) < m) throw RankDeficient("selection fell short of rank");
    return out;
}

std::vector<int> reorder_ui(OdeModel& E, const std::vector<Expr>& lambdas, int m,
                            const RankOracle& oracle) {
    const int mw = E.mw();
    SymMatrix rm = reconstructability_matrix(E, lambdas);
    RankResult rr = generic_rank_matrix(rm, oracle);
    if (rr.rank < m) throw RankDeficient("reordering requires rank m");
    auto dpt = rr.witness.as_double();
    std::vector<std::vector<double>> cols(mw, std::vector<double>(lambdas.size()));
    for (std::size_t i = 0; i < rm.size(); ++i)
        for (int j = 0; j < mw; ++j) cols[j][i] = evaluate_double(rm[i][j], dpt);

    // greedy independent columns at the witness point
    std::vector<int> perm;
    std::vector<std::vector<double>> basis;
    auto indep = [&](const std::vector<double>& v) {
        std::vector<std::vector<double>> work = basis;
        work.push_back(v);
        // Gram-Schmidt residual check
        std::vector<double> r = v;
        for (const auto& b : basis) {
            double bb = 0, rb = 0;
            for (std::size_t i = 0; i < b.size(); ++i) {
                bb += b[i] * b[i];
                rb += r[i] * b[i];
            }
            if (bb == 0) continue;
            for (std::size_t i = 0; i < b.size(); ++i) r[i] -= rb / bb * b[i];
        }
        double norm = 0, vnorm = 0;
        for (std::size_t i = 0; i < r.size(); ++i) {
            norm += r[i] * r[i];
            vnorm += v[i] * v[i];
        }
        return norm > 1e-18 * std::max(1.0, vnorm);
    };
    for (int j = 0; j < mw && static_cast<int>(perm.size()) < m; ++j) {
        if (indep(cols[j])) {
            std::vector<double> r = cols[j];
            for (const auto& b : basis) {
                double bb = 0, rb = 0;
                for (std::size_t i = 0; i < b.size(); ++i) {
                    bb += b[i] * b[i];
                    rb += r[i] * b[i];
                }
                if (bb == 0) continue;
                for (std::size_t i = 0; i < b.size(); ++i) r[i] -= rb / bb * b[i];
            }
            basis.push_back(r);
            perm.push_back(j);
        }
    }
    if (static_cast<int>(perm.size()) < m) throw RankDeficient("no independent column set");
    for (int j = 0; j < mw; ++j)
        if (std::find(perm.begin(), perm.end(), j) == perm.end()) perm.push_back(j);

    std::vector<VectorField> g2;
    std::vector<std::string> names2;
    for (int j : perm) {
        g2.push_back(E.g[j]);
        names2.push_back(E.unknown_inputs[j]);
    }
    E.g = std::move(g2);
    E.unknown_inputs = std::move(names2);
    return perm;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

OdeModel augment(const OdeModel& E, int m) {
    const int mw = E.mw();
    if (m >= mw) throw Error("augment requires m < mw");
    const int d = mw - m;
    const int n = E.n();
    OdeModel out = E;
    // appended states are the trailing unknown inputs
    for (int j = m; j < mw; ++j) {
        const std::string& wname = E.unknown_inputs[j];
        out.state.push_back(wname);
        UiOrigin origin{wname, 0};
        auto it = E.ui_origin.find(wname);
        if (it != E.ui_origin.end()) origin = it->second;
        out.state_origin_tv[wname] = origin;
    }
    // g0 -> [g0 + sum_{l>m} g^l w_l ; 0_d]
    for (int i = 0; i < n; ++i) {
        std::vector<Expr> parts{E.g0[i]};
        for (int l = m; l < mw; ++l) parts.push_back(mul2(E.g[l][i], make_var(E.unknown_inputs[l])));
        out.g0[i] = add(parts);
    }
    for (int j = 0; j < d; ++j) out.g0.push_back(zero());
    for (auto& fi : out.f)
        for (int j = 0; j < d; ++j) fi.push_back(zero());
    for (int k = 0; k < m; ++k)
        for (int j = 0; j < d; ++j) out.g[k].push_back(zero());
    for (int j = 0; j < d; ++j) {
        VectorField gj(n + d, zero());
        gj[n + j] = one();
        out.g[m + j] = gj;
    }
    // trailing unknown inputs become their own derivatives
    for (int j = m; j < mw; ++j) {
        const std::string& wname = E.unknown_inputs[j];
        UiOrigin origin{wname, 0};
        auto it = E.ui_origin.find(wname);
        if (it != E.ui_origin.end()) origin = it->second;
        std::string nname = derived_input_name(origin.base_name, origin.derivative_order + 1);
        out.unknown_inputs[j] = nname;
        out.ui_origin[nname] = UiOrigin{origin.base_name, origin.derivative_order + 1};
    }
    return out;
}

OdeModel extend_with_ui(const OdeModel& E, int j) {
    const int n = E.n();
    OdeModel out = E;
    const std::string wname = E.unknown_inputs[j];
    UiOrigin origin{wname, 0};
    auto it = E.ui_origin.find(wname);
    if (it != E.ui_origin.end()) origin = it->second;
    out.state.push_back(wname);
    out.state_origin_tv[wname] = origin;
    for (int i = 0; i < n; ++i) out.g0[i] = add2(E.g0[i], mul2(E.g[j][i], make_var(wname)));
    out.g0.push_back(zero());
    for (auto& fi : out.f) fi.push_back(zero());
    for (int k = 0; k < E.mw(); ++k) {
        if (k == j) {
            VectorField gj(n + 1, zero());
            gj[n] = one();
            out.g[k] = gj;
        } else {
            out.g[k].push_back(zero());
        }
    }
    std::string nname = derived_input_name(origin.base_name, origin.derivative_order + 1);
    out.unknown_inputs[j] = nname;
    out.ui_origin[nname] = UiOrigin{origin.base_name, origin.derivative_order + 1};
    return out;
}

Codistribution augment_carry(const Codistribution& omega, const OdeModel& augmented) {
    Codistribution out;
    out.n = augmented.n();
    for (std::size_t i = 0; i < omega.covectors.size(); ++i) {
        if (omega.potentials[i]) {
            out.add_potential(*omega.potentials[i], augmented.state);
        } else {
            CovectorField w = omega.covectors[i];
            w.resize(augmented.state.size(), zero());
            out.add_covector(std::move(w));
        }
    }
    return out;
}

Distribution augment_carry(const Distribution& delta, int d) {
    Distribution out = delta;
    out.n += d;
    for (auto& v : out.generators) v.resize(v.size() + static_cast<std::size_t>(d), zero());
    return out;
}

// ---------------------------------------------------------------------------
// mu / nu / ghat
// ---------------------------------------------------------------------------

MuNu compute_munu(const OdeModel& E, const std::vector<Expr>& htilde, const RankOracle& oracle) {
    const int m = static_cast<int>(htilde.size());
    MuNu out;
    out.m = m;
    out.mu.assign(m + 1, std::vector<Expr>(m + 1, zero()));
    out.mu[0][0] = one();
    for (int j = 1; j <= m; ++j) {
        const Expr& h = htilde[j - 1];
        out.mu[j][0] = add2(differentiate(h, "t"), lie_scalar(E.g0, h, E.state));
        for (int i = 1; i <= m; ++i) out.mu[j][i] = lie_scalar(E.g[i - 1], h, E.state);
    }
    out.nu = sym_inverse(out.mu, oracle);
    return out;
}

std::vector<VectorField> compute_ghat(const OdeModel& E, const MuNu& munu,
                                      const std::vector<Expr>& htilde) {
    const int m = munu.m;
    const int mw = E.mw();
    const int n = E.n();
    std::vector<VectorField> ghat(static_cast<std::size_t>(mw) + 1);
    auto gfield = [&](int beta) -> const VectorField& { return beta == 0 ? E.g0 : E.g[beta - 1]; };
    for (int alpha = 0; alpha <= m; ++alpha) {
        VectorField acc(n, zero());
        for (int beta = 0; beta <= m; ++beta) {
            const Expr& coeff = munu.nu[beta][alpha];
            if (coeff.is_zero()) continue;
            const VectorField& gb = gfield(beta);
            for (int i = 0; i < n; ++i) acc[i] = add2(acc[i], mul2(coeff, gb[i]));
        }
        ghat[alpha] = std::move(acc);
    }
    for (int k = m + 1; k <= mw; ++k) {
        VectorField acc = E.g[k - 1];
        for (int alpha = 1; alpha <= m; ++alpha) {
            Expr lg = lie_scalar(E.g[k - 1], htilde[alpha - 1], E.state);
            if (lg.is_zero()) continue;
            for (int i = 0; i < n; ++i) acc[i] = sub(acc[i], mul2(ghat[alpha][i], lg));
        }
        for (auto& e : acc) e = simplify(e);
        ghat[k] = std::move(acc);
    }
    return ghat;
}

// ---------------------------------------------------------------------------
// Jet coordinates and operators
// ---------------------------------------------------------------------------

std::string v_jet_name(int alpha, int order) {
    return "v#" + std::to_string(alpha) + "#" + std::to_string(order);
}

std::string w_jet_name(const std::string& base, int order) {
    return order == 0 ? base : base + "#" + std::to_string(order);
}

namespace {

struct JetVar {
    enum class Family { V, Input } family;
    std::string base;  // input name for Family::Input
    int alpha = 0;     // v index
    int order = 0;
};

std::optional<JetVar> parse_jet(const std::string& name) {
    auto first = name.find('#');
    if (first == std::string::npos) return std::nullopt;
    if (name.rfind("v#", 0) == 0) {
        auto second = name.find('#', 2);
        if (second == std::string::npos) return std::nullopt;
        JetVar jv;
        jv.family = JetVar::Family::V;
        jv.alpha = std::stoi(name.substr(2, second - 2));
        jv.order = std::stoi(name.substr(second + 1));
        return jv;
    }
    JetVar jv;
    jv.family = JetVar::Family::Input;
    jv.base = name.substr(0, first);
    jv.order = std::stoi(name.substr(first + 1));
    return jv;
}

// Total time derivative: chain rule through the dynamics plus formal shifts
// of all jet coordinates (inputs and v's) and the explicit t term.
Expr total_derivative(const OdeModel& E, const Expr& e,
                      const std::map<std::string, Expr>* w_subst) {
    std::vector<Expr> parts;
    std::set<std::string> vars = free_vars(e);
    // dynamics part
    for (int i = 0; i < E.n(); ++i) {
        const std::string& x = E.state[i];
        if (!vars.count(x)) continue;
        Expr de = differentiate(e, x);
        if (de.is_zero()) continue;
        std::vector<Expr> xdot{E.g0[i]};
        for (int k = 0; k < E.mu(); ++k)
            xdot.push_back(mul2(E.f[k][i], make_var(E.known_inputs[k])));
        for (int j = 0; j < E.mw(); ++j)
            xdot.push_back(mul2(E.g[j][i], make_var(E.unknown_inputs[j])));
        parts.push_back(mul2(de, add(xdot)));
    }
    // jet shifts
    for (const auto& v : vars) {
        Expr de = differentiate(e, v);
        if (de.is_zero()) continue;
        if (auto jv = parse_jet(v)) {
            std::string next = jv->family == JetVar::Family::V
                                   ? v_jet_name(jv->alpha, jv->order + 1)
                                   : w_jet_name(jv->base, jv->order + 1);
            parts.push_back(mul2(de, make_var(next)));
        } else if (std::find(E.known_inputs.begin(), E.known_inputs.end(), v) !=
                   E.known_inputs.end()) {
            parts.push_back(mul2(de, make_var(w_jet_name(v, 1))));
        } else if (std::find(E.unknown_inputs.begin(), E.unknown_inputs.end(), v) !=
                   E.unknown_inputs.end()) {
            parts.push_back(mul2(de, make_var(w_jet_name(v, 1))));
        }
    }
    parts.push_back(differentiate(e, "t"));
    Expr out = add(parts);
    if (w_subst) out = substitute(out, *w_subst);
    return out;
}

int max_jet_order(const Expr& e, const std::function<bool(const JetVar&)>& pred) {
    int maxo = -1;
    for (const auto& v : free_vars(e)) {
        if (auto jv = parse_jet(v)) {
            if (pred(*jv)) maxo = std::max(maxo, jv->order);
        }
    }
    return maxo;
}

}  // namespace

PotentialOp ldtv_ghat_op(const OdeModel& E, const std::vector<VectorField>& ghat, int m,
                         bool conditional) {
    PotentialOp op;
    op.conditional = conditional;
    op.label = "Ldtv_ghat";
    const bool tv = E.time_varying;
    std::vector<std::string> states = E.state;
    std::vector<VectorField> gh(ghat.begin(), ghat.begin() + m + 1);
    op.apply = [states, gh, m, tv](const Expr& lambda) {
        std::vector<Expr> parts;
        parts.push_back(lie_scalar(gh[0], lambda, states));  // v_0 == 1
        for (int beta = 1; beta <= m; ++beta) {
            Expr term = lie_scalar(gh[beta], lambda, states);
            if (!term.is_zero()) parts.push_back(mul2(make_var(v_jet_name(beta, 0)), term));
        }
        for (const auto& v : free_vars(lambda)) {
            if (auto jv = parse_jet(v)) {
                if (jv->family != JetVar::Family::V) continue;
                Expr de = differentiate(lambda, v);
                if (de.is_zero()) continue;
                parts.push_back(mul2(make_var(v_jet_name(jv->alpha, jv->order + 1)), de));
            }
        }
        if (tv) parts.push_back(differentiate(lambda, "t"));
        return add(parts);
    };
    return op;
}

VectorField psi_w(const OdeModel& E, int order, int input_index, int m) {
    VectorField psi = E.f[input_index - 1];
    const int n = E.n();
    auto gfield = [&](int gamma) -> const VectorField& {
        return gamma == 0 ? E.g0 : E.g[gamma - 1];
    };
    for (int step = 0; step < order; ++step) {
        std::vector<std::vector<Expr>> parts(n);
        for (int gamma = 0; gamma <= m; ++gamma) {
            VectorField br = lie_bracket(gfield(gamma), psi, E.state);
            Expr wsym = gamma == 0 ? one() : make_var(w_jet_name(E.unknown_inputs[gamma - 1], 0));
            for (int i = 0; i < n; ++i) parts[i].push_back(mul2(wsym, br[i]));
        }
        for (int i = 0; i < n; ++i) {
            for (const auto& v : free_vars(psi[i])) {
                int alpha = -1, ord = 0;
                if (auto jv = parse_jet(v)) {
                    if (jv->family == JetVar::Family::Input) {
                        auto it = std::find(E.unknown_inputs.begin(), E.unknown_inputs.end(), jv->base);
                        if (it != E.unknown_inputs.end() &&
                            static_cast<int>(it - E.unknown_inputs.begin()) < m) {
                            alpha = static_cast<int>(it - E.unknown_inputs.begin());
                            ord = jv->order;
                        }
                    }
                } else {
                    auto it = std::find(E.unknown_inputs.begin(), E.unknown_inputs.end(), v);
                    if (it != E.unknown_inputs.end() &&
                        static_cast<int>(it - E.unknown_inputs.begin()) < m) {
                        alpha = static_cast<int>(it - E.unknown_inputs.begin());
                        ord = 0;
                    }
                }
                if (alpha < 0) continue;
                Expr de = differentiate(psi[i], v);
                if (de.is_zero()) continue;
                parts[i].push_back(
                    mul2(de, make_var(w_jet_name(E.unknown_inputs[alpha], ord + 1))));
            }
            if (E.time_varying) parts[i].push_back(differentiate(psi[i], "t"));
        }
        for (int i = 0; i < n; ++i) psi[i] = add(parts[i]);
    }
    return psi;
}

VectorField psi_chain(const OdeModel& E, int k_star, int i_star, int m, const MuNu& munu,
                      const std::vector<Expr>& htilde) {
    (void)htilde;
    VectorField psi = psi_w(E, k_star - 1, i_star, m);
    if (k_star <= 1) return psi;
    // rewrite w-jets (alpha <= m) into v-jets: w = nu . v and total derivatives
    int maxord = 0;
    for (const auto& comp : psi)
        maxord = std::max(maxord, max_jet_order(comp, [&](const JetVar& jv) {
                              return jv.family == JetVar::Family::Input;
                          }));
    // order-0 expressions
    std::map<std::string, Expr> w_subst;
    std::vector<std::vector<Expr>> w_expr(static_cast<std::size_t>(m) + 1);
    for (int alpha = 1; alpha <= m; ++alpha) {
        std::vector<Expr> parts;
        for (int beta = 0; beta <= m; ++beta) {
            const Expr& coeff = munu.nu[alpha][beta];
            if (coeff.is_zero()) continue;
            Expr vsym = beta == 0 ? one() : make_var(v_jet_name(beta, 0));
            parts.push_back(mul2(coeff, vsym));
        }
        w_expr[alpha].push_back(add(parts));
        w_subst[E.unknown_inputs[alpha - 1]] = w_expr[alpha][0];
    }
    for (int ord = 1; ord <= maxord; ++ord) {
        for (int alpha = 1; alpha <= m; ++alpha) {
            Expr d = total_derivative(E, w_expr[alpha][ord - 1], &w_subst);
            w_expr[alpha].push_back(d);
        }
    }
    std::map<std::string, Expr> subst;
    for (int alpha = 1; alpha <= m; ++alpha)
        for (int ord = 0; ord <= maxord; ++ord)
            subst[w_jet_name(E.unknown_inputs[alpha - 1], ord)] = w_expr[alpha][ord];
    for (auto& comp : psi) comp = substitute(comp, subst);
    return psi;
}

// ---------------------------------------------------------------------------
// Otilde
// ---------------------------------------------------------------------------

namespace {

// One recursion round of the minimal-codistribution algorithm; returns true
// when the span grew.
bool codistribution_single_step(Codistribution& cur, const std::vector<PotentialOp>& ops,
                                const std::vector<std::string>& states, const RankOracle& oracle,
                                std::size_t node_cap) {
    bool grew = false;
    std::vector<Expr> snapshot = cur.potential_list();
    for (const Expr& lambda : snapshot) {
        for (const auto& op : ops) {
            Expr cand = simplify(op.apply(lambda));
            check_node_cap(cand, node_cap);
            CovectorField gr = gradient(cand, states);
            bool trivial = true;
            for (const auto& e : gr) trivial = trivial && e.is_zero();
            if (trivial) continue;
            if (!contains(cur, gr, oracle)) {
                cur.covectors.push_back(gr);
                cur.potentials.push_back(cand);
                grew = true;
            }
        }
    }
    return grew;
}

bool field_is_zero(const VectorField& f) {
    for (const auto& e : f)
        if (!e.is_zero()) return false;
    return true;
}

}  // namespace

Codistribution otilde(const OdeModel& E, const std::vector<Expr>& htilde, const MuNu& munu,
                      const RankOracle& oracle, int* s_out, int* r_out) {
    Codistribution out;
    out.n = E.n();
    if (E.mu() == 0) {
        if (s_out) *s_out = 0;
        if (r_out) *r_out = 0;
        return out;  // vanishes without known inputs
    }
    const int n = E.n();
    const int mw = E.mw();

    // s: steps to convergence of <g0..g^mw | span{grad htilde}>
    Codistribution om;
    om.n = n;
    for (const auto& h : htilde) om.add_potential(h, E.state);
    std::vector<PotentialOp> sops;
    sops.push_back(lie_op(E.g0, E.state, E.time_varying, false, "g0"));
    for (int j = 0; j < mw; ++j) sops.push_back(lie_op(E.g[j], E.state, false, false, "g"));
    int s = 0;
    for (int k = 1; k <= n - mw + 1 + 1; ++k) {
        bool grew = codistribution_single_step(om, sops, E.state, oracle, 20000);
        if (!grew) {
            s = k;
            break;
        }
        if (k == n - mw + 2) throw NonConvergence("s-closure exceeded bound");
    }

    // r: steps to convergence of the autobracket closure of span{f}
    std::vector<VectorField> taus{E.g0};
    for (int j = 0; j < mw; ++j) taus.push_back(E.g[j]);
    Distribution delta;
    delta.n = n;
    for (const auto& fi : E.f) delta.generators.push_back(fi);
    int dim0 = generic_rank(delta, oracle).rank;
    int r = 0;
    for (int k = 1; k <= n - dim0 + 2; ++k) {
        bool grew = false;
        std::vector<VectorField> snapshot = delta.generators;
        for (const auto& v : snapshot) {
            for (int gamma = 0; gamma <= mw; ++gamma) {
                VectorField ab = autobracket(v, gamma, taus, munu.nu, E.state, E.time_varying);
                if (field_is_zero(ab)) continue;
                if (!in_span(delta, ab, oracle)) {
                    delta.generators.push_back(ab);
                    grew = true;
                }
            }
        }
        if (!grew) {
            r = k - 1;
            break;
        }
        if (k == n - dim0 + 2) throw NonConvergence("r-closure exceeded bound");
    }
    if (s_out) *s_out = s;
    if (r_out) *r_out = r;

    // chains of autobrackets up to depth s + r applied to each htilde
    const int depth_cap = s + r;
    double budget = E.mu() * std::pow(static_cast<double>(mw + 1), depth_cap);
    if (budget > 4096) throw NonConvergence("autobracket chain budget exceeded");
    std::function<void(const VectorField&, int)> dfs = [&](const VectorField& field, int depth) {
        if (field_is_zero(field)) return;
        for (const auto& h : htilde) {
            Expr lambda = simplify(lie_scalar(field, h, E.state));
            CovectorField gr = gradient(lambda, E.state);
            bool trivial = true;
            for (const auto& e : gr) trivial = trivial && e.is_zero();
            if (!trivial && !contains(out, gr, oracle)) {
                out.covectors.push_back(gr);
                out.potentials.push_back(lambda);
            }
        }
        if (depth == depth_cap) return;
        for (int gamma = 0; gamma <= mw; ++gamma)
            dfs(autobracket(field, gamma, taus, munu.nu, E.state, E.time_varying), depth + 1);
    };
    for (const auto& fi : E.f) dfs(fi, 0);
    return out;
}

// ---------------------------------------------------------------------------
// Algorithm 2
// ---------------------------------------------------------------------------

Algo2Result algorithm2(const OdeModel& E, const Codistribution& omega, int m,
                       const std::vector<Expr>& htilde, const MuNu& munu,
                       const std::vector<VectorField>& ghat, const ObservabilityOptions& opts,
                       std::vector<TraceRecord>* trace) {
    Algo2Result res;
    const int mw = E.mw();
    const RankOracle& oracle = opts.oracle;

    auto orthogonal_to_tail = [&](const CovectorField& w) {
        for (int k = m + 1; k <= mw; ++k) {
            std::vector<Expr> parts;
            for (std::size_t i = 0; i < w.size(); ++i) parts.push_back(mul2(w[i], ghat[k][i]));
            if (!is_identically_zero(add(parts), oracle.zero_opt())) return false;
        }
        return true;
    };

    if (E.mu() == 0 || m == 0) {
        Codistribution cur = omega;
        for (const auto& w : cur.covectors) {
            if (!orthogonal_to_tail(w)) {
                trace_push(trace, "algorithm2", {{"finish", "false"}, {"branch", "simple"}});
                return res;
            }
        }
        std::vector<PotentialOp> ops;
        ops.push_back(lie_op(ghat[0], E.state, E.time_varying, false, "ghat0"));
        for (int b = 1; b <= m; ++b) ops.push_back(lie_op(ghat[b], E.state, false, false, "ghat"));
        const int n = E.n();
        int dim0 = cur.covectors.empty() ? 0 : generic_rank(cur, oracle).rank;
        for (int round = 1; round <= n - dim0 + 2; ++round) {
            std::size_t before = cur.covectors.size();
            if (!codistribution_single_step(cur, ops, E.state, oracle, opts.node_cap)) break;
            for (std::size_t i = before; i < cur.covectors.size(); ++i) {
                if (!orthogonal_to_tail(cur.covectors[i])) {
                    trace_push(trace, "algorithm2", {{"finish", "false"}, {"branch", "simple"}});
                    return res;
                }
            }
            if (round == n - dim0 + 2) throw NonConvergence("algorithm2 closure exceeded bound");
        }
        res.finish = true;
        res.omega_star = cur;
        trace_push(trace, "algorithm2", {{"finish", "true"}, {"branch", "simple"}});
        return res;
    }

    // general branch
    int sx = algorithm3_sx(E, m, htilde, opts);
    int rm = algorithm4_r(E, m, munu, opts);
    int khat = sx + rm;
    trace_push(trace, "algorithm2",
               {{"branch", "general"},
                {"s_x", std::to_string(sx)},
                {"r", std::to_string(rm)},
                {"k_hat", std::to_string(khat)}});

    Codistribution acc = omega;
    int mcur = m;
    std::vector<Expr> ht = htilde;
    MuNu mn = munu;
    std::vector<VectorField> gh = ghat;
    std::vector<VectorField> taus{E.g0};
    for (int b = 1; b <= mcur; ++b) taus.push_back(E.g[b - 1]);

    auto add_chains = [&](int k, int i) {
        // all chains of length k-1 over indices 0..mcur applied to f^i
        std::function<void(const VectorField&, int)> rec = [&](const VectorField& field, int left) {
            if (left == 0) {
                for (int q = 1; q <= mcur; ++q) {
                    Expr lambda = simplify(lie_scalar(field, ht[q - 1], E.state));
                    CovectorField gr = gradient(lambda, E.state);
                    bool trivial = true;
                    for (const auto& e : gr) trivial = trivial && e.is_zero();
                    if (!trivial && !contains(acc, gr, oracle)) {
                        acc.covectors.push_back(gr);
                        acc.potentials.push_back(lambda);
                    }
                }
                return;
            }
            for (int gamma = 0; gamma <= mcur; ++gamma) {
                VectorField ab = autobracket(field, gamma, taus, mn.nu, E.state, E.time_varying);
                if (!field_is_zero(ab)) rec(ab, left - 1);
            }
        };
        rec(E.f[i - 1], k - 1);
    };

    for (int k = 1; k <= khat; ++k) {
        for (int i = 1; i <= E.mu(); ++i) {
            for (int q = 1; q <= mcur; ++q) {
                add_chains(k, i);
                // Omega_* = <f's, ghat^0..ghat^m | Omega>
                std::vector<PotentialOp> ops;
                for (const auto& fi : E.f) ops.push_back(lie_op(fi, E.state, false, false, "f"));
                ops.push_back(lie_op(gh[0], E.state, E.time_varying, false, "ghat0"));
                for (int b = 1; b <= mcur; ++b)
                    ops.push_back(lie_op(gh[b], E.state, false, false, "ghat"));
                Codistribution star =
                    closure_codistribution(acc, ops, {}, E.state, oracle, {opts.node_cap, 1});
                bool ok = true;
                for (int kk = mcur + 1; kk <= mw && ok; ++kk)
                    ok = in_orthogonal(star, gh[kk], oracle);
                if (!ok) {
                    res.finish = false;
                    res.has_indices = true;
                    res.k_star = k;
                    res.i_star = i;
                    res.q_star = q;
                    trace_push(trace, "algorithm2",
                               {{"finish", "false"},
                                {"k*", std::to_string(k)},
                                {"i*", std::to_string(i)},
                                {"q*", std::to_string(q)}});
                    return res;
                }
                res.omega_star = star;
                int md = deg_w(E, acc, oracle).rank;
                if (md != mcur) {
                    mcur = md;
                    ht = select_htilde(E, acc, mcur, oracle);
                    mn = compute_munu(E, ht, oracle);
                    gh = compute_ghat(E, mn, ht);
                    taus.assign(1, E.g0);
                    for (int b = 1; b <= mcur; ++b) taus.push_back(E.g[b - 1]);
                }
            }
        }
    }
    res.finish = true;
    trace_push(trace, "algorithm2", {{"finish", "true"}, {"branch", "general"}});
    return res;
}

int algorithm3_sx(const OdeModel& E, int m, const std::vector<Expr>& htilde,
                  const ObservabilityOptions& opts) {
    const RankOracle& oracle = opts.oracle;
    const int n0 = E.n();
    OdeModel S = E;
    Codistribution om;
    om.n = S.n();
    for (const auto& h : htilde) om.add_potential(h, S.state);

    auto truncated_rank = [&](const Codistribution& c) {
        SymMatrix mtx;
        for (const auto& w : c.covectors) mtx.push_back(CovectorField(w.begin(), w.begin() + n0));
        return generic_rank_matrix(mtx, oracle).rank;
    };
    int prev = truncated_rank(om);
    for (int k = 1; k <= n0 - m + 2; ++k) {
        S = augment(S, m);
        om = augment_carry(om, S);
        std::vector<PotentialOp> ops;
        ops.push_back(lie_op(S.g0, S.state, true, false, "g0"));  // dotted operator
        for (int j = 1; j <= m; ++j) ops.push_back(lie_op(S.g[j - 1], S.state, false, false, "g"));
        codistribution_single_step(om, ops, S.state, oracle, opts.node_cap);
        int cur = truncated_rank(om);
        if (cur == prev) return k;
        prev = cur;
    }
    throw NonConvergence("algorithm3 exceeded convergence bound");
}

int algorithm4_r(const OdeModel& E, int m, const MuNu& munu, const ObservabilityOptions& opts) {
    const RankOracle& oracle = opts.oracle;
    const int n0 = E.n();
    OdeModel S = E;
    Distribution delta;
    delta.n = S.n();
    for (const auto& fi : E.f) delta.generators.push_back(fi);
    int dim0 = delta.generators.empty() ? 0 : generic_rank(delta, oracle).rank;
    int prev = dim0;
    for (int k = 1; k <= n0 - dim0 + 2; ++k) {
        int d = S.mw() - m;
        S = augment(S, m);
        delta = augment_carry(delta, d);
        std::vector<VectorField> taus{S.g0};
        for (int b = 1; b <= m; ++b) taus.push_back(S.g[b - 1]);
        std::vector<VectorField> snapshot = delta.generators;
        for (const auto& v : snapshot) {
            for (int gamma = 0; gamma <= m; ++gamma) {
                VectorField ab = autobracket(v, gamma, taus, munu.nu, S.state, S.time_varying);
                if (field_is_zero(ab)) continue;
                if (!in_span(delta, ab, oracle)) delta.generators.push_back(ab);
            }
        }
        int cur = delta.generators.empty() ? 0 : generic_rank(delta, oracle).rank;
        if (cur == prev) return k - 1;
        prev = cur;
    }
    throw NonConvergence("algorithm4 exceeded convergence bound");
}

// ---------------------------------------------------------------------------
// Reset operation
// ---------------------------------------------------------------------------

std::pair<OdeModel, Codistribution> unaugment(const OdeModel& E, const Codistribution& omega,
                                              const std::vector<Expr>& new_potentials,
                                              const MuNu& munu, const std::vector<Expr>& htilde,
                                              int k_star) {
    const int m = munu.m;
    // 1) max v-jet order used anywhere
    int maxord = -1;
    for (const auto& p : omega.potentials) {
        if (!p) continue;
        maxord = std::max(maxord, max_jet_order(*p, [](const JetVar& jv) {
                              return jv.family == JetVar::Family::V;
                          }));
    }
    std::vector<Expr> pots = omega.potential_list();
    if (maxord >= 0) {
        // v in terms of w: v_beta = sum_gamma mu^gamma_beta w_gamma
        // (+ tail terms when k* == 1), derivatives by the total derivative.
        std::vector<std::vector<Expr>> v_expr(static_cast<std::size_t>(m) + 1);
        for (int beta = 1; beta <= m; ++beta) {
            std::vector<Expr> parts;
            for (int gamma = 0; gamma <= m; ++gamma) {
                const Expr& coeff = munu.mu[beta][gamma];
                if (coeff.is_zero()) continue;
                Expr wsym = gamma == 0 ? one() : make_var(E.unknown_inputs[gamma - 1]);
                parts.push_back(mul2(coeff, wsym));
            }
            if (k_star == 1) {
                for (int l = m + 1; l <= E.mw(); ++l) {
                    Expr lg = lie_scalar(E.g[l - 1], htilde[beta - 1], E.state);
                    if (!lg.is_zero()) parts.push_back(mul2(lg, make_var(E.unknown_inputs[l - 1])));
                }
            }
            v_expr[beta].push_back(add(parts));
        }
        for (int ord = 1; ord <= maxord; ++ord)
            for (int beta = 1; beta <= m; ++beta)
                v_expr[beta].push_back(total_derivative(E, v_expr[beta][ord - 1], nullptr));
        std::map<std::string, Expr> subst;
        for (int beta = 1; beta <= m; ++beta)
            for (int ord = 0; ord <= maxord; ++ord) subst[v_jet_name(beta, ord)] = v_expr[beta][ord];
        for (auto& p : pots) p = substitute(p, subst);
    }

    // 2) unknown inputs appearing in the new observable functions
    std::map<std::string, Expr> rewritten_new;
    std::vector<int> required_order(E.mw(), -1);
    auto scan = [&](const Expr& e) {
        for (const auto& v : free_vars(e)) {
            std::string base = v;
            int ord = 0;
            if (auto jv = parse_jet(v)) {
                if (jv->family != JetVar::Family::Input) continue;
                base = jv->base;
                ord = jv->order;
            }
            auto it = std::find(E.unknown_inputs.begin(), E.unknown_inputs.end(), base);
            if (it == E.unknown_inputs.end()) continue;
            int j = static_cast<int>(it - E.unknown_inputs.begin());
            required_order[j] = std::max(required_order[j], ord);
        }
    };
    // locate the rewritten versions of this round's new potentials
    for (std::size_t i = 0; i < pots.size(); ++i) {
        for (const auto& np : new_potentials) {
            if (omega.potentials[i] && expr_eq(*omega.potentials[i], np)) scan(pots[i]);
        }
    }

    OdeModel out = E;
    std::map<std::string, std::string> rename;
    for (int j = 0; j < E.mw(); ++j) {
        if (required_order[j] < 0) continue;
        std::string base = E.unknown_inputs[j];
        UiOrigin origin{base, 0};
        auto it = E.ui_origin.find(base);
        if (it != E.ui_origin.end()) origin = it->second;
        for (int ord = 0; ord <= required_order[j]; ++ord) {
            out = extend_with_ui(out, j);
            if (ord >= 1)
                rename[w_jet_name(base, ord)] = derived_input_name(origin.base_name,
                                                                   origin.derivative_order + ord);
        }
    }
    if (!rename.empty()) {
        std::map<std::string, Expr> rn;
        for (const auto& [from, to] : rename) rn[from] = make_var(to);
        for (auto& p : pots) p = substitute(p, rn);
    }

    Codistribution om2;
    om2.n = out.n();
    for (const auto& p : pots) om2.add_potential(p, out.state);
    return {out, om2};
}

// ---------------------------------------------------------------------------
// Algorithm 1
// ---------------------------------------------------------------------------

ObservabilityResult observability(const OdeModel& model, const ObservabilityOptions& opts) {
    OdeModel E = model;
    E.validate();
    const RankOracle& oracle = opts.oracle;

    ObservabilityResult res;
    Codistribution om;
    om.n = E.n();
    for (const auto& h : E.outputs) om.add_potential(h, E.state);

    bool continue_flag = true;
    int m = 0;
    int last_deg = -1;
    bool done = false;

    for (int round = 1; round <= opts.main_loop_cap && !done; ++round) {
        RankResult dw = deg_w(E, om, oracle);
        m = dw.rank;
        trace_push(&res.trace, "deg_w",
                   {{"round", std::to_string(round)},
                    {"rank", std::to_string(m)},
                    {"m_w", std::to_string(E.mw())},
                    {"state_dim", std::to_string(E.n())}});
        if (last_deg > m)
            throw NonConvergence("unknown-input degree decreased across iterations");
        last_deg = m;
        if (m == E.mw()) {
            done = true;  // canonic exit
            break;
        }
        std::vector<int> chosen;
        res.htilde = select_htilde(E, om, m, oracle, &chosen);
        if (m > 0) {
            std::vector<int> perm = reorder_ui(E, res.htilde, m, oracle);
            std::ostringstream ps;
            for (int j : perm) ps << j << " ";
            trace_push(&res.trace, "select_reorder",
                       {{"htilde", join_names([&] {
                            std::vector<std::string> names;
                            for (const auto& h : res.htilde) names.push_back(render(h));
                            return names;
                        }())},
                        {"permutation", ps.str()}});
        }
        res.munu = compute_munu(E, res.htilde, oracle);
        res.ghat = compute_ghat(E, res.munu, res.htilde);
        Algo2Result a2 = algorithm2(E, om, m, res.htilde, res.munu, res.ghat, opts, &res.trace);
        if (a2.finish) {
            res.O = a2.omega_star;
            res.canonic_exit = false;
            continue_flag = false;
            done = true;
            break;
        }
        std::vector<Expr> new_potentials;
        std::size_t before = om.potentials.size();
        if (E.mu() > 0) {
            if (m > 0 && a2.has_indices) {
                VectorField chi = psi_chain(E, a2.k_star, a2.i_star, m, res.munu, res.htilde);
                Expr theta0 = simplify(lie_scalar(chi, res.htilde[a2.q_star - 1], E.state));
                CovectorField gr = gradient(theta0, E.state);
                bool trivial = true;
                for (const auto& e : gr) trivial = trivial && e.is_zero();
                if (!trivial && !contains(om, gr, oracle)) om.add_potential(theta0, E.state);
            }
            std::vector<PotentialOp> ops;
            for (const auto& fi : E.f) ops.push_back(lie_op(fi, E.state, false, false, "f"));
            ops.push_back(ldtv_ghat_op(E, res.ghat, m, true));
            std::vector<VectorField> zeta(res.ghat.begin() + m + 1, res.ghat.end());
            om = closure_codistribution(om, ops, zeta, E.state, oracle, {opts.node_cap, 1});
        } else {
            std::vector<PotentialOp> ops{ldtv_ghat_op(E, res.ghat, m, true)};
            std::vector<VectorField> zeta(res.ghat.begin() + m + 1, res.ghat.end());
            om = closure_codistribution(om, ops, zeta, E.state, oracle, {opts.node_cap, 1});
        }
        for (std::size_t i = before; i < om.potentials.size(); ++i)
            if (om.potentials[i]) new_potentials.push_back(*om.potentials[i]);
        trace_push(&res.trace, "nested_closure",
                   {{"new_generators", std::to_string(new_potentials.size())}});
        auto [E2, om2] =
            unaugment(E, om, new_potentials, res.munu, res.htilde, a2.has_indices ? a2.k_star : 1);
        if (E2.n() != E.n())
            trace_push(&res.trace, "unaugment", {{"new_state_dim", std::to_string(E2.n())}});
        E = std::move(E2);
        om = std::move(om2);
    }
    if (!done) throw IterationCap(opts.main_loop_cap);

    if (continue_flag) {
        res.htilde = select_htilde(E, om, E.mw(), oracle);
        res.munu = compute_munu(E, res.htilde, oracle);
        res.ghat = compute_ghat(E, res.munu, res.htilde);
        int s = 0, r = 0;
        Codistribution ot = otilde(E, res.htilde, res.munu, oracle, &s, &r);
        trace_push(&res.trace, "otilde",
                   {{"s", std::to_string(s)},
                    {"r", std::to_string(r)},
                    {"generators", std::to_string(ot.covectors.size())}});
        Codistribution base = om;
        for (std::size_t i = 0; i < ot.covectors.size(); ++i) {
            if (!contains(base, ot.covectors[i], oracle)) {
                base.covectors.push_back(ot.covectors[i]);
                base.potentials.push_back(ot.potentials[i]);
            }
        }
        std::vector<PotentialOp> ops;
        for (const auto& fi : E.f) ops.push_back(lie_op(fi, E.state, false, false, "f"));
        ops.push_back(lie_op(res.ghat[0], E.state, E.time_varying, false, "ghat0"));
        for (int b = 1; b <= E.mw(); ++b)
            ops.push_back(lie_op(res.ghat[b], E.state, false, false, "ghat"));
        res.O = closure_codistribution(base, ops, {}, E.state, oracle, {opts.node_cap, 1});
        res.canonic_exit = true;
        m = E.mw();
    }

    res.E = E;
    res.m = m;
    res.dim = res.O.covectors.empty() ? 0 : generic_rank(res.O, oracle).rank;
    for (int i = 0; i < E.n(); ++i) {
        CovectorField unit(E.n(), zero());
        unit[i] = one();
        res.observable[E.state[i]] = contains(res.O, unit, oracle);
    }
    trace_push(&res.trace, "result",
               {{"dim", std::to_string(res.dim)},
                {"n", std::to_string(E.n())},
                {"m", std::to_string(res.m)}});
    return res;
}

}  // namespace odeid
