// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Run through ctest or directly; an optional argument filters by
// criterion number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "odeid/indist.hpp"
#include "odeid/report.hpp"

using namespace odeid;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what) {
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, what.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

VectorField vf(const std::vector<const char*>& comps) {
    VectorField out;
    for (const char* c : comps) out.push_back(parse(c));
    return out;
}

bool direction_match(const VectorField& a, const VectorField& b, const RankOracle& oracle) {
    SymMatrix m{a, b};
    return generic_rank_matrix(m, oracle).rank == 1;
}

struct ModelRun {
    IdentifiabilityResult res;
    double seconds = 0;
};

std::map<std::string, ModelRun>& runs() {
    static std::map<std::string, ModelRun> cache;
    return cache;
}

const ModelRun& run_model(const std::string& name) {
    auto it = runs().find(name);
    if (it != runs().end()) return it->second;
    ObservabilityOptions opts;
    auto start = std::chrono::steady_clock::now();
    ModelRun mr;
    mr.res = identifiability(builtin(name), opts);
    mr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return runs().emplace(name, std::move(mr)).first->second;
}

// ---------------------------------------------------------------------------

void criterion1() {
    struct Want {
        const char* name;
        int dim;
    } wants[] = {{"unicycle_s1", 2}, {"unicycle_s2", 1}, {"hiv", 7}, {"seiar", 7}, {"toggle", 4}};
    bool ok = true;
    std::string detail;
    RankOracle oracle;
    for (const auto& w : wants) {
        const ModelRun& mr = run_model(w.name);
        bool dim_ok = mr.res.obs.dim == w.dim;
        bool time_ok = mr.seconds < 60.0;
        ok = ok && dim_ok && time_ok;
        char buf[128];
        std::snprintf(buf, sizeof(buf), " %s:dim=%d(%.1fs)", w.name, mr.res.obs.dim, mr.seconds);
        detail += buf;
        if (std::string(w.name) == "unicycle_s2") {
            // dim-1 codistribution spanned by [0, 1, -1]
            ok = ok && contains(mr.res.obs.O, {zero(), one(), make_rational_ll(-1)}, oracle);
        }
    }
    report(1, ok, "observability dimensions 2/1/7/7/4 within 60 s per model --" + detail);
}

void criterion2() {
    bool ok = true;
    std::string detail;
    {
        const auto& r = run_model("hiv").res;
        ok = ok && r.constants.at("lambda") && r.constants.at("rho") && r.constants.at("c");
        ok = ok && !r.constants.at("delta") && !r.constants.at("N");
        ok = ok && !r.tv_params.at("eta").identifiable;
    }
    {
        const auto& r = run_model("seiar").res;
        ok = ok && r.constants.at("mu1") && r.constants.at("mu2") && r.constants.at("p");
        ok = ok && !r.constants.at("gamma");
        ok = ok && !r.tv_params.at("beta").identifiable;
    }
    {
        const auto& r = run_model("toggle").res;
        for (const char* q : {"k01", "k1", "n1", "k02", "k2", "n2"})
            ok = ok && !r.constants.at(q);
        ok = ok && !r.tv_params.at("W1").identifiable && !r.tv_params.at("W2").identifiable;
        ok = ok && !r.ui_reconstructable.at("W1'") && !r.ui_reconstructable.at("W2'");
    }
    {
        ok = ok && run_model("unicycle_s1").res.tv_params.at("omega").identifiable;
        ok = ok && !run_model("unicycle_s2").res.tv_params.at("v").identifiable;
    }
    report(2, ok, "identifiability verdicts match the reported results for all five models");
}

void criterion3() {
    RankOracle oracle;
    bool ok = true;
    {
        const auto& r = run_model("hiv").res;
        ok = ok && r.state_symmetries.size() == 1;
        VectorField paper = vf({"T_I*delta", "-T_I*delta", "0", "0", "0",
                                "delta*(delta - rho)", "N*rho", "0"});
        ok = ok && direction_match(r.state_symmetries[0], paper, oracle);
    }
    {
        const auto& r = run_model("seiar").res;
        ok = ok && r.state_symmetries.size() == 2;
        VectorField p1 = vf({"1", "0", "0", "0", "-1", "0", "0", "0", "0"});
        VectorField p2 = vf({"E", "-E", "0", "0", "0", "0", "0", "gamma", "0"});
        int matched = 0;
        for (const auto& xi : r.state_symmetries) {
            if (direction_match(xi, p1, oracle)) ++matched;
            if (direction_match(xi, p2, oracle)) ++matched;
        }
        ok = ok && matched == 2;
    }
    {
        const auto& r = run_model("toggle").res;
        ok = ok && r.state_symmetries.size() == 6;
        // paper generators, one per constant parameter slot
        std::map<std::string, VectorField> paper;
        paper["k01"] = vf({"0", "0", "-W1*((x2/W1)^n1 + 1)^2/(n1*k1*(x2/W1)^n1)", "0", "1", "0",
                           "0", "0", "0", "0"});
        paper["k1"] = vf({"0", "0", "-W1*((x2/W1)^n1 + 1)/(n1*k1*(x2/W1)^n1)", "0", "0", "1",
                          "0", "0", "0", "0"});
        paper["n1"] = vf({"0", "0", "W1*log(x2/W1)", "0", "0", "0", "n1", "0", "0", "0"});
        paper["k02"] = vf({"0", "0", "0", "-W2*((x1/W2)^n2 + 1)^2/(n2*k2*(x1/W2)^n2)", "0", "0",
                           "0", "1", "0", "0"});
        paper["k2"] = vf({"0", "0", "0", "-W2*((x1/W2)^n2 + 1)/(n2*k2*(x1/W2)^n2)", "0", "0",
                          "0", "0", "1", "0"});
        paper["n2"] = vf({"0", "0", "0", "W2*log(x1/W2)", "0", "0", "0", "0", "0", "n2"});
        const auto& E = r.obs.E;
        int matched = 0;
        for (const auto& xi : r.state_symmetries) {
            // pair by the constant-parameter slot carrying the unit-like entry
            for (const auto& [slot, pxi] : paper) {
                int idx = E.state_index(slot);
                if (xi[static_cast<std::size_t>(idx)].is_zero()) continue;
                if (direction_match(xi, pxi, oracle)) ++matched;
            }
        }
        ok = ok && matched == 6;
    }
    {
        const auto& r1 = run_model("unicycle_s1").res;
        ok = ok && r1.state_symmetries.size() == 1 &&
             direction_match(r1.state_symmetries[0], vf({"0", "1", "1"}), oracle);
        const auto& r2 = run_model("unicycle_s2").res;
        ok = ok && r2.state_symmetries.size() == 2;
        int matched = 0;
        for (const auto& xi : r2.state_symmetries) {
            if (direction_match(xi, vf({"0", "1", "1"}), oracle)) ++matched;
            if (direction_match(xi, vf({"rho", "0", "0"}), oracle)) ++matched;
        }
        ok = ok && matched == 2;
    }
    report(3, ok, "orthogonal-distribution generators are scalar multiples of the known ones");
}

void criterion4() {
    bool ok = true;
    std::string detail;
    // closed-form constants with the hiv data set
    std::map<std::string, double> hb{{"T_U", 600}, {"T_I", 0},     {"V", 1e5}, {"lambda", 36},
                                     {"rho", 0.108}, {"delta", 0.5}, {"N", 1000}, {"c", 3},
                                     {"eta", 9e-5}};
    auto cf = closed_form("hiv", hb, -3.0);
    bool np_ok = std::fabs(cf.at("N'") - 723.2) <= 0.5;
    bool dp_ok = std::fabs(cf.at("delta'") - 0.2494) <= 1e-3;
    // covid gamma' under the second symmetry
    std::map<std::string, double> cb{{"S", 0.9},  {"E", 0.01},      {"I", 0.05},
                                     {"A", 0.02}, {"R", 0.02},      {"mu1", 1.0 / 3},
                                     {"mu2", 0.1}, {"gamma", 0.25}, {"p", 0.14},
                                     {"beta", 1.0}};
    bool g10_ok = std::fabs(closed_form("seiar_sym2", cb, 10.0).at("gamma'") - 5506.6) <= 1.0;
    bool gm_ok = std::fabs(closed_form("seiar_sym2", cb, -0.05).at("gamma'") - 0.2378) <= 1e-3;

    // tau_* located as the admissibility boundary of the numeric flow
    const auto& r = run_model("hiv").res;
    FlowSpec spec;
    spec.grid_points = 202;
    spec.flow_points = 34;
    RankOracle oracle;
    double tau_star =
        locate_blowup_tau(r.obs.E, r.obs.E.scenarios.at("paper"), r.state_symmetries[0],
                          r.ui_symmetries[0].components, true, spec, oracle, 6.0);
    bool ts_ok = std::fabs(tau_star - 2.2533) <= 1e-3;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "tau*=%.4f N'(-3)=%.1f delta'(-3)=%.4f gamma'(10)=%.1f gamma'(-0.05)=%.4f",
                  tau_star, cf.at("N'"), cf.at("delta'"),
                  closed_form("seiar_sym2", cb, 10.0).at("gamma'"),
                  closed_form("seiar_sym2", cb, -0.05).at("gamma'"));
    ok = np_ok && dp_ok && g10_ok && gm_ok && ts_ok;
    report(4, ok, std::string("closed-form quantities within tolerance -- ") + buf);
}

void criterion5() {
    auto start = std::chrono::steady_clock::now();
    RankOracle oracle;
    bool ok = true;
    std::string detail;
    {
        const auto& r = run_model("hiv").res;
        FlowSpec spec;
        spec.taus = {-3.0, -1.0, 1.0, 2.0};
        TrajectoryBundle b =
            symmetry_flow(r.obs.E, r.obs.E.scenarios.at("paper"), r.state_symmetries[0],
                          r.ui_symmetries[0].components, spec, oracle);
        CertifyReport rep = certify_indistinguishability(b, 1e-5);
        for (const auto& br : b.branches) ok = ok && br.admissible;
        ok = ok && rep.pass;
        char buf[64];
        std::snprintf(buf, sizeof(buf), " hiv:worst=%.1e", rep.worst);
        detail += buf;
    }
    {
        const auto& r = run_model("seiar").res;
        // the exponential-family symmetry (E component nonzero)
        std::size_t sym = 0;
        for (std::size_t i = 0; i < r.state_symmetries.size(); ++i)
            if (!r.state_symmetries[i][1].is_zero()) sym = i;
        for (const char* scen : {"beta_const", "beta_cos"}) {
            FlowSpec spec;
            spec.taus = scen == std::string("beta_const")
                            ? std::vector<double>{-0.05, 1.0, 10.0}
                            : std::vector<double>{-0.1, 1.0, 10.0};
            // the cos profile reaches zero at t = 200, so the transformed
            // input brushes slightly negative there for negative tau; the
            // invariance statement is what is certified here
            spec.enforce_positivity = false;
            TrajectoryBundle b =
                symmetry_flow(r.obs.E, r.obs.E.scenarios.at(scen), r.state_symmetries[sym],
                              r.ui_symmetries[sym].components, spec, oracle);
            CertifyReport rep = certify_indistinguishability(b, 1e-5);
            for (const auto& br : b.branches) ok = ok && br.admissible;
            ok = ok && rep.pass;
            char buf[80];
            std::snprintf(buf, sizeof(buf), " %s:worst=%.1e", scen, rep.worst);
            detail += buf;
        }
    }
    {
        // control: a deliberately perturbed input profile must fail
        const auto& r = run_model("hiv").res;
        FlowSpec spec;
        spec.taus = {1.0};
        spec.grid_points = 402;
        std::vector<Expr> bad = r.ui_symmetries[0].components;
        bad[0] = add2(bad[0], make_rational_ll(1, 100));
        TrajectoryBundle b = symmetry_flow(r.obs.E, r.obs.E.scenarios.at("paper"),
                                           r.state_symmetries[0], bad, spec, oracle);
        CertifyReport rep = certify_indistinguishability(b, 1e-5);
        ok = ok && !rep.pass;
        detail += rep.pass ? " control:UNEXPECTED-PASS" : " control:fails-as-expected";
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ok = ok && secs <= 300.0;
    char buf[48];
    std::snprintf(buf, sizeof(buf), " (%.0fs)", secs);
    report(5, ok, "output-invariance certification at 1e-5 --" + detail + buf);
}

void criterion6() {
    // transformed Hill terms leave the dynamics rows unchanged: zero test of
    // the residual at 8 non-singular random points per substitution set
    std::uint64_t rng = 424243;
    bool ok = true;
    for (int set = 1; set <= 6; ++set) {
        std::string key = "toggle_set" + std::to_string(set);
        int side = set <= 3 ? 1 : 2;
        int successes = 0, attempts = 0;
        double worst = 0;
        while (successes < 8 && attempts < 400) {
            ++attempts;
            auto draw = [&](double lo, double hi) {
                return lo + (hi - lo) * static_cast<double>(rng_next(rng) % 10000) / 10000.0;
            };
            std::map<std::string, double> base{
                {"x1", draw(0.5, 3.0)},  {"x2", draw(0.5, 3.0)}, {"W1", draw(0.5, 2.0)},
                {"W2", draw(0.5, 2.0)},  {"k01", draw(0.1, 1.0)}, {"k1", draw(1.0, 4.0)},
                {"n1", draw(1.0, 3.0)},  {"k02", draw(0.1, 1.0)}, {"k2", draw(1.0, 4.0)},
                {"n2", draw(1.0, 3.0)}};
            double tau = draw(-0.05, 0.05);
            std::map<std::string, double> cf;
            try {
                cf = closed_form(key, base, tau);
            } catch (const DomainError&) {
                continue;
            }
            std::string xs = side == 1 ? "x2" : "x1";
            std::string Ws = side == 1 ? "W1" : "W2";
            std::string ns = side == 1 ? "n1" : "n2";
            std::string ks = side == 1 ? "k1" : "k2";
            std::string k0s = side == 1 ? "k01" : "k02";
            double lhs = cf.at(k0s + "'") +
                         cf.at(ks + "'") /
                             (1.0 + std::pow(base.at(xs) / cf.at(Ws + "'"), cf.at(ns + "'")));
            double rhs = base.at(k0s) +
                         base.at(ks) / (1.0 + std::pow(base.at(xs) / base.at(Ws), base.at(ns)));
            worst = std::max(worst, std::fabs(lhs - rhs) / std::max(1.0, std::fabs(rhs)));
            ++successes;
        }
        ok = ok && successes == 8 && worst < 1e-9;
    }
    report(6, ok, "all six toggle substitution sets keep the dynamics rows identical");
}

void criterion7() {
    bool ok = true;
    RankOracle oracle;
    std::string detail;
    // mu*nu == identity for every produced tensor
    for (const char* name : {"unicycle_s1", "unicycle_s2", "hiv", "seiar", "toggle"}) {
        const MuNu& mn = run_model(name).res.obs.munu;
        const int k = static_cast<int>(mn.mu.size());
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
                std::vector<Expr> parts;
                for (int l = 0; l < k; ++l) parts.push_back(mul2(mn.mu[i][l], mn.nu[l][j]));
                Expr entry = sub(add(parts), i == j ? one() : zero());
                if (!is_identically_zero(entry, oracle.zero_opt())) ok = false;
            }
    }
    detail += ok ? " mu*nu=I" : " mu*nu!=I";

    // derivative vs central finite differences on random expressions
    {
        std::uint64_t rng = 97531;
        std::uint64_t prng = 86420;
        int done = 0, bad = 0;
        auto rand_expr = [&](auto&& self, int depth) -> Expr {
            std::uint64_t pick = rng_next(rng);
            if (depth <= 0 || pick % 10 < 2) {
                if (pick % 2 == 0)
                    return make_var(pick % 4 < 2 ? "a" : "b");
                return make_rational_ll(1 + static_cast<long>(rng_next(rng) % 5),
                                        1 + static_cast<long>(rng_next(rng) % 3));
            }
            switch (pick % 8) {
                case 0: return add2(self(self, depth - 1), self(self, depth - 1));
                case 1: return sub(self(self, depth - 1), self(self, depth - 1));
                case 2: return mul2(self(self, depth - 1), self(self, depth - 1));
                case 3:
                    return div(self(self, depth - 1),
                               add2(make_rational_ll(2), pow_int(self(self, depth - 1), 2)));
                case 4: return pow_int(self(self, depth - 1), 2);
                case 5: return fn(Kind::Sin, self(self, depth - 1));
                case 6: return fn(Kind::Cos, self(self, depth - 1));
                default:
                    return fn(Kind::Exp, mul2(make_rational_ll(1, 4), self(self, depth - 1)));
            }
        };
        while (done < 100) {
            Expr e = rand_expr(rand_expr, 5);
            if (!depends_on(e, "a")) continue;
            Expr d = differentiate(e, "a");
            std::map<std::string, double> pt{{"a", 0.6 + (rng_next(prng) % 80) / 100.0},
                                             {"b", 0.6 + (rng_next(prng) % 80) / 100.0}};
            try {
                auto fd_at = [&](double h) {
                    auto lo = pt, hi = pt;
                    lo["a"] -= h;
                    hi["a"] += h;
                    return (evaluate_double(e, hi) - evaluate_double(e, lo)) / (2 * h);
                };
                double h = 1e-6;
                double fd = fd_at(h), fd2 = fd_at(h / 2);
                double sym = evaluate_double(d, pt);
                double scale = std::max(1.0, std::fabs(sym));
                if (std::fabs(fd - fd2) > 1e-6 * scale) continue;  // ill-conditioned draw
                if (std::fabs(sym - fd) > 1e-5 * scale) ++bad;
                ++done;
            } catch (const Error&) {
            }
        }
        ok = ok && bad == 0;
        detail += bad == 0 ? " fd=ok" : " fd=BAD";
    }

    // closure monotonicity and termination on random polynomial fields
    {
        std::uint64_t rng = 1113;
        std::vector<std::string> states{"x", "y", "z"};
        bool mono = true;
        for (int trial = 0; trial < 10; ++trial) {
            VectorField f;
            for (int i = 0; i < 3; ++i) {
                std::vector<Expr> terms;
                for (const auto& s : states) {
                    long c = static_cast<long>(rng_next(rng) % 5) - 2;
                    if (c) terms.push_back(mul2(make_rational_ll(c), make_var(s)));
                }
                f.push_back(add(terms));
            }
            Codistribution om;
            om.n = 3;
            om.add_potential(make_var("x"), states);
            int r0 = generic_rank(om, oracle).rank;
            Codistribution closed = closure_codistribution(om, {lie_op(f, states)}, {}, states,
                                                           oracle);  // throws on bound overrun
            mono = mono && generic_rank(closed, oracle).rank >= r0;
        }
        ok = ok && mono;
        detail += mono ? " closure=ok" : " closure=BAD";
    }

    // flow identity and group property
    {
        const auto& r = run_model("hiv").res;
        const OdeModel& E = r.obs.E;
        SimSetup sim = resolve_scenario(E, E.scenarios.at("paper"));
        std::vector<double> w0{0.0};
        double tv[1] = {sim.t0};
        w0[0] = sim.w_profiles[0].eval(tv);
        const auto& xi = r.state_symmetries[0];
        const auto& uchi = r.ui_symmetries[0].components;
        auto [xa, wa] = flow_point(E, xi, uchi, sim.x0, w0, sim.t0, 0.9);
        auto [xb, wb] = flow_point(E, xi, uchi, xa, wa, sim.t0, 0.6);
        auto [xc, wc] = flow_point(E, xi, uchi, sim.x0, w0, sim.t0, 1.5);
        bool group = true;
        for (std::size_t i = 0; i < xb.size(); ++i)
            group = group && std::fabs(xb[i] - xc[i]) <= 1e-6 * std::max(1.0, std::fabs(xc[i]));
        for (std::size_t j = 0; j < wb.size(); ++j)
            group = group && std::fabs(wb[j] - wc[j]) <= 1e-6 * std::max(1.0, std::fabs(wc[j]));
        auto [xid, wid] = flow_point(E, xi, uchi, sim.x0, w0, sim.t0, 0.0);
        group = group && xid == sim.x0 && wid == w0;
        ok = ok && group;
        detail += group ? " group=ok" : " group=BAD";
    }

    // theorem-1 consistency on observable-state models
    {
        ObservabilityOptions opts;
        const char* text = R"j({
          "name": "obs1", "states": ["x"], "unknown_inputs": ["w1", "w2"],
          "dynamics": {"x": "w1"}, "outputs": ["x"]
        })j";
        auto r1 = identifiability(to_affine(model_from_json_text(text)), opts);
        bool t1 = r1.theorem1_path && r1.ui_reconstructable.at("w1") &&
                  !r1.ui_reconstructable.at("w2") && r1.obs.m == 1;
        const char* text2 = R"j({
          "name": "obs2", "states": ["x1", "x2"], "unknown_inputs": ["w1", "w2"],
          "dynamics": {"x1": "w1", "x2": "w2"}, "outputs": ["x1", "x2"]
        })j";
        auto r2 = identifiability(to_affine(model_from_json_text(text2)), opts);
        t1 = t1 && r2.theorem1_path && r2.ui_reconstructable.at("w1") &&
             r2.ui_reconstructable.at("w2");
        ok = ok && t1;
        detail += t1 ? " thm1=ok" : " thm1=BAD";
    }
    report(7, ok, "property suites --" + detail);
}

void criterion8() {
    const auto& r = run_model("seiar").res;
    RankOracle oracle;
    // the additive symmetry (constant S and R components)
    std::size_t sym = 0;
    for (std::size_t i = 0; i < r.state_symmetries.size(); ++i)
        if (r.state_symmetries[i][0].is_rational() && !r.state_symmetries[i][0].is_zero())
            sym = i;
    FlowSpec spec;
    spec.taus = {-10.0, -5.0, -1.0, -0.1, -0.01, 0.01, 0.1, 1.0, 5.0, 10.0};
    spec.grid_points = 1001;
    spec.flow_points = 201;
    spec.flows_only = true;
    TrajectoryBundle b =
        symmetry_flow(r.obs.E, r.obs.E.scenarios.at("beta_const"), r.state_symmetries[sym],
                      r.ui_symmetries[sym].components, spec, oracle);
    bool ok = true;
    int checked = 0;
    for (const auto& br : b.branches) {
        if (br.tau == 0) continue;
        ++checked;
        ok = ok && !br.admissible;
    }
    ok = ok && checked == 10;
    report(8, ok, "additive covid symmetry admits no nonzero group parameter on [0,200]");
}

}  // namespace

int main(int argc, char** argv) {
    int only = argc > 1 ? std::atoi(argv[1]) : 0;
    std::vector<std::pair<int, std::function<void()>>> table = {
        {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4},
        {5, criterion5}, {6, criterion6}, {7, criterion7}, {8, criterion8},
    };
    for (auto& [num, fn] : table) {
        if (only != 0 && num != only) continue;
        try {
            fn();
        } catch (const std::exception& e) {
            report(num, false, std::string("exception: ") + e.what());
        }
    }
    if (g_failures == 0) {
        std::printf("acceptance: all criteria passed\n");
    } else {
        std::printf("acceptance: %d criterion(s) failed\n", g_failures);
    }
    return g_failures == 0 ? 0 : 1;
}
