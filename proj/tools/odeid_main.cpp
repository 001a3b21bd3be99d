#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "odeid/report.hpp"

using namespace odeid;

namespace {

constexpr std::uint64_t kDefaultCliSeed = 0x77003ULL;

struct GlobalOpts {
    std::uint64_t seed = kDefaultCliSeed;
    int trials = 5;
    bool float_mode = false;
    double tol = 1e-5;
    double dt = 0.0;
    std::string out_dir;
    bool compact_json = false;
};

RankOracle make_oracle(const GlobalOpts& g) {
    RankOracle oracle;
    oracle.seed = g.seed;
    oracle.trials = g.trials;
    if (g.float_mode) oracle.mode = RankOracle::Mode::Float;
    return oracle;
}

GeneralModel load_model(const std::string& builtin_name, const std::string& model_file) {
    if (!builtin_name.empty()) return builtin_general(builtin_name);
    return model_from_json_file(model_file);
}

int run_analyze(const GlobalOpts& g, const std::string& builtin_name,
                const std::string& model_file, const std::string& trace_file) {
    GeneralModel gm;
    try {
        gm = load_model(builtin_name, model_file);
    } catch (const ModelValidationError& e) {
        std::cerr << error_json("model_validation", e.what()) << "\n";
        return 2;
    } catch (const UnknownModel& e) {
        std::cerr << error_json("unknown_model", e.what()) << "\n";
        return 2;
    }
    ObservabilityOptions opts;
    opts.oracle = make_oracle(g);
    try {
        IdentifiabilityResult res = identifiability(gm, opts);
        std::cout << analysis_report_json(gm, res, g.seed, g.compact_json) << "\n";
        std::string tf = trace_file;
        if (tf.empty() && !g.out_dir.empty()) {
            std::filesystem::create_directories(g.out_dir);
            tf = (std::filesystem::path(g.out_dir) / (gm.name + "_trace.jsonl")).string();
        }
        if (!tf.empty()) {
            std::ofstream out(tf);
            out << trace_jsonl(res.obs.trace);
        }
        return 0;
    } catch (const ModelValidationError& e) {
        std::cerr << error_json("model_validation", e.what()) << "\n";
        return 2;
    } catch (const IterationCap& e) {
        std::cerr << error_json("iteration_cap", e.what()) << "\n";
        return 3;
    } catch (const InconclusiveSingular& e) {
        std::cerr << error_json("inconclusive", e.what()) << "\n";
        return 3;
    } catch (const NonConvergence& e) {
        std::cerr << error_json("non_convergence", e.what()) << "\n";
        return 3;
    } catch (const ExpressionTooLarge& e) {
        std::cerr << error_json("expression_cap", e.what()) << "\n";
        return 3;
    }
}

int run_indist(const GlobalOpts& g, const std::string& builtin_name, const std::string& model_file,
               std::string scenario, const std::string& profile, int sym_index,
               std::vector<double> taus, int grid_points) {
    GeneralModel gm;
    try {
        gm = load_model(builtin_name, model_file);
    } catch (const Error& e) {
        std::cerr << error_json("model", e.what()) << "\n";
        return 2;
    }
    if (!profile.empty() && gm.name == "seiar")
        scenario = profile == "cos" ? "beta_cos" : "beta_const";
    ObservabilityOptions opts;
    opts.oracle = make_oracle(g);
    try {
        IdentifiabilityResult res = identifiability(gm, opts);
        const OdeModel& E = res.obs.E;
        if (scenario.empty()) {
            if (E.scenarios.empty()) {
                std::cerr << error_json("scenario", "model has no scenarios") << "\n";
                return 2;
            }
            scenario = E.scenarios.begin()->first;
        }
        if (!E.scenarios.count(scenario)) {
            std::cerr << error_json("scenario", "unknown scenario '" + scenario + "'") << "\n";
            return 2;
        }
        if (sym_index < 1 || sym_index > static_cast<int>(res.state_symmetries.size())) {
            std::cerr << error_json("symmetry", "symmetry index out of range (model has " +
                                                    std::to_string(res.state_symmetries.size()) +
                                                    " state symmetries)")
                      << "\n";
            return 2;
        }
        const VectorField& xi = res.state_symmetries[static_cast<std::size_t>(sym_index - 1)];
        std::vector<Expr> uchi(static_cast<std::size_t>(E.mw()), zero());
        for (const auto& us : res.ui_symmetries) {
            if (us.kind != UiSymmetry::Kind::Unobservability) continue;
            bool same = true;
            for (int i = 0; i < E.n(); ++i)
                if (!expr_eq(us.source_xi[static_cast<std::size_t>(i)],
                             xi[static_cast<std::size_t>(i)]))
                    same = false;
            if (same) uchi = us.components;
        }
        auto [xin, uchin] = commutativity_normalize(E, xi, uchi, opts.oracle);
        FlowSpec spec;
        spec.taus = std::move(taus);
        spec.tol = g.tol;
        spec.dt = g.dt;
        if (grid_points > 1) spec.grid_points = grid_points;
        TrajectoryBundle bundle =
            symmetry_flow(E, E.scenarios.at(scenario), xin, uchin, spec, opts.oracle);
        bundle.scenario_name = scenario;
        CertifyReport rep = certify_indistinguishability(bundle, g.tol);
        std::cout << certification_json(bundle, rep, g.seed, g.compact_json) << "\n";
        if (!g.out_dir.empty()) write_bundle_csv(bundle, g.out_dir);
        bool any_admissible = rep.admissible_branches > 0;
        return any_admissible ? (rep.pass ? 0 : 1) : 0;
    } catch (const Error& e) {
        std::cerr << error_json("indist", e.what()) << "\n";
        return 3;
    }
}

int run_whatif(const GlobalOpts& g, const std::string& builtin_name, const std::string& model_file,
               const std::string& add_output, const std::string& measure, double measured_value,
               bool has_value, double disguise_tau, const std::string& scenario_name) {
    GeneralModel gm;
    try {
        gm = load_model(builtin_name, model_file);
    } catch (const Error& e) {
        std::cerr << error_json("model", e.what()) << "\n";
        return 2;
    }
    ObservabilityOptions opts;
    opts.oracle = make_oracle(g);
    try {
        if (!add_output.empty()) {
            IdentifiabilityResult before = identifiability(gm, opts);
            GeneralModel gm2 = gm;
            gm2.outputs.push_back(parse(add_output));
            gm2.validate();
            IdentifiabilityResult after = identifiability(gm2, opts);
            nlohmann::ordered_json j;
            j["tool"] = "odeid";
            j["version"] = kToolVersion;
            j["added_output"] = add_output;
            auto verdicts = [](const IdentifiabilityResult& r) {
                nlohmann::ordered_json v;
                v["observability_dim"] = r.obs.dim;
                v["state_dim"] = r.obs.E.n();
                nlohmann::ordered_json c = nlohmann::ordered_json::object();
                for (const auto& [k, b] : r.constants) c[k] = b;
                v["constants"] = c;
                nlohmann::ordered_json tv = nlohmann::ordered_json::object();
                for (const auto& [k, t] : r.tv_params) tv[k] = t.identifiable;
                v["tv_params"] = tv;
                return v;
            };
            j["before"] = verdicts(before);
            j["after"] = verdicts(after);
            nlohmann::ordered_json changed = nlohmann::ordered_json::array();
            for (const auto& [k, b] : after.constants)
                if (before.constants.count(k) && before.constants.at(k) != b) changed.push_back(k);
            for (const auto& [k, t] : after.tv_params)
                if (before.tv_params.count(k) &&
                    before.tv_params.at(k).identifiable != t.identifiable)
                    changed.push_back(k);
            j["changed_verdicts"] = changed;
            std::cout << (g.compact_json ? j.dump() : j.dump(2)) << "\n";
            return 0;
        }
        auto at = measure.find('@');
        if (at == std::string::npos) {
            std::cerr << error_json("usage", "--measure expects component@time") << "\n";
            return 2;
        }
        std::string comp = measure.substr(0, at);
        double t_star = std::stod(measure.substr(at + 1));
        IdentifiabilityResult res = identifiability(gm, opts);
        const OdeModel& E = res.obs.E;
        std::string scen = scenario_name;
        if (scen.empty()) {
            if (E.scenarios.empty()) {
                std::cerr << error_json("scenario", "model has no scenarios") << "\n";
                return 2;
            }
            scen = E.scenarios.begin()->first;
        }
        FlowSpec spec;
        spec.tol = g.tol;
        RecoveryReport rep;
        if (has_value) {
            rep = single_symmetry_recovery(E, E.scenarios.at(scen), res, comp, t_star,
                                           measured_value, spec, opts.oracle);
        } else {
            // round-trip self check: the belief is the scenario disguised by
            // disguise_tau along the applicable symmetry; the measured value
            // comes from the undisguised run
            SimSetup sim = resolve_scenario(E, E.scenarios.at(scen));
            Trajectory truth = integrate_model(E, sim, spec.grid_points, spec.dt, spec.tol / 10.0,
                                               spec.blowup_limit);
            const int ci = E.state_index(comp);
            std::size_t gi = 0;
            double bestd = 1e300;
            for (std::size_t k = 0; k < truth.t.size(); ++k)
                if (std::fabs(truth.t[k] - t_star) < bestd) {
                    bestd = std::fabs(truth.t[k] - t_star);
                    gi = k;
                }
            t_star = truth.t[gi];
            const VectorField* xi = nullptr;
            const std::vector<Expr>* uchi = nullptr;
            for (std::size_t s = 0; s < res.state_symmetries.size(); ++s) {
                if (is_identically_zero(res.state_symmetries[s][static_cast<std::size_t>(ci)],
                                        opts.oracle.zero_opt()))
                    continue;
                xi = &res.state_symmetries[s];
                for (const auto& us : res.ui_symmetries) {
                    if (us.kind != UiSymmetry::Kind::Unobservability) continue;
                    bool same = true;
                    for (int i = 0; i < E.n(); ++i)
                        if (!expr_eq(us.source_xi[static_cast<std::size_t>(i)],
                                     (*xi)[static_cast<std::size_t>(i)]))
                            same = false;
                    if (same) uchi = &us.components;
                }
            }
            if (!xi) throw NoSensitivity("component '" + comp + "' is observable");
            std::vector<Expr> zero_uchi(static_cast<std::size_t>(E.mw()), zero());
            const std::vector<Expr>& uc = uchi ? *uchi : zero_uchi;
            RecoveryAnchors anchors;
            anchors.t_star = t_star;
            anchors.t0 = truth.t[0];
            std::vector<double> w_star, w0;
            {
                double tv[1] = {t_star};
                double t0v[1] = {truth.t[0]};
                for (int j = 0; j < E.mw(); ++j) {
                    w_star.push_back(sim.w_profiles[static_cast<std::size_t>(j)].eval(tv));
                    w0.push_back(sim.w_profiles[static_cast<std::size_t>(j)].eval(t0v));
                }
            }
            auto [xs, ws] = flow_point(E, *xi, uc, truth.states[gi], w_star, t_star, disguise_tau);
            auto [x0s, w0s] = flow_point(E, *xi, uc, truth.states[0], w0, truth.t[0], disguise_tau);
            anchors.x_star = xs;
            anchors.w_star = ws;
            anchors.x0 = x0s;
            anchors.w0 = w0s;
            double measured = truth.states[gi][static_cast<std::size_t>(ci)];
            rep = single_symmetry_recovery_at(E, res, comp, anchors, measured, opts.oracle);
        }
        std::cout << recovery_json(rep, g.compact_json) << "\n";
        return 0;
    } catch (const MultipleSymmetries& e) {
        std::cerr << error_json("multiple_symmetries", e.what()) << "\n";
        return 3;
    } catch (const NoSensitivity& e) {
        std::cerr << error_json("no_sensitivity", e.what()) << "\n";
        return 3;
    } catch (const ModelValidationError& e) {
        std::cerr << error_json("model_validation", e.what()) << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << error_json("whatif", e.what()) << "\n";
        return 3;
    }
}

int run_trace(const std::string& file) {
    std::ifstream in(file);
    if (!in) {
        std::cerr << error_json("io", "cannot open trace file '" + file + "'") << "\n";
        return 2;
    }
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto j = nlohmann::ordered_json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            std::cerr << error_json("parse", "bad trace line " + std::to_string(lineno)) << "\n";
            return 2;
        }
        std::cout << "[" << lineno << "] " << j.value("op", "?");
        for (const auto& [k, v] : j.items()) {
            if (k == "op") continue;
            std::cout << "  " << k << "=" << (v.is_string() ? v.get<std::string>() : v.dump());
        }
        std::cout << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Observability and identifiability analysis for nonlinear ODE models with "
                 "time-varying parameters"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "random seed for the rank oracle and zero tests");
    app.add_option("--trials", g.trials, "evaluation points per rank query");
    app.add_flag("--float", g.float_mode, "force floating-point rank computations");
    app.add_option("--tol", g.tol, "certification tolerance");
    app.add_option("--dt", g.dt, "integration step (0 = automatic)");
    app.add_option("--out", g.out_dir, "output directory for CSV/trace files");
    app.add_flag("--json", g.compact_json, "compact single-line JSON output");

    auto* cmd_models = app.add_subcommand("models", "list built-in models");

    std::string builtin_name, model_file, trace_file;
    auto* cmd_analyze = app.add_subcommand("analyze", "observability and identifiability report");
    cmd_analyze->add_option("--builtin", builtin_name, "built-in model name");
    cmd_analyze->add_option("--model", model_file, "model JSON file");
    cmd_analyze->add_option("--trace", trace_file, "write the algorithm trace (JSON lines)");

    std::string in_builtin, in_model, in_scenario, in_profile;
    int sym_index = 1;
    int grid_points = 0;
    std::vector<double> taus;
    auto* cmd_indist =
        app.add_subcommand("indist", "generate and certify indistinguishable trajectories");
    cmd_indist->add_option("--builtin", in_builtin, "built-in model name");
    cmd_indist->add_option("--model", in_model, "model JSON file");
    cmd_indist->add_option("--scenario", in_scenario, "scenario name");
    cmd_indist->add_option("--profile", in_profile, "seiar profile shorthand: const | cos");
    cmd_indist->add_option("--sym", sym_index, "state symmetry index (1-based)");
    cmd_indist->add_option("--taus", taus, "group parameter values")->delimiter(',');
    cmd_indist->add_option("--grid", grid_points, "reporting grid points");

    std::string wi_builtin, wi_model, add_output, measure, wi_scenario;
    double measured_value = 0.0, disguise_tau = 1.0;
    auto* cmd_whatif = app.add_subcommand("whatif", "re-run analysis with an extra output or "
                                                    "recover parameters from one measurement");
    cmd_whatif->add_option("--builtin", wi_builtin, "built-in model name");
    cmd_whatif->add_option("--model", wi_model, "model JSON file");
    cmd_whatif->add_option("--add-output", add_output, "expression to append as a new output");
    cmd_whatif->add_option("--measure", measure, "component@time for the recovery procedure");
    auto* vopt = cmd_whatif->add_option("--value", measured_value, "measured value");
    cmd_whatif->add_option("--disguise-tau", disguise_tau,
                           "round-trip offset used when no --value is given");
    cmd_whatif->add_option("--scenario", wi_scenario, "scenario name");

    std::string trace_in;
    auto* cmd_trace = app.add_subcommand("trace", "pretty-print a trace file");
    cmd_trace->add_option("file", trace_in, "trace JSONL file")->required();

    CLI11_PARSE(app, argc, argv);
    bool has_value = vopt->count() > 0;

    if (cmd_models->parsed()) {
        if (g.compact_json) {
            nlohmann::ordered_json j = builtin_names();
            std::cout << j.dump() << "\n";
        } else {
            for (const auto& n : builtin_names()) std::cout << n << "\n";
        }
        return 0;
    }
    if (cmd_analyze->parsed()) {
        if (builtin_name.empty() == model_file.empty()) {
            std::cerr << error_json("usage", "provide exactly one of --builtin / --model") << "\n";
            return 2;
        }
        return run_analyze(g, builtin_name, model_file, trace_file);
    }
    if (cmd_indist->parsed()) {
        if (in_builtin.empty() == in_model.empty()) {
            std::cerr << error_json("usage", "provide exactly one of --builtin / --model") << "\n";
            return 2;
        }
        if (taus.empty()) taus = {-1.0, 0.0, 1.0};
        return run_indist(g, in_builtin, in_model, in_scenario, in_profile, sym_index, taus,
                          grid_points);
    }
    if (cmd_whatif->parsed()) {
        if (wi_builtin.empty() == wi_model.empty()) {
            std::cerr << error_json("usage", "provide exactly one of --builtin / --model") << "\n";
            return 2;
        }
        if (add_output.empty() == measure.empty()) {
            std::cerr << error_json("usage", "provide exactly one of --add-output / --measure")
                      << "\n";
            return 2;
        }
        return run_whatif(g, wi_builtin, wi_model, add_output, measure, measured_value, has_value,
                          disguise_tau, wi_scenario);
    }
    if (cmd_trace->parsed()) return run_trace(trace_in);
    return 0;
}
