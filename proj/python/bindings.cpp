#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "odeid/report.hpp"

namespace py = pybind11;
using namespace odeid;

namespace {

GeneralModel load_any(const std::string& name_or_json) {
    for (const auto& b : builtin_names())
        if (b == name_or_json) return builtin_general(name_or_json);
    return model_from_json_text(name_or_json);
}

std::string analyze_json(const std::string& model, std::uint64_t seed, int trials) {
    GeneralModel gm = load_any(model);
    ObservabilityOptions opts;
    opts.oracle.seed = seed;
    opts.oracle.trials = trials;
    IdentifiabilityResult res = identifiability(gm, opts);
    return analysis_report_json(gm, res, seed, true);
}

std::string indist_json(const std::string& model, const std::string& scenario, int sym_index,
                        const std::vector<double>& taus, double tol, std::uint64_t seed) {
    GeneralModel gm = load_any(model);
    ObservabilityOptions opts;
    opts.oracle.seed = seed;
    IdentifiabilityResult res = identifiability(gm, opts);
    const OdeModel& E = res.obs.E;
    std::string scen = scenario;
    if (scen.empty()) {
        if (E.scenarios.empty()) throw Error("model has no scenarios");
        scen = E.scenarios.begin()->first;
    }
    if (sym_index < 1 || sym_index > static_cast<int>(res.state_symmetries.size()))
        throw Error("symmetry index out of range");
    const VectorField& xi = res.state_symmetries[static_cast<std::size_t>(sym_index - 1)];
    std::vector<Expr> uchi(static_cast<std::size_t>(E.mw()), zero());
    for (const auto& us : res.ui_symmetries) {
        if (us.kind != UiSymmetry::Kind::Unobservability) continue;
        bool same = true;
        for (int i = 0; i < E.n(); ++i)
            if (!expr_eq(us.source_xi[static_cast<std::size_t>(i)], xi[static_cast<std::size_t>(i)]))
                same = false;
        if (same) uchi = us.components;
    }
    auto [xin, uchin] = commutativity_normalize(E, xi, uchi, opts.oracle);
    FlowSpec spec;
    spec.taus = taus;
    spec.tol = tol;
    TrajectoryBundle bundle = symmetry_flow(E, E.scenarios.at(scen), xin, uchin, spec,
                                            opts.oracle);
    bundle.scenario_name = scen;
    CertifyReport rep = certify_indistinguishability(bundle, tol);
    return certification_json(bundle, rep, seed, true);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "observability and identifiability analysis for nonlinear ODE models";

    m.def("builtin_models", &builtin_names, "names of the bundled example models");

    m.def(
        "parse_expr",
        [](const std::string& text) { return render(parse(text)); },
        py::arg("text"), "parse an expression and return its canonical rendering");

    m.def(
        "differentiate_expr",
        [](const std::string& text, const std::string& var) {
            return render(differentiate(parse(text), var));
        },
        py::arg("text"), py::arg("var"), "partial derivative of an expression");

    m.def(
        "evaluate_expr",
        [](const std::string& text, const std::map<std::string, double>& point) {
            return evaluate_double(parse(text), point);
        },
        py::arg("text"), py::arg("point"), "numeric evaluation at a point");

    m.def(
        "is_zero_expr",
        [](const std::string& text, int trials, std::uint64_t seed) {
            return is_identically_zero(parse(text), trials, seed);
        },
        py::arg("text"), py::arg("trials") = 8, py::arg("seed") = 0x5eed0d1eULL,
        "probabilistic identically-zero test");

    m.def("analyze_json", &analyze_json, py::arg("model"), py::arg("seed") = 0x77003ULL,
          py::arg("trials") = 5,
          "run the full observability/identifiability analysis; `model` is a builtin name or a "
          "model JSON document; returns the report as a JSON string");

    m.def("indist_json", &indist_json, py::arg("model"), py::arg("scenario") = std::string(),
          py::arg("sym_index") = 1, py::arg("taus") = std::vector<double>{-1.0, 0.0, 1.0},
          py::arg("tol") = 1e-5, py::arg("seed") = 0x77003ULL,
          "generate and certify indistinguishable trajectories; returns the certification "
          "report as a JSON string");

    py::register_exception<ModelValidationError>(m, "ModelValidationError");
    py::register_exception<SyntaxError>(m, "ExprSyntaxError");
}
