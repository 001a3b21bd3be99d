#include "odeid/model.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <json.hpp>

namespace odeid {

namespace {

void require_unique(const std::vector<std::string>& names, std::set<std::string>& seen) {
    for (const auto& n : names) {
        if (n == "t") throw ModelValidationError("'t' is reserved for time");
        if (!seen.insert(n).second) throw ModelValidationError("duplicate name '" + n + "'");
    }
}

}  // namespace

void GeneralModel::validate() const {
    std::set<std::string> seen;
    require_unique(states, seen);
    require_unique(known_inputs, seen);
    require_unique(unknown_inputs, seen);
    require_unique(constant_params, seen);
    require_unique(tv_params, seen);
    if (dynamics.size() != states.size())
        throw ModelValidationError("dynamics count does not match state count");
    if (outputs.empty()) throw ModelValidationError("model has no outputs");
    auto check_declared = [&](const Expr& e, const std::string& where) {
        for (const auto& v : free_vars(e)) {
            if (v == "t") continue;
            if (!seen.count(v))
                throw ModelValidationError("undeclared variable '" + v + "' in " + where);
        }
    };
    for (std::size_t i = 0; i < dynamics.size(); ++i)
        check_declared(dynamics[i], "dynamics of " + states[i]);
    for (const auto& h : outputs) check_declared(h, "output");
}

int OdeModel::state_index(const std::string& name) const {
    auto it = std::find(state.begin(), state.end(), name);
    if (it == state.end()) throw Error("no state component named '" + name + "'");
    return static_cast<int>(it - state.begin());
}

void OdeModel::validate() const {
    const std::size_t nn = state.size();
    if (g0.size() != nn) throw ModelValidationError("drift dimension mismatch");
    for (const auto& fi : f)
        if (fi.size() != nn) throw ModelValidationError("known-input field dimension mismatch");
    for (const auto& gj : g)
        if (gj.size() != nn) throw ModelValidationError("unknown-input field dimension mismatch");
    if (f.size() != known_inputs.size() || g.size() != unknown_inputs.size())
        throw ModelValidationError("field count does not match input count");
    auto check_input_free = [&](const Expr& e, const std::string& where) {
        auto vars = free_vars(e);
        for (const auto& u : known_inputs)
            if (vars.count(u)) throw ModelValidationError("input symbol '" + u + "' in " + where);
        for (const auto& w : unknown_inputs)
            if (vars.count(w)) throw ModelValidationError("input symbol '" + w + "' in " + where);
    };
    for (const auto& e : g0) check_input_free(e, "drift");
    for (const auto& fi : f)
        for (const auto& e : fi) check_input_free(e, "known-input field");
    for (const auto& gj : g)
        for (const auto& e : gj) check_input_free(e, "unknown-input field");
    for (const auto& h : outputs) check_input_free(h, "output");
}

bool is_affine_in(const Expr& e, const std::vector<std::string>& symbols) {
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        Expr d1 = differentiate(e, symbols[i]);
        for (std::size_t j = i; j < symbols.size(); ++j) {
            if (!is_identically_zero(differentiate(d1, symbols[j]))) return false;
        }
    }
    return true;
}

std::string derived_input_name(const std::string& base, int order) {
    std::string n = base;
    for (int i = 0; i < order; ++i) n += "'";
    return n;
}

OdeModel to_affine(const GeneralModel& gm) {
    gm.validate();

    std::vector<std::string> all_inputs = gm.known_inputs;
    for (const auto& w : gm.unknown_inputs) all_inputs.push_back(w);
    for (const auto& w : gm.tv_params) all_inputs.push_back(w);

    // Outputs of the affine form are input-free; tv-params referenced by an
    // output must therefore be promoted into the state.
    std::set<std::string> output_vars;
    for (const auto& h : gm.outputs) collect_free_vars(h, output_vars);
    for (const auto& u : gm.known_inputs)
        if (output_vars.count(u))
            throw NonAffineOutput("output depends on known input '" + u + "'");
    for (const auto& w : gm.unknown_inputs)
        if (output_vars.count(w))
            throw NonAffineOutput("output depends on unknown input '" + w + "'");

    auto affine_everywhere = [&](const std::string& sym) {
        for (const auto& dyn : gm.dynamics) {
            Expr d1 = differentiate(dyn, sym);
            for (const auto& other : all_inputs)
                if (!is_identically_zero(differentiate(d1, other))) return false;
        }
        return true;
    };

    std::vector<std::string> promoted_known, promoted_unknown;  // appended to state
    std::vector<std::string> kept_known, kept_unknown;
    for (const auto& u : gm.known_inputs) {
        (affine_everywhere(u) ? kept_known : promoted_known).push_back(u);
    }
    for (const auto& w : gm.unknown_inputs) {
        (affine_everywhere(w) ? kept_unknown : promoted_unknown).push_back(w);
    }
    // Declared tv-params follow the same rule as unknown inputs.
    for (const auto& w : gm.tv_params) {
        if (affine_everywhere(w) && !output_vars.count(w)) {
            kept_unknown.push_back(w);
        } else {
            promoted_unknown.push_back(w);
        }
    }

    OdeModel m;
    m.name = gm.name;
    m.scenarios = gm.scenarios;
    m.state = gm.states;
    for (const auto& u : promoted_known) m.state.push_back(u);
    for (const auto& w : promoted_unknown) m.state.push_back(w);
    for (const auto& q : gm.constant_params) m.state.push_back(q);
    m.constant_params = gm.constant_params;

    m.known_inputs = kept_known;
    for (const auto& u : promoted_known) {
        m.known_inputs.push_back(derived_input_name(u, 1));
    }
    m.unknown_inputs = kept_unknown;
    for (const auto& w : kept_unknown) m.ui_origin[w] = UiOrigin{w, 0};
    for (const auto& w : promoted_unknown) {
        std::string dn = derived_input_name(w, 1);
        m.unknown_inputs.push_back(dn);
        m.ui_origin[dn] = UiOrigin{w, 1};
        m.state_origin_tv[w] = UiOrigin{w, 0};
    }

    // Dynamics rows: original states keep their expressions, promoted inputs
    // get their fresh derivative input, constants get zero.
    std::vector<Expr> dyn = gm.dynamics;
    for (const auto& u : promoted_known) dyn.push_back(make_var(derived_input_name(u, 1)));
    for (const auto& w : promoted_unknown) dyn.push_back(make_var(derived_input_name(w, 1)));
    for (std::size_t i = 0; i < gm.constant_params.size(); ++i) dyn.push_back(zero());

    // Affine decomposition: g0 at zero inputs, fields by differentiation.
    std::map<std::string, Expr> zero_inputs;
    for (const auto& u : m.known_inputs) zero_inputs[u] = zero();
    for (const auto& w : m.unknown_inputs) zero_inputs[w] = zero();
    for (const auto& row : dyn) m.g0.push_back(substitute(row, zero_inputs));
    for (const auto& u : m.known_inputs) {
        VectorField fi;
        for (const auto& row : dyn) fi.push_back(differentiate(row, u));
        m.f.push_back(std::move(fi));
    }
    for (const auto& w : m.unknown_inputs) {
        VectorField gj;
        for (const auto& row : dyn) gj.push_back(differentiate(row, w));
        m.g.push_back(std::move(gj));
    }
    m.outputs = gm.outputs;
    for (auto& h : m.outputs) h = simplify(h);

    m.time_varying = false;
    for (const auto& e : m.g0) m.time_varying = m.time_varying || depends_on(e, "t");
    for (const auto& fi : m.f)
        for (const auto& e : fi) m.time_varying = m.time_varying || depends_on(e, "t");
    for (const auto& gj : m.g)
        for (const auto& e : gj) m.time_varying = m.time_varying || depends_on(e, "t");
    for (const auto& h : m.outputs) m.time_varying = m.time_varying || depends_on(h, "t");

    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// JSON model files
// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

std::vector<std::string> string_list(const json& j, const std::string& key) {
    std::vector<std::string> out;
    if (!j.contains(key)) return out;
    for (const auto& v : j.at(key)) out.push_back(v.get<std::string>());
    return out;
}

Scenario scenario_from_json(const json& j) {
    Scenario s;
    static const std::set<std::string> allowed = {"initial", "params", "tv_profiles", "t_span"};
    for (const auto& [k, v] : j.items()) {
        (void)v;
        if (!allowed.count(k)) throw ModelValidationError("unknown scenario key '" + k + "'");
    }
    if (j.contains("initial"))
        for (const auto& [k, v] : j.at("initial").items()) s.initial[k] = v.get<double>();
    if (j.contains("params"))
        for (const auto& [k, v] : j.at("params").items()) s.params[k] = v.get<double>();
    if (j.contains("tv_profiles"))
        for (const auto& [k, v] : j.at("tv_profiles").items())
            s.tv_profiles[k] = parse(v.get<std::string>());
    if (j.contains("t_span")) {
        s.t_begin = j.at("t_span").at(0).get<double>();
        s.t_end = j.at("t_span").at(1).get<double>();
    }
    return s;
}

}  // namespace

GeneralModel model_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ModelValidationError(std::string("bad JSON: ") + e.what());
    }
    static const std::set<std::string> allowed = {
        "name",       "states",          "known_inputs", "unknown_inputs",
        "tv_params",  "constant_params", "dynamics",     "outputs",
        "scenarios"};
    for (const auto& [k, v] : j.items()) {
        (void)v;
        if (!allowed.count(k)) throw ModelValidationError("unknown model key '" + k + "'");
    }
    GeneralModel gm;
    gm.name = j.value("name", "model");
    gm.states = string_list(j, "states");
    gm.known_inputs = string_list(j, "known_inputs");
    gm.unknown_inputs = string_list(j, "unknown_inputs");
    gm.constant_params = string_list(j, "constant_params");
    gm.tv_params = string_list(j, "tv_params");
    if (!j.contains("dynamics")) throw ModelValidationError("missing 'dynamics'");
    const json& dyn = j.at("dynamics");
    for (const auto& s : gm.states) {
        if (!dyn.contains(s)) throw ModelValidationError("missing dynamics for state '" + s + "'");
        gm.dynamics.push_back(parse(dyn.at(s).get<std::string>()));
    }
    if (dyn.size() != gm.states.size())
        throw ModelValidationError("dynamics for undeclared state present");
    for (const auto& h : j.value("outputs", json::array()))
        gm.outputs.push_back(parse(h.get<std::string>()));
    if (j.contains("scenarios"))
        for (const auto& [k, v] : j.at("scenarios").items())
            gm.scenarios[k] = scenario_from_json(v);
    gm.validate();
    return gm;
}

GeneralModel model_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ModelValidationError("cannot open model file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return model_from_json_text(ss.str());
}

std::string model_digest(const GeneralModel& gm) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mixs = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        h ^= '|';
        h *= 1099511628211ULL;
    };
    mixs(gm.name);
    for (const auto& s : gm.states) mixs(s);
    for (const auto& s : gm.known_inputs) mixs(s);
    for (const auto& s : gm.unknown_inputs) mixs(s);
    for (const auto& s : gm.constant_params) mixs(s);
    for (const auto& s : gm.tv_params) mixs(s);
    for (const auto& e : gm.dynamics) mixs(render(e));
    for (const auto& e : gm.outputs) mixs(render(e));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace odeid
