#include "odeid/report.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace odeid {

using ordered_json = nlohmann::ordered_json;

const char* kToolVersion = "0.1.0";

namespace {

ordered_json symmetry_components_json(const std::vector<Expr>& comps) {
    ordered_json arr = ordered_json::array();
    for (const auto& e : comps) arr.push_back(render(e));
    return arr;
}

}  // namespace

std::string analysis_report_json(const GeneralModel& gm, const IdentifiabilityResult& res,
                                 std::uint64_t seed, bool compact) {
    const OdeModel& E = res.obs.E;
    ordered_json j;
    j["tool"] = "odeid";
    j["version"] = kToolVersion;
    j["seed"] = seed;
    j["model"] = {{"name", gm.name},
                  {"digest", model_digest(gm)},
                  {"n", E.n()},
                  {"m_u", E.mu()},
                  {"m_w", E.mw()},
                  {"state", E.state},
                  {"unknown_inputs", E.unknown_inputs},
                  {"highest_ui_degree", res.obs.m},
                  {"canonic", res.obs.m == E.mw()}};

    ordered_json per_state = ordered_json::object();
    for (const auto& name : E.state) per_state[name] = res.obs.observable.at(name);
    j["observability"] = {{"dim", res.obs.dim},
                          {"state_dim", E.n()},
                          {"state_observable", res.obs.dim == E.n()},
                          {"per_state", per_state}};

    ordered_json constants = ordered_json::object();
    for (const auto& [k, v] : res.constants) constants[k] = v;
    ordered_json tv = ordered_json::object();
    for (const auto& [k, v] : res.tv_params)
        tv[k] = {{"identifiable", v.identifiable}, {"derivative_order", v.derivative_order}};
    ordered_json uis = ordered_json::object();
    for (const auto& [k, v] : res.ui_reconstructable) uis[k] = v;
    j["identifiability"] = {{"constants", constants},
                            {"tv_params", tv},
                            {"unknown_inputs", uis},
                            {"theorem1_fast_path", res.theorem1_path}};

    ordered_json state_syms = ordered_json::array();
    for (const auto& xi : res.state_symmetries) state_syms.push_back(symmetry_components_json(xi));
    ordered_json can = ordered_json::array(), unobs = ordered_json::array();
    for (const auto& s : res.ui_symmetries) {
        if (s.kind == UiSymmetry::Kind::Canonicity) {
            can.push_back(symmetry_components_json(s.components));
        } else {
            unobs.push_back(symmetry_components_json(s.components));
        }
    }
    j["symmetries"] = {{"state", state_syms},
                       {"ui", {{"canonicity", can}, {"unobservability", unobs}}}};

    return compact ? j.dump() : j.dump(2);
}

std::string trace_jsonl(const std::vector<TraceRecord>& trace) {
    std::string out;
    for (const auto& rec : trace) {
        ordered_json j;
        j["op"] = rec.op;
        for (const auto& [k, v] : rec.data) j[k] = v;
        out += j.dump();
        out += "\n";
    }
    return out;
}

std::string certification_json(const TrajectoryBundle& bundle, const CertifyReport& rep,
                               std::uint64_t seed, bool compact) {
    ordered_json j;
    j["tool"] = "odeid";
    j["version"] = kToolVersion;
    j["seed"] = seed;
    j["model"] = bundle.model.name;
    j["scenario"] = bundle.scenario_name;
    j["commutativity"] = bundle.commutativity_ok;
    j["tolerance"] = rep.tol;
    j["pass"] = rep.pass;
    j["worst_relative_deviation"] = rep.worst;
    j["worst_tau"] = rep.worst_tau;
    ordered_json branches = ordered_json::array();
    for (const auto& br : bundle.branches) {
        ordered_json b;
        b["tau"] = br.tau;
        b["admissible"] = br.admissible;
        if (!br.admissible) {
            b["reason"] = br.inadmissible_reason;
        } else {
            b["max_relative_deviation"] = br.max_rel_dev;
        }
        branches.push_back(b);
    }
    j["branches"] = branches;
    return compact ? j.dump() : j.dump(2);
}

std::string recovery_json(const RecoveryReport& rep, bool compact) {
    ordered_json j;
    j["tool"] = "odeid";
    j["version"] = kToolVersion;
    j["measured_component"] = rep.measured_component;
    j["t_star"] = rep.t_star;
    j["measured_value"] = rep.measured_value;
    j["tau"] = rep.tau;
    j["symmetry_index"] = rep.symmetry_index + 1;
    ordered_json rec = ordered_json::object();
    for (const auto& [k, v] : rep.recovered_at_t0) rec[k] = v;
    j["recovered_at_t0"] = rec;
    return compact ? j.dump() : j.dump(2);
}

std::string error_json(const std::string& type, const std::string& message) {
    ordered_json j;
    j["error"] = {{"type", type}, {"message", message}};
    return j.dump();
}

void write_bundle_csv(const TrajectoryBundle& bundle, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const OdeModel& E = bundle.model;

    auto open_file = [&](const std::string& stem) {
        std::ofstream f(fs::path(out_dir) / (E.name + "_" + stem + ".csv"));
        return f;
    };
    auto tau_header = [&](std::ofstream& f, const std::string& base_label) {
        f << "t," << base_label;
        for (const auto& br : bundle.branches)
            if (br.admissible) f << ",tau=" << br.tau;
        f << "\n";
    };

    // moved state components: values along the flow grid
    for (int idx : bundle.moved_states) {
        auto f = open_file(E.state[static_cast<std::size_t>(idx)]);
        tau_header(f, "baseline");
        for (std::size_t fp = 0; fp < bundle.flow_times.size(); ++fp) {
            f << bundle.flow_times[fp] << ","
              << bundle.flow_baseline_states[fp][static_cast<std::size_t>(idx)];
            for (const auto& br : bundle.branches)
                if (br.admissible) f << "," << br.flow_states[fp][static_cast<std::size_t>(idx)];
            f << "\n";
        }
    }
    // moved unknown inputs
    for (int j = 0; j < E.mw(); ++j) {
        bool moved = false;
        for (int mj : bundle.moved_uis) moved = moved || mj == j;
        if (!moved) continue;
        auto f = open_file(E.unknown_inputs[static_cast<std::size_t>(j)]);
        tau_header(f, "baseline");
        for (std::size_t fp = 0; fp < bundle.flow_times.size(); ++fp) {
            f << bundle.flow_times[fp] << ","
              << bundle.flow_baseline_w[fp][static_cast<std::size_t>(j)];
            for (const auto& br : bundle.branches)
                if (br.admissible) f << "," << br.flow_w[fp][static_cast<std::size_t>(j)];
            f << "\n";
        }
    }
    // outputs on the reporting grid
    for (int yo = 0; yo < E.p(); ++yo) {
        auto f = open_file("y" + std::to_string(yo + 1));
        tau_header(f, "baseline");
        for (std::size_t ti = 0; ti < bundle.baseline.t.size(); ++ti) {
            f << bundle.baseline.t[ti] << ","
              << bundle.baseline.outputs[ti][static_cast<std::size_t>(yo)];
            for (const auto& br : bundle.branches)
                if (br.admissible)
                    f << "," << br.reintegrated.outputs[ti][static_cast<std::size_t>(yo)];
            f << "\n";
        }
    }
}

}  // namespace odeid
