#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "odeid/expr.hpp"

namespace odeid {

using ScalarField = Expr;
using VectorField = std::vector<Expr>;    // column, length n
using CovectorField = std::vector<Expr>;  // row, length n

// Named data set attached to a model: initial values, constant-parameter
// values, time profiles for inputs / time-varying parameters, time span.
struct Scenario {
    std::map<std::string, double> initial;
    std::map<std::string, double> params;
    std::map<std::string, Expr> tv_profiles;  // name -> expression in t
    double t_begin = 0.0;
    double t_end = 1.0;
};

// The general form: dX/dt = f(X, t, U, Q, W), y = h(...).
struct GeneralModel {
    std::string name;
    std::vector<std::string> states;
    std::vector<std::string> known_inputs;
    std::vector<std::string> unknown_inputs;
    std::vector<std::string> constant_params;
    std::vector<std::string> tv_params;
    std::vector<Expr> dynamics;  // aligned with states
    std::vector<Expr> outputs;
    std::map<std::string, Scenario> scenarios;

    void validate() const;
};

// Where an unknown input of the affine system came from.
struct UiOrigin {
    std::string base_name;    // original symbol
    int derivative_order = 0; // 0: the symbol itself, k: its k-th derivative
};

// Input-affine system: dx/dt = g0 + sum f^k u_k + sum g^j w_j.
struct OdeModel {
    std::string name;
    std::vector<std::string> state;
    std::vector<std::string> known_inputs;
    std::vector<std::string> unknown_inputs;
    VectorField g0;
    std::vector<VectorField> f;  // one per known input
    std::vector<VectorField> g;  // one per unknown input
    std::vector<Expr> outputs;
    bool time_varying = false;

    std::vector<std::string> constant_params;          // subset of state (tail)
    std::map<std::string, UiOrigin> ui_origin;         // by unknown-input name
    std::map<std::string, UiOrigin> state_origin_tv;   // appended tv-param states
    std::map<std::string, Scenario> scenarios;

    int n() const { return static_cast<int>(state.size()); }
    int mu() const { return static_cast<int>(known_inputs.size()); }
    int mw() const { return static_cast<int>(unknown_inputs.size()); }
    int p() const { return static_cast<int>(outputs.size()); }
    int state_index(const std::string& name) const;

    void validate() const;
};

// Conversion per the general-to-affine recipe: inputs entering non-affinely
// are promoted to state components driven by fresh derivative inputs;
// constant parameters are appended at the tail in declaration order.
OdeModel to_affine(const GeneralModel& gm);

// JSON model file (schema in README); unknown keys rejected.
GeneralModel model_from_json_text(const std::string& text);
GeneralModel model_from_json_file(const std::string& path);
std::string model_digest(const GeneralModel& gm);

// Built-in paper models with their data sets.
// Names: unicycle_s1 | unicycle_s2 | hiv | seiar | toggle.
GeneralModel builtin_general(const std::string& name);
OdeModel builtin(const std::string& name);
std::vector<std::string> builtin_names();

// Structural affinity test: e is at most degree 1 in each listed symbol,
// jointly (no cross products between symbols).
bool is_affine_in(const Expr& e, const std::vector<std::string>& symbols);

std::string derived_input_name(const std::string& base, int order);

}  // namespace odeid
