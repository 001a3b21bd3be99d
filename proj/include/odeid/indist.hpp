#pragma once

#include "odeid/ident.hpp"

namespace odeid {

struct FlowSpec {
    std::vector<double> taus;   // group-parameter values; 0 is always added
    double tol = 1e-5;          // certification tolerance (relative)
    double dt = 0.0;            // baseline/re-integration step; 0 = automatic
    double dtau = 0.0;          // tau-integration step; 0 = automatic
    int grid_points = 1001;     // reporting grid
    int flow_points = 401;      // tau-flow grid (subsampled from the reporting grid)
    bool enforce_positivity = true;
    double blowup_limit = 1e12;
    bool flows_only = false;  // skip the re-integration (admissibility probes)
};

struct Trajectory {
    std::vector<double> t;
    std::vector<std::vector<double>> states;   // [time][component]
    std::vector<std::vector<double>> outputs;  // [time][output]
};

struct TauBranch {
    double tau = 0;
    bool admissible = true;
    std::string inadmissible_reason;
    std::vector<std::vector<double>> flow_states;  // [flow point][component] x'(t, tau)
    std::vector<std::vector<double>> flow_w;       // [flow point][ui] w'(t, tau)
    Trajectory reintegrated;                       // dynamics run with the transformed data
    double max_rel_dev = 0.0;
};

struct TrajectoryBundle {
    OdeModel model;
    std::string scenario_name;
    Trajectory baseline;
    std::vector<std::vector<double>> w_baseline;  // [time][ui]
    std::vector<double> flow_times;
    std::vector<std::vector<double>> flow_baseline_states;  // baseline at the anchor times
    std::vector<std::vector<double>> flow_baseline_w;
    std::vector<TauBranch> branches;
    bool commutativity_ok = true;
    std::vector<int> moved_states;  // indices with a nonzero symmetry component
    std::vector<int> moved_uis;
};

struct CertifyReport {
    bool pass = false;
    double tol = 1e-5;
    double worst = 0.0;
    double worst_tau = 0.0;
    double worst_time = 0.0;
    int worst_output = -1;
    int admissible_branches = 0;
    int inadmissible_branches = 0;
};

// Simulation setup resolved from a scenario: initial state vector and input
// profiles (expressions in t) for every known/unknown input of E.
struct SimSetup {
    std::vector<double> x0;
    std::vector<CompiledExpr> u_profiles;
    std::vector<CompiledExpr> w_profiles;
    double t0 = 0, t1 = 1;
};
SimSetup resolve_scenario(const OdeModel& E, const Scenario& sc);

// Classic fixed-step 4th order integration; dense result on a uniform grid.
// When dt == 0 the step is refined until a halved-step rerun agrees to
// tol_refine on the recorded columns.
Trajectory integrate_model(const OdeModel& E, const SimSetup& sim, int grid_points, double dt,
                           double tol_refine, double blowup_limit);

// Same, but additionally records the trajectory at every internal step (the
// dense grid resolves whatever transients forced the step size).
Trajectory integrate_model_dense(const OdeModel& E, const SimSetup& sim, int grid_points,
                                 double dt, double tol_refine, double blowup_limit,
                                 Trajectory* dense_out);

// Commutativity of the temporal shift with a symmetry pair (zero test).
bool check_commutativity(const OdeModel& E, const VectorField& xi,
                         const std::vector<Expr>& uchi, const RankOracle& oracle);

// A symmetry is defined up to a multiplying function, and the finite-flow
// condition singles out particular scalings. Tries monomial rescalings
// (1, then each state component) and returns the first commuting pair;
// falls back to the input pair when none is found.
std::pair<VectorField, std::vector<Expr>> commutativity_normalize(
    const OdeModel& E, const VectorField& xi, const std::vector<Expr>& uchi,
    const RankOracle& oracle, bool* found = nullptr);

// Closed solution of the canonicity flow: component m+i is shifted by tau.
std::vector<double> canonicity_flow(const std::vector<double>& w, int m, int i, double tau);

TrajectoryBundle symmetry_flow(const OdeModel& E, const Scenario& sc, const VectorField& xi,
                               const std::vector<Expr>& uchi, const FlowSpec& spec,
                               const RankOracle& oracle);

CertifyReport certify_indistinguishability(const TrajectoryBundle& bundle, double tol = 1e-5);

// Integrates the joint (x', w') symmetry flow from one anchor point.
std::pair<std::vector<double>, std::vector<double>> flow_point(
    const OdeModel& E, const VectorField& xi, const std::vector<Expr>& uchi,
    const std::vector<double>& x, const std::vector<double>& w, double t, double tau,
    long steps = 0);

// Closed-form transformed values for the paper models. Keys:
//   hiv | seiar_sym1 | seiar_sym2 | toggle_set1 .. toggle_set6
// `base` carries the baseline values by name (states, parameters, and the
// time-varying parameter under its own name).
std::map<std::string, double> closed_form(const std::string& key,
                                          const std::map<std::string, double>& base, double tau);

// Scans increasing |tau| for the admissibility boundary of the flow (blowup
// or positivity loss) and refines it by bisection.
double locate_blowup_tau(const OdeModel& E, const Scenario& sc, const VectorField& xi,
                         const std::vector<Expr>& uchi, bool positive_direction,
                         const FlowSpec& spec, const RankOracle& oracle, double tau_max = 16.0);

struct RecoveryReport {
    double tau = 0.0;
    int symmetry_index = -1;
    // moved quantities at the measurement time, undisguised (valid for any
    // symmetry normalization)
    std::map<std::string, double> recovered_at_tstar;
    std::map<std::string, double> recovered_w_at_tstar;
    // t0 transport of the same group parameter; meaningful when the
    // commutativity condition holds
    std::map<std::string, double> recovered_at_t0;
    bool commutativity_ok = false;
    double measured_value = 0.0;
    std::string measured_component;
    double t_star = 0.0;
};

// Belief-world anchors for the recovery root-finding: state and input values
// at the measurement time, plus the values at t0 used for reporting.
struct RecoveryAnchors {
    std::vector<double> x_star, w_star;
    std::vector<double> x0, w0;
    double t_star = 0.0, t0 = 0.0;
};

RecoveryReport single_symmetry_recovery_at(const OdeModel& E, const IdentifiabilityResult& ident,
                                           const std::string& component,
                                           const RecoveryAnchors& anchors, double measured,
                                           const RankOracle& oracle);

// Single-symmetry minimal-missing-information procedure: given one extra
// measurement of a state component at time t*, solves for the group parameter
// and reports the recovered quantities.
RecoveryReport single_symmetry_recovery(const OdeModel& E, const Scenario& sc,
                                        const IdentifiabilityResult& ident,
                                        const std::string& component, double t_star,
                                        double measured, const FlowSpec& spec,
                                        const RankOracle& oracle);

}  // namespace odeid
