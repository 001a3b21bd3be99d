#pragma once

#include "odeid/uio.hpp"

namespace odeid {

// Symmetry of the unknown input vector: either the unit vectors forced by
// non-canonicity or the image of a state symmetry.
struct UiSymmetry {
    enum class Kind { Canonicity, Unobservability } kind;
    std::vector<Expr> components;   // length mw, over the extended state and w symbols
    VectorField source_xi;          // Unobservability only
    SymMatrix xi_table;             // xi^alpha_i coefficients (rows alpha 0..m, cols i 1..m)
};

struct TvVerdict {
    bool identifiable = false;
    int derivative_order = 0;  // order of the unknown input the verdict was run on
};

struct IdentifiabilityResult {
    ObservabilityResult obs;
    std::vector<VectorField> state_symmetries;  // generators of the orthogonal distribution
    std::vector<UiSymmetry> ui_symmetries;      // canonicity first, then unobservability
    std::map<std::string, bool> ui_reconstructable;  // by extension UI name
    std::map<std::string, bool> constants;           // per constant parameter
    std::map<std::string, TvVerdict> tv_params;      // per original time-varying parameter
    bool theorem1_path = false;  // state observable: canonicity decides everything
};

// Extends E until the trailing unknown-input fields are blind to the selected
// functions (re-running the observability analysis when an extension occurs).
ObservabilityResult ensure_condition_gk(const ObservabilityResult& obs,
                                        const ObservabilityOptions& opts);

std::vector<UiSymmetry> canonicity_symmetries(int mw, int m);

UiSymmetry unobservability_symmetry(const OdeModel& E, const VectorField& xi,
                                    const std::vector<Expr>& htilde, const MuNu& munu,
                                    const RankOracle& oracle);

IdentifiabilityResult identifiability(const OdeModel& model, const ObservabilityOptions& opts = {});
IdentifiabilityResult identifiability(const GeneralModel& model,
                                      const ObservabilityOptions& opts = {});

}  // namespace odeid
