#pragma once

#include <map>
#include <string>
#include <vector>

#include "odeid/liegeo.hpp"
#include "odeid/model.hpp"

namespace odeid {

// mu[j][i] = L_{g^i} htilde_j (row: function index 0..m, col: field index
// 0..m); row/col 0 carry the drift slot. nu is the symbolic inverse.
struct MuNu {
    SymMatrix mu, nu;
    int m = 0;
};

struct TraceRecord {
    std::string op;
    std::map<std::string, std::string> data;
};

struct ObservabilityOptions {
    RankOracle oracle;
    int main_loop_cap = 25;
    std::size_t node_cap = 20000;
};

struct ObservabilityResult {
    OdeModel E;             // unknown-input extension at exit
    Codistribution O;       // observability codistribution over E's state
    int m = 0;              // highest unknown-input degree of reconstructability
    std::vector<Expr> htilde;
    MuNu munu;
    std::vector<VectorField> ghat;  // slots 0..mw
    int dim = 0;
    std::map<std::string, bool> observable;
    std::vector<TraceRecord> trace;
    bool canonic_exit = true;  // exited via the deg_w == mw path
};

// Unknown input reconstructability matrix (L_{g^j} lambda_i).
SymMatrix reconstructability_matrix(const OdeModel& E, const std::vector<Expr>& lambdas);

// deg_w of an integrable codistribution: rank of the matrix above computed
// from its potentials.
RankResult deg_w(const OdeModel& E, const Codistribution& omega, const RankOracle& oracle);

// Selection operation: m potentials making the reconstructability matrix
// full rank; greedy over potentials in creation order at the witness point.
std::vector<Expr> select_htilde(const OdeModel& E, const Codistribution& omega, int m,
                                const RankOracle& oracle, std::vector<int>* chosen = nullptr);

// Reordering operation: permutes unknown inputs so the first m columns of the
// reconstructability matrix from the given functions are independent.
std::vector<int> reorder_ui(OdeModel& E, const std::vector<Expr>& lambdas, int m,
                            const RankOracle& oracle);

// State augmentation with unknown inputs m+1..mw (finite UI extension).
OdeModel augment(const OdeModel& E, int m);
Codistribution augment_carry(const Codistribution& omega, const OdeModel& augmented);
Distribution augment_carry(const Distribution& delta, int d);

// Targeted single-input extension: appends unknown input j to the state and
// replaces it by its time derivative.
OdeModel extend_with_ui(const OdeModel& E, int j);

MuNu compute_munu(const OdeModel& E, const std::vector<Expr>& htilde, const RankOracle& oracle);
std::vector<VectorField> compute_ghat(const OdeModel& E, const MuNu& munu,
                                      const std::vector<Expr>& htilde);

// Jet coordinate names: v#alpha#order and <input>#order.
std::string v_jet_name(int alpha, int order);
std::string w_jet_name(const std::string& base, int order);

// The codistribution Otilde spanned by Lie derivatives of htilde along
// autobracket chains of the known-input fields.
Codistribution otilde(const OdeModel& E, const std::vector<Expr>& htilde, const MuNu& munu,
                      const RankOracle& oracle, int* s_out = nullptr, int* r_out = nullptr);

struct Algo2Result {
    bool finish = false;
    Codistribution omega_star;
    bool has_indices = false;
    int k_star = 0, i_star = 0, q_star = 0;
};

Algo2Result algorithm2(const OdeModel& E, const Codistribution& omega, int m,
                       const std::vector<Expr>& htilde, const MuNu& munu,
                       const std::vector<VectorField>& ghat, const ObservabilityOptions& opts,
                       std::vector<TraceRecord>* trace = nullptr);

int algorithm3_sx(const OdeModel& E, int m, const std::vector<Expr>& htilde,
                  const ObservabilityOptions& opts);
int algorithm4_r(const OdeModel& E, int m, const MuNu& munu, const ObservabilityOptions& opts);

// psi recursion in w-jet coordinates; chi_* = psi_{k-1}^{i} expressed in the
// v-jet coordinates.
VectorField psi_w(const OdeModel& E, int order, int input_index, int m);
VectorField psi_chain(const OdeModel& E, int k_star, int i_star, int m, const MuNu& munu,
                      const std::vector<Expr>& htilde);

// The dotted Lie-derivative operator along ghat = sum ghat^beta v_beta,
// including the jet-shift terms.
PotentialOp ldtv_ghat_op(const OdeModel& E, const std::vector<VectorField>& ghat, int m,
                         bool conditional);

// Reset operation used at the end of each non-canonical main-loop round:
// rewrites jet coordinates back to unknown inputs and extends the state with
// the unknown inputs appearing in the new observable functions.
std::pair<OdeModel, Codistribution> unaugment(const OdeModel& E, const Codistribution& omega,
                                              const std::vector<Expr>& new_potentials,
                                              const MuNu& munu, const std::vector<Expr>& htilde,
                                              int k_star);

ObservabilityResult observability(const OdeModel& model, const ObservabilityOptions& opts = {});

}  // namespace odeid
