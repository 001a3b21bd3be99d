#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "odeid/model.hpp"

namespace odeid {

using SymMatrix = std::vector<std::vector<Expr>>;

constexpr std::uint64_t kDefaultSeed = 0x0de1dULL;

struct Distribution {
    int n = 0;
    std::vector<VectorField> generators;
};

// Codistribution represented by covector generators; when a generator is the
// gradient of a known scalar (integrable-by-construction case), that scalar
// is stored alongside it.
struct Codistribution {
    int n = 0;
    std::vector<CovectorField> covectors;
    std::vector<std::optional<Expr>> potentials;

    void add_covector(CovectorField w) {
        covectors.push_back(std::move(w));
        potentials.push_back(std::nullopt);
    }
    void add_potential(const Expr& lambda, const std::vector<std::string>& states);
    bool all_potentials() const;
    std::vector<Expr> potential_list() const;  // throws MissingPotentials
};

struct RankOracle {
    enum class Mode { Auto, Float };
    int trials = 5;
    std::uint64_t seed = kDefaultSeed;
    double tol = 1e-9;
    Mode mode = Mode::Auto;
    ZeroTestOptions zero_opt() const {
        ZeroTestOptions z;
        z.trials = std::max(trials, 8);
        z.seed = seed ^ 0x5a5a5a5aULL;
        z.float_tol = tol;
        return z;
    }
};

struct RankResult {
    int rank = 0;
    EvaluationPoint witness;
};

// --- basic calculus ---
CovectorField gradient(const Expr& lambda, const std::vector<std::string>& states);
Expr lie_scalar(const VectorField& f, const Expr& lambda, const std::vector<std::string>& states);
// Lie derivative of a scalar plus explicit time derivative (the dotted operator).
Expr lie_scalar_dt(const VectorField& f, const Expr& lambda, const std::vector<std::string>& states);
VectorField lie_bracket(const VectorField& f, const VectorField& tau,
                        const std::vector<std::string>& states);
CovectorField lie_covector(const VectorField& f, const CovectorField& omega,
                           const std::vector<std::string>& states);

// Autobracket: sum_beta sigma^gamma_beta [tau^beta, f] + delta^gamma_0 df/dt.
// sigma is indexed sigma[beta][gamma] (row: lower index, column: upper index),
// matching the inverse-of-mu layout used throughout.
VectorField autobracket(const VectorField& f, int gamma, const std::vector<VectorField>& taus,
                        const SymMatrix& sigma, const std::vector<std::string>& states,
                        bool time_varying);

// --- generic rank / membership ---
RankResult generic_rank_matrix(const SymMatrix& m, const RankOracle& oracle);
RankResult generic_rank(const Codistribution& omega, const RankOracle& oracle);
RankResult generic_rank(const Distribution& delta, const RankOracle& oracle);

bool contains(const Codistribution& omega, const CovectorField& w, const RankOracle& oracle);
bool in_span(const Distribution& delta, const VectorField& v, const RankOracle& oracle);
bool in_orthogonal(const Codistribution& omega, const VectorField& g, const RankOracle& oracle);

// --- minimal invariant closures ---

// A scalar operator applied to potentials during codistribution closure.
// `conditional` entries are applied to a potential only when the Lie
// derivative of its gradient along every zeta field vanishes identically.
struct PotentialOp {
    std::function<Expr(const Expr&)> apply;
    bool conditional = false;
    std::string label;
};

struct ClosureOptions {
    std::size_t node_cap = 20000;
    int max_rounds_slack = 1;  // rounds bound is n - dim + 1 (+ slack for the recheck round)
};

// Minimal invariant codistribution closure over potentials. Throws
// NonConvergence if the convergence bound is exceeded.
Codistribution closure_codistribution(const Codistribution& start,
                                      const std::vector<PotentialOp>& ops,
                                      const std::vector<VectorField>& zeta,
                                      const std::vector<std::string>& states,
                                      const RankOracle& oracle, const ClosureOptions& opt = {});

PotentialOp lie_op(const VectorField& f, const std::vector<std::string>& states,
                   bool add_dt = false, bool conditional = false, const std::string& label = {});

Distribution closure_distribution(const Distribution& start, const std::vector<VectorField>& fields,
                                  const std::vector<std::string>& states, const RankOracle& oracle,
                                  const ClosureOptions& opt = {});

Distribution closure_distribution_autobracket(const Distribution& start,
                                              const std::vector<VectorField>& taus,
                                              const SymMatrix& sigma,
                                              const std::vector<std::string>& states,
                                              bool time_varying, const RankOracle& oracle,
                                              const ClosureOptions& opt = {});

// Symbolic generators of the orthogonal distribution, cleared of common
// denominators. Each returned field annihilates every generator of omega.
std::vector<VectorField> null_space(const Codistribution& omega, const RankOracle& oracle);

// --- small symbolic matrix helpers ---
Expr sym_det(const SymMatrix& m);
SymMatrix sym_inverse(const SymMatrix& m, const RankOracle& oracle);  // throws SingularMu
std::pair<Expr, Expr> split_num_den(const Expr& e);

}  // namespace odeid
