#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace odeid {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// --- expression layer ---
struct SyntaxError : Error {
    std::size_t offset;
    SyntaxError(const std::string& what, std::size_t off)
        : Error(what + " (at byte " + std::to_string(off) + ")"), offset(off) {}
};
struct UnknownFunctionError : SyntaxError {
    UnknownFunctionError(const std::string& name, std::size_t off)
        : SyntaxError("unknown function '" + name + "'", off) {}
};
struct DivisionByZero : Error {
    DivisionByZero() : Error("division by zero at evaluation point") {}
};
struct DomainError : Error {
    explicit DomainError(const std::string& what = "evaluation outside domain") : Error(what) {}
};
struct InconclusiveSingular : Error {
    explicit InconclusiveSingular(const std::string& what = "no non-singular evaluation point found")
        : Error(what) {}
};
struct ExpressionTooLarge : Error {
    explicit ExpressionTooLarge(std::size_t n)
        : Error("expression exceeded node cap (" + std::to_string(n) + " nodes)") {}
};

// --- model layer ---
struct ModelValidationError : Error {
    explicit ModelValidationError(const std::string& what) : Error(what) {}
};
struct NonAffineOutput : ModelValidationError {
    explicit NonAffineOutput(const std::string& what) : ModelValidationError(what) {}
};
struct UnknownModel : Error {
    explicit UnknownModel(const std::string& name) : Error("unknown builtin model '" + name + "'") {}
};

// --- geometry / algorithm layer ---
struct SingularSigma : Error {
    SingularSigma() : Error("autobracket tensor singular at witness point") {}
};
struct SingularMu : Error {
    SingularMu() : Error("mu tensor singular at witness point") {}
};
struct PivotDegeneracy : Error {
    PivotDegeneracy() : Error("no valid pivot at witness point; resample") {}
};
struct RankDeficient : Error {
    explicit RankDeficient(const std::string& what) : Error(what) {}
};
struct MissingPotentials : Error {
    MissingPotentials() : Error("codistribution lacks scalar potentials") {}
};
struct NonConvergence : Error {
    explicit NonConvergence(const std::string& what) : Error(what) {}
};
struct IterationCap : Error {
    explicit IterationCap(int rounds)
        : Error("main loop exceeded iteration cap (" + std::to_string(rounds) + " rounds)") {}
};

// --- flows ---
struct FlowBlowup : Error {
    double tau;
    explicit FlowBlowup(double tau_, const std::string& what)
        : Error(what), tau(tau_) {}
};
struct MultipleSymmetries : Error {
    explicit MultipleSymmetries(const std::string& what) : Error(what) {}
};
struct NoSensitivity : Error {
    explicit NoSensitivity(const std::string& what) : Error(what) {}
};

}  // namespace odeid
