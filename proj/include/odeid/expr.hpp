#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "odeid/errors.hpp"
#include "odeid/rational.hpp"

namespace odeid {

enum class Kind : std::uint8_t {
    Rational,
    Var,
    Sum,
    Product,
    Power,
    Negate,
    Reciprocal,
    Sin,
    Cos,
    Log,
    Exp,
};

bool kind_is_function(Kind k);

class Expr;

struct ExprNode {
    Kind kind;
    Rational value;          // Kind::Rational
    std::string name;        // Kind::Var
    std::vector<Expr> kids;  // composite kinds
    std::size_t node_count = 1;
    std::uint64_t hash = 0;
};

// Immutable expression handle with value semantics. Never null after
// construction; default-constructed Expr is the rational 0.
class Expr {
  public:
    Expr();
    explicit Expr(std::shared_ptr<const ExprNode> node) : node_(std::move(node)) {}

    Kind kind() const { return node_->kind; }
    const Rational& rat() const { return node_->value; }
    const std::string& var_name() const { return node_->name; }
    const std::vector<Expr>& kids() const { return node_->kids; }
    const Expr& kid(std::size_t i) const { return node_->kids[i]; }
    std::size_t node_count() const { return node_->node_count; }
    std::uint64_t hash() const { return node_->hash; }
    const ExprNode* raw() const { return node_.get(); }

    bool is_rational() const { return kind() == Kind::Rational; }
    bool is_zero() const { return is_rational() && rat() == 0; }
    bool is_one() const { return is_rational() && rat() == 1; }
    bool is_integer_constant() const { return is_rational() && rat_is_integer(rat()); }

  private:
    std::shared_ptr<const ExprNode> node_;
};

// Structural total order / equality. Deterministic across runs.
int expr_cmp(const Expr& a, const Expr& b);
bool expr_eq(const Expr& a, const Expr& b);

// --- raw constructors (no canonicalization) ---
Expr make_rational(const Rational& q);
Expr make_rational_ll(long num, long den = 1);
Expr make_var(const std::string& name);
Expr make_node(Kind k, std::vector<Expr> kids);

// --- canonicalizing constructors (simplified results) ---
Expr add(const std::vector<Expr>& terms);
Expr add2(const Expr& a, const Expr& b);
Expr sub(const Expr& a, const Expr& b);
Expr mul(const std::vector<Expr>& factors);
Expr mul2(const Expr& a, const Expr& b);
Expr div(const Expr& a, const Expr& b);
Expr neg(const Expr& a);
Expr recip(const Expr& a);
Expr pow(const Expr& base, const Expr& exponent);
Expr pow_int(const Expr& base, long k);
Expr fn(Kind k, const Expr& arg);
Expr zero();
Expr one();

// Canonical form: constants folded, sums/products flattened and expanded,
// like terms collected, children deterministically ordered. Idempotent.
Expr simplify(const Expr& e);

// Partial derivative with respect to a variable name; t is an ordinary
// variable here. Result is canonical.
Expr differentiate(const Expr& e, const std::string& var);

Expr substitute(const Expr& e, const std::map<std::string, Expr>& bindings);

void collect_free_vars(const Expr& e, std::set<std::string>& out);
std::set<std::string> free_vars(const Expr& e);
bool depends_on(const Expr& e, const std::string& var);

// True when exact rational evaluation is possible: no transcendentals and
// every exponent a (reducible-to-)integer constant.
bool is_rational_evaluable(const Expr& e);

Rational evaluate_exact(const Expr& e, const std::map<std::string, Rational>& point);
double evaluate_double(const Expr& e, const std::map<std::string, double>& point);

// Reproducible draws and the probabilistic zero test.
struct EvaluationPoint {
    std::map<std::string, Rational> values;
    bool exact = true;
    std::uint64_t seed = 0;

    std::map<std::string, double> as_double() const;
};

// Uniform rational with numerator and denominator in [1, 97].
Rational draw_rational(std::uint64_t& rng_state);
std::uint64_t rng_next(std::uint64_t& state);

struct ZeroTestOptions {
    int trials = 8;
    std::uint64_t seed = 0x5eed0d1eULL;
    double float_tol = 1e-9;
};

bool is_identically_zero(const Expr& e, const ZeroTestOptions& opt = {});
bool is_identically_zero(const Expr& e, int trials, std::uint64_t seed);

// Parse / render per the infix grammar ('^' power, function-call
// transcendentals, rational 'p/q' and decimal literals, 't' reserved for
// time). render(parse(s)) round-trips structurally.
Expr parse(const std::string& text);
std::string render(const Expr& e);

// Stack-program compilation for fast repeated float evaluation.
class CompiledExpr {
  public:
    CompiledExpr() = default;
    CompiledExpr(const Expr& e, const std::map<std::string, int>& var_slots);
    // vars: array indexed by the slots given at compile time.
    double eval(const double* vars) const;

  private:
    enum class Op : std::uint8_t { Const, Load, Add, Mul, Neg, Inv, Pow, PowInt, Sin, Cos, Log, Exp };
    struct Instr {
        Op op;
        int arg = 0;
        double c = 0.0;
    };
    std::vector<Instr> prog_;
    mutable std::vector<double> stack_;
};

// Guard used by pipeline code after closure steps.
void check_node_cap(const Expr& e, std::size_t cap);

// Exact multivariate division a / b in the expanded canonical form, treating
// transcendental subterms as atomic factors. Returns nullopt when b does not
// divide a (or when symbolic exponents block the term order).
std::optional<Expr> divide_exact(const Expr& a, const Expr& b);

// Polynomial gcd over the atomic factors (primitive PRS). Conservative: falls
// back to 1 whenever the inputs leave the integer-exponent polynomial
// fragment. Every division implied by the result is verified exact.
Expr poly_gcd(const Expr& a, const Expr& b);

}  // namespace odeid
