#include <doctest.h>

#include <cmath>

#include "odeid/expr.hpp"

using namespace odeid;

namespace {

double eval_at(const Expr& e, const std::map<std::string, double>& pt) {
    return evaluate_double(e, pt);
}

// Random expression generator for property tests (depth-bounded, tame values).
Expr random_expr(std::uint64_t& rng, int depth) {
    static const std::vector<std::string> vars = {"a", "b", "c"};
    std::uint64_t pick = rng_next(rng);
    if (depth <= 0 || pick % 10 < 2) {
        if (pick % 2 == 0) return make_var(vars[rng_next(rng) % vars.size()]);
        return make_rational_ll(1 + static_cast<long>(rng_next(rng) % 5),
                                1 + static_cast<long>(rng_next(rng) % 3));
    }
    switch (pick % 9) {
        case 0:
            return add2(random_expr(rng, depth - 1), random_expr(rng, depth - 1));
        case 1:
            return sub(random_expr(rng, depth - 1), random_expr(rng, depth - 1));
        case 2:
            return mul2(random_expr(rng, depth - 1), random_expr(rng, depth - 1));
        case 3:
            return div(random_expr(rng, depth - 1),
                       add2(make_rational_ll(2), pow_int(random_expr(rng, depth - 1), 2)));
        case 4:
            return pow_int(random_expr(rng, depth - 1), 2 + static_cast<long>(rng_next(rng) % 2));
        case 5:
            return fn(Kind::Sin, random_expr(rng, depth - 1));
        case 6:
            return fn(Kind::Cos, random_expr(rng, depth - 1));
        case 7:
            return fn(Kind::Exp, mul2(make_rational_ll(1, 4), random_expr(rng, depth - 1)));
        default:
            return fn(Kind::Log, add2(one(), pow_int(random_expr(rng, depth - 1), 2)));
    }
}

}  // namespace

TEST_CASE("parse toggle dynamics row") {
    Expr e = parse("k01 + k1/(1+(x2/W1)^n1) - x1");
    auto vars = free_vars(e);
    CHECK(vars == std::set<std::string>{"k01", "k1", "x2", "W1", "n1", "x1"});
    CHECK(expr_eq(parse(render(e)), e));
    std::map<std::string, double> pt{{"k01", 0.5}, {"k1", 2.0}, {"x2", 3.0},
                                     {"W1", 1.5},  {"n1", 2.5}, {"x1", 0.25}};
    double expect = 0.5 + 2.0 / (1.0 + std::pow(3.0 / 1.5, 2.5)) - 0.25;
    CHECK(eval_at(e, pt) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("parse constants and function calls") {
    CHECK(parse("0").is_zero());
    CHECK(parse("3/6").rat() == Rational(1, 2));
    Expr e = parse("sin(theta-phi)/rho");
    std::map<std::string, double> pt{{"theta", 1.1}, {"phi", 0.4}, {"rho", 2.0}};
    CHECK(eval_at(e, pt) == doctest::Approx(std::sin(0.7) / 2.0).epsilon(1e-12));
    CHECK(expr_eq(parse(render(e)), e));
    CHECK(depends_on(e, "rho"));
}

TEST_CASE("parse errors carry byte offsets") {
    CHECK_THROWS_AS(parse("x + (y"), SyntaxError);
    CHECK_THROWS_AS(parse("foo(x)"), UnknownFunctionError);
    try {
        parse("a + $");
    } catch (const SyntaxError& e) {
        CHECK(e.offset == 4);
    }
}

TEST_CASE("simplify is idempotent and canonical") {
    std::uint64_t rng = 7;
    for (int i = 0; i < 50; ++i) {
        Expr e = random_expr(rng, 4);
        Expr s1 = simplify(e);
        Expr s2 = simplify(s1);
        CHECK(expr_eq(s1, s2));
    }
    CHECK(expr_eq(add2(make_var("x"), make_var("x")), mul2(make_rational_ll(2), make_var("x"))));
    CHECK(sub(make_var("x"), make_var("x")).is_zero());
    CHECK(expr_eq(mul2(make_var("x"), recip(make_var("x"))), one()));
}

TEST_CASE("simplify preserves value") {
    std::uint64_t rng = 99;
    int done = 0;
    std::uint64_t prng = 1234;
    while (done < 10) {
        Expr e = random_expr(rng, 4);
        Expr s = simplify(e);
        std::map<std::string, double> pt;
        for (const auto& v : {"a", "b", "c"}) pt[v] = 0.5 + (rng_next(prng) % 100) / 100.0;
        try {
            double ve = eval_at(e, pt);
            double vs = eval_at(s, pt);
            CHECK(std::fabs(ve - vs) <= 1e-9 * std::max({1.0, std::fabs(ve), std::fabs(vs)}));
            ++done;
        } catch (const Error&) {
        }
    }
}

TEST_CASE("differentiate linear and quotient forms") {
    Expr e1 = differentiate(parse("phi - theta"), "theta");
    CHECK(expr_eq(e1, make_rational_ll(-1)));

    Expr e2 = differentiate(parse("sin(theta-phi)/rho"), "rho");
    Expr expected = parse("-sin(theta-phi)/rho^2");
    CHECK(is_identically_zero(sub(e2, expected)));
}

TEST_CASE("differentiate symbolic power matches finite differences") {
    Expr e = parse("k1/(1+(x2/W1)^n1)");
    Expr d = differentiate(e, "W1");
    std::map<std::string, double> pt{{"k1", 2}, {"x2", 3}, {"W1", 1}, {"n1", 2}};
    double h = 1e-6;
    auto lo = pt, hi = pt;
    lo["W1"] -= h;
    hi["W1"] += h;
    double fd = (eval_at(e, hi) - eval_at(e, lo)) / (2 * h);
    double sym = eval_at(d, pt);
    CHECK(std::fabs(sym - fd) <= 1e-6 * std::max(1.0, std::fabs(sym)));
}

TEST_CASE("derivative matches central differences on random expressions") {
    std::uint64_t rng = 2024;
    std::uint64_t prng = 555;
    int done = 0;
    while (done < 100) {
        Expr e = random_expr(rng, 6);
        if (!depends_on(e, "a")) continue;
        Expr d = differentiate(e, "a");
        std::map<std::string, double> pt;
        for (const auto& v : {"a", "b", "c"}) pt[v] = 0.6 + (rng_next(prng) % 80) / 100.0;
        try {
            auto fd_at = [&](double h) {
                auto lo = pt, hi = pt;
                lo["a"] -= h;
                hi["a"] += h;
                return (eval_at(e, hi) - eval_at(e, lo)) / (2 * h);
            };
            double h = 1e-6 * std::max(1.0, std::fabs(pt["a"]));
            double fd = fd_at(h);
            double fd2 = fd_at(h / 2);
            double sym = eval_at(d, pt);
            double scale = std::max(1.0, std::fabs(sym));
            // only assert when the difference quotient itself has converged
            if (std::fabs(fd - fd2) > 1e-6 * scale) continue;
            CHECK(std::fabs(sym - fd) <= 1e-5 * scale);
            ++done;
        } catch (const Error&) {
        }
    }
}

TEST_CASE("exact evaluation") {
    CHECK(evaluate_exact(parse("x^2 + 1"), {{"x", Rational(2)}}) == Rational(5));
    CHECK(evaluate_exact(parse("x/3 - 1/3"), {{"x", Rational(1)}}) == Rational(0));
    CHECK_THROWS_AS(evaluate_exact(parse("1/x"), {{"x", Rational(0)}}), DivisionByZero);
    CHECK_THROWS_AS(evaluate_exact(parse("sin(x)"), {{"x", Rational(0)}}), DomainError);
    CHECK_THROWS_AS(evaluate_exact(parse("x^(1/2)"), {{"x", Rational(4)}}), DomainError);
}

TEST_CASE("float evaluation of paper quantities") {
    Expr e = parse("sin(theta - phi)/rho");
    std::map<std::string, double> pt{{"theta", M_PI / 2}, {"phi", 0.0}, {"rho", 2.0}};
    CHECK(eval_at(e, pt) == doctest::Approx(0.5).epsilon(1e-12));

    Expr dp = parse("delta*rho/((rho - delta)*exp(rho*tau) + delta)");
    std::map<std::string, double> pt2{{"delta", 0.5}, {"rho", 0.108}, {"tau", -3.0}};
    CHECK(eval_at(dp, pt2) == doctest::Approx(0.2494).epsilon(1e-3));

    CHECK_THROWS_AS(eval_at(parse("log(x)"), {{"x", -1.0}}), DomainError);
}

TEST_CASE("probabilistic zero test") {
    CHECK(is_identically_zero(parse("x - x")));
    CHECK(is_identically_zero(parse("sin(z)^2 + cos(z)^2 - 1")));
    CHECK_FALSE(is_identically_zero(parse("x*y - x")));
    CHECK_FALSE(is_identically_zero(parse("1/97")));
    ZeroTestOptions opt;
    opt.seed = 42;
    CHECK(is_identically_zero(parse("(x+y)^2 - x^2 - 2*x*y - y^2"), opt));
}

TEST_CASE("render round-trips the corpus") {
    const char* corpus[] = {
        "k01 + k1/(1+(x2/W1)^n1) - x1",
        "N*delta*T_I - c*V",
        "lambda - rho*T_U - delta*T_I",
        "-beta*S*(I + A)",
        "gamma*(1 - p)*E - mu2*A",
        "v*sin(theta - phi)/rho",
        "delta*rho/((rho - delta)*exp(rho*tau) + delta)",
        "x^(1/2) + 2^n - 1/(a + b)^2",
        "0.00009*(1 - 0.9*cos(0.0031415926535897932*t))",
    };
    for (const char* s : corpus) {
        Expr e = parse(s);
        CHECK(expr_eq(parse(render(e)), e));
    }
    std::uint64_t rng = 31337;
    for (int i = 0; i < 60; ++i) {
        Expr e = simplify(random_expr(rng, 5));
        CHECK(expr_eq(parse(render(e)), e));
    }
}

TEST_CASE("substitution") {
    Expr e = parse("x^2 + y");
    Expr s = substitute(e, {{"x", parse("a + 1")}});
    CHECK(is_identically_zero(sub(s, parse("a^2 + 2*a + 1 + y"))));
}

TEST_CASE("compiled evaluation agrees with tree walk") {
    std::uint64_t rng = 4242;
    std::map<std::string, int> slots{{"a", 0}, {"b", 1}, {"c", 2}};
    for (int i = 0; i < 30; ++i) {
        Expr e = random_expr(rng, 5);
        CompiledExpr ce(e, slots);
        double vars[3] = {0.7, 1.3, 0.9};
        std::map<std::string, double> pt{{"a", 0.7}, {"b", 1.3}, {"c", 0.9}};
        try {
            double ref = eval_at(e, pt);
            CHECK(ce.eval(vars) == doctest::Approx(ref).epsilon(1e-12));
        } catch (const Error&) {
        }
    }
}
