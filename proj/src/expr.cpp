#include "odeid/expr.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace odeid {

namespace {

struct MutableNode : ExprNode {
    bool canonical = false;
};

const MutableNode* as_mut(const ExprNode* n) { return static_cast<const MutableNode*>(n); }

std::uint64_t fnv_mix(std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
}

std::uint64_t hash_string(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

Expr make_node_impl(Kind k, Rational value, std::string name, std::vector<Expr> kids, bool canonical) {
    auto n = std::make_shared<MutableNode>();
    n->kind = k;
    n->value = std::move(value);
    n->name = std::move(name);
    n->kids = std::move(kids);
    n->canonical = canonical;
    std::uint64_t h = fnv_mix(0xabcd1234, static_cast<std::uint64_t>(k));
    std::size_t count = 1;
    switch (k) {
        case Kind::Rational:
            h = fnv_mix(h, hash_string(n->value.get_str()));
            break;
        case Kind::Var:
            h = fnv_mix(h, hash_string(n->name));
            break;
        default:
            for (const Expr& kid : n->kids) {
                h = fnv_mix(h, kid.hash());
                count += kid.node_count();
            }
            break;
    }
    n->hash = h;
    n->node_count = count;
    return Expr(std::move(n));
}

}  // namespace

bool kind_is_function(Kind k) {
    return k == Kind::Sin || k == Kind::Cos || k == Kind::Log || k == Kind::Exp;
}

Expr::Expr() { *this = make_rational(Rational(0)); }

Expr make_rational(const Rational& q) {
    Rational v = q;
    v.canonicalize();
    return make_node_impl(Kind::Rational, std::move(v), {}, {}, true);
}

Expr make_rational_ll(long num, long den) { return make_rational(odeid::make_rational(num, den)); }

Expr make_var(const std::string& name) { return make_node_impl(Kind::Var, Rational(0), name, {}, true); }

Expr make_node(Kind k, std::vector<Expr> kids) {
    return make_node_impl(k, Rational(0), {}, std::move(kids), false);
}

int expr_cmp(const Expr& a, const Expr& b) {
    if (a.raw() == b.raw()) return 0;
    if (a.kind() != b.kind()) return a.kind() < b.kind() ? -1 : 1;
    switch (a.kind()) {
        case Kind::Rational: {
            int c = mpq_cmp(a.rat().get_mpq_t(), b.rat().get_mpq_t());
            return c < 0 ? -1 : (c > 0 ? 1 : 0);
        }
        case Kind::Var:
            return a.var_name().compare(b.var_name()) < 0 ? -1
                 : (a.var_name() == b.var_name() ? 0 : 1);
        default: {
            const auto& ka = a.kids();
            const auto& kb = b.kids();
            if (ka.size() != kb.size()) return ka.size() < kb.size() ? -1 : 1;
            for (std::size_t i = 0; i < ka.size(); ++i) {
                int c = expr_cmp(ka[i], kb[i]);
                if (c != 0) return c;
            }
            return 0;
        }
    }
}

bool expr_eq(const Expr& a, const Expr& b) {
    if (a.raw() == b.raw()) return true;
    if (a.hash() != b.hash() || a.node_count() != b.node_count()) return false;
    return expr_cmp(a, b) == 0;
}

// ---------------------------------------------------------------------------
// Canonicalization. The normal form is an expanded sum of terms, each term a
// rational coefficient times a product of distinct factors base^exponent.
// ---------------------------------------------------------------------------

namespace {

struct FactorRep {
    Expr base;
    Expr exp;  // canonical, never 0 or missing
};

struct Term {
    Rational coeff;
    std::vector<FactorRep> mono;  // sorted by base, bases unique
};

using SumForm = std::vector<Term>;  // sorted by monomial, monomials unique

constexpr std::size_t kExpandGuard = 50000;

int mono_cmp(const std::vector<FactorRep>& a, const std::vector<FactorRep>& b) {
    // Empty monomial (pure constant) sorts last.
    if (a.empty() || b.empty()) {
        if (a.empty() && b.empty()) return 0;
        return a.empty() ? 1 : -1;
    }
    std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        int c = expr_cmp(a[i].base, b[i].base);
        if (c != 0) return c;
        c = expr_cmp(a[i].exp, b[i].exp);
        if (c != 0) return c;
    }
    if (a.size() != b.size()) return a.size() < b.size() ? -1 : 1;
    return 0;
}

Expr simp(const Expr& e);
Expr present(const SumForm& sf);
Expr simp_pow(const Expr& base, const Expr& exponent);
SumForm sf_factor(Expr base, Expr exp);
SumForm factor_of_sum(const SumForm& bf, const Expr& exponent);

Expr minus_one_expr() { return make_rational(Rational(-1)); }

// Merge a factor base^exp into a term, folding rational^integer into the
// coefficient and dropping exponent zero.
void term_push_factor(Term& t, const Expr& base, const Expr& exp) {
    if (exp.is_zero()) return;
    if (base.is_rational()) {
        if (base.rat() == 1) return;
        if (exp.is_rational() && rat_fits_long(exp.rat())) {
            long k = rat_to_long(exp.rat());
            if (std::labs(k) <= 512) {
                t.coeff *= rat_pow(base.rat(), k);
                return;
            }
        }
    }
    auto it = std::lower_bound(t.mono.begin(), t.mono.end(), base, [](const FactorRep& f, const Expr& b) {
        return expr_cmp(f.base, b) < 0;
    });
    if (it != t.mono.end() && expr_eq(it->base, base)) {
        Expr merged = simp(make_node(Kind::Sum, {it->exp, exp}));
        if (merged.is_zero()) {
            t.mono.erase(it);
        } else if (base.is_rational() && merged.is_rational() && rat_fits_long(merged.rat()) &&
                   std::labs(rat_to_long(merged.rat())) <= 512) {
            t.coeff *= rat_pow(base.rat(), rat_to_long(merged.rat()));
            t.mono.erase(it);
        } else {
            it->exp = merged;
        }
    } else {
        t.mono.insert(it, FactorRep{base, exp});
    }
}

Term term_mul(const Term& a, const Term& b) {
    Term r;
    r.coeff = a.coeff * b.coeff;
    r.mono = a.mono;
    for (const FactorRep& f : b.mono) term_push_factor(r, f.base, f.exp);
    return r;
}

void sf_push_term(SumForm& sf, Term t) {
    if (t.coeff == 0) return;
    auto it = std::lower_bound(sf.begin(), sf.end(), t.mono, [](const Term& a, const std::vector<FactorRep>& m) {
        return mono_cmp(a.mono, m) < 0;
    });
    if (it != sf.end() && mono_cmp(it->mono, t.mono) == 0) {
        it->coeff += t.coeff;
        if (it->coeff == 0) sf.erase(it);
    } else {
        sf.insert(it, std::move(t));
    }
}

SumForm sf_add(const SumForm& a, const SumForm& b) {
    SumForm r = a;
    for (const Term& t : b) sf_push_term(r, t);
    return r;
}

bool sf_equal(const SumForm& a, const SumForm& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].coeff != b[i].coeff) return false;
        if (mono_cmp(a[i].mono, b[i].mono) != 0) return false;
        for (std::size_t f = 0; f < a[i].mono.size(); ++f)
            if (!expr_eq(a[i].mono[f].base, b[i].mono[f].base) ||
                !expr_eq(a[i].mono[f].exp, b[i].mono[f].exp))
                return false;
    }
    return true;
}

SumForm sf_mul(const SumForm& a, const SumForm& b) {
    if (a.size() * b.size() > kExpandGuard) throw ExpressionTooLarge(a.size() * b.size());
    // keep repeated sum factors folded as powers so recurring denominators
    // and squares share one spelling
    if (a.size() > 1 && b.size() > 1 && sf_equal(a, b)) {
        return factor_of_sum(a, make_rational(Rational(2)));
    }
    if (a.size() == 1 && b.size() > 1) {
        Expr xb = present(b);
        for (std::size_t f = 0; f < a[0].mono.size(); ++f) {
            if (expr_eq(a[0].mono[f].base, xb)) {
                Term nt;
                nt.coeff = a[0].coeff;
                for (std::size_t g = 0; g < a[0].mono.size(); ++g)
                    if (g != f) nt.mono.push_back(a[0].mono[g]);
                term_push_factor(nt, xb, simp(make_node(Kind::Sum, {a[0].mono[f].exp,
                                                                    make_rational(Rational(1))})));
                SumForm r;
                sf_push_term(r, std::move(nt));
                return r;
            }
        }
    }
    if (b.size() == 1 && a.size() > 1) return sf_mul(b, a);
    SumForm r;
    for (const Term& ta : a)
        for (const Term& tb : b) sf_push_term(r, term_mul(ta, tb));
    return r;
}

SumForm sf_negate(SumForm sf) {
    for (Term& t : sf) t.coeff = -t.coeff;
    return sf;
}

SumForm sf_const(const Rational& q) {
    SumForm sf;
    if (q != 0) sf.push_back(Term{q, {}});
    return sf;
}

SumForm sf_factor(Expr base, Expr exp) {
    Term t;
    t.coeff = 1;
    term_push_factor(t, base, exp);
    SumForm sf;
    sf_push_term(sf, std::move(t));
    return sf;
}

// (c * F1^e1...Fk^ek * primitive_sum)^exponent with the content pulled out of
// the sum so the surviving atom is primitive (gcd-free across its terms).
SumForm factor_of_sum(const SumForm& bfIn, const Expr& exponent) {
    SumForm bf = bfIn;
    // rational content: gcd of numerators / lcm of denominators, signed by
    // the first term
    Rational num_gcd(0);
    mpz_class den_lcm(1);
    std::map<std::size_t, Rational> min_exp;  // index into factor key list
    std::vector<std::pair<Expr, Rational>> common;  // (base, min exponent)
    bool first = true;
    for (const Term& t : bf) {
        num_gcd = Rational(gcd(abs(t.coeff.get_num()), num_gcd.get_num()));
        den_lcm = lcm(t.coeff.get_den(), den_lcm);
        std::vector<std::pair<Expr, Rational>> present_factors;
        for (const FactorRep& f : t.mono)
            if (f.exp.is_rational() && f.exp.rat() > 0) present_factors.emplace_back(f.base, f.exp.rat());
        if (first) {
            common = present_factors;
            first = false;
        } else {
            std::vector<std::pair<Expr, Rational>> kept;
            for (auto& [cb, ce] : common) {
                for (auto& [pb, pe] : present_factors) {
                    if (expr_eq(cb, pb)) {
                        kept.emplace_back(cb, std::min(ce, pe));
                        break;
                    }
                }
            }
            common.swap(kept);
        }
        if (num_gcd == 1 && common.empty()) break;
    }
    Rational content = num_gcd / Rational(den_lcm);
    if (content == 0) content = 1;
    // the sign is folded out only when the exponent folds it exactly
    const bool int_exp = exponent.is_rational() && rat_is_integer(exponent.rat());
    if (int_exp && bf.front().coeff < 0) content = -content;
    const bool strip_rational = content != 1;
    if (strip_rational || !common.empty()) {
        Rational inv = 1 / content;
        for (Term& t : bf) {
            t.coeff *= inv;
            for (auto& [cb, ce] : common) {
                auto it = std::lower_bound(t.mono.begin(), t.mono.end(), cb,
                                           [](const FactorRep& g, const Expr& b2) {
                                               return expr_cmp(g.base, b2) < 0;
                                           });
                Rational ne = it->exp.rat() - ce;
                if (ne == 0) {
                    t.mono.erase(it);
                } else {
                    it->exp = make_rational(ne);
                }
            }
        }
        std::sort(bf.begin(), bf.end(),
                  [](const Term& x, const Term& y) { return mono_cmp(x.mono, y.mono) < 0; });
    }
    Term out;
    out.coeff = 1;
    if (strip_rational) {
        if (exponent.is_rational() && rat_fits_long(exponent.rat()) &&
            std::labs(rat_to_long(exponent.rat())) <= 512) {
            out.coeff = rat_pow(content, rat_to_long(exponent.rat()));
        } else if (content == -1) {
            term_push_factor(out, make_rational(Rational(-1)), exponent);
        } else {
            term_push_factor(out, make_rational(content), exponent);
        }
    }
    for (auto& [cb, ce] : common) {
        Expr mergedExp = simp(make_node(Kind::Product, {make_rational(ce), exponent}));
        term_push_factor(out, cb, mergedExp);
    }
    term_push_factor(out, present(bf), exponent);
    SumForm sf;
    sf_push_term(sf, std::move(out));
    return sf;
}

// Reads a canonical expression back into sum-of-terms form.
SumForm to_sumform(const Expr& e) {
    switch (e.kind()) {
        case Kind::Rational:
            return sf_const(e.rat());
        case Kind::Sum: {
            SumForm r;
            for (const Expr& kid : e.kids()) r = sf_add(r, to_sumform(kid));
            return r;
        }
        case Kind::Negate:
            return sf_negate(to_sumform(e.kid(0)));
        case Kind::Product: {
            Term t;
            t.coeff = 1;
            for (const Expr& kid : e.kids()) {
                if (kid.is_rational()) {
                    t.coeff *= kid.rat();
                } else if (kid.kind() == Kind::Power) {
                    term_push_factor(t, kid.kid(0), kid.kid(1));
                } else if (kid.kind() == Kind::Reciprocal) {
                    term_push_factor(t, kid.kid(0), minus_one_expr());
                } else {
                    term_push_factor(t, kid, make_rational(Rational(1)));
                }
            }
            SumForm sf;
            sf_push_term(sf, std::move(t));
            return sf;
        }
        case Kind::Power:
            return sf_factor(e.kid(0), e.kid(1));
        case Kind::Reciprocal:
            return sf_factor(e.kid(0), minus_one_expr());
        default:
            return sf_factor(e, make_rational(Rational(1)));
    }
}

Expr present_factor(const FactorRep& f) {
    if (f.exp.is_one()) return f.base;
    if (f.exp.is_rational() && f.exp.rat() == -1) {
        auto n = make_node(Kind::Reciprocal, {f.base});
        return n;
    }
    return make_node(Kind::Power, {f.base, f.exp});
}

Expr mark_canonical(Expr e);

Expr present_term(const Term& t) {
    std::vector<Expr> factors;
    factors.reserve(t.mono.size() + 1);
    for (const FactorRep& f : t.mono) factors.push_back(mark_canonical(present_factor(f)));
    if (t.mono.empty()) return make_rational(t.coeff);
    Expr monoExpr;
    if (factors.size() == 1) {
        monoExpr = factors[0];
    } else {
        monoExpr = mark_canonical(make_node(Kind::Product, factors));
    }
    if (t.coeff == 1) return monoExpr;
    if (t.coeff == -1) return mark_canonical(make_node(Kind::Negate, {monoExpr}));
    std::vector<Expr> withCoeff;
    withCoeff.push_back(make_rational(t.coeff));
    if (factors.size() == 1) {
        withCoeff.push_back(factors[0]);
    } else {
        withCoeff.insert(withCoeff.end(), factors.begin(), factors.end());
    }
    return mark_canonical(make_node(Kind::Product, withCoeff));
}

Expr present(const SumForm& sf) {
    if (sf.empty()) return make_rational(Rational(0));
    if (sf.size() == 1) return present_term(sf[0]);
    std::vector<Expr> terms;
    terms.reserve(sf.size());
    for (const Term& t : sf) terms.push_back(present_term(t));
    return mark_canonical(make_node(Kind::Sum, terms));
}

Expr mark_canonical(Expr e) {
    const_cast<MutableNode*>(as_mut(e.raw()))->canonical = true;
    return e;
}

bool is_canonical(const Expr& e) { return as_mut(e.raw())->canonical; }

// base and exponent are canonical
Expr simp_pow(const Expr& base, const Expr& exponent) {
    if (exponent.is_zero()) return make_rational(Rational(1));
    if (exponent.is_one()) return base;
    if (base.is_rational()) {
        if (base.rat() == 1) return make_rational(Rational(1));
        if (base.rat() == 0) {
            if (exponent.is_rational() && exponent.rat() > 0) return make_rational(Rational(0));
            return mark_canonical(make_node(Kind::Power, {base, exponent}));
        }
    }
    // (c * prod base_i^e_i)^p distributes; bases are sampled positive so the
    // split is generically sound.
    SumForm bf = to_sumform(base);
    if (bf.size() == 1) {
        const Term& t = bf[0];
        Term out;
        out.coeff = 1;
        if (t.coeff != 1) {
            if (exponent.is_rational() && rat_fits_long(exponent.rat()) &&
                std::labs(rat_to_long(exponent.rat())) <= 512) {
                out.coeff = rat_pow(t.coeff, rat_to_long(exponent.rat()));
            } else if (t.coeff == -1) {
                term_push_factor(out, make_rational(Rational(-1)), exponent);
            } else {
                term_push_factor(out, make_rational(t.coeff), exponent);
            }
        }
        for (const FactorRep& f : t.mono) {
            Expr mergedExp = simp(make_node(Kind::Product, {f.exp, exponent}));
            term_push_factor(out, f.base, mergedExp);
        }
        SumForm sf;
        sf_push_term(sf, std::move(out));
        return present(sf);
    }
    // sum base: powers of sums stay folded (base^k is a single factor, so
    // reciprocal powers collect against it); the base is made primitive first
    return present(factor_of_sum(bf, exponent));
}

Expr simp_function(Kind k, const Expr& argIn) {
    Expr arg = argIn;
    if (arg.is_rational()) {
        const Rational& q = arg.rat();
        if (q == 0) {
            switch (k) {
                case Kind::Sin: return make_rational(Rational(0));
                case Kind::Cos: return make_rational(Rational(1));
                case Kind::Exp: return make_rational(Rational(1));
                case Kind::Log: break;  // log 0: leave for evaluation to reject
                default: break;
            }
        }
        if (q == 1 && k == Kind::Log) return make_rational(Rational(0));
    }
    if (k == Kind::Sin || k == Kind::Cos) {
        // Canonical argument sign: sin odd, cos even.
        Expr negArg = present(sf_negate(to_sumform(arg)));
        if (expr_cmp(negArg, arg) < 0) {
            Expr inner = mark_canonical(make_node(k, {negArg}));
            if (k == Kind::Cos) return inner;
            return present(sf_negate(sf_factor(inner, make_rational(Rational(1)))));
        }
    }
    return mark_canonical(make_node(k, {arg}));
}

Expr simp(const Expr& e) {
    if (is_canonical(e)) return e;
    switch (e.kind()) {
        case Kind::Rational:
            return make_rational(e.rat());
        case Kind::Var:
            return make_var(e.var_name());
        case Kind::Sum: {
            SumForm acc;
            for (const Expr& kid : e.kids()) acc = sf_add(acc, to_sumform(simp(kid)));
            return present(acc);
        }
        case Kind::Product: {
            SumForm acc = sf_const(Rational(1));
            for (const Expr& kid : e.kids()) acc = sf_mul(acc, to_sumform(simp(kid)));
            return present(acc);
        }
        case Kind::Negate:
            return present(sf_negate(to_sumform(simp(e.kid(0)))));
        case Kind::Reciprocal:
            return simp_pow(simp(e.kid(0)), minus_one_expr());
        case Kind::Power:
            return simp_pow(simp(e.kid(0)), simp(e.kid(1)));
        default:
            return simp_function(e.kind(), simp(e.kid(0)));
    }
}

}  // namespace

Expr simplify(const Expr& e) { return simp(e); }

Expr add(const std::vector<Expr>& terms) { return simp(make_node(Kind::Sum, terms)); }
Expr add2(const Expr& a, const Expr& b) { return add({a, b}); }
Expr sub(const Expr& a, const Expr& b) { return add({a, simp(make_node(Kind::Negate, {b}))}); }
Expr mul(const std::vector<Expr>& factors) { return simp(make_node(Kind::Product, factors)); }
Expr mul2(const Expr& a, const Expr& b) { return mul({a, b}); }
Expr div(const Expr& a, const Expr& b) { return mul({a, simp(make_node(Kind::Reciprocal, {b}))}); }
Expr neg(const Expr& a) { return simp(make_node(Kind::Negate, {a})); }
Expr recip(const Expr& a) { return simp(make_node(Kind::Reciprocal, {a})); }
Expr pow(const Expr& base, const Expr& exponent) { return simp(make_node(Kind::Power, {base, exponent})); }
Expr pow_int(const Expr& base, long k) { return pow(base, make_rational_ll(k)); }
Expr fn(Kind k, const Expr& arg) { return simp(make_node(k, {arg})); }
Expr zero() { return make_rational(Rational(0)); }
Expr one() { return make_rational(Rational(1)); }

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

Expr differentiate(const Expr& eIn, const std::string& var) {
    Expr e = simplify(eIn);
    switch (e.kind()) {
        case Kind::Rational:
            return zero();
        case Kind::Var:
            return e.var_name() == var ? one() : zero();
        case Kind::Sum: {
            std::vector<Expr> parts;
            for (const Expr& kid : e.kids()) parts.push_back(differentiate(kid, var));
            return add(parts);
        }
        case Kind::Product: {
            std::vector<Expr> parts;
            for (std::size_t i = 0; i < e.kids().size(); ++i) {
                std::vector<Expr> factors = e.kids();
                factors[i] = differentiate(factors[i], var);
                parts.push_back(mul(factors));
            }
            return add(parts);
        }
        case Kind::Negate:
            return neg(differentiate(e.kid(0), var));
        case Kind::Reciprocal: {
            const Expr& u = e.kid(0);
            return neg(div(differentiate(u, var), pow_int(u, 2)));
        }
        case Kind::Power: {
            const Expr& a = e.kid(0);
            const Expr& b = e.kid(1);
            Expr da = differentiate(a, var);
            Expr db = differentiate(b, var);
            if (db.is_zero()) {
                // b constant w.r.t. var: b * a^(b-1) * a'
                return mul({b, pow(a, sub(b, one())), da});
            }
            // d a^b = a^b (b' log a + b a'/a)
            return mul({e, add2(mul2(db, fn(Kind::Log, a)), mul({b, da, recip(a)}))});
        }
        case Kind::Sin:
            return mul2(fn(Kind::Cos, e.kid(0)), differentiate(e.kid(0), var));
        case Kind::Cos:
            return neg(mul2(fn(Kind::Sin, e.kid(0)), differentiate(e.kid(0), var)));
        case Kind::Log:
            return div(differentiate(e.kid(0), var), e.kid(0));
        case Kind::Exp:
            return mul2(e, differentiate(e.kid(0), var));
    }
    return zero();
}

// ---------------------------------------------------------------------------
// Substitution, variables
// ---------------------------------------------------------------------------

namespace {
Expr substitute_raw(const Expr& e, const std::map<std::string, Expr>& bindings) {
    switch (e.kind()) {
        case Kind::Rational:
            return e;
        case Kind::Var: {
            auto it = bindings.find(e.var_name());
            return it == bindings.end() ? e : it->second;
        }
        default: {
            std::vector<Expr> kids;
            kids.reserve(e.kids().size());
            bool changed = false;
            for (const Expr& kid : e.kids()) {
                Expr s = substitute_raw(kid, bindings);
                changed = changed || s.raw() != kid.raw();
                kids.push_back(std::move(s));
            }
            if (!changed) return e;
            return make_node(e.kind(), std::move(kids));
        }
    }
}
}  // namespace

Expr substitute(const Expr& e, const std::map<std::string, Expr>& bindings) {
    if (bindings.empty()) return simplify(e);
    return simplify(substitute_raw(e, bindings));
}

void collect_free_vars(const Expr& e, std::set<std::string>& out) {
    if (e.kind() == Kind::Var) {
        out.insert(e.var_name());
        return;
    }
    for (const Expr& kid : e.kids()) collect_free_vars(kid, out);
}

std::set<std::string> free_vars(const Expr& e) {
    std::set<std::string> out;
    collect_free_vars(e, out);
    return out;
}

bool depends_on(const Expr& e, const std::string& var) {
    if (e.kind() == Kind::Var) return e.var_name() == var;
    for (const Expr& kid : e.kids())
        if (depends_on(kid, var)) return true;
    return false;
}

bool is_rational_evaluable(const Expr& e) {
    switch (e.kind()) {
        case Kind::Rational:
        case Kind::Var:
            return true;
        case Kind::Power:
            if (!(e.kid(1).is_rational() && rat_is_integer(e.kid(1).rat()))) return false;
            return is_rational_evaluable(e.kid(0));
        case Kind::Sin:
        case Kind::Cos:
        case Kind::Log:
        case Kind::Exp:
            return false;
        default:
            for (const Expr& kid : e.kids())
                if (!is_rational_evaluable(kid)) return false;
            return true;
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

Rational evaluate_exact(const Expr& e, const std::map<std::string, Rational>& point) {
    switch (e.kind()) {
        case Kind::Rational:
            return e.rat();
        case Kind::Var: {
            auto it = point.find(e.var_name());
            if (it == point.end()) throw Error("unbound variable '" + e.var_name() + "'");
            return it->second;
        }
        case Kind::Sum: {
            Rational acc(0);
            for (const Expr& kid : e.kids()) acc += evaluate_exact(kid, point);
            return acc;
        }
        case Kind::Product: {
            Rational acc(1);
            for (const Expr& kid : e.kids()) acc *= evaluate_exact(kid, point);
            return acc;
        }
        case Kind::Negate:
            return -evaluate_exact(e.kid(0), point);
        case Kind::Reciprocal: {
            Rational v = evaluate_exact(e.kid(0), point);
            if (v == 0) throw DivisionByZero();
            return 1 / v;
        }
        case Kind::Power: {
            Rational ev = evaluate_exact(e.kid(1), point);
            if (!rat_fits_long(ev)) throw DomainError("non-integer exponent in exact mode");
            long k = rat_to_long(ev);
            Rational bv = evaluate_exact(e.kid(0), point);
            if (bv == 0 && k < 0) throw DivisionByZero();
            if (std::labs(k) > 4096) throw DomainError("exponent too large for exact mode");
            return rat_pow(bv, k);
        }
        default:
            throw DomainError("transcendental function in exact mode");
    }
}

double evaluate_double(const Expr& e, const std::map<std::string, double>& point) {
    double v = 0;
    switch (e.kind()) {
        case Kind::Rational:
            return rat_to_double(e.rat());
        case Kind::Var: {
            auto it = point.find(e.var_name());
            if (it == point.end()) throw Error("unbound variable '" + e.var_name() + "'");
            return it->second;
        }
        case Kind::Sum: {
            double acc = 0;
            for (const Expr& kid : e.kids()) acc += evaluate_double(kid, point);
            v = acc;
            break;
        }
        case Kind::Product: {
            double acc = 1;
            for (const Expr& kid : e.kids()) acc *= evaluate_double(kid, point);
            v = acc;
            break;
        }
        case Kind::Negate:
            v = -evaluate_double(e.kid(0), point);
            break;
        case Kind::Reciprocal: {
            double d = evaluate_double(e.kid(0), point);
            if (d == 0.0) throw DivisionByZero();
            v = 1.0 / d;
            break;
        }
        case Kind::Power: {
            double b = evaluate_double(e.kid(0), point);
            double p = evaluate_double(e.kid(1), point);
            if (b == 0.0 && p < 0) throw DivisionByZero();
            if (b < 0 && p != std::floor(p)) throw DomainError("negative base, fractional exponent");
            v = std::pow(b, p);
            break;
        }
        case Kind::Sin:
            v = std::sin(evaluate_double(e.kid(0), point));
            break;
        case Kind::Cos:
            v = std::cos(evaluate_double(e.kid(0), point));
            break;
        case Kind::Log: {
            double d = evaluate_double(e.kid(0), point);
            if (d <= 0) throw DomainError("log of non-positive value");
            v = std::log(d);
            break;
        }
        case Kind::Exp:
            v = std::exp(evaluate_double(e.kid(0), point));
            break;
    }
    if (!std::isfinite(v)) throw DomainError("non-finite value");
    return v;
}

std::map<std::string, double> EvaluationPoint::as_double() const {
    std::map<std::string, double> out;
    for (const auto& [k, q] : values) out[k] = rat_to_double(q);
    return out;
}

std::uint64_t rng_next(std::uint64_t& state) {
    // splitmix64
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Rational draw_rational(std::uint64_t& rng_state) {
    long num = 1 + static_cast<long>(rng_next(rng_state) % 97);
    long den = 1 + static_cast<long>(rng_next(rng_state) % 97);
    Rational q(num, den);
    q.canonicalize();
    return q;
}

bool is_identically_zero(const Expr& eIn, const ZeroTestOptions& opt) {
    Expr e = simplify(eIn);
    if (e.is_zero()) return true;
    if (e.is_rational()) return false;
    std::set<std::string> vars = free_vars(e);
    bool exact = is_rational_evaluable(e);
    std::uint64_t rng = opt.seed;
    int successes = 0;
    int attempts = 0;
    const int max_attempts = 50 * opt.trials;
    while (successes < opt.trials && attempts < max_attempts) {
        ++attempts;
        try {
            if (exact) {
                std::map<std::string, Rational> pt;
                for (const auto& v : vars) pt[v] = draw_rational(rng);
                if (evaluate_exact(e, pt) != 0) return false;
            } else {
                std::map<std::string, double> pt;
                for (const auto& v : vars) pt[v] = rat_to_double(draw_rational(rng));
                if (std::fabs(evaluate_double(e, pt)) >= opt.float_tol) return false;
            }
            ++successes;
        } catch (const DivisionByZero&) {
        } catch (const DomainError&) {
        }
    }
    if (successes < opt.trials) throw InconclusiveSingular();
    return true;
}

bool is_identically_zero(const Expr& e, int trials, std::uint64_t seed) {
    ZeroTestOptions opt;
    opt.trials = trials;
    opt.seed = seed;
    return is_identically_zero(e, opt);
}

void check_node_cap(const Expr& e, std::size_t cap) {
    if (e.node_count() > cap) throw ExpressionTooLarge(e.node_count());
}

std::optional<Expr> divide_exact(const Expr& aIn, const Expr& bIn) {
    Expr a = simplify(aIn);
    Expr b = simplify(bIn);
    if (b.is_zero()) return std::nullopt;
    if (a.is_zero()) return a;
    if (b.is_rational()) return mul2(a, make_rational(1 / b.rat()));
    SumForm A = to_sumform(a);
    SumForm B = to_sumform(b);
    // the division loop needs a true monomial order: graded lex over a fixed
    // base list (rational exponents only)
    std::vector<Expr> bases;
    auto collect_bases = [&](const SumForm& sf) {
        for (const auto& t : sf)
            for (const auto& f : t.mono) {
                if (!f.exp.is_rational()) return false;
                auto it = std::lower_bound(bases.begin(), bases.end(), f.base,
                                           [](const Expr& x, const Expr& y) {
                                               return expr_cmp(x, y) < 0;
                                           });
                if (it == bases.end() || !expr_eq(*it, f.base)) bases.insert(it, f.base);
            }
        return true;
    };
    if (!collect_bases(A) || !collect_bases(B)) return std::nullopt;
    const std::size_t nb = bases.size();
    auto expvec = [&](const Term& t) {
        std::vector<Rational> v(nb, Rational(0));
        for (const auto& f : t.mono) {
            auto it = std::lower_bound(bases.begin(), bases.end(), f.base,
                                       [](const Expr& x, const Expr& y) {
                                           return expr_cmp(x, y) < 0;
                                       });
            v[static_cast<std::size_t>(it - bases.begin())] = f.exp.rat();
        }
        return v;
    };
    struct GrlexLess {
        bool operator()(const std::vector<Rational>& x, const std::vector<Rational>& y) const {
            Rational dx(0), dy(0);
            for (const auto& e : x) dx += e;
            for (const auto& e : y) dy += e;
            if (dx != dy) return dx < dy;
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x[i] != y[i]) return x[i] < y[i];
            return false;
        }
    };
    std::map<std::vector<Rational>, Rational, GrlexLess> rem;
    for (const auto& t : A) {
        auto v = expvec(t);
        rem[v] += t.coeff;
        if (rem[v] == 0) rem.erase(v);
    }
    std::vector<std::pair<std::vector<Rational>, Rational>> divisor;
    for (const auto& t : B) divisor.emplace_back(expvec(t), t.coeff);
    std::sort(divisor.begin(), divisor.end(),
              [](const auto& x, const auto& y) { return GrlexLess{}(y.first, x.first); });
    const auto& lead_b = divisor.front();

    std::vector<std::pair<std::vector<Rational>, Rational>> quotient;
    int guard = 0;
    while (!rem.empty()) {
        if (++guard > 20000) return std::nullopt;
        auto lead_a = *rem.rbegin();
        std::vector<Rational> qv(nb);
        for (std::size_t i = 0; i < nb; ++i) {
            qv[i] = lead_a.first[i] - lead_b.first[i];
            if (qv[i] < 0) return std::nullopt;
        }
        Rational qc = lead_a.second / lead_b.second;
        quotient.emplace_back(qv, qc);
        for (const auto& [bv, bc] : divisor) {
            std::vector<Rational> mv(nb);
            for (std::size_t i = 0; i < nb; ++i) mv[i] = qv[i] + bv[i];
            auto it = rem.find(mv);
            Rational nc = (it == rem.end() ? Rational(0) : it->second) - qc * bc;
            if (nc == 0) {
                if (it != rem.end()) rem.erase(it);
            } else if (it == rem.end()) {
                rem.emplace(std::move(mv), nc);
            } else {
                it->second = nc;
            }
        }
    }
    // rebuild the quotient expression
    std::vector<Expr> terms;
    for (const auto& [v, c] : quotient) {
        std::vector<Expr> factors{make_rational(c)};
        for (std::size_t i = 0; i < nb; ++i)
            if (v[i] != 0) factors.push_back(pow(bases[i], make_rational(v[i])));
        terms.push_back(mul(factors));
    }
    return add(terms);
}

// ---------------------------------------------------------------------------
// Polynomial gcd (primitive pseudo-remainder sequence over atomic factors)
// ---------------------------------------------------------------------------

namespace {

// atoms = distinct factor bases; integer exponents required
bool collect_atoms(const Expr& e, std::vector<Expr>& atoms) {
    SumForm sf = to_sumform(simplify(e));
    for (const auto& t : sf)
        for (const auto& f : t.mono) {
            if (!f.exp.is_rational() || !rat_is_integer(f.exp.rat()) || f.exp.rat() < 0)
                return false;
            auto it = std::lower_bound(atoms.begin(), atoms.end(), f.base,
                                       [](const Expr& x, const Expr& y) {
                                           return expr_cmp(x, y) < 0;
                                       });
            if (it == atoms.end() || !expr_eq(*it, f.base)) atoms.insert(it, f.base);
        }
    return true;
}

long degree_in(const Expr& e, const Expr& atom) {
    SumForm sf = to_sumform(e);
    long deg = 0;
    for (const auto& t : sf)
        for (const auto& f : t.mono)
            if (expr_eq(f.base, atom) && f.exp.is_rational() && rat_fits_long(f.exp.rat()))
                deg = std::max(deg, rat_to_long(f.exp.rat()));
    return deg;
}

// e as a univariate polynomial in `atom` with Expr coefficients
std::map<long, Expr> unipoly(const Expr& e, const Expr& atom) {
    std::map<long, Expr> out;
    SumForm sf = to_sumform(e);
    for (const auto& t : sf) {
        long deg = 0;
        Term rest;
        rest.coeff = t.coeff;
        for (const auto& f : t.mono) {
            if (expr_eq(f.base, atom)) {
                deg = rat_to_long(f.exp.rat());
            } else {
                rest.mono.push_back(f);
            }
        }
        SumForm one_term;
        sf_push_term(one_term, rest);
        Expr coeff = present(one_term);
        auto it = out.find(deg);
        out[deg] = it == out.end() ? coeff : add2(it->second, coeff);
        if (out[deg].is_zero()) out.erase(deg);
    }
    return out;
}

long updeg(const std::map<long, Expr>& p) { return p.empty() ? -1 : p.rbegin()->first; }

std::map<long, Expr> upoly_scale(const std::map<long, Expr>& p, const Expr& c, long shift) {
    std::map<long, Expr> out;
    for (const auto& [d, e] : p) {
        Expr v = mul2(c, e);
        if (!v.is_zero()) out[d + shift] = v;
    }
    return out;
}

std::map<long, Expr> upoly_sub(const std::map<long, Expr>& a, const std::map<long, Expr>& b) {
    std::map<long, Expr> out = a;
    for (const auto& [d, e] : b) {
        auto it = out.find(d);
        Expr v = it == out.end() ? neg(e) : sub(it->second, e);
        if (v.is_zero()) {
            if (it != out.end()) out.erase(it);
        } else {
            out[d] = v;
        }
    }
    return out;
}

constexpr std::size_t kGcdSizeCap = 4000;

bool upoly_too_big(const std::map<long, Expr>& p) {
    std::size_t total = 0;
    for (const auto& [d, e] : p) {
        (void)d;
        total += e.node_count();
    }
    return total > kGcdSizeCap;
}

}  // namespace

namespace {
Expr poly_gcd_impl(const Expr& aIn, const Expr& bIn);
}

Expr poly_gcd(const Expr& a, const Expr& b) {
    try {
        return poly_gcd_impl(a, b);
    } catch (const ExpressionTooLarge&) {
        return one();
    }
}

namespace {
Expr poly_gcd_impl(const Expr& aIn, const Expr& bIn) {
    Expr a = simplify(aIn);
    Expr b = simplify(bIn);
    if (a.is_zero()) return b;
    if (b.is_zero()) return a;
    if (a.is_rational() || b.is_rational()) return one();
    if (a.node_count() > kGcdSizeCap || b.node_count() > kGcdSizeCap) return one();
    std::vector<Expr> atomsA, atomsB;
    if (!collect_atoms(a, atomsA) || !collect_atoms(b, atomsB)) return one();
    // shared atoms, pick the one with the smallest max degree
    Expr var;
    long best = -1;
    for (const auto& at : atomsA) {
        bool shared = false;
        for (const auto& bt : atomsB)
            if (expr_eq(at, bt)) shared = true;
        if (!shared) continue;
        long d = std::max(degree_in(a, at), degree_in(b, at));
        if (best < 0 || d < best) {
            best = d;
            var = at;
        }
    }
    if (best < 0) return one();

    auto content = [](const std::map<long, Expr>& p) {
        Expr c = zero();
        for (const auto& [d, e] : p) {
            (void)d;
            c = poly_gcd(c, e);
            if (c.is_one()) break;
        }
        return c.is_zero() ? one() : c;
    };
    auto primitive = [](std::map<long, Expr> p, const Expr& cont) -> std::optional<std::map<long, Expr>> {
        if (cont.is_one()) return p;
        for (auto& [d, e] : p) {
            (void)d;
            auto q = divide_exact(e, cont);
            if (!q) return std::nullopt;
            e = *q;
        }
        return p;
    };

    std::map<long, Expr> A = unipoly(a, var), B = unipoly(b, var);
    Expr contA = content(A), contB = content(B);
    auto pA = primitive(A, contA), pB = primitive(B, contB);
    if (!pA || !pB) return one();
    A = *pA;
    B = *pB;
    if (updeg(A) < updeg(B)) std::swap(A, B);

    int guard = 0;
    while (updeg(B) >= 0) {
        if (++guard > 64) return one();
        // pseudo-remainder of A by B
        std::map<long, Expr> R = A;
        const long db = updeg(B);
        const Expr lb = B.rbegin()->second;
        int inner = 0;
        while (updeg(R) >= db) {
            if (++inner > 256 || upoly_too_big(R)) return one();
            long dr = updeg(R);
            Expr lr = R.rbegin()->second;
            R = upoly_sub(upoly_scale(R, lb, 0), upoly_scale(B, lr, dr - db));
            R.erase(dr);  // exact cancellation of the leading term
        }
        A = std::move(B);
        auto pr = primitive(R, content(R));
        if (!pr) return one();
        B = std::move(*pr);
    }
    // assemble gcd = gcd(contents) * primitive(A)
    Expr g = poly_gcd(contA, contB);
    std::vector<Expr> parts;
    for (const auto& [d, e] : A) {
        Expr term = d == 0 ? e : mul2(e, pow(var, make_rational_ll(d)));
        parts.push_back(term);
    }
    g = mul2(g, add(parts));
    g = simplify(g);
    // safety: both inputs must divide exactly
    if (!divide_exact(a, g) || !divide_exact(b, g)) return one();
    return g;
}
}  // namespace

// ---------------------------------------------------------------------------
// Compiled evaluation
// ---------------------------------------------------------------------------

CompiledExpr::CompiledExpr(const Expr& e, const std::map<std::string, int>& var_slots) {
    struct Walk {
        std::vector<Instr>& prog;
        const std::map<std::string, int>& slots;
        int depth = 0, max_depth = 0;
        void bump(int d) {
            depth += d;
            max_depth = std::max(max_depth, depth);
        }
        void go(const Expr& n) {
            switch (n.kind()) {
                case Kind::Rational:
                    prog.push_back({Op::Const, 0, rat_to_double(n.rat())});
                    bump(1);
                    break;
                case Kind::Var: {
                    auto it = slots.find(n.var_name());
                    if (it == slots.end()) throw Error("unbound variable '" + n.var_name() + "' in compile");
                    prog.push_back({Op::Load, it->second, 0});
                    bump(1);
                    break;
                }
                case Kind::Sum: {
                    for (const Expr& kid : n.kids()) go(kid);
                    prog.push_back({Op::Add, static_cast<int>(n.kids().size()), 0});
                    bump(1 - static_cast<int>(n.kids().size()));
                    break;
                }
                case Kind::Product: {
                    for (const Expr& kid : n.kids()) go(kid);
                    prog.push_back({Op::Mul, static_cast<int>(n.kids().size()), 0});
                    bump(1 - static_cast<int>(n.kids().size()));
                    break;
                }
                case Kind::Negate:
                    go(n.kid(0));
                    prog.push_back({Op::Neg, 0, 0});
                    break;
                case Kind::Reciprocal:
                    go(n.kid(0));
                    prog.push_back({Op::Inv, 0, 0});
                    break;
                case Kind::Power:
                    go(n.kid(0));
                    if (n.kid(1).is_rational() && rat_fits_long(n.kid(1).rat()) &&
                        std::labs(rat_to_long(n.kid(1).rat())) <= 64) {
                        prog.push_back({Op::PowInt, static_cast<int>(rat_to_long(n.kid(1).rat())), 0});
                    } else {
                        go(n.kid(1));
                        prog.push_back({Op::Pow, 0, 0});
                        bump(-1);
                    }
                    break;
                case Kind::Sin:
                    go(n.kid(0));
                    prog.push_back({Op::Sin, 0, 0});
                    break;
                case Kind::Cos:
                    go(n.kid(0));
                    prog.push_back({Op::Cos, 0, 0});
                    break;
                case Kind::Log:
                    go(n.kid(0));
                    prog.push_back({Op::Log, 0, 0});
                    break;
                case Kind::Exp:
                    go(n.kid(0));
                    prog.push_back({Op::Exp, 0, 0});
                    break;
            }
        }
    };
    Walk w{prog_, var_slots};
    w.go(simplify(e));
    stack_.resize(static_cast<std::size_t>(std::max(w.max_depth, 1)));
}

double CompiledExpr::eval(const double* vars) const {
    double* sp = stack_.data();
    std::size_t top = 0;
    for (const Instr& ins : prog_) {
        switch (ins.op) {
            case Op::Const:
                sp[top++] = ins.c;
                break;
            case Op::Load:
                sp[top++] = vars[ins.arg];
                break;
            case Op::Add: {
                double acc = 0;
                for (int i = 0; i < ins.arg; ++i) acc += sp[--top];
                sp[top++] = acc;
                break;
            }
            case Op::Mul: {
                double acc = 1;
                for (int i = 0; i < ins.arg; ++i) acc *= sp[--top];
                sp[top++] = acc;
                break;
            }
            case Op::Neg:
                sp[top - 1] = -sp[top - 1];
                break;
            case Op::Inv:
                sp[top - 1] = 1.0 / sp[top - 1];
                break;
            case Op::PowInt: {
                double b = sp[top - 1];
                long k = ins.arg;
                bool invert = k < 0;
                if (invert) k = -k;
                double r = 1;
                while (k > 0) {
                    if (k & 1) r *= b;
                    b *= b;
                    k >>= 1;
                }
                sp[top - 1] = invert ? 1.0 / r : r;
                break;
            }
            case Op::Pow: {
                double p = sp[--top];
                sp[top - 1] = std::pow(sp[top - 1], p);
                break;
            }
            case Op::Sin:
                sp[top - 1] = std::sin(sp[top - 1]);
                break;
            case Op::Cos:
                sp[top - 1] = std::cos(sp[top - 1]);
                break;
            case Op::Log:
                sp[top - 1] = std::log(sp[top - 1]);
                break;
            case Op::Exp:
                sp[top - 1] = std::exp(sp[top - 1]);
                break;
        }
    }
    return sp[0];
}

}  // namespace odeid
