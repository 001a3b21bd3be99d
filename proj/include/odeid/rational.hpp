#pragma once

#include <gmpxx.h>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace odeid {

// Exact rational scalar. Thin alias over GMP's mpq_class; always kept in
// canonical form (lowest terms, positive denominator).
using Rational = mpq_class;

inline Rational make_rational(long num, long den = 1) {
    if (den == 0) throw std::invalid_argument("rational with zero denominator");
    Rational q(num, den);
    q.canonicalize();
    return q;
}

inline bool rat_is_integer(const Rational& q) { return q.get_den() == 1; }

// Fits in long? (used for small integer exponents)
inline bool rat_fits_long(const Rational& q) {
    return rat_is_integer(q) && q.get_num().fits_slong_p();
}

inline long rat_to_long(const Rational& q) { return q.get_num().get_si(); }

inline double rat_to_double(const Rational& q) { return q.get_d(); }

inline Rational rat_pow(const Rational& base, long k) {
    if (k == 0) return Rational(1);
    mpz_class num = base.get_num(), den = base.get_den();
    if (k < 0) {
        if (num == 0) throw std::domain_error("0 raised to negative power");
        std::swap(num, den);
        k = -k;
    }
    mpz_class pn, pd;
    mpz_pow_ui(pn.get_mpz_t(), num.get_mpz_t(), static_cast<unsigned long>(k));
    mpz_pow_ui(pd.get_mpz_t(), den.get_mpz_t(), static_cast<unsigned long>(k));
    Rational r(pn, pd);
    r.canonicalize();
    return r;
}

// Parses "p/q", integer, plain decimal ("0.108") or scientific ("9e-5")
// into an exact rational.
Rational rat_parse(const std::string& text);

std::string rat_to_string(const Rational& q);

}  // namespace odeid
