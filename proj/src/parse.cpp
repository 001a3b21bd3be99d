#include <cctype>
#include <sstream>

#include "odeid/expr.hpp"

namespace odeid {

Rational rat_parse(const std::string& text) {
    // integer, p/q, decimal, or scientific
    auto slash = text.find('/');
    if (slash != std::string::npos) {
        mpz_class num(text.substr(0, slash), 10);
        mpz_class den(text.substr(slash + 1), 10);
        if (den == 0) throw Error("zero denominator in rational literal '" + text + "'");
        Rational q(num, den);
        q.canonicalize();
        return q;
    }
    std::string mantissa = text;
    long exp10 = 0;
    auto epos = text.find_first_of("eE");
    if (epos != std::string::npos) {
        mantissa = text.substr(0, epos);
        exp10 = std::stol(text.substr(epos + 1));
    }
    std::string digits;
    long frac_digits = 0;
    bool seen_dot = false;
    bool negative = false;
    for (char c : mantissa) {
        if (c == '-') {
            negative = true;
        } else if (c == '+') {
        } else if (c == '.') {
            seen_dot = true;
        } else if (std::isdigit(static_cast<unsigned char>(c))) {
            digits += c;
            if (seen_dot) ++frac_digits;
        } else {
            throw Error("bad numeric literal '" + text + "'");
        }
    }
    if (digits.empty()) throw Error("bad numeric literal '" + text + "'");
    mpz_class num(digits, 10);
    if (negative) num = -num;
    long net = exp10 - frac_digits;
    mpz_class scale;
    mpz_ui_pow_ui(scale.get_mpz_t(), 10, static_cast<unsigned long>(std::labs(net)));
    Rational q = net >= 0 ? Rational(num * scale) : Rational(num, scale);
    q.canonicalize();
    return q;
}

std::string rat_to_string(const Rational& q) {
    if (q.get_den() == 1) return q.get_num().get_str();
    return q.get_num().get_str() + "/" + q.get_den().get_str();
}

namespace {

struct Parser {
    const std::string& text;
    std::size_t pos = 0;

    explicit Parser(const std::string& t) : text(t) {}

    void skip_ws() {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    }
    char peek() {
        skip_ws();
        return pos < text.size() ? text[pos] : '\0';
    }
    bool eat(char c) {
        if (peek() == c) {
            ++pos;
            return true;
        }
        return false;
    }
    [[noreturn]] void fail(const std::string& what) { throw SyntaxError(what, pos); }

    Expr parse_expr() {
        bool negate_first = eat('-');
        Expr acc = parse_term();
        if (negate_first) acc = neg(acc);
        for (;;) {
            if (eat('+')) {
                acc = add2(acc, parse_term());
            } else if (eat('-')) {
                acc = sub(acc, parse_term());
            } else {
                return acc;
            }
        }
    }

    Expr parse_term() {
        Expr acc = parse_factor();
        for (;;) {
            if (eat('*')) {
                acc = mul2(acc, parse_factor());
            } else if (eat('/')) {
                acc = div(acc, parse_factor());
            } else {
                return acc;
            }
        }
    }

    Expr parse_factor() {
        Expr base = parse_base();
        if (eat('^')) return pow(base, parse_factor());
        return base;
    }

    Expr parse_base() {
        skip_ws();
        if (pos >= text.size()) fail("unexpected end of expression");
        char c = text[pos];
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_ident();
        if (c == '(') {
            ++pos;
            Expr inner = parse_expr();
            if (!eat(')')) fail("expected ')'");
            return inner;
        }
        fail(std::string("unexpected character '") + c + "'");
    }

    Expr parse_number() {
        std::size_t start = pos;
        while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
        if (pos < text.size() && text[pos] == '.') {
            ++pos;
            while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
        }
        if (pos < text.size() && (text[pos] == 'e' || text[pos] == 'E')) {
            std::size_t mark = pos;
            ++pos;
            if (pos < text.size() && (text[pos] == '+' || text[pos] == '-')) ++pos;
            if (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
                while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) ++pos;
            } else {
                pos = mark;  // 'e' starts an identifier, not an exponent
            }
        }
        if (pos == start) fail("expected number");
        return make_rational(rat_parse(text.substr(start, pos - start)));
    }

    Expr parse_ident() {
        std::size_t start = pos;
        while (pos < text.size() &&
               (std::isalnum(static_cast<unsigned char>(text[pos])) || text[pos] == '_'))
            ++pos;
        std::string name = text.substr(start, pos - start);
        skip_ws();
        if (pos < text.size() && text[pos] == '(') {
            Kind k;
            if (name == "sin") {
                k = Kind::Sin;
            } else if (name == "cos") {
                k = Kind::Cos;
            } else if (name == "log") {
                k = Kind::Log;
            } else if (name == "exp") {
                k = Kind::Exp;
            } else {
                throw UnknownFunctionError(name, start);
            }
            ++pos;
            Expr arg = parse_expr();
            if (!eat(')')) fail("expected ')' after function argument");
            return fn(k, arg);
        }
        return make_var(name);
    }
};

// ----- rendering -----

enum Prec { PrecSum = 0, PrecProduct = 1, PrecUnary = 2, PrecPower = 3, PrecAtom = 4 };

void render_rec(const Expr& e, std::ostream& os, int parent_prec);


bool is_negated_term(const Expr& e) {
    if (e.kind() == Kind::Negate) return true;
    if (e.kind() == Kind::Rational && e.rat() < 0) return true;
    if (e.kind() == Kind::Product && e.kid(0).kind() == Kind::Rational && e.kid(0).rat() < 0) return true;
    return false;
}

Expr strip_negation(const Expr& e) {
    if (e.kind() == Kind::Negate) return e.kid(0);
    if (e.kind() == Kind::Rational) return make_rational(-e.rat());
    // product with negative leading rational
    std::vector<Expr> kids = e.kids();
    Rational c = -kids[0].rat();
    if (c == 1) {
        kids.erase(kids.begin());
        if (kids.size() == 1) return kids[0];
    } else {
        kids[0] = make_rational(c);
    }
    return make_node(Kind::Product, kids);
}

void render_rec(const Expr& e, std::ostream& os, int parent_prec) {
    switch (e.kind()) {
        case Kind::Rational: {
            const Rational& q = e.rat();
            bool needs_paren = (q < 0 && parent_prec > PrecSum) ||
                               (q.get_den() != 1 && parent_prec > PrecProduct);
            if (needs_paren) os << '(';
            os << rat_to_string(q);
            if (needs_paren) os << ')';
            break;
        }
        case Kind::Var:
            os << e.var_name();
            break;
        case Kind::Sum: {
            bool needs_paren = parent_prec > PrecSum;
            if (needs_paren) os << '(';
            bool first = true;
            for (const Expr& kid : e.kids()) {
                if (is_negated_term(kid)) {
                    os << (first ? "-" : " - ");
                    render_rec(strip_negation(kid), os, PrecProduct);
                } else {
                    if (!first) os << " + ";
                    render_rec(kid, os, PrecProduct);
                }
                first = false;
            }
            if (needs_paren) os << ')';
            break;
        }
        case Kind::Negate: {
            bool needs_paren = parent_prec > PrecSum;
            if (needs_paren) os << '(';
            os << '-';
            render_rec(e.kid(0), os, PrecProduct);
            if (needs_paren) os << ')';
            break;
        }
        case Kind::Product: {
            bool needs_paren = parent_prec > PrecProduct;
            if (needs_paren) os << '(';
            std::vector<Expr> numer, denom;
            for (const Expr& kid : e.kids()) {
                if (kid.kind() == Kind::Reciprocal) {
                    denom.push_back(kid.kid(0));
                } else {
                    numer.push_back(kid);
                }
            }
            if (numer.empty()) os << '1';
            for (std::size_t i = 0; i < numer.size(); ++i) {
                if (i) os << '*';
                render_rec(numer[i], os, PrecUnary);
            }
            for (const Expr& d : denom) {
                os << '/';
                render_rec(d, os, PrecUnary);
            }
            if (needs_paren) os << ')';
            break;
        }
        case Kind::Reciprocal:
            if (parent_prec > PrecProduct) os << '(';
            os << "1/";
            render_rec(e.kid(0), os, PrecUnary);
            if (parent_prec > PrecProduct) os << ')';
            break;
        case Kind::Power:
            render_rec(e.kid(0), os, PrecAtom);
            os << '^';
            render_rec(e.kid(1), os, PrecAtom);
            break;
        case Kind::Sin:
        case Kind::Cos:
        case Kind::Log:
        case Kind::Exp: {
            const char* name = e.kind() == Kind::Sin   ? "sin"
                               : e.kind() == Kind::Cos ? "cos"
                               : e.kind() == Kind::Log ? "log"
                                                       : "exp";
            os << name << '(';
            render_rec(e.kid(0), os, PrecSum);
            os << ')';
            break;
        }
    }
}

}  // namespace

Expr parse(const std::string& text) {
    Parser p(text);
    Expr e = p.parse_expr();
    p.skip_ws();
    if (p.pos != text.size()) p.fail("trailing input");
    return e;
}

std::string render(const Expr& e) {
    std::ostringstream os;
    render_rec(e, os, PrecSum);
    return os.str();
}

}  // namespace odeid
