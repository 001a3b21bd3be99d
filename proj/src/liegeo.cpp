#include "odeid/liegeo.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>

namespace odeid {

void Codistribution::add_potential(const Expr& lambda, const std::vector<std::string>& states) {
    covectors.push_back(gradient(lambda, states));
    potentials.push_back(lambda);
}

bool Codistribution::all_potentials() const {
    for (const auto& p : potentials)
        if (!p) return false;
    return true;
}

std::vector<Expr> Codistribution::potential_list() const {
    std::vector<Expr> out;
    for (const auto& p : potentials) {
        if (!p) throw MissingPotentials();
        out.push_back(*p);
    }
    return out;
}

CovectorField gradient(const Expr& lambda, const std::vector<std::string>& states) {
    CovectorField w;
    w.reserve(states.size());
    for (const auto& x : states) w.push_back(differentiate(lambda, x));
    return w;
}

Expr lie_scalar(const VectorField& f, const Expr& lambda, const std::vector<std::string>& states) {
    std::vector<Expr> parts;
    parts.reserve(states.size());
    for (std::size_t i = 0; i < states.size(); ++i)
        parts.push_back(mul2(differentiate(lambda, states[i]), f[i]));
    return add(parts);
}

Expr lie_scalar_dt(const VectorField& f, const Expr& lambda, const std::vector<std::string>& states) {
    return add2(lie_scalar(f, lambda, states), differentiate(lambda, "t"));
}

VectorField lie_bracket(const VectorField& f, const VectorField& tau,
                        const std::vector<std::string>& states) {
    // [f, tau] = dtau/dx . f - df/dx . tau
    VectorField out;
    out.reserve(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
        std::vector<Expr> parts;
        for (std::size_t j = 0; j < states.size(); ++j) {
            parts.push_back(mul2(differentiate(tau[i], states[j]), f[j]));
            parts.push_back(neg(mul2(differentiate(f[i], states[j]), tau[j])));
        }
        out.push_back(add(parts));
    }
    return out;
}

CovectorField lie_covector(const VectorField& f, const CovectorField& omega,
                           const std::vector<std::string>& states) {
    // (L_f w)_i = sum_j dw_i/dx_j f_j + w_j df_j/dx_i
    CovectorField out;
    out.reserve(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
        std::vector<Expr> parts;
        for (std::size_t j = 0; j < states.size(); ++j) {
            parts.push_back(mul2(differentiate(omega[i], states[j]), f[j]));
            parts.push_back(mul2(omega[j], differentiate(f[j], states[i])));
        }
        out.push_back(add(parts));
    }
    return out;
}

VectorField autobracket(const VectorField& f, int gamma, const std::vector<VectorField>& taus,
                        const SymMatrix& sigma, const std::vector<std::string>& states,
                        bool time_varying) {
    const std::size_t n = states.size();
    std::vector<std::vector<Expr>> parts(n);
    for (std::size_t beta = 0; beta < taus.size(); ++beta) {
        const Expr& coeff = sigma[beta][static_cast<std::size_t>(gamma)];
        if (coeff.is_zero()) continue;
        VectorField br = lie_bracket(taus[beta], f, states);
        for (std::size_t i = 0; i < n; ++i) parts[i].push_back(mul2(coeff, br[i]));
    }
    if (gamma == 0 && time_varying) {
        for (std::size_t i = 0; i < n; ++i) parts[i].push_back(differentiate(f[i], "t"));
    }
    VectorField out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(add(parts[i]));
    return out;
}

// ---------------------------------------------------------------------------
// Generic rank
// ---------------------------------------------------------------------------

namespace {

int exact_rank(std::vector<std::vector<Rational>> m) {
    const std::size_t rows = m.size();
    if (rows == 0) return 0;
    const std::size_t cols = m[0].size();
    int rank = 0;
    std::size_t r = 0;
    for (std::size_t c = 0; c < cols && r < rows; ++c) {
        std::size_t piv = r;
        while (piv < rows && m[piv][c] == 0) ++piv;
        if (piv == rows) continue;
        std::swap(m[piv], m[r]);
        for (std::size_t i = 0; i < rows; ++i) {
            if (i == r || m[i][c] == 0) continue;
            Rational factor = m[i][c] / m[r][c];
            for (std::size_t j = c; j < cols; ++j) m[i][j] -= factor * m[r][j];
        }
        ++r;
        ++rank;
    }
    return rank;
}

int float_rank(const std::vector<std::vector<double>>& m, double tol) {
    const std::size_t rows = m.size();
    if (rows == 0) return 0;
    const std::size_t cols = m[0].size();
    Eigen::MatrixXd em(rows, cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) em(static_cast<int>(i), static_cast<int>(j)) = m[i][j];
    Eigen::FullPivLU<Eigen::MatrixXd> lu(em);
    lu.setThreshold(tol);
    return static_cast<int>(lu.rank());
}

}  // namespace

RankResult generic_rank_matrix(const SymMatrix& m, const RankOracle& oracle) {
    RankResult best;
    if (m.empty() || m[0].empty()) {
        best.witness.seed = oracle.seed;
        return best;
    }
    std::set<std::string> vars;
    bool exact = oracle.mode != RankOracle::Mode::Float;
    for (const auto& row : m)
        for (const auto& e : row) {
            collect_free_vars(e, vars);
            if (exact && !is_rational_evaluable(e)) exact = false;
        }
    std::uint64_t rng = oracle.seed;
    int done = 0, attempts = 0;
    const int max_attempts = 50 * oracle.trials;
    const int max_rank = static_cast<int>(std::min(m.size(), m[0].size()));
    while (done < oracle.trials && attempts < max_attempts) {
        ++attempts;
        EvaluationPoint pt;
        pt.seed = oracle.seed;
        pt.exact = exact;
        for (const auto& v : vars) pt.values[v] = draw_rational(rng);
        try {
            int rank = 0;
            if (exact) {
                std::vector<std::vector<Rational>> num(m.size());
                for (std::size_t i = 0; i < m.size(); ++i)
                    for (const auto& e : m[i]) num[i].push_back(evaluate_exact(e, pt.values));
                rank = exact_rank(std::move(num));
            } else {
                auto dpt = pt.as_double();
                std::vector<std::vector<double>> num(m.size());
                for (std::size_t i = 0; i < m.size(); ++i)
                    for (const auto& e : m[i]) num[i].push_back(evaluate_double(e, dpt));
                rank = float_rank(num, oracle.tol);
            }
            ++done;
            if (rank > best.rank || done == 1) {
                if (rank > best.rank) best.rank = rank;
                if (done == 1 || rank == best.rank) best.witness = pt;
            }
            if (best.rank == max_rank) break;  // cannot grow further
        } catch (const DivisionByZero&) {
        } catch (const DomainError&) {
        }
    }
    if (done == 0) throw InconclusiveSingular();
    return best;
}

RankResult generic_rank(const Codistribution& omega, const RankOracle& oracle) {
    SymMatrix m = omega.covectors;
    if (m.empty()) {
        RankResult r;
        r.witness.seed = oracle.seed;
        return r;
    }
    return generic_rank_matrix(m, oracle);
}

RankResult generic_rank(const Distribution& delta, const RankOracle& oracle) {
    return generic_rank_matrix(delta.generators, oracle);
}

bool contains(const Codistribution& omega, const CovectorField& w, const RankOracle& oracle) {
    if (omega.covectors.empty()) {
        for (const auto& e : w)
            if (!is_identically_zero(e, oracle.zero_opt())) return false;
        return true;
    }
    SymMatrix base = omega.covectors;
    int r0 = generic_rank_matrix(base, oracle).rank;
    base.push_back(w);
    int r1 = generic_rank_matrix(base, oracle).rank;
    return r1 == r0;
}

bool in_span(const Distribution& delta, const VectorField& v, const RankOracle& oracle) {
    if (delta.generators.empty()) {
        for (const auto& e : v)
            if (!is_identically_zero(e, oracle.zero_opt())) return false;
        return true;
    }
    SymMatrix base = delta.generators;
    int r0 = generic_rank_matrix(base, oracle).rank;
    base.push_back(v);
    return generic_rank_matrix(base, oracle).rank == r0;
}

bool in_orthogonal(const Codistribution& omega, const VectorField& g, const RankOracle& oracle) {
    for (const auto& w : omega.covectors) {
        std::vector<Expr> parts;
        for (std::size_t i = 0; i < w.size(); ++i) parts.push_back(mul2(w[i], g[i]));
        if (!is_identically_zero(add(parts), oracle.zero_opt())) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Closures
// ---------------------------------------------------------------------------

PotentialOp lie_op(const VectorField& f, const std::vector<std::string>& states, bool add_dt,
                   bool conditional, const std::string& label) {
    PotentialOp op;
    op.conditional = conditional;
    op.label = label;
    op.apply = [f, states, add_dt](const Expr& lambda) {
        return add_dt ? lie_scalar_dt(f, lambda, states) : lie_scalar(f, lambda, states);
    };
    return op;
}

Codistribution closure_codistribution(const Codistribution& start,
                                      const std::vector<PotentialOp>& ops,
                                      const std::vector<VectorField>& zeta,
                                      const std::vector<std::string>& states,
                                      const RankOracle& oracle, const ClosureOptions& opt) {
    Codistribution cur = start;
    std::vector<Expr> frontier = cur.potential_list();
    const int n = static_cast<int>(states.size());
    int dim0 = cur.covectors.empty() ? 0 : generic_rank(cur, oracle).rank;
    const int max_rounds = n - dim0 + 1 + opt.max_rounds_slack;

    auto zeta_gate = [&](const Expr& lambda) {
        for (const auto& z : zeta) {
            Expr lz = lie_scalar(z, lambda, states);
            for (const auto& x : states) {
                if (!is_identically_zero(differentiate(lz, x), oracle.zero_opt())) return false;
            }
        }
        return true;
    };

    int round = 0;
    while (!frontier.empty()) {
        ++round;
        if (round > max_rounds)
            throw NonConvergence("codistribution closure exceeded bound (" +
                                 std::to_string(max_rounds) + " rounds)");
        std::vector<Expr> next;
        for (const Expr& lambda : frontier) {
            for (const auto& op : ops) {
                if (op.conditional && !zeta_gate(lambda)) continue;
                Expr cand = simplify(op.apply(lambda));
                check_node_cap(cand, opt.node_cap);
                CovectorField gr = gradient(cand, states);
                bool trivial = true;
                for (const auto& e : gr) trivial = trivial && e.is_zero();
                if (trivial) continue;
                if (!contains(cur, gr, oracle)) {
                    cur.covectors.push_back(gr);
                    cur.potentials.push_back(cand);
                    next.push_back(cand);
                }
            }
        }
        frontier = std::move(next);
    }
    return cur;
}

Distribution closure_distribution(const Distribution& start, const std::vector<VectorField>& fields,
                                  const std::vector<std::string>& states, const RankOracle& oracle,
                                  const ClosureOptions& opt) {
    Distribution cur = start;
    std::vector<VectorField> frontier = cur.generators;
    const int n = static_cast<int>(states.size());
    int dim0 = cur.generators.empty() ? 0 : generic_rank(cur, oracle).rank;
    const int max_rounds = n - dim0 + 1 + opt.max_rounds_slack;
    int round = 0;
    while (!frontier.empty()) {
        ++round;
        if (round > max_rounds)
            throw NonConvergence("distribution closure exceeded bound");
        std::vector<VectorField> next;
        for (const auto& tau : frontier) {
            for (const auto& field : fields) {
                VectorField br = lie_bracket(field, tau, states);
                for (auto& e : br) check_node_cap(e, opt.node_cap);
                if (!in_span(cur, br, oracle)) {
                    cur.generators.push_back(br);
                    next.push_back(br);
                }
            }
        }
        frontier = std::move(next);
    }
    return cur;
}

Distribution closure_distribution_autobracket(const Distribution& start,
                                              const std::vector<VectorField>& taus,
                                              const SymMatrix& sigma,
                                              const std::vector<std::string>& states,
                                              bool time_varying, const RankOracle& oracle,
                                              const ClosureOptions& opt) {
    Distribution cur = start;
    std::vector<VectorField> frontier = cur.generators;
    const int n = static_cast<int>(states.size());
    int dim0 = cur.generators.empty() ? 0 : generic_rank(cur, oracle).rank;
    const int max_rounds = n - dim0 + 1 + opt.max_rounds_slack;
    int round = 0;
    while (!frontier.empty()) {
        ++round;
        if (round > max_rounds) throw NonConvergence("autobracket closure exceeded bound");
        std::vector<VectorField> next;
        for (const auto& v : frontier) {
            for (int gamma = 0; gamma < static_cast<int>(taus.size()); ++gamma) {
                VectorField ab = autobracket(v, gamma, taus, sigma, states, time_varying);
                for (auto& e : ab) check_node_cap(e, opt.node_cap);
                if (!in_span(cur, ab, oracle)) {
                    cur.generators.push_back(ab);
                    next.push_back(ab);
                }
            }
        }
        frontier = std::move(next);
    }
    return cur;
}

// ---------------------------------------------------------------------------
// Null space
// ---------------------------------------------------------------------------

namespace {

// Splits a canonical product term into numerator/denominator factor lists.
struct FactorKey {
    Expr base;
    Expr exp;  // positive form
};

bool exp_is_negative(const Expr& exp) {
    if (exp.is_rational()) return exp.rat() < 0;
    // all-term-negative sums count as negative (e.g. -n1 - 1)
    Expr n = neg(exp);
    if (n.is_rational()) return n.rat() > 0;
    auto all_negative = [](const Expr& e) {
        if (e.kind() == Kind::Negate) return true;
        if (e.kind() == Kind::Rational) return e.rat() < 0;
        if (e.kind() == Kind::Product && e.kid(0).kind() == Kind::Rational)
            return e.kid(0).rat() < 0;
        return false;
    };
    if (exp.kind() == Kind::Sum) {
        for (const auto& kid : exp.kids())
            if (!all_negative(kid)) return false;
        return true;
    }
    return all_negative(exp);
}

void term_num_den(const Expr& term, std::vector<FactorKey>& num, std::vector<FactorKey>& den,
                  Expr& coeff) {
    coeff = one();
    std::function<void(const Expr&)> walk = [&](const Expr& e) {
        switch (e.kind()) {
            case Kind::Rational:
                coeff = mul2(coeff, e);
                break;
            case Kind::Negate:
                coeff = neg(coeff);
                walk(e.kid(0));
                break;
            case Kind::Product:
                for (const auto& k : e.kids()) walk(k);
                break;
            case Kind::Reciprocal:
                den.push_back({e.kid(0), one()});
                break;
            case Kind::Power: {
                if (exp_is_negative(e.kid(1))) {
                    den.push_back({e.kid(0), neg(e.kid(1))});
                } else {
                    num.push_back({e.kid(0), e.kid(1)});
                }
                break;
            }
            default:
                num.push_back({e, one()});
                break;
        }
    };
    walk(term);
}

using DenMap = std::map<std::string, std::pair<FactorKey, Rational>>;  // key -> (factor, max mult)

std::string factor_map_key(const FactorKey& f) { return render(f.base) + "@@" + render(f.exp); }

// exponent part handled numerically only when rational; symbolic exponents are
// treated as opaque units with multiplicity 1
void den_accumulate(DenMap& acc, const std::vector<FactorKey>& den) {
    for (const auto& f : den) {
        if (f.exp.is_rational()) {
            std::string key = render(f.base) + "@@num";
            auto it = acc.find(key);
            Rational m = f.exp.rat();
            if (it == acc.end()) {
                acc.emplace(key, std::make_pair(FactorKey{f.base, one()}, m));
            } else if (m > it->second.second) {
                it->second.second = m;
            }
        } else {
            std::string key = factor_map_key(f);
            acc.emplace(key, std::make_pair(f, Rational(1)));
        }
    }
}

Expr den_to_expr(const DenMap& acc) {
    std::vector<Expr> parts;
    for (const auto& [k, v] : acc) {
        (void)k;
        const FactorKey& f = v.first;
        if (f.exp.is_one() || !f.exp.is_rational()) {
            parts.push_back(f.exp.is_one() ? pow(f.base, make_rational(v.second))
                                           : pow(f.base, f.exp));
        } else {
            parts.push_back(pow(f.base, make_rational(v.second)));
        }
    }
    if (parts.empty()) return one();
    return mul(parts);
}

}  // namespace

std::pair<Expr, Expr> split_num_den(const Expr& eIn) {
    Expr e = simplify(eIn);
    std::vector<Expr> terms;
    if (e.kind() == Kind::Sum) {
        terms = e.kids();
    } else {
        terms = {e};
    }
    DenMap common;
    for (const auto& t : terms) {
        std::vector<FactorKey> num, den;
        Expr coeff;
        term_num_den(t, num, den, coeff);
        den_accumulate(common, den);
    }
    Expr d = den_to_expr(common);
    if (d.is_one()) return {e, one()};
    Expr n = simplify(mul2(e, d));
    return {n, d};
}

namespace {

// Common content of a row: rational gcd of all term coefficients together
// with factors (rational exponents only) present in every term of every
// nonzero entry. Dividing it out keeps cross-multiplied rows small.
Expr row_content(const std::vector<Expr>& row) {
    bool first = true;
    Rational num_gcd(0), den_lcm(1);
    std::map<std::string, std::pair<Expr, Rational>> common;  // key -> (base, min exp)
    for (const Expr& entryIn : row) {
        Expr entry = simplify(entryIn);
        if (entry.is_zero()) continue;
        std::vector<Expr> terms = entry.kind() == Kind::Sum ? entry.kids() : std::vector<Expr>{entry};
        for (const Expr& t : terms) {
            std::vector<FactorKey> numf, denf;
            Expr coeff;
            term_num_den(t, numf, denf, coeff);
            Rational c = coeff.is_rational() ? coeff.rat() : Rational(1);
            mpz_class g = gcd(abs(c.get_num()), num_gcd.get_num());
            mpz_class l = lcm(c.get_den(), den_lcm.get_den());
            std::map<std::string, std::pair<Expr, Rational>> present;
            for (const auto& f : numf) {
                if (!f.exp.is_rational() || f.exp.rat() <= 0) continue;
                present[render(f.base)] = {f.base, f.exp.rat()};
            }
            if (first) {
                num_gcd = Rational(abs(c.get_num()));
                den_lcm = Rational(1, c.get_den());
                common = present;
                first = false;
            } else {
                num_gcd = Rational(g);
                den_lcm = Rational(1, l);
                for (auto it = common.begin(); it != common.end();) {
                    auto pit = present.find(it->first);
                    if (pit == present.end()) {
                        it = common.erase(it);
                    } else {
                        if (pit->second.second < it->second.second)
                            it->second.second = pit->second.second;
                        ++it;
                    }
                }
            }
        }
    }
    if (first) return one();
    std::vector<Expr> parts;
    Rational c = num_gcd * den_lcm;
    if (c != 0 && c != 1) parts.push_back(make_rational(c));
    for (const auto& [k, v] : common) {
        (void)k;
        parts.push_back(pow(v.first, make_rational(v.second)));
    }
    if (parts.empty()) return one();
    return mul(parts);
}

void reduce_row(std::vector<Expr>& row) {
    Expr content = row_content(row);
    if (!content.is_one() && !content.is_zero()) {
        Expr inv = recip(content);
        for (auto& e : row) e = simplify(mul2(e, inv));
    }
}

// Multiply each entry by the common denominator so the row is polynomial in
// its atomic factors (span-invariant rescaling).
void clear_row_denominators(std::vector<Expr>& row) {
    DenMap common;
    for (const Expr& entryIn : row) {
        Expr entry = simplify(entryIn);
        if (entry.is_zero()) continue;
        std::vector<Expr> terms = entry.kind() == Kind::Sum ? entry.kids() : std::vector<Expr>{entry};
        for (const Expr& t : terms) {
            std::vector<FactorKey> numf, denf;
            Expr coeff;
            term_num_den(t, numf, denf, coeff);
            den_accumulate(common, denf);
        }
    }
    Expr d = den_to_expr(common);
    if (!d.is_one())
        for (auto& e : row) e = simplify(mul2(e, d));
}

int count_nonzero(const std::vector<double>& v, double tol) {
    int c = 0;
    for (double x : v)
        if (std::fabs(x) > tol) ++c;
    return c;
}

}  // namespace

std::vector<VectorField> null_space(const Codistribution& omega, const RankOracle& oracle) {
    const int n = omega.n;
    if (omega.covectors.empty()) {
        // whole space
        std::vector<VectorField> out;
        for (int i = 0; i < n; ++i) {
            VectorField e(n, zero());
            e[i] = one();
            out.push_back(std::move(e));
        }
        return out;
    }
    RankResult rr = generic_rank(omega, oracle);
    const int r = rr.rank;
    if (r == n) return {};

    SymMatrix s = omega.covectors;
    const std::size_t rows = s.size();
    for (auto& row : s) {
        clear_row_denominators(row);
        reduce_row(row);
    }
    auto dpt = rr.witness.as_double();
    std::vector<std::vector<double>> nm(rows, std::vector<double>(n, 0.0));
    auto eval_row = [&](std::size_t i) {
        for (int j = 0; j < n; ++j) nm[i][j] = evaluate_double(s[i][j], dpt);
    };
    double max_abs = 0;
    for (std::size_t i = 0; i < rows; ++i) {
        eval_row(i);
        for (int j = 0; j < n; ++j) max_abs = std::max(max_abs, std::fabs(nm[i][j]));
    }
    if (max_abs == 0) throw PivotDegeneracy();
    const double tol = oracle.tol * max_abs;

    // Bareiss fraction-free echelon form: rows below the pivot are combined
    // by cross-multiplication and divided exactly by the previous pivot, so
    // entries stay subdeterminant-sized.
    std::vector<bool> row_used(rows, false), col_used(n, false);
    std::vector<std::pair<std::size_t, int>> pivots;
    Expr prev_pivot = one();
    for (int step = 0; step < r; ++step) {
        std::size_t pi = 0;
        int pj = -1;
        long best_cost = -1;
        double best_mag = 0;
        for (std::size_t i = 0; i < rows; ++i) {
            if (row_used[i]) continue;
            int row_nnz = count_nonzero(nm[i], tol);
            for (int j = 0; j < n; ++j) {
                if (col_used[j] || std::fabs(nm[i][j]) <= tol) continue;
                int col_nnz = 0;
                for (std::size_t k = 0; k < rows; ++k)
                    if (!row_used[k] && std::fabs(nm[k][j]) > tol) ++col_nnz;
                long cost = static_cast<long>(row_nnz - 1) * (col_nnz - 1) * 1000 +
                            static_cast<long>(s[i][j].node_count());
                if (best_cost < 0 || cost < best_cost ||
                    (cost == best_cost && std::fabs(nm[i][j]) > best_mag)) {
                    best_cost = cost;
                    best_mag = std::fabs(nm[i][j]);
                    pi = i;
                    pj = j;
                }
            }
        }
        if (pj < 0) throw PivotDegeneracy();
        row_used[pi] = true;
        col_used[pj] = true;
        pivots.emplace_back(pi, pj);
        const Expr piv = s[pi][pj];
        for (std::size_t i = 0; i < rows; ++i) {
            if (row_used[i]) continue;
            // every surviving row is updated each step (also with a zero
            // multiplier) so the Sylvester divisibility chain stays intact
            Expr coef = s[i][pj];
            std::vector<Expr> combined(n, zero());
            for (int j = 0; j < n; ++j) {
                if (j == pj) continue;
                combined[j] = sub(mul2(piv, s[i][j]), mul2(coef, s[pi][j]));
            }
            // Bareiss division must rescale the whole row or none of it
            bool divided_ok = prev_pivot.is_one();
            if (!divided_ok) {
                std::vector<Expr> divided(n, zero());
                bool all_ok = true;
                for (int j = 0; j < n && all_ok; ++j) {
                    if (j == pj || combined[j].is_zero()) continue;
                    if (auto q = divide_exact(combined[j], prev_pivot)) {
                        divided[j] = *q;
                    } else {
                        all_ok = false;
                    }
                }
                if (all_ok) {
                    combined = std::move(divided);
                    divided_ok = true;
                }
            }
            s[i] = std::move(combined);
            if (!divided_ok) reduce_row(s[i]);  // best-effort damping off the chain
            eval_row(i);
        }
        prev_pivot = piv;
    }

    std::vector<VectorField> out;
    for (int fc = 0; fc < n; ++fc) {
        if (col_used[fc]) continue;
        // back substitution in pivot order, carrying polynomial numerators
        // over the product of pivots below
        VectorField num(n, zero());
        Expr den = one();
        num[fc] = one();
        for (int k = r - 1; k >= 0; --k) {
            const auto& [pi, pj] = pivots[static_cast<std::size_t>(k)];
            std::vector<Expr> parts{mul2(s[pi][fc], den)};
            for (int l = k + 1; l < r; ++l) {
                const auto& [li, lj] = pivots[static_cast<std::size_t>(l)];
                (void)li;
                if (s[pi][lj].is_zero() || num[lj].is_zero()) continue;
                parts.push_back(mul2(s[pi][lj], num[lj]));
            }
            Expr rhs = neg(add(parts));
            Expr piv = s[pi][pj];
            if (auto q = divide_exact(rhs, piv)) {
                num[pj] = *q;
            } else {
                // scale everything by the pivot instead of dividing
                for (int c = 0; c < n; ++c)
                    if (!num[c].is_zero() && c != pj) num[c] = mul2(num[c], piv);
                den = mul2(den, piv);
                num[pj] = rhs;
            }
        }
        VectorField xi = std::move(num);
        // clear any remaining denominators (a symmetry is defined up to a
        // multiplying factor) and strip common content
        DenMap common;
        for (const auto& comp : xi) {
            Expr c = simplify(comp);
            std::vector<Expr> terms = c.kind() == Kind::Sum ? c.kids() : std::vector<Expr>{c};
            for (const auto& t : terms) {
                std::vector<FactorKey> numf, denf;
                Expr coeff;
                term_num_den(t, numf, denf, coeff);
                den_accumulate(common, denf);
            }
        }
        Expr d = den_to_expr(common);
        if (!d.is_one())
            for (auto& comp : xi) comp = simplify(mul2(comp, d));
        else
            for (auto& comp : xi) comp = simplify(comp);
        // collapse components that are identically zero but did not reduce
        // structurally (mixed spellings of the same polynomial)
        for (auto& comp : xi) {
            if (comp.is_zero() || comp.is_rational()) continue;
            try {
                if (is_identically_zero(comp, oracle.zero_opt())) comp = zero();
            } catch (const InconclusiveSingular&) {
            }
        }
        reduce_row(xi);
        // strip the common polynomial factor accumulated by the fraction-free
        // elimination
        Expr g = zero();
        for (const auto& comp : xi) {
            if (comp.is_zero()) continue;
            g = poly_gcd(g, comp);
            if (g.is_one()) break;
        }
        if (!g.is_zero() && !g.is_one() && !g.is_rational()) {
            std::vector<Expr> divided(xi.size(), zero());
            bool all_ok = true;
            for (std::size_t c = 0; c < xi.size() && all_ok; ++c) {
                if (xi[c].is_zero()) continue;
                auto q = divide_exact(xi[c], g);
                if (!q) all_ok = false;
                else divided[c] = *q;
            }
            if (all_ok) {
                xi = std::move(divided);
                reduce_row(xi);
            }
        }
        // canonical scaling: first nonzero component gets leading coefficient 1
        for (const auto& comp : xi) {
            if (comp.is_zero()) continue;
            Expr lead = comp.kind() == Kind::Sum ? comp.kids().front() : comp;
            Rational lc(1);
            if (lead.is_rational()) {
                lc = lead.rat();
            } else if (lead.kind() == Kind::Negate) {
                lc = Rational(-1);
            } else if (lead.kind() == Kind::Product && lead.kid(0).is_rational()) {
                lc = lead.kid(0).rat();
            }
            if (lc != 1 && lc != 0) {
                Expr inv = make_rational(1 / lc);
                for (auto& c2 : xi) c2 = simplify(mul2(c2, inv));
            }
            break;
        }
        out.push_back(std::move(xi));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Small symbolic matrices
// ---------------------------------------------------------------------------

Expr sym_det(const SymMatrix& m) {
    const std::size_t k = m.size();
    if (k == 0) return one();
    if (k == 1) return m[0][0];
    if (k == 2) return sub(mul2(m[0][0], m[1][1]), mul2(m[0][1], m[1][0]));
    std::vector<Expr> parts;
    for (std::size_t j = 0; j < k; ++j) {
        if (m[0][j].is_zero()) continue;
        SymMatrix minor;
        for (std::size_t i = 1; i < k; ++i) {
            std::vector<Expr> row;
            for (std::size_t c = 0; c < k; ++c)
                if (c != j) row.push_back(m[i][c]);
            minor.push_back(std::move(row));
        }
        Expr term = mul2(m[0][j], sym_det(minor));
        parts.push_back(j % 2 == 0 ? term : neg(term));
    }
    return add(parts);
}

SymMatrix sym_inverse(const SymMatrix& m, const RankOracle& oracle) {
    const std::size_t k = m.size();
    Expr det = sym_det(m);
    bool singular = false;
    try {
        singular = is_identically_zero(det, oracle.zero_opt());
    } catch (const InconclusiveSingular&) {
        singular = true;
    }
    if (singular) throw SingularMu();
    SymMatrix inv(k, std::vector<Expr>(k, zero()));
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            SymMatrix minor;
            for (std::size_t r = 0; r < k; ++r) {
                if (r == j) continue;
                std::vector<Expr> row;
                for (std::size_t c = 0; c < k; ++c)
                    if (c != i) row.push_back(m[r][c]);
                minor.push_back(std::move(row));
            }
            Expr cof = k == 1 ? one() : sym_det(minor);
            if ((i + j) % 2 == 1) cof = neg(cof);
            inv[i][j] = div(cof, det);
        }
    }
    return inv;
}

}  // namespace odeid
