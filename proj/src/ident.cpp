#include "odeid/ident.hpp"

namespace odeid {

ObservabilityResult ensure_condition_gk(const ObservabilityResult& obsIn,
                                        const ObservabilityOptions& opts) {
    ObservabilityResult obs = obsIn;
    const int mw = obs.E.mw();
    for (int round = 0; round <= mw; ++round) {
        std::vector<int> violating;
        for (int k = obs.m; k < mw; ++k) {
            for (const auto& h : obs.htilde) {
                Expr lg = lie_scalar(obs.E.g[k], h, obs.E.state);
                if (!is_identically_zero(lg, opts.oracle.zero_opt())) {
                    violating.push_back(k);
                    break;
                }
            }
        }
        if (violating.empty()) return obs;
        OdeModel ext = obs.E;
        for (int k : violating) ext = extend_with_ui(ext, k);
        obs = observability(ext, opts);
    }
    return obs;
}

std::vector<UiSymmetry> canonicity_symmetries(int mw, int m) {
    std::vector<UiSymmetry> out;
    for (int i = 0; i < mw - m; ++i) {
        UiSymmetry s;
        s.kind = UiSymmetry::Kind::Canonicity;
        s.components.assign(static_cast<std::size_t>(mw), zero());
        s.components[static_cast<std::size_t>(m + i)] = one();
        out.push_back(std::move(s));
    }
    return out;
}

UiSymmetry unobservability_symmetry(const OdeModel& E, const VectorField& xi,
                                    const std::vector<Expr>& htilde, const MuNu& munu,
                                    const RankOracle& oracle) {
    const int m = munu.m;
    const int mw = E.mw();
    UiSymmetry s;
    s.kind = UiSymmetry::Kind::Unobservability;
    s.source_xi = xi;
    // xi^alpha_i = L_xi(L_{g^alpha} htilde_i), with the time derivative folded
    // into the alpha = 0 slot
    s.xi_table.assign(static_cast<std::size_t>(m) + 1,
                      std::vector<Expr>(static_cast<std::size_t>(m) + 1, zero()));
    for (int i = 1; i <= m; ++i) {
        const Expr& h = htilde[static_cast<std::size_t>(i - 1)];
        Expr base0 = add2(lie_scalar(E.g0, h, E.state), differentiate(h, "t"));
        s.xi_table[0][static_cast<std::size_t>(i)] = simplify(lie_scalar(xi, base0, E.state));
        for (int alpha = 1; alpha <= m; ++alpha) {
            Expr ba = lie_scalar(E.g[static_cast<std::size_t>(alpha - 1)], h, E.state);
            s.xi_table[static_cast<std::size_t>(alpha)][static_cast<std::size_t>(i)] =
                simplify(lie_scalar(xi, ba, E.state));
        }
    }
    (void)oracle;
    s.components.assign(static_cast<std::size_t>(mw), zero());
    for (int k = 1; k <= m; ++k) {
        std::vector<Expr> parts;
        for (int i = 1; i <= m; ++i) {
            const Expr& nu_ik = munu.nu[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
            if (nu_ik.is_zero()) continue;
            std::vector<Expr> inner{s.xi_table[0][static_cast<std::size_t>(i)]};
            for (int j = 1; j <= m; ++j) {
                const Expr& xj = s.xi_table[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)];
                if (xj.is_zero()) continue;
                inner.push_back(
                    mul2(xj, make_var(E.unknown_inputs[static_cast<std::size_t>(j - 1)])));
            }
            parts.push_back(mul2(nu_ik, add(inner)));
        }
        s.components[static_cast<std::size_t>(k - 1)] = simplify(neg(add(parts)));
    }
    return s;
}

IdentifiabilityResult identifiability(const OdeModel& model, const ObservabilityOptions& opts) {
    IdentifiabilityResult res;
    res.obs = ensure_condition_gk(observability(model, opts), opts);
    const OdeModel& E = res.obs.E;
    const int mw = E.mw();
    const int m = res.obs.m;
    const RankOracle& oracle = opts.oracle;

    res.theorem1_path = res.obs.dim == E.n();

    res.ui_symmetries = canonicity_symmetries(mw, m);
    if (!res.theorem1_path) {
        res.state_symmetries = null_space(res.obs.O, oracle);
        for (const auto& xi : res.state_symmetries) {
            res.ui_symmetries.push_back(
                unobservability_symmetry(E, xi, res.obs.htilde, res.obs.munu, oracle));
        }
    }

    // w_j reconstructable iff the j-th component of every symmetry vanishes
    for (int j = 0; j < mw; ++j) {
        bool rec = true;
        for (const auto& s : res.ui_symmetries) {
            if (!is_identically_zero(s.components[static_cast<std::size_t>(j)],
                                     oracle.zero_opt())) {
                rec = false;
                break;
            }
        }
        res.ui_reconstructable[E.unknown_inputs[static_cast<std::size_t>(j)]] = rec;
    }

    // constant parameters: gradient membership in O
    for (const auto& q : E.constant_params) {
        res.constants[q] = res.obs.observable.at(q);
    }

    // original time-varying parameters: either a state component now (its
    // observability decides) or still a direct unknown input
    std::map<std::string, TvVerdict> tv;
    for (int j = 0; j < mw; ++j) {
        const std::string& wname = E.unknown_inputs[static_cast<std::size_t>(j)];
        UiOrigin origin{wname, 0};
        auto it = E.ui_origin.find(wname);
        if (it != E.ui_origin.end()) origin = it->second;
        TvVerdict v;
        v.derivative_order = origin.derivative_order;
        if (origin.derivative_order == 0) {
            v.identifiable = res.ui_reconstructable.at(wname);
        } else {
            // the original parameter was promoted into the state
            v.identifiable = res.obs.observable.count(origin.base_name)
                                 ? res.obs.observable.at(origin.base_name)
                                 : false;
        }
        tv[origin.base_name] = v;
    }
    // promoted states whose derivative chain is not an unknown input anymore
    for (const auto& [sname, origin] : E.state_origin_tv) {
        if (tv.count(origin.base_name)) continue;
        TvVerdict v;
        v.derivative_order = 0;
        v.identifiable = res.obs.observable.count(sname) ? res.obs.observable.at(sname) : false;
        tv[origin.base_name] = v;
    }
    res.tv_params = std::move(tv);
    return res;
}

IdentifiabilityResult identifiability(const GeneralModel& model, const ObservabilityOptions& opts) {
    return identifiability(to_affine(model), opts);
}

}  // namespace odeid
