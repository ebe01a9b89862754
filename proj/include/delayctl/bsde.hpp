#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "delayctl/drivers.hpp"
#include "delayctl/measures.hpp"

namespace delayctl {

/// Solution pair, one process per component. p lives on steps 0..last, q on 0..last-1.
struct AdaptedPair {
    std::vector<AdaptedProcess> p, q;

    std::size_t dim() const { return p.size(); }
};

inline double sup_diff(const AdaptedPair& x, const AdaptedPair& y) {
    require(x.dim() == y.dim(), "pairs have different dimensions");
    double m = 0.0;
    for (std::size_t i = 0; i < x.dim(); ++i) m = std::max({m, sup_diff(x.p[i], y.p[i]), sup_diff(x.q[i], y.q[i])});
    return m;
}

/// Treatment of the g p term in one backward step.
enum class GScheme { implicit, explicit_ };

/// p(t) = int_t^T (f + g p + h q) ds + int_t^T q dW + int_{t v (T-d)}^T xi dm.
struct LinearBsdeProblem {
    TimeGrid grid;
    AdaptedProcess f, g, h;  // steps 0..N-1; missing steps count as zero
    RegularMeasure window;   // on [T-d, T]
    AdaptedProcess xi;       // steps N-D..N
    GScheme scheme = GScheme::implicit;
};

/// c_k = w_k E_k[xi_k] on steps N-D..N.
template <class Driver>
AdaptedProcess window_charges(const RegularMeasure& m, const AdaptedProcess& xi, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    AdaptedProcess c(g.N - g.D, g.N, S);
    if (m.is_zero()) return c;
    const auto w = window_weights(m, g);
    for (int k = g.N - g.D; k <= g.N; ++k) {
        const double wk = w[static_cast<std::size_t>(k - (g.N - g.D))];
        if (wk == 0.0) continue;
        require(xi.has(k) && xi.scenarios == S, "window datum xi is missing step " + std::to_string(k));
        const auto e = drv.project(xi.at(k), k);
        for (std::size_t s = 0; s < S; ++s) c(k, s) = wk * e[s];
    }
    return c;
}

namespace detail {
inline void check_bsde(const LinearBsdeProblem& prob, const TimeGrid& g, std::size_t S) {
    require(prob.grid.N == g.N && prob.grid.D == g.D && prob.grid.T == g.T, "problem and driver grids differ");
    for (const auto* x : {&prob.f, &prob.g, &prob.h})
        require(x->rows.empty() || x->scenarios == S, "coefficient process does not match the driver");
}
}  // namespace detail

/// Backward recursion on the discretised integral equation.
template <class Driver>
AdaptedPair solve_recursion(const LinearBsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    detail::check_bsde(prob, g, S);
    const double dt = g.dt();
    const auto c = window_charges(prob.window, prob.xi, drv);
    AdaptedProcess p(0, g.N, S), q(0, g.N - 1, S);
    p.at(g.N) = c.at(g.N);
    std::vector<double> prod(S);
    for (int k = g.N - 1; k >= 0; --k) {
        const auto& dW = drv.increment(k);
        const auto& next = p.at(k + 1);
        for (std::size_t s = 0; s < S; ++s) prod[s] = next[s] * dW[s];
        const auto Ep = drv.project(next, k);
        const auto EpW = drv.project(prod, k);
        for (std::size_t s = 0; s < S; ++s) {
            const double qk = -EpW[s] / dt;
            const double fk = prob.f.value_or_zero(k, s), gk = prob.g.value_or_zero(k, s),
                         hk = prob.h.value_or_zero(k, s);
            const double rhs = Ep[s] + hk * dt * qk + fk * dt + c.value_or_zero(k, s);
            double pk;
            if (prob.scheme == GScheme::implicit) {
                const double den = 1.0 - gk * dt;
                if (std::abs(den) < 1e-14)
                    throw Error(ErrorCode::solver, "singular implicit step (1 - g dt = 0) at " + drv.node_label(k, s));
                pk = rhs / den;
            } else {
                pk = rhs + gk * dt * Ep[s];
            }
            q(k, s) = qk;
            p(k, s) = pk;
        }
    }
    return {{std::move(p)}, {std::move(q)}};
}

/// Closed-form representation: p_k = E^Q_k[ sum_{i>=k} (discount k..i) (f_i dt + c_i) ].
template <class Driver>
AdaptedPair solve_explicit(const LinearBsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    detail::check_bsde(prob, g, S);
    const double dt = g.dt();
    const bool impl = prob.scheme == GScheme::implicit;
    const auto c = window_charges(prob.window, prob.xi, drv);

    AdaptedProcess htilde(0, g.N - 1, S);
    AdaptedProcess C(-1, g.N, S, 1.0);  // C_i as described per scheme
    for (int k = 0; k < g.N; ++k)
        for (std::size_t s = 0; s < S; ++s) {
            const double gk = prob.g.value_or_zero(k, s), hk = prob.h.value_or_zero(k, s);
            htilde(k, s) = impl ? hk : hk / (1.0 + gk * dt);
            if (impl) {
                const double den = 1.0 - gk * dt;
                if (std::abs(den) < 1e-14)
                    throw Error(ErrorCode::solver, "singular implicit step (1 - g dt = 0) at " + drv.node_label(k, s));
                C(k, s) = C(k - 1, s) / den;
            } else {
                C(k + 1, s) = C(k, s) * (1.0 + gk * dt);
            }
        }
    if (impl)
        for (std::size_t s = 0; s < S; ++s) C(g.N, s) = C(g.N - 1, s);
    else
        for (std::size_t s = 0; s < S; ++s) C(-1, s) = 1.0;
    const auto Z = girsanov_weights(htilde, drv);

    AdaptedProcess p(0, g.N, S);
    std::vector<double> tail(S, 0.0);
    for (int k = g.N; k >= 0; --k) {
        for (std::size_t s = 0; s < S; ++s) {
            const double Y = (k < g.N ? prob.f.value_or_zero(k, s) * dt : 0.0) + c.value_or_zero(k, s);
            tail[s] += Z(k, s) * C(k, s) * Y;
        }
        const auto e = drv.project(tail, k);
        for (std::size_t s = 0; s < S; ++s) {
            const double norm = impl ? C(k == g.N ? g.N : k - 1, s) : C(k, s);
            p(k, s) = e[s] / (Z(k, s) * norm);
        }
    }
    auto q = martingale_part(p, drv);
    q *= -1.0;
    return {{std::move(p)}, {std::move(q)}};
}

struct AuditReport {
    double beta = 0.0;
    double lhs = 0.0, lhs_p = 0.0, lhs_q = 0.0;
    double rhs = 0.0, rhs_p = 0.0, rhs_q = 0.0;  // computed upper bound for the lhs
    double bracket = 0.0;                         // e^{beta T}|m|^2 E sup xi^2 + (1/beta) E int e^{beta s} f^2
    double implied_c = 0.0;                       // lhs / bracket
    double bound_c = 0.0;                         // rhs / bracket
    bool holds = true;                            // lhs <= rhs
};

/// Weighted energy of the solution against the data, with an explicit discrete bound.
template <class Driver>
AuditReport audit_estimates(const LinearBsdeProblem& prob, const AdaptedPair& sol, double beta, const Driver& drv) {
    require(beta > 0.0, "beta must be positive");
    require(prob.scheme == GScheme::implicit, "estimate audit is available for the implicit scheme only");
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    const double dt = g.dt();
    double G = 0.0, H = 0.0;
    for (const auto& r : prob.g.rows)
        for (double v : r) G = std::max(G, v);
    for (const auto& r : prob.h.rows)
        for (double v : r) H = std::max(H, std::abs(v));
    require(G * dt < 1.0, "audit needs sup g * dt < 1");
    const double L = std::pow(1.0 - G * dt, -g.N);
    const double Lambda = L * L * std::pow(1.0 + H * H * dt, g.N);

    AuditReport r;
    r.beta = beta;
    std::vector<double> tmp(S);
    for (int k = 0; k < g.N; ++k) {
        const double e = std::exp(beta * g.time(k));
        for (std::size_t s = 0; s < S; ++s) tmp[s] = sol.p[0](k, s) * sol.p[0](k, s);
        r.lhs_p += dt * 0.5 * beta * e * drv.expectation(tmp);
        for (std::size_t s = 0; s < S; ++s) tmp[s] = sol.q[0](k, s) * sol.q[0](k, s);
        r.lhs_q += dt * e * drv.expectation(tmp);
    }
    r.lhs = r.lhs_p + r.lhs_q;

    double Fbeta = 0.0, F0 = 0.0;
    for (int k = 0; k < g.N; ++k) {
        for (std::size_t s = 0; s < S; ++s) tmp[s] = std::pow(prob.f.value_or_zero(k, s), 2);
        const double ef = drv.expectation(tmp);
        Fbeta += dt * std::exp(beta * g.time(k)) * ef;
        F0 += dt * ef;
    }
    std::vector<double> W(static_cast<std::size_t>(g.N) + 1, 0.0);
    double tv_discrete = 0.0, Sxi = 0.0, sup_xi2 = 0.0;
    if (!prob.window.is_zero()) {
        const auto w = window_weights(prob.window, g);
        std::vector<double> smax(S, 0.0), rawmax(S, 0.0);
        for (int k = g.N - g.D; k <= g.N; ++k) {
            const double wk = w[static_cast<std::size_t>(k - (g.N - g.D))];
            W[static_cast<std::size_t>(k)] = std::abs(wk);
            tv_discrete += std::abs(wk);
            if (!prob.xi.has(k)) continue;
            for (std::size_t s = 0; s < S; ++s) rawmax[s] = std::max(rawmax[s], prob.xi(k, s) * prob.xi(k, s));
            if (wk == 0.0) continue;
            const auto e = drv.project(prob.xi.at(k), k);
            for (std::size_t s = 0; s < S; ++s) smax[s] = std::max(smax[s], e[s] * e[s]);
        }
        Sxi = drv.expectation(smax);
        sup_xi2 = drv.expectation(rawmax);
    }
    const double geo = dt / (1.0 - std::exp(-beta * dt));
    double sum_P = 0.0, cross = 0.0;
    for (int k = 0; k < g.N; ++k) {
        const double Pk = 2.0 * Lambda * (tv_discrete * tv_discrete * Sxi + std::exp(-beta * g.time(k)) * geo * Fbeta);
        r.rhs_p += dt * 0.5 * beta * std::exp(beta * g.time(k)) * Pk;
        sum_P += dt * Pk;
        cross += W[static_cast<std::size_t>(k)] * std::sqrt(Pk * Sxi);
    }
    const double WN = W[static_cast<std::size_t>(g.N)];
    r.rhs_q = std::exp(beta * g.time(g.N - 1)) * 2.0 *
              (WN * WN * Sxi + (1.0 + 2.0 * G + 2.0 * H * H) * sum_P + F0 + 2.0 * cross);
    r.rhs = r.rhs_p + r.rhs_q;
    const double tv = total_variation(prob.window);
    r.bracket = std::exp(beta * g.T) * tv * tv * sup_xi2 + Fbeta / beta;
    r.implied_c = r.bracket > 0.0 ? r.lhs / r.bracket : 0.0;
    r.bound_c = r.bracket > 0.0 ? r.rhs / r.bracket : 0.0;
    r.holds = std::isfinite(r.lhs) && r.lhs <= r.rhs * (1.0 + 1e-12) + 1e-300;
    return r;
}

}  // namespace delayctl
