#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "delayctl/absde.hpp"
#include "delayctl/sdde.hpp"
#include "delayctl/smp.hpp"

namespace delayctl {

/// Smooth terminal payoff: quadratic, or exponential utility of a tanh-clipped argument.
struct Payoff {
    enum class Kind { quadratic, linear, utility } kind = Kind::quadratic;
    double weight = 1.0;  // quadratic weight, linear slope
    double target = 0.0;  // quadratic centre
    double lambda = 1.0;  // utility risk aversion
    double clip = 5.0;    // utility argument clip

    double value(double z, double* grad) const {
        switch (kind) {
            case Kind::quadratic:
                if (grad) *grad = weight * (z - target);
                return 0.5 * weight * (z - target) * (z - target);
            case Kind::linear:
                if (grad) *grad = weight;
                return weight * z;
            case Kind::utility: {
                const double th = std::tanh(z / clip);
                const double s = clip * th;
                const double e = std::exp(-lambda * s);
                if (grad) *grad = e * (1.0 - th * th);
                return (1.0 - e) / lambda;
            }
        }
        return 0.0;
    }
};

struct AdvertisingParams {
    double T = 1.0;
    int N = 16;
    double d = 0.25;
    double a0 = -0.5, b0 = 1.0, sigma_a = 0.2, sigma_b = 0.1;
    RegularMeasure mu_a, mu_b;  // on [-d, 0]; default zero
    double r = 1.0;             // control cost weight
    double q = 1.0;             // goodwill tracking weight
    double y_target = 0.0;
    Payoff phi{Payoff::Kind::utility, 1.0, 0.0, 1.0, 5.0};  // cost is phi if quadratic, -utility otherwise
    RegularMeasure mu_phi;      // on [-d, 0]; default delta_0
    double y0 = 1.0, u0 = 0.0;  // constant initial segments
    double u_min = -std::numeric_limits<double>::infinity();
    double u_max = std::numeric_limits<double>::infinity();

    TimeGrid grid() const { return TimeGrid::with_delay(T, N, d); }
    RegularMeasure delay_zero() const { return RegularMeasure::zero(-grid().delay(), 0.0); }
    RegularMeasure delta0(double w = 1.0) const { return RegularMeasure::dirac(-grid().delay(), 0.0, 0.0, w); }
    RegularMeasure measure_or(const RegularMeasure& m, const RegularMeasure& fallback) const {
        return m.b() == m.a() && m.atoms().empty() && m.density().empty() ? fallback : m;
    }
};

namespace detail {
inline double terminal_cost(const Payoff& phi, double z, double* grad) {
    if (phi.kind == Payoff::Kind::utility) {
        double g = 0.0;
        const double v = -phi.value(z, &g);
        if (grad) *grad = -g;
        return v;
    }
    return phi.value(z, grad);
}
}  // namespace detail

/// Goodwill dynamics dy = (<y, a0 d0 + mu_a> + <u, b0 d0 + mu_b>) dt + (sigma_a y + sigma_b u) dW.
inline ControlProblem advertising_problem(const AdvertisingParams& prm) {
    const TimeGrid g = prm.grid();
    const auto mu_a = prm.measure_or(prm.mu_a, prm.delay_zero());
    const auto mu_b = prm.measure_or(prm.mu_b, prm.delay_zero());
    const auto mu_phi = prm.measure_or(prm.mu_phi, prm.delta0());
    ControlProblem cp;
    cp.grid = g;
    cp.state_dim = 1;
    cp.control_dim = 1;
    const double lip_f = 2.0;
    cp.drift = DelayedCoefficient(
        "advertising-drift", 1,
        {{Source::state, 0, prm.delta0(prm.a0) + mu_a}, {Source::control, 0, prm.delta0(prm.b0) + mu_b}},
        [](double, const double* z, double* v, double* jac) {
            v[0] = z[0] + z[1];
            if (jac) jac[0] = jac[1] = 1.0;
        },
        lip_f);
    const double sa = prm.sigma_a, sb = prm.sigma_b;
    cp.diffusion = DelayedCoefficient(
        "advertising-diffusion", 1, {{Source::state, 0, prm.delta0()}, {Source::control, 0, prm.delta0()}},
        [sa, sb](double, const double* z, double* v, double* jac) {
            v[0] = sa * z[0] + sb * z[1];
            if (jac) {
                jac[0] = sa;
                jac[1] = sb;
            }
        },
        std::abs(sa) + std::abs(sb));
    const double r = prm.r, qw = prm.q, yt = prm.y_target;
    cp.running = DelayedCoefficient(
        "advertising-cost", 1, {{Source::state, 0, prm.delta0()}, {Source::control, 0, prm.delta0()}},
        [r, qw, yt](double, const double* z, double* v, double* jac) {
            v[0] = 0.5 * r * z[1] * z[1] + 0.5 * qw * (z[0] - yt) * (z[0] - yt);
            if (jac) {
                jac[0] = qw * (z[0] - yt);
                jac[1] = r * z[1];
            }
        });
    const Payoff phi = prm.phi;
    cp.terminal.kind = "advertising-terminal";
    cp.terminal.channels = {{Source::state, 0, mu_phi}};
    cp.terminal.eval = [phi](const double* z, double* grad) { return detail::terminal_cost(phi, z[0], grad); };
    cp.admissible = {{prm.u_min}, {prm.u_max}};
    cp.x_init = {std::vector<double>(static_cast<std::size_t>(g.D) + 1, prm.y0)};
    cp.eta = {std::vector<double>(static_cast<std::size_t>(g.D), prm.u0)};
    cp.validate();
    return cp;
}

/// The advertising adjoint written out by hand: l_y source, a0 p and mu_a anticipated p terms,
/// a -sigma_a q term and the phi window.
template <class Driver>
AbsdeProblem advertising_adjoint(const AdvertisingParams& prm, const Trajectory& y, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    const auto mu_a = prm.measure_or(prm.mu_a, prm.delay_zero());
    const auto mu_phi = prm.measure_or(prm.mu_phi, prm.delta0());
    AbsdeProblem prob;
    prob.grid = g;
    AdaptedProcess f(0, g.N - 1, S);
    for (int k = 0; k < g.N; ++k)
        for (std::size_t s = 0; s < S; ++s) f(k, s) = prm.q * (y[0](k, s) - prm.y_target);
    for (int k = 0; k < g.N; ++k) f.at(k) = drv.project(f.at(k), k);
    prob.f = {std::move(f)};
    const AdaptedProcess one(0, g.N - 1, S, 1.0);
    prob.terms.push_back({0, false, lag_weights(prm.delta0(prm.a0), g), {one}});
    if (!mu_a.is_zero()) prob.terms.push_back({0, false, lag_weights(mu_a, g), {one}});
    prob.terms.push_back({0, true, lag_weights(prm.delta0(), g), {AdaptedProcess(0, g.N - 1, S, -prm.sigma_a)}});
    const auto a = lag_weights(mu_phi, g);
    AbsdeWindow w{0, mu_phi.shifted(g.T), AdaptedProcess(g.N - g.D, g.N, S)};
    std::vector<double> xi(S);
    for (std::size_t s = 0; s < S; ++s) {
        double z = 0.0;
        for (std::size_t j = 0; j < a.size(); ++j) z += a[j] * y[0](g.N - static_cast<int>(j), s);
        detail::terminal_cost(prm.phi, z, &xi[s]);
    }
    for (int k = g.N - g.D; k <= g.N; ++k) w.xi.at(k) = xi;
    prob.windows.push_back(std::move(w));
    return prob;
}

/// x0 + x1 tanh(z / scale).
struct SmoothRate {
    double x0 = 0.0, x1 = 0.0, scale = 1.0;
    double value(double z) const { return x0 + x1 * std::tanh(z / scale); }
    double slope(double z) const {
        const double t = std::tanh(z / scale);
        return x1 * (1.0 - t * t) / scale;
    }
    double sup() const { return std::abs(x0) + std::abs(x1); }
};

struct PortfolioParams {
    double T = 1.0;
    int N = 16;
    double d = 0.25;
    SmoothRate b{0.08, 0.0, 1.0}, sigma{0.2, 0.0, 1.0}, r{0.03, 0.0, 1.0};
    RegularMeasure mu_b, mu_sigma, mu_r, mu_U;  // on [-d, 0]; default delta_0
    Payoff U{Payoff::Kind::linear, 1.0, 0.0, 1.0, 5.0};
    double S0 = 1.0, V0 = 1.0;    // constant initial segments nu_0 and eta
    double pi0 = 0.0, c0 = 0.0;   // initial control segment
    double pi_min = 0.0, pi_max = 1.0, c_min = 0.0, c_max = 0.1;
    std::vector<double> nu0, eta, pi_init;  // optional explicit segments (D+1, D+1, D values)

    TimeGrid grid() const { return TimeGrid::with_delay(T, N, d); }
    RegularMeasure delta(double theta) const { return RegularMeasure::dirac(-grid().delay(), 0.0, theta); }
    RegularMeasure measure_or_delta0(const RegularMeasure& m) const {
        return m.b() == m.a() && m.atoms().empty() && m.density().empty() ? delta(0.0) : m;
    }
};

/// State (S, V), controls (pi acting at lag d, c undelayed); the cost is -U(<V_T, mu_U>).
inline ControlProblem portfolio_problem(const PortfolioParams& prm) {
    const TimeGrid g = prm.grid();
    const auto mb = prm.measure_or_delta0(prm.mu_b), ms = prm.measure_or_delta0(prm.mu_sigma),
               mr = prm.measure_or_delta0(prm.mu_r), mu = prm.measure_or_delta0(prm.mu_U);
    const auto d0 = prm.delta(0.0), dd = prm.delta(-g.delay());
    ControlProblem cp;
    cp.grid = g;
    cp.state_dim = 2;
    cp.control_dim = 2;
    const SmoothRate b = prm.b, sg = prm.sigma, r = prm.r;
    // channels: S, <S,mu_b>, <S,mu_r>, V, pi(t-d), c
    cp.drift = DelayedCoefficient(
        "portfolio-drift", 2,
        {{Source::state, 0, d0}, {Source::state, 0, mb}, {Source::state, 0, mr}, {Source::state, 1, d0},
         {Source::control, 0, dd}, {Source::control, 1, d0}},
        [b, r](double, const double* z, double* v, double* jac) {
            const double bb = b.value(z[1]), rr = r.value(z[2]);
            v[0] = z[0] * bb;
            v[1] = rr * (z[3] - z[4]) - z[5] + z[4] * bb;
            if (jac) {
                jac[0] = bb;
                jac[1] = z[0] * b.slope(z[1]);
                jac[2] = jac[3] = jac[4] = jac[5] = 0.0;
                jac[6] = 0.0;
                jac[7] = z[4] * b.slope(z[1]);
                jac[8] = r.slope(z[2]) * (z[3] - z[4]);
                jac[9] = rr;
                jac[10] = bb - rr;
                jac[11] = -1.0;
            }
        });
    // channels: S, <S,mu_sigma>, pi(t-d)
    cp.diffusion = DelayedCoefficient(
        "portfolio-diffusion", 2, {{Source::state, 0, d0}, {Source::state, 0, ms}, {Source::control, 0, dd}},
        [sg](double, const double* z, double* v, double* jac) {
            const double s = sg.value(z[1]);
            v[0] = z[0] * s;
            v[1] = z[2] * s;
            if (jac) {
                jac[0] = s;
                jac[1] = z[0] * sg.slope(z[1]);
                jac[2] = 0.0;
                jac[3] = 0.0;
                jac[4] = z[2] * sg.slope(z[1]);
                jac[5] = s;
            }
        });
    cp.running = zero_coefficient(1);
    const Payoff U = prm.U;
    cp.terminal.kind = "portfolio-utility";
    cp.terminal.channels = {{Source::state, 1, mu}};
    cp.terminal.eval = [U](const double* z, double* grad) {
        double gU = 0.0;
        const double v = -U.value(z[0], &gU);
        if (grad) grad[0] = -gU;
        return v;
    };
    cp.admissible = {{prm.pi_min, prm.c_min}, {prm.pi_max, prm.c_max}};
    const auto D = static_cast<std::size_t>(g.D);
    auto segment = [&](const std::vector<double>& given, double fill, std::size_t len, const char* what) {
        if (given.empty()) return std::vector<double>(len, fill);
        require(given.size() == len, std::string(what) + " segment has the wrong length");
        return given;
    };
    cp.x_init = {segment(prm.nu0, prm.S0, D + 1, "nu0"), segment(prm.eta, prm.V0, D + 1, "eta")};
    cp.eta = {segment(prm.pi_init, prm.pi0, D, "pi0"), std::vector<double>(D, prm.c0)};
    cp.validate();
    return cp;
}

/// First adjoint component as stated for the portfolio model: a homogeneous system in (p1, q1)
/// with b p1, <p1 S b_x, mu_b>, sigma q1 and <q1 S sigma_x, mu_sigma> terms and no data.
template <class Driver>
AbsdeProblem portfolio_first_adjoint(const PortfolioParams& prm, const Trajectory& x, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    const auto mb = prm.measure_or_delta0(prm.mu_b), ms = prm.measure_or_delta0(prm.mu_sigma);
    const auto ab = lag_weights(mb, g), as = lag_weights(ms, g);
    AdaptedProcess bcoef(0, g.N - 1, S), bx(0, g.N - 1, S), scoef(0, g.N - 1, S), sx(0, g.N - 1, S);
    for (int k = 0; k < g.N; ++k)
        for (std::size_t s = 0; s < S; ++s) {
            double zb = 0.0, zs = 0.0;
            for (std::size_t j = 0; j < ab.size(); ++j) zb += ab[j] * x[0](k - static_cast<int>(j), s);
            for (std::size_t j = 0; j < as.size(); ++j) zs += as[j] * x[0](k - static_cast<int>(j), s);
            bcoef(k, s) = prm.b.value(zb);
            bx(k, s) = x[0](k, s) * prm.b.slope(zb);
            scoef(k, s) = -prm.sigma.value(zs);
            sx(k, s) = -x[0](k, s) * prm.sigma.slope(zs);
        }
    AbsdeProblem prob;
    prob.grid = g;
    prob.f = {AdaptedProcess(0, g.N - 1, S)};
    prob.terms.push_back({0, false, lag_weights(prm.delta(0.0), g), {bcoef}});
    prob.terms.push_back({0, false, ab, {bx}});
    prob.terms.push_back({0, true, lag_weights(prm.delta(0.0), g), {scoef}});
    prob.terms.push_back({0, true, as, {sx}});
    return prob;
}

}  // namespace delayctl
