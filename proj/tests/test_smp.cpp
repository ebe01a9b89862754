#include <gtest/gtest.h>

#include <cmath>

#include "delayctl/bsde.hpp"
#include "delayctl/smp.hpp"
#include "oracles.hpp"
#include "problems.hpp"

using namespace delayctl;
using testprob::delta;

namespace {

double slope(const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= x.size();
    my /= y.size();
    double num = 0, den = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        den += std::pow(std::log(x[i]) - mx, 2);
    }
    return num / den;
}

}  // namespace

TEST(Duality, AffineQuadraticIsExactOnTheLattice) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 10, 0.3);
    const BinaryLattice lat(g);
    const auto cp = testprob::affine_quadratic(g);
    const auto ubar = testprob::wavy_direction(cp, lat, 0.4);
    const auto dir = testprob::wavy_direction(cp, lat, 1.0);
    const auto rep = duality_check(cp, ubar, dir, {1e-1, 1e-2, 1e-3}, lat);
    for (const auto& row : rep.rows) EXPECT_LT(row.gap_central, 1e-9 * std::max(1.0, std::abs(rep.pairing)));
    // The cost is quadratic in rho, so the forward gap is linear in rho.
    EXPECT_NEAR(rep.rows[0].gap_forward / rep.rows[1].gap_forward, 10.0, 1e-4);
}

TEST(Duality, SmoothNonlinearGapIsFirstOrder) {
    const TimeGrid g(8, 2, 1.0);
    const BinaryLattice lat(g);
    const auto cp = testprob::smooth_nonlinear(g);
    const auto ubar = cp.constant_control({0.2}, lat.scenarios());
    const auto dir = testprob::wavy_direction(cp, lat);
    const std::vector<double> rhos = {1e-1, 3e-2, 1e-2, 3e-3, 1e-3};
    const auto rep = duality_check(cp, ubar, dir, rhos, lat);
    std::vector<double> fwd, cen;
    for (const auto& row : rep.rows) {
        fwd.push_back(row.gap_forward);
        cen.push_back(row.gap_central);
    }
    EXPECT_NEAR(slope(rhos, fwd), 1.0, 0.1);
    EXPECT_NEAR(slope(rhos, cen), 2.0, 0.2);
}

TEST(Adjoint, DiracAtZeroIsTheClassicalAdjoint) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 10, 0.2);
    const BinaryLattice lat(g);
    const auto cp = testprob::undelayed_smooth(g);
    const auto u = testprob::wavy_direction(cp, lat, 0.3);
    const auto x = simulate_state(cp, u, lat);
    const std::size_t S = lat.scenarios();
    auto prob = build_adjoint(cp, x, u, lat);
    prob.tol = 1e-30;
    const auto adj = picard_solve(prob, lat).first;

    // p_k = E_k p_{k+1} + dt (F_x E_k p_{k+1} - G_x q_k + L_x), p_N = h'(x_N), written out by hand.
    LinearBsdeProblem ref;
    ref.grid = g;
    ref.f = AdaptedProcess(0, g.N - 1, S);
    ref.g = AdaptedProcess(0, g.N - 1, S);
    ref.h = AdaptedProcess(0, g.N - 1, S);
    for (int k = 0; k < g.N; ++k)
        for (std::size_t s = 0; s < S; ++s) {
            const double y = x[0](k, s);
            ref.f(k, s) = 2 * y / (1 + y * y);
            ref.g(k, s) = std::cos(y);
            ref.h(k, s) = 0.3 * std::sin(y);
        }
    ref.window = RegularMeasure::dirac(g.T - g.delay(), g.T, g.T);
    ref.xi = AdaptedProcess(g.N - g.D, g.N, S);
    for (std::size_t s = 0; s < S; ++s) ref.xi(g.N, s) = std::cos(x[0](g.N, s));
    ref.scheme = GScheme::explicit_;
    const auto cl = solve_recursion(ref, lat);
    for (int k = 0; k <= g.N; ++k)
        for (std::size_t s = 0; s < S; ++s) {
            EXPECT_NEAR(adj.p[0](k, s), cl.p[0](k, s), 1e-12);
            if (k < g.N) EXPECT_NEAR(adj.q[0](k, s), cl.q[0](k, s), 1e-12);
        }

    // Classical gradient: phi = F_u E_k p_{k+1} - G_u q_k + L_u.
    const auto grad = smp_gradient(cp, linearize(cp, x, u, lat), adj, lat);
    for (int k = 0; k < g.N; ++k) {
        const auto Ep = lat.project(cl.p[0].at(k + 1), k);
        for (std::size_t s = 0; s < S; ++s) {
            const double v = u.components[0](k, s), th = std::tanh(v);
            const double phi = v * Ep[s] - 0.2 * (1 - th * th) * cl.q[0](k, s) + v;
            EXPECT_NEAR(grad.phi[0](k, s), phi, 1e-12);
        }
    }
}

TEST(Optimality, RiccatiOptimumHasNonnegativeResidual) {
    // p is linear in the state along the feedback path, so a linear basis in y is exact up to sampling.
    const int N = 256;
    const MonteCarloDriver base(TimeGrid(N, 1, 1.0), 4000, 21, 1);
    const auto lq = testprob::riccati_lq(base);
    const auto& [cp, ubar, y] = lq;
    const auto mc = base.with_only_regressors({y});
    const auto x = simulate_state(cp, ubar, mc);
    for (std::size_t s = 0; s < mc.scenarios(); s += 17) EXPECT_NEAR(x[0](N, s), y(N, s), 1e-12);

    auto worst = [&](const ControlPath& u) {
        const auto xu = simulate_state(cp, u, mc);
        const auto adj = picard_solve(build_adjoint(cp, xu, u, mc), mc).first;
        const auto grad = smp_gradient(cp, linearize(cp, xu, u, mc), adj, mc);
        double w = std::numeric_limits<double>::infinity();
        for (const auto& v : comparison_family(cp, u, 8, mc)) {
            const auto rep = optimality_residual(grad, u, v, mc);
            w = std::min(w, rep.min_residual / rep.residual_scale);
        }
        return w;
    };
    EXPECT_GE(worst(ubar), -1e-2);
    auto shifted = ubar;
    for (int k = 0; k < N; ++k)
        for (std::size_t s = 0; s < mc.scenarios(); ++s) shifted.components[0](k, s) += 0.5;
    EXPECT_LT(worst(shifted), -1e-2);
}

TEST(Variational, FirstOrderLimitMatchesGradientPairing) {
    const TimeGrid g(8, 2, 1.0);
    const BinaryLattice lat(g);
    const auto cp = testprob::smooth_nonlinear(g);
    const auto ubar = cp.constant_control({0.2}, lat.scenarios());
    const auto dir = testprob::wavy_direction(cp, lat);
    const auto x = simulate_state(cp, ubar, lat);
    const auto adj = picard_solve(build_adjoint(cp, x, ubar, lat), lat).first;
    const auto grad = smp_gradient(cp, linearize(cp, x, ubar, lat), adj, lat);
    const auto lin = optimality_residual(grad, ubar, ubar.plus(dir, 1.0), lat);
    const double rho = 1e-6;
    const auto var = variational_residual(cp, x, ubar, adj, rho, dir, lat);
    for (int m = 0; m < g.N; ++m)
        for (std::size_t s = 0; s < lat.scenarios(); s += 5)
            EXPECT_NEAR(var.residual(m, s) / rho, lin.residual(m, s), 1e-4 * (1 + std::abs(lin.residual(m, s))));
}

TEST(Hamiltonian, ZeroAdjointLeavesRunningCost) {
    const TimeGrid g(8, 2, 1.0);
    const auto cp = testprob::affine_quadratic(g);
    const std::vector<std::vector<double>> xs = {{1.0, 2.0, 3.0}}, us = {{0.0, 0.0, 0.5}};
    EXPECT_DOUBLE_EQ(hamiltonian(cp, 3, xs, us, {0.0}, {0.0}), 0.5 * 9 + 0.5 * 0.25 + 0.3);
    const double h0 = hamiltonian(cp, 3, xs, us, {0.0}, {0.0}), h1 = hamiltonian(cp, 3, xs, us, {1.0}, {0.0}),
                 h2 = hamiltonian(cp, 3, xs, us, {2.0}, {-1.0}), h3 = hamiltonian(cp, 3, xs, us, {0.0}, {-1.0});
    EXPECT_NEAR(h2 - h0, 2 * (h1 - h0) + (h3 - h0), 1e-14);
    EXPECT_THROW(hamiltonian(cp, 3, {{1.0}}, us, {0.0}, {0.0}), Error);
}

TEST(ComparisonFamily, RespectsTheBox) {
    const TimeGrid g(6, 1, 1.0);
    const BinaryLattice lat(g);
    auto cp = testprob::affine_quadratic(TimeGrid(6, 1, 1.0));
    cp.admissible = {{-0.5}, {0.25}};
    const auto ubar = cp.constant_control({0.0}, lat.scenarios());
    const auto fam = comparison_family(cp, ubar, 10, lat);
    EXPECT_EQ(fam.size(), 10u);
    for (const auto& v : fam)
        for (int k = 0; k < g.N; ++k)
            for (std::size_t s = 0; s < lat.scenarios(); ++s) {
                EXPECT_GE(v.components[0](k, s), -0.5);
                EXPECT_LE(v.components[0](k, s), 0.25);
            }
}
