#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "delayctl/models.hpp"
#include "delayctl/smp.hpp"

using namespace delayctl;

namespace {

AdvertisingParams delayed_advertising() {
    AdvertisingParams prm;
    prm.N = 10;
    prm.d = 0.3;
    const double d = 0.3;
    prm.mu_a = RegularMeasure(-d, 0.0, {{-d, 0.2}}, {0.3, -0.1, 0.2});
    prm.mu_b = RegularMeasure(-d, 0.0, {{-d, 0.5}, {-0.1, 0.25}});
    prm.mu_phi = RegularMeasure(-d, 0.0, {{-0.2, 0.3}, {0.0, 0.7}});
    prm.y_target = 0.4;
    return prm;
}

double max_gap(const AdaptedPair& x, const AdaptedPair& y, int N) {
    double m = 0.0;
    for (int k = 0; k <= N; ++k)
        for (std::size_t s = 0; s < x.p[0].scenarios; ++s) {
            m = std::max(m, std::abs(x.p[0](k, s) - y.p[0](k, s)));
            if (k < N) m = std::max(m, std::abs(x.q[0](k, s) - y.q[0](k, s)));
        }
    return m;
}

}  // namespace

TEST(Payoff, DerivativesMatchDifferences) {
    const Payoff kinds[] = {{Payoff::Kind::quadratic, 2.0, 0.3, 1.0, 5.0},
                            {Payoff::Kind::linear, 1.5, 0.0, 1.0, 5.0},
                            {Payoff::Kind::utility, 1.0, 0.0, 2.0, 3.0}};
    for (const auto& p : kinds)
        for (double z : {-2.0, -0.3, 0.0, 0.8, 4.0}) {
            double g = 0.0;
            p.value(z, &g);
            const double h = 1e-6, fd = (p.value(z + h, nullptr) - p.value(z - h, nullptr)) / (2 * h);
            EXPECT_NEAR(g, fd, 1e-7);
        }
    const Payoff u{Payoff::Kind::utility, 1.0, 0.0, 2.0, 3.0};
    EXPECT_NEAR(u.value(0.0, nullptr), 0.0, 1e-15);
    EXPECT_LT(u.value(100.0, nullptr), 0.5);
}

TEST(Advertising, GenericAdjointMatchesHandWrittenOne) {
    const auto prm = delayed_advertising();
    const auto cp = advertising_problem(prm);
    const BinaryLattice lat(cp.grid);
    auto u = cp.zero_direction(lat.scenarios());
    for (int k = 0; k < cp.grid.N; ++k)
        for (std::size_t s = 0; s < lat.scenarios(); ++s)
            u.components[0](k, s) = 0.3 * std::cos(k) + 0.2 * std::tanh(lat.brownian(k)[s]);
    const auto y = simulate_state(cp, u, lat);
    const auto generic = picard_solve(build_adjoint(cp, y, u, lat), lat).first;
    const auto hand = picard_solve(advertising_adjoint(prm, y, lat), lat).first;
    EXPECT_LT(max_gap(generic, hand, cp.grid.N), 1e-12);
}

TEST(Advertising, UndelayedDeterministicAdjointIsGeometric) {
    AdvertisingParams prm;
    prm.N = 12;
    prm.sigma_a = prm.sigma_b = 0.0;
    prm.q = 0.0;
    prm.phi = {Payoff::Kind::quadratic, 1.0, 0.5, 1.0, 5.0};
    const auto cp = advertising_problem(prm);
    const BinaryLattice lat(cp.grid);
    const auto u = cp.constant_control({0.3}, lat.scenarios());
    const auto y = simulate_state(cp, u, lat);
    const auto adj = picard_solve(advertising_adjoint(prm, y, lat), lat).first;
    const double dt = cp.grid.dt(), yN = y[0](prm.N, 0);
    for (int k = 0; k <= prm.N; ++k)
        EXPECT_NEAR(adj.p[0](k, 0), (yN - 0.5) * std::pow(1 + prm.a0 * dt, prm.N - k), 1e-13);
    EXPECT_LT(adj.q[0].sup_abs(), 1e-14);
}

TEST(Advertising, SameParametersGiveSameProblem) {
    const auto prm = delayed_advertising();
    const auto a = advertising_problem(prm), b = advertising_problem(prm);
    const BinaryLattice lat(a.grid);
    const auto u = a.constant_control({0.2}, lat.scenarios());
    EXPECT_EQ(evaluate_cost(a, u, lat).value, evaluate_cost(b, u, lat).value);
}

TEST(Portfolio, FirstAdjointVanishes) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int rep = 0; rep < 5; ++rep) {
        PortfolioParams prm;
        prm.N = 8;
        prm.d = 0.25;
        const double d = prm.grid().delay();
        prm.b = {0.05 + 0.1 * U(rng), 0.05 * U(rng), 1.0};
        prm.sigma = {0.1 + 0.2 * U(rng), 0.05 * U(rng), 1.0};
        prm.r = {0.01 + 0.03 * U(rng), 0.01 * U(rng), 1.0};
        prm.mu_b = RegularMeasure(-d, 0.0, {{-d, U(rng)}, {0.0, U(rng)}});
        prm.mu_sigma = RegularMeasure(-d, 0.0, {{0.0, 1.0}}, {U(rng), U(rng)});
        const auto cp = portfolio_problem(prm);
        const BinaryLattice lat(cp.grid);
        const auto u = cp.constant_control({0.5 * U(rng), 0.05 * U(rng)}, lat.scenarios());
        const auto x = simulate_state(cp, u, lat);
        const auto [adj, tr] = picard_solve(portfolio_first_adjoint(prm, x, lat), lat);
        EXPECT_LT(adj.p[0].sup_abs(), 1e-12);
        EXPECT_LT(adj.q[0].sup_abs(), 1e-12);
    }
}

TEST(Portfolio, WealthAdjointWithConstantRates) {
    PortfolioParams prm;
    prm.N = 10;
    prm.d = 0.2;
    prm.U = {Payoff::Kind::linear, 2.0, 0.0, 1.0, 5.0};
    const auto cp = portfolio_problem(prm);
    const BinaryLattice lat(cp.grid);
    const auto u = cp.constant_control({0.4, 0.02}, lat.scenarios());
    const auto x = simulate_state(cp, u, lat);
    const auto adj = picard_solve(build_adjoint(cp, x, u, lat), lat).first;
    const double dt = cp.grid.dt(), r = prm.r.x0;
    for (int k = 0; k <= prm.N; ++k)
        for (std::size_t s = 0; s < lat.scenarios(); s += 7)
            EXPECT_NEAR(adj.p[1](k, s), -2.0 * std::pow(1 + r * dt, prm.N - k), 1e-12);
}

TEST(Portfolio, FullInvestmentIsOptimalWhenDriftBeatsRate) {
    PortfolioParams prm;
    prm.N = 10;
    prm.d = 0.2;
    const auto cp = portfolio_problem(prm);
    const BinaryLattice lat(cp.grid);
    const auto ubar = cp.constant_control({prm.pi_max, prm.c_min}, lat.scenarios());
    for (const auto& v : comparison_family(cp, ubar, 10, lat))
        EXPECT_EQ(optimality_residual(cp, ubar, v, lat).violation_fraction, 0.0);
    const auto half = cp.constant_control({0.5, prm.c_min}, lat.scenarios());
    const auto rep = optimality_residual(cp, half, cp.constant_control({prm.pi_max, prm.c_min}, lat.scenarios()), lat);
    EXPECT_GT(rep.violation_fraction, 0.0);
}

TEST(Portfolio, RejectsBadSegments) {
    PortfolioParams prm;
    prm.nu0 = {1.0, 2.0};
    EXPECT_THROW(portfolio_problem(prm), Error);
}
