#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "delayctl/absde.hpp"
#include "delayctl/bsde.hpp"
#include "absde_oracle.hpp"

using namespace delayctl;
using namespace absde_oracle;

TEST(BetaNorm, ZeroSmallBetaAndScaling) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 8, 0.25);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(1);
    const auto prob = to_problem(lat, random_instance(lat, rng));
    const auto zero = zero_pair(prob, lat.scenarios());
    EXPECT_EQ(beta_norm(zero, 1.0, lat), 0.0);
    const auto x = picard_solve(prob, lat).first;
    double plain = 0.0;
    for (int k = 0; k <= g.N + g.D - 1; ++k) {
        std::vector<double> v(lat.scenarios());
        for (std::size_t s = 0; s < v.size(); ++s)
            v[s] = std::pow(x.p[0].value_or_zero(k, s), 2) + std::pow(x.q[0].value_or_zero(k, s), 2);
        plain += g.dt() * lat.expectation(v);
    }
    EXPECT_NEAR(beta_norm(x, 1e-12, lat), plain, 1e-9 * plain);
    auto y = x;
    y.p[0] *= 3.0;
    y.q[0] *= 3.0;
    EXPECT_NEAR(beta_norm(y, 2.0, lat), 9.0 * beta_norm(x, 2.0, lat), 1e-12 * beta_norm(y, 2.0, lat));
    EXPECT_THROW(beta_norm(x, 0.0, lat), Error);
}

TEST(GammaStep, ZeroInputAndZeroData) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 6, 0.5);
    const BinaryLattice lat(g);
    const std::size_t S = lat.scenarios();
    const auto empty = scalar_absde(lat, AdaptedProcess(0, 5, S), AdaptedProcess(0, 8, S, 1.0),
                                    AdaptedProcess(0, 8, S, 1.0), AdaptedProcess(3, 6, S), RegularMeasure(),
                                    RegularMeasure::dirac(-0.5, 0.0, -0.25), RegularMeasure::dirac(-0.5, 0.0, 0.0));
    const auto out = gamma_step(zero_pair(empty, S), empty, lat);
    EXPECT_EQ(out.p[0].sup_abs(), 0.0);
    EXPECT_EQ(out.q[0].sup_abs(), 0.0);
    const auto [x, tr] = picard_solve(empty, lat);
    EXPECT_EQ(tr.iterations, 1);
    EXPECT_EQ(x.p[0].sup_abs(), 0.0);
}

TEST(Picard, NoAnticipationConvergesInTwoIterations) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 8, 0.25);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(3);
    auto in = random_instance(lat, rng);
    in.m1 = RegularMeasure();
    in.m2 = RegularMeasure();
    const auto [x, tr] = picard_solve(to_problem(lat, in), lat);
    EXPECT_EQ(tr.iterations, 2);
    EXPECT_LT(distance(x, brute_force(lat, in), g.N), 1e-12);
}

TEST(Picard, DiracAtZeroReducesToClassicalRecursion) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 10, 0.3);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(5);
    auto in = random_instance(lat, rng);
    in.m1 = RegularMeasure::dirac(-g.delay(), 0.0, 0.0);
    in.m2 = RegularMeasure::dirac(-g.delay(), 0.0, 0.0);
    auto prob = to_problem(lat, in);
    // The one-step-forward p term makes the iteration nilpotent; run it to exhaustion.
    prob.tol = 1e-28;
    const auto x = picard_solve(prob, lat).first;
    LinearBsdeProblem b;
    b.grid = g;
    b.f = in.f;
    b.g = in.g;
    b.h = in.h;
    b.window = in.m;
    b.xi = in.xi;
    b.scheme = GScheme::explicit_;
    const auto y = solve_recursion(b, lat);
    for (int k = 0; k <= g.N; ++k)
        for (std::size_t s = 0; s < lat.scenarios(); ++s) {
            EXPECT_NEAR(x.p[0](k, s), y.p[0](k, s), 1e-12);
            if (k < g.N) EXPECT_NEAR(x.q[0](k, s), y.q[0](k, s), 1e-12);
        }
}

TEST(Picard, MatchesBruteForceAndDirectSolve) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 8, 0.25);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(7);
    for (int rep = 0; rep < 4; ++rep) {
        const auto in = random_instance(lat, rng);
        const auto prob = to_problem(lat, in);
        const auto [x, tr] = picard_solve(prob, lat);
        const auto [y, info] = direct_solve(prob, lat);
        const auto ref = brute_force(lat, in);
        EXPECT_TRUE(tr.converged);
        EXPECT_LT(distance(x, ref, g.N), 1e-9);
        EXPECT_LT(distance(y, ref, g.N), 1e-9);
        EXPECT_LT(sup_diff(x, y), 1e-9);
        EXPECT_LT(info.residual, 1e-10);
        EXPECT_LT(equation_residual(x, prob, lat), 1e-9);
        EXPECT_LT(equation_residual(y, prob, lat), 1e-10);
        for (int k = g.N + 1; k <= x.p[0].last_step(); ++k) EXPECT_EQ(x.p[0](k, 0), 0.0);
        for (int k = g.N; k <= x.q[0].last_step(); ++k) EXPECT_EQ(x.q[0](k, 0), 0.0);
        EXPECT_LE(tr.max_ratio(), 1.05 * tr.bound_discrete);
        EXPECT_LT(tr.bound_discrete, 1.0);
    }
}

TEST(DirectSolve, ZeroDataAndSuperposition) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 8, 0.25);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(9);
    auto a = random_instance(lat, rng);
    auto zero = a;
    zero.f *= 0.0;
    zero.xi *= 0.0;
    EXPECT_EQ(direct_solve(to_problem(lat, zero), lat).first.p[0].sup_abs(), 0.0);

    auto b = a;
    b.f = of_brownian(lat, 0, g.N - 1, [](int k, double w) { return std::cos(w * k); });
    b.xi = of_brownian(lat, g.N - g.D, g.N, [](int, double w) { return w; });
    auto sum = a;
    for (int k = 0; k < g.N; ++k)
        for (std::size_t s = 0; s < lat.scenarios(); ++s) sum.f(k, s) += 2.0 * b.f(k, s);
    for (int k = g.N - g.D; k <= g.N; ++k)
        for (std::size_t s = 0; s < lat.scenarios(); ++s) sum.xi(k, s) += 2.0 * b.xi(k, s);
    const auto xa = direct_solve(to_problem(lat, a), lat).first;
    const auto xb = direct_solve(to_problem(lat, b), lat).first;
    const auto xs = direct_solve(to_problem(lat, sum), lat).first;
    for (int k = 0; k <= g.N; ++k)
        for (std::size_t s = 0; s < lat.scenarios(); ++s)
            EXPECT_NEAR(xs.p[0](k, s), xa.p[0](k, s) + 2.0 * xb.p[0](k, s), 1e-11);
    EXPECT_THROW(direct_solve(to_problem(BinaryLattice(TimeGrid(14, 2, 1.0)), a), lat), Error);
}

TEST(Picard, NonConvergenceIsASolverError) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 8, 0.25);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(11);
    auto prob = to_problem(lat, random_instance(lat, rng));
    prob.max_iter = 2;
    try {
        picard_solve(prob, lat);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::solver);
    }
}

TEST(MeasureApprox, PointMassInsideWindowConverges) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 10, 0.2);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(13);
    auto in = random_instance(lat, rng);
    in.m = RegularMeasure::dirac(g.T - g.delay(), g.T, g.T - g.delay() / 2);
    const auto rows = solve_with_measure_approx(to_problem(lat, in), {8, 32, 128, 512}, lat);
    ASSERT_EQ(rows.size(), 4u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LT(rows[i].error, rows[i - 1].error);
    EXPECT_LT(rows.back().error, 1e-3);
}

TEST(MeasureApprox, ConstantDensityPlusTerminalAtomIsReproduced) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 10, 0.2);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(15);
    auto in = random_instance(lat, rng);
    in.m = RegularMeasure(g.T - g.delay(), g.T, {{g.T, 0.7}}, {1.5});
    for (const auto& row : solve_with_measure_approx(to_problem(lat, in), {4, 16, 64}, lat))
        EXPECT_LT(row.error, 1e-12);
}

TEST(DifferentialForm, TerminalAtomAndDensityIncrements) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 10, 0.3);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(17);
    auto in = random_instance(lat, rng);
    in.m = RegularMeasure::dirac(g.T - g.delay(), g.T, g.T, 1.0);
    auto rep = differential_form_check(to_problem(lat, in), lat);
    EXPECT_LT(rep.terminal_gap, 1e-14);
    EXPECT_LT(rep.step_residual, 1e-12);
    EXPECT_EQ(rep.terminal_density_weight, 0.0);

    in.m = RegularMeasure(g.T - g.delay(), g.T, {}, {2.0});
    in.xi = AdaptedProcess(g.N - g.D, g.N, lat.scenarios(), 1.0);
    rep = differential_form_check(to_problem(lat, in), lat);
    EXPECT_LT(rep.step_residual, 1e-12);
    // Hat weights charge half a cell of density to the last node.
    EXPECT_NEAR(rep.terminal_density_weight, 2.0 * g.dt() / 2, 1e-12);
    EXPECT_NEAR(rep.terminal_gap, 2.0 * g.dt() / 2, 1e-12);

    in.m = RegularMeasure::dirac(g.T - g.delay(), g.T, g.T - 0.1);
    EXPECT_THROW(differential_form_check(to_problem(lat, in), lat), Error);
}

TEST(AnticipatedBounds, LeftSideBelowRightSide) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 8, 0.25);
    const BinaryLattice lat(g);
    std::mt19937_64 rng(19);
    for (int rep = 0; rep < 3; ++rep) {
        const auto prob = to_problem(lat, random_instance(lat, rng));
        const auto x = picard_solve(prob, lat).first;
        const auto bounds = anticipated_q_bounds(x, prob, lat);
        ASSERT_EQ(bounds.size(), 1u);
        EXPECT_GT(bounds[0].lhs, 0.0);
        EXPECT_LE(bounds[0].lhs, bounds[0].rhs);
    }
}

TEST(Picard, MonteCarloDriverAgreesWithLatticeInMean) {
    const TimeGrid g = TimeGrid::with_delay(1.0, 8, 0.25);
    std::mt19937_64 rng(21);
    const BinaryLattice lat(g);
    auto in = random_instance(lat, rng);
    // Deterministic data so the same problem can be posed on both drivers.
    in.f = AdaptedProcess(0, g.N - 1, lat.scenarios(), 0.4);
    in.g = AdaptedProcess(0, g.N + g.D - 1, lat.scenarios(), 0.7);
    in.h = AdaptedProcess(0, g.N + g.D - 1, lat.scenarios(), 0.3);
    in.xi = AdaptedProcess(g.N - g.D, g.N, lat.scenarios(), 1.0);
    const double p0 = picard_solve(to_problem(lat, in), lat).first.p[0](0, 0);
    const MonteCarloDriver mc(g, 2000, 4);
    const std::size_t M = mc.scenarios();
    const auto prob = scalar_absde(mc, AdaptedProcess(0, g.N - 1, M, 0.4), AdaptedProcess(0, g.N + g.D - 1, M, 0.7),
                                   AdaptedProcess(0, g.N + g.D - 1, M, 0.3), AdaptedProcess(g.N - g.D, g.N, M, 1.0),
                                   in.m, in.m1, in.m2);
    // Regression noise in the q estimate only enters through the h q term.
    EXPECT_NEAR(picard_solve(prob, mc).first.p[0](0, 0), p0, 1e-2);
}
