#pragma once

#include <Eigen/Dense>

#include <climits>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "delayctl/error.hpp"
#include "delayctl/exec.hpp"
#include "delayctl/measures.hpp"

namespace delayctl {

/// Uniform grid on [0,T] with N steps; the delay d spans exactly D steps.
struct TimeGrid {
    int N = 1;
    int D = 0;
    double T = 1.0;

    TimeGrid() = default;
    TimeGrid(int steps, int delay_steps, double horizon) : N(steps), D(delay_steps), T(horizon) {
        require(N >= 1, "grid needs N >= 1");
        require(D >= 0, "grid needs D >= 0");
        require(std::isfinite(T) && T > 0.0, "grid needs T > 0");
    }

    static TimeGrid with_delay(double horizon, int steps, double delay) {
        require(steps >= 1 && horizon > 0.0, "grid needs N >= 1 and T > 0");
        const double r = delay * steps / horizon;
        const double k = std::round(r);
        require(delay >= 0.0 && std::abs(r - k) <= 1e-9 * std::max(1.0, r),
                "delay " + std::to_string(delay) + " is not a multiple of dt = " + std::to_string(horizon / steps));
        return TimeGrid(steps, static_cast<int>(k), horizon);
    }

    double dt() const { return T / N; }
    double delay() const { return D * dt(); }
    double time(int k) const { return k * dt(); }
};

/// Values per (step, scenario), stored at full scenario resolution.
struct AdaptedProcess {
    int first_step = 0;
    std::size_t scenarios = 0;
    std::vector<std::vector<double>> rows;
    int extension_from = INT_MAX;

    AdaptedProcess() = default;
    AdaptedProcess(int first, int last, std::size_t n_scenarios, double fill = 0.0)
        : first_step(first), scenarios(n_scenarios),
          rows(static_cast<std::size_t>(std::max(0, last - first + 1)), std::vector<double>(n_scenarios, fill)) {}

    int last_step() const { return first_step + static_cast<int>(rows.size()) - 1; }
    bool has(int k) const { return k >= first_step && k <= last_step(); }

    std::vector<double>& at(int k) {
        require(has(k), "process has no step " + std::to_string(k));
        return rows[static_cast<std::size_t>(k - first_step)];
    }
    const std::vector<double>& at(int k) const {
        require(has(k), "process has no step " + std::to_string(k));
        return rows[static_cast<std::size_t>(k - first_step)];
    }
    double operator()(int k, std::size_t s) const { return rows[static_cast<std::size_t>(k - first_step)][s]; }
    double& operator()(int k, std::size_t s) { return rows[static_cast<std::size_t>(k - first_step)][s]; }

    /// Value at step k, zero outside the stored range.
    double value_or_zero(int k, std::size_t s) const { return has(k) ? (*this)(k, s) : 0.0; }

    double sup_abs() const {
        double m = 0.0;
        for (const auto& r : rows)
            for (double v : r) m = std::max(m, std::abs(v));
        return m;
    }

    AdaptedProcess& operator*=(double c) {
        for (auto& r : rows)
            for (auto& v : r) v *= c;
        return *this;
    }
};

inline double sup_diff(const AdaptedProcess& x, const AdaptedProcess& y) {
    require(x.first_step == y.first_step && x.rows.size() == y.rows.size() && x.scenarios == y.scenarios,
            "processes have different shapes");
    double m = 0.0;
    for (std::size_t i = 0; i < x.rows.size(); ++i)
        for (std::size_t s = 0; s < x.scenarios; ++s) m = std::max(m, std::abs(x.rows[i][s] - y.rows[i][s]));
    return m;
}

/// Non-recombining +-sqrt(dt) tree. Scenario s is a leaf; bit (N-1-k) of s is
/// the sign of the increment at step k.
class BinaryLattice {
public:
    static constexpr bool exact = true;

    static constexpr int default_max_depth = 18;

    explicit BinaryLattice(TimeGrid grid, int max_depth = default_max_depth) : grid_(grid) {
        require(grid.N <= max_depth, "lattice depth " + std::to_string(grid.N) + " exceeds cap " +
                                         std::to_string(max_depth));
        require(grid.N <= 26, "lattice depth above 26 is not addressable");
        const std::size_t S = scenarios();
        const double sq = std::sqrt(grid.dt());
        dW_.assign(grid.N, std::vector<double>(S));
        W_.assign(grid.N + 1, std::vector<double>(S, 0.0));
        for (int k = 0; k < grid.N; ++k)
            for (std::size_t s = 0; s < S; ++s) {
                dW_[k][s] = ((s >> (grid.N - 1 - k)) & 1u) ? sq : -sq;
                W_[k + 1][s] = W_[k][s] + dW_[k][s];
            }
    }

    const TimeGrid& grid() const { return grid_; }
    std::size_t scenarios() const { return std::size_t{1} << grid_.N; }
    const std::vector<double>& increment(int k) const { return dW_.at(static_cast<std::size_t>(k)); }
    const std::vector<double>& brownian(int k) const { return W_.at(static_cast<std::size_t>(k)); }

    std::size_t node_count(int k) const { return std::size_t{1} << std::min(k, grid_.N); }
    std::size_t node_of(int k, std::size_t s) const { return k >= grid_.N ? s : s >> (grid_.N - k); }
    std::string node_label(int k, std::size_t s) const {
        return "lattice node " + std::to_string(node_of(k, s)) + " at step " + std::to_string(k);
    }

    /// Exact conditional expectation onto the step-k partition.
    std::vector<double> project(std::span<const double> x, int k) const {
        require(x.size() == scenarios(), "values do not match the lattice size");
        if (k >= grid_.N) return {x.begin(), x.end()};
        require(k >= 0, "cannot condition on a negative step");
        const std::size_t block = std::size_t{1} << (grid_.N - k);
        const std::size_t blocks = node_count(k);
        std::vector<double> out(x.size());
        parallel_for(blocks, [&](std::size_t b) {
            const double m = pairwise_sum(x.subspan(b * block, block)) / static_cast<double>(block);
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(b * block), block, m);
        }, std::max<std::size_t>(1, 4096 / block));
        return out;
    }

    double expectation(std::span<const double> x) const { return mean(x); }

private:
    TimeGrid grid_;
    std::vector<std::vector<double>> dW_;
    std::vector<std::vector<double>> W_;
};

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace detail

/// Gaussian paths with least-squares regression for conditional expectations.
/// Each path draws from its own generator, so paths do not depend on threads.
class MonteCarloDriver {
public:
    static constexpr bool exact = false;

    MonteCarloDriver(TimeGrid grid, std::size_t paths, std::uint64_t seed, int basis_degree = 2)
        : grid_(grid), paths_(paths), seed_(seed), degree_(basis_degree) {
        require(paths >= 2, "Monte Carlo needs at least two paths");
        require(basis_degree >= 0 && basis_degree <= 3, "basis degree must be in 0..3");
        const double sd = std::sqrt(grid.dt());
        dW_.assign(grid.N, std::vector<double>(paths));
        W_.assign(grid.N + 1, std::vector<double>(paths, 0.0));
        parallel_for(paths, [&](std::size_t p) {
            std::mt19937_64 rng(detail::splitmix64(seed ^ detail::splitmix64(p + 1)));
            std::normal_distribution<double> normal(0.0, 1.0);
            for (int k = 0; k < grid.N; ++k) {
                dW_[k][p] = sd * normal(rng);
                W_[k + 1][p] = W_[k][p] + dW_[k][p];
            }
        });
        AdaptedProcess w(0, grid.N, paths), avg(0, grid.N, paths);
        for (int k = 0; k <= grid.N; ++k) {
            w.at(k) = W_[k];
            const int lo = std::max(0, k - grid.D);
            for (std::size_t p = 0; p < paths; ++p) {
                double s = 0.0;
                for (int j = lo; j <= k; ++j) s += W_[j][p];
                avg(k, p) = s / (k - lo + 1);
            }
        }
        regressors_ = {std::move(w)};
        if (grid.D > 0) regressors_.push_back(std::move(avg));
        factorize();
    }

    /// Copy whose regression basis also contains the given processes.
    MonteCarloDriver with_regressors(const std::vector<AdaptedProcess>& extra) const {
        MonteCarloDriver out = *this;
        for (const auto& r : extra) {
            require(r.scenarios == paths_ && r.has(0) && r.has(grid_.N), "regressor must cover steps 0..N");
            out.regressors_.push_back(r);
        }
        out.factorize();
        return out;
    }

    /// Copy that regresses on exactly the given processes.
    MonteCarloDriver with_only_regressors(const std::vector<AdaptedProcess>& regs) const {
        MonteCarloDriver out = *this;
        out.regressors_.clear();
        for (const auto& r : regs) {
            require(r.scenarios == paths_ && r.has(0) && r.has(grid_.N), "regressor must cover steps 0..N");
            out.regressors_.push_back(r);
        }
        out.factorize();
        return out;
    }

    const TimeGrid& grid() const { return grid_; }
    std::size_t scenarios() const { return paths_; }
    std::uint64_t seed() const { return seed_; }
    int basis_degree() const { return degree_; }
    const std::vector<double>& increment(int k) const { return dW_.at(static_cast<std::size_t>(k)); }
    const std::vector<double>& brownian(int k) const { return W_.at(static_cast<std::size_t>(k)); }
    std::string node_label(int k, std::size_t s) const {
        return "path " + std::to_string(s) + " at step " + std::to_string(k);
    }

    std::vector<double> project(std::span<const double> x, int k) const {
        require(x.size() == paths_, "values do not match the path count");
        if (k >= grid_.N) return {x.begin(), x.end()};
        require(k >= 0, "cannot condition on a negative step");
        const auto& st = steps_[static_cast<std::size_t>(k)];
        const std::size_t B = st.exponents.size();
        if (B <= 1) return std::vector<double>(paths_, mean(x));
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(B));
        std::vector<double> phi(B);
        for (std::size_t p = 0; p < paths_; ++p) {
            basis(k, p, phi);
            for (std::size_t b = 0; b < B; ++b) rhs[static_cast<Eigen::Index>(b)] += phi[b] * x[p];
        }
        const Eigen::VectorXd coef = st.gram.solve(rhs);
        std::vector<double> out(paths_);
        parallel_for(paths_, [&](std::size_t p) {
            std::vector<double> ph(B);
            basis(k, p, ph);
            double v = 0.0;
            for (std::size_t b = 0; b < B; ++b) v += coef[static_cast<Eigen::Index>(b)] * ph[b];
            out[p] = v;
        });
        return out;
    }

    double expectation(std::span<const double> x) const { return mean(x); }

private:
    struct StepBasis {
        std::vector<std::size_t> active;           // regressor indices kept at this step
        Eigen::VectorXd mean, scale;               // standardisation of the active regressors
        std::vector<std::vector<int>> exponents;   // monomials in the active regressors
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> gram;
    };

    void basis(int k, std::size_t p, std::vector<double>& phi) const {
        const auto& st = steps_[static_cast<std::size_t>(k)];
        double z[8];
        for (std::size_t i = 0; i < st.active.size(); ++i)
            z[i] = (regressors_[st.active[i]](k, p) - st.mean[static_cast<Eigen::Index>(i)]) /
                   st.scale[static_cast<Eigen::Index>(i)];
        for (std::size_t b = 0; b < st.exponents.size(); ++b) {
            double v = 1.0;
            for (std::size_t i = 0; i < st.active.size(); ++i)
                for (int e = 0; e < st.exponents[b][i]; ++e) v *= z[i];
            phi[b] = v;
        }
    }

    static void monomials(std::size_t vars, int degree, std::vector<int>& cur, std::size_t pos,
                          std::vector<std::vector<int>>& out) {
        if (pos == vars) {
            out.push_back(cur);
            return;
        }
        int used = 0;
        for (std::size_t i = 0; i < pos; ++i) used += cur[i];
        for (int e = 0; e + used <= degree; ++e) {
            cur[pos] = e;
            monomials(vars, degree, cur, pos + 1, out);
        }
        cur[pos] = 0;
    }

    void factorize() {
        require(regressors_.size() <= 8, "at most 8 regressors are supported");
        steps_.assign(static_cast<std::size_t>(grid_.N), StepBasis{});
        for (int k = 0; k < grid_.N; ++k) {
            auto& st = steps_[static_cast<std::size_t>(k)];
            std::vector<double> mu, sd;
            for (std::size_t r = 0; r < regressors_.size(); ++r) {
                const auto& v = regressors_[r].at(k);
                const double m = mean(v);
                std::vector<double> sq(v.size());
                for (std::size_t p = 0; p < v.size(); ++p) sq[p] = (v[p] - m) * (v[p] - m);
                const double s = std::sqrt(mean(sq));
                if (s > 1e-12 * (1.0 + std::abs(m))) {
                    st.active.push_back(r);
                    mu.push_back(m);
                    sd.push_back(s);
                }
            }
            st.mean = Eigen::Map<Eigen::VectorXd>(mu.data(), static_cast<Eigen::Index>(mu.size()));
            st.scale = Eigen::Map<Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
            std::vector<int> cur(st.active.size(), 0);
            monomials(st.active.size(), degree_, cur, 0, st.exponents);
            const std::size_t B = st.exponents.size();
            if (B <= 1) continue;
            Eigen::MatrixXd G = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(B));
            std::vector<double> phi(B);
            for (std::size_t p = 0; p < paths_; ++p) {
                basis(k, p, phi);
                for (std::size_t a = 0; a < B; ++a)
                    for (std::size_t b = 0; b < B; ++b)
                        G(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) += phi[a] * phi[b];
            }
            st.gram.setThreshold(1e-10);
            st.gram.compute(G);
        }
    }

    TimeGrid grid_;
    std::size_t paths_;
    std::uint64_t seed_;
    int degree_;
    std::vector<std::vector<double>> dW_;
    std::vector<std::vector<double>> W_;
    std::vector<AdaptedProcess> regressors_;
    std::vector<StepBasis> steps_;
};

/// E[X | F_t] for X known at step s.
template <class Driver>
std::vector<double> cond_expect(std::span<const double> x, int s, int t, const Driver& drv) {
    require(t <= s, "cannot condition a step-" + std::to_string(s) + " value on later step " + std::to_string(t));
    return drv.project(x, t);
}

/// Density process Z_{k+1} = Z_k (1 - h_k dW_k), Z_0 = 1, on steps 0..N.
template <class Driver>
AdaptedProcess girsanov_weights(const AdaptedProcess& h, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    const double sq = std::sqrt(g.dt());
    AdaptedProcess Z(0, g.N, S, 1.0);
    for (int k = 0; k < g.N; ++k) {
        const auto& dW = drv.increment(k);
        for (std::size_t s = 0; s < S; ++s) {
            const double hk = h.value_or_zero(k, s);
            if (!(std::abs(hk) * sq < 1.0))
                throw Error(ErrorCode::solver, "Girsanov density not positive at " + drv.node_label(k, s) +
                                                   ": |h| sqrt(dt) = " + std::to_string(std::abs(hk) * sq) +
                                                   " >= 1; use a smaller dt");
            Z(k + 1, s) = Z(k, s) * (1.0 - hk * dW[s]);
        }
    }
    return Z;
}

/// q_k = E[p_{k+1} dW_k | F_k] / dt for every k with p defined at k and k+1 (k < N).
template <class Driver>
AdaptedProcess martingale_part(const AdaptedProcess& p, const Driver& drv) {
    const auto& g = drv.grid();
    const int lo = std::max(0, p.first_step);
    const int hi = std::min(p.last_step() - 1, g.N - 1);
    AdaptedProcess q(lo, hi, drv.scenarios());
    std::vector<double> prod(drv.scenarios());
    for (int k = lo; k <= hi; ++k) {
        const auto& dW = drv.increment(k);
        const auto& next = p.at(k + 1);
        for (std::size_t s = 0; s < prod.size(); ++s) prod[s] = next[s] * dW[s];
        auto e = drv.project(prod, k);
        for (std::size_t s = 0; s < prod.size(); ++s) q(k, s) = e[s] / g.dt();
    }
    return q;
}

/// Weights a_j, j = 0..D, with sum_j a_j x(t - j dt) = integral of x(t + theta) m(d theta), m on [-d, 0].
inline std::vector<double> lag_weights(const RegularMeasure& m, const TimeGrid& g) {
    const auto w = grid_weights(m, -g.delay(), g.dt(), static_cast<std::size_t>(g.D));
    return {w.rbegin(), w.rend()};
}

/// Weights for steps N-D..N of a measure on [T-d, T].
inline std::vector<double> window_weights(const RegularMeasure& m, const TimeGrid& g) {
    return grid_weights(m, g.T - g.delay(), g.dt(), static_cast<std::size_t>(g.D));
}

}  // namespace delayctl
