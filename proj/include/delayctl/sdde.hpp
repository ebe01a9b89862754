#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "delayctl/drivers.hpp"
#include "delayctl/measures.hpp"

namespace delayctl {

enum class Source { state, control };

/// One contraction of the past: integral of component(t + theta) against measure on [-d, 0].
struct Channel {
    Source source = Source::state;
    std::size_t component = 0;
    RegularMeasure measure;
};

/// Coefficient of the form c(t, z_1, ..., z_m), z_i the channel contractions.
/// jac is row-major [output][channel].
class DelayedCoefficient {
public:
    using Eval = std::function<void(double t, const double* z, double* value, double* jac)>;

    DelayedCoefficient() = default;
    DelayedCoefficient(std::string kind, std::size_t out_dim, std::vector<Channel> channels, Eval eval,
                       double lipschitz = std::numeric_limits<double>::infinity())
        : kind_(std::move(kind)), out_dim_(out_dim), channels_(std::move(channels)), eval_(std::move(eval)),
          lipschitz_(lipschitz) {
        require(out_dim_ >= 1, "coefficient needs at least one output");
        require(static_cast<bool>(eval_), "coefficient needs an evaluation function");
    }

    const std::string& kind() const { return kind_; }
    std::size_t out_dim() const { return out_dim_; }
    std::size_t width() const { return channels_.size(); }
    const std::vector<Channel>& channels() const { return channels_; }
    double lipschitz() const { return lipschitz_; }

    void eval(double t, const double* z, double* value, double* jac = nullptr) const { eval_(t, z, value, jac); }

private:
    std::string kind_ = "zero";
    std::size_t out_dim_ = 1;
    std::vector<Channel> channels_;
    Eval eval_ = [](double, const double*, double* v, double*) { v[0] = 0.0; };
    double lipschitz_ = 0.0;
};

inline DelayedCoefficient zero_coefficient(std::size_t out_dim) {
    return DelayedCoefficient("zero", out_dim, {}, [out_dim](double, const double*, double* v, double*) {
        for (std::size_t i = 0; i < out_dim; ++i) v[i] = 0.0;
    }, 0.0);
}

/// value = intercept + slope * z, slope row-major [out][channel].
inline DelayedCoefficient affine_coefficient(std::size_t out_dim, std::vector<Channel> channels,
                                             std::vector<double> intercept, std::vector<double> slope) {
    const std::size_t m = channels.size();
    require(intercept.size() == out_dim && slope.size() == out_dim * m, "affine coefficient has wrong sizes");
    double lip = 0.0;
    for (std::size_t i = 0; i < out_dim; ++i) {
        double row = 0.0;
        for (std::size_t c = 0; c < m; ++c) row += std::abs(slope[i * m + c]);
        lip = std::max(lip, row);
    }
    auto eval = [out_dim, m, intercept, slope](double, const double* z, double* v, double* jac) {
        for (std::size_t i = 0; i < out_dim; ++i) {
            double s = intercept[i];
            for (std::size_t c = 0; c < m; ++c) s += slope[i * m + c] * z[c];
            v[i] = s;
        }
        if (jac)
            for (std::size_t k = 0; k < out_dim * m; ++k) jac[k] = slope[k];
    };
    return DelayedCoefficient("affine", out_dim, std::move(channels), eval, lip);
}

/// Largest relative mismatch between the analytic Jacobian and central differences.
inline double derivative_mismatch(const DelayedCoefficient& c, int probes = 20, std::uint64_t seed = 7,
                                  double radius = 2.0, double T = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-radius, radius), Ut(0.0, T);
    const std::size_t m = c.width(), n = c.out_dim();
    std::vector<double> z(m), v(n), vp(n), vm(n), jac(n * m);
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        const double t = Ut(rng);
        for (auto& zi : z) zi = U(rng);
        c.eval(t, z.data(), v.data(), jac.data());
        for (std::size_t k = 0; k < m; ++k) {
            const double h = 1e-5 * std::max(1.0, std::abs(z[k]));
            auto zp = z, zm = z;
            zp[k] += h;
            zm[k] -= h;
            c.eval(t, zp.data(), vp.data());
            c.eval(t, zm.data(), vm.data());
            for (std::size_t i = 0; i < n; ++i) {
                const double fd = (vp[i] - vm[i]) / (2 * h);
                worst = std::max(worst, std::abs(fd - jac[i * m + k]) / std::max(1.0, std::abs(jac[i * m + k])));
            }
        }
    }
    return worst;
}

inline void check_derivatives(const DelayedCoefficient& c, double tol = 1e-6) {
    const double e = derivative_mismatch(c);
    require(e <= tol, "coefficient '" + c.kind() + "': derivative mismatch " + std::to_string(e));
}

/// Probes that every Jacobian row sum stays below the stored Lipschitz constant.
inline void check_lipschitz(const DelayedCoefficient& c, int probes = 50, std::uint64_t seed = 11,
                            double radius = 5.0, double T = 1.0) {
    if (!std::isfinite(c.lipschitz())) return;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-radius, radius), Ut(0.0, T);
    const std::size_t m = c.width(), n = c.out_dim();
    std::vector<double> z(m), v(n), jac(n * m);
    for (int p = 0; p < probes; ++p) {
        for (auto& zi : z) zi = U(rng);
        c.eval(Ut(rng), z.data(), v.data(), jac.data());
        for (std::size_t i = 0; i < n; ++i) {
            double row = 0.0;
            for (std::size_t k = 0; k < m; ++k) row += std::abs(jac[i * m + k]);
            require(row <= c.lipschitz() * (1 + 1e-9) + 1e-12,
                    "coefficient '" + c.kind() + "' exceeds its Lipschitz constant");
        }
    }
}

/// Terminal cost H(z), z the contractions of the state at T.
struct TerminalCost {
    std::string kind = "zero";
    std::vector<Channel> channels;
    std::function<double(const double* z, double* grad)> eval = [](const double*, double*) { return 0.0; };
};

/// Box admissible set.
struct Box {
    std::vector<double> lower, upper;

    static Box unbounded(std::size_t dim) {
        const double inf = std::numeric_limits<double>::infinity();
        return {std::vector<double>(dim, -inf), std::vector<double>(dim, inf)};
    }
    double project(std::size_t i, double v) const { return std::clamp(v, lower.at(i), upper.at(i)); }
    bool contains(std::size_t i, double v) const { return v >= lower.at(i) && v <= upper.at(i); }
};

/// Control per component on steps -D..N-1; negative steps hold the initial segment.
struct ControlPath {
    std::vector<AdaptedProcess> components;

    static ControlPath zeros(const TimeGrid& g, std::size_t dim, std::size_t scenarios) {
        ControlPath u;
        u.components.assign(dim, AdaptedProcess(-g.D, g.N - 1, scenarios));
        return u;
    }

    std::size_t dim() const { return components.size(); }

    /// this + rho * dir on steps >= 0.
    ControlPath plus(const ControlPath& dir, double rho) const {
        require(dir.dim() == dim(), "direction has the wrong dimension");
        ControlPath out = *this;
        for (std::size_t i = 0; i < dim(); ++i)
            for (int k = 0; k <= components[i].last_step(); ++k)
                for (std::size_t s = 0; s < components[i].scenarios; ++s)
                    out.components[i](k, s) += rho * dir.components[i](k, s);
        return out;
    }

    ControlPath minus(const ControlPath& other) const { return plus(other, -1.0); }
};

using Trajectory = std::vector<AdaptedProcess>;

struct ControlProblem {
    TimeGrid grid;
    std::size_t state_dim = 1;
    std::size_t control_dim = 1;
    DelayedCoefficient drift = zero_coefficient(1);
    DelayedCoefficient diffusion = zero_coefficient(1);
    DelayedCoefficient running = zero_coefficient(1);
    TerminalCost terminal;
    Box admissible = Box::unbounded(1);
    std::vector<std::vector<double>> x_init;  // [component][i], step i - D, i = 0..D
    std::vector<std::vector<double>> eta;     // [component][i], step i - D, i = 0..D-1

    void validate() const {
        require(drift.out_dim() == state_dim && diffusion.out_dim() == state_dim,
                "drift and diffusion must have one output per state component");
        require(running.out_dim() == 1, "running cost must be scalar");
        auto check = [&](const std::vector<Channel>& chans, bool state_only) {
            for (const auto& c : chans) {
                require(!(state_only && c.source == Source::control), "terminal cost cannot depend on the control");
                require(c.component < (c.source == Source::state ? state_dim : control_dim),
                        "channel refers to a missing component");
                lag_weights(c.measure, grid);
            }
        };
        check(drift.channels(), false);
        check(diffusion.channels(), false);
        check(running.channels(), false);
        check(terminal.channels, true);
        require(x_init.size() == state_dim, "initial state segment has the wrong dimension");
        for (const auto& seg : x_init)
            require(seg.size() == static_cast<std::size_t>(grid.D) + 1, "initial state segment needs D+1 values");
        require(eta.size() == control_dim, "initial control segment has the wrong dimension");
        for (const auto& seg : eta)
            require(seg.size() == static_cast<std::size_t>(grid.D), "initial control segment needs D values");
        require(admissible.lower.size() == control_dim && admissible.upper.size() == control_dim,
                "admissible box has the wrong dimension");
    }

    /// Control constant in time and scenario on [0,T), eta before 0.
    ControlPath constant_control(const std::vector<double>& value, std::size_t scenarios) const {
        require(value.size() == control_dim, "control value has the wrong dimension");
        auto u = ControlPath::zeros(grid, control_dim, scenarios);
        for (std::size_t i = 0; i < control_dim; ++i) {
            for (int k = -grid.D; k < grid.N; ++k) {
                const double v = k < 0 ? eta[i][static_cast<std::size_t>(k + grid.D)] : value[i];
                std::fill(u.components[i].at(k).begin(), u.components[i].at(k).end(), v);
            }
        }
        return u;
    }

    ControlPath zero_direction(std::size_t scenarios) const {
        return ControlPath::zeros(grid, control_dim, scenarios);
    }
};

/// Lag weights of each channel, computed once.
class Contractor {
public:
    Contractor(const std::vector<Channel>& channels, const TimeGrid& g) : channels_(&channels) {
        for (const auto& c : channels) lags_.push_back(lag_weights(c.measure, g));
    }

    /// z_c = sum_j a_j src(k - j, s). Sources outside their stored range count as zero.
    void contract(const Trajectory& x, const ControlPath& u, int k, std::size_t s, double* z) const {
        for (std::size_t c = 0; c < lags_.size(); ++c) {
            const auto& ch = (*channels_)[c];
            const auto& src = ch.source == Source::state ? x[ch.component] : u.components[ch.component];
            double acc = 0.0;
            const auto& a = lags_[c];
            for (std::size_t j = 0; j < a.size(); ++j)
                if (a[j] != 0.0) acc += a[j] * src.value_or_zero(k - static_cast<int>(j), s);
            z[c] = acc;
        }
    }

    const std::vector<std::vector<double>>& lags() const { return lags_; }

private:
    const std::vector<Channel>* channels_;
    std::vector<std::vector<double>> lags_;
};

namespace detail {
inline void check_control(const ControlProblem& cp, const ControlPath& u, std::size_t S) {
    require(u.dim() == cp.control_dim, "control has the wrong dimension");
    for (const auto& c : u.components)
        require(c.first_step <= 0 && c.first_step <= -cp.grid.D && c.last_step() >= cp.grid.N - 1 &&
                    c.scenarios == S,
                "control does not cover steps -D..N-1 on this driver");
}
}  // namespace detail

/// Euler scheme x_{k+1} = x_k + F dt + G dW_k.
template <class Driver>
Trajectory simulate_state(const ControlProblem& cp, const ControlPath& u, const Driver& drv) {
    const auto& g = drv.grid();
    require(g.N == cp.grid.N && g.D == cp.grid.D && g.T == cp.grid.T, "driver and problem grids differ");
    cp.validate();
    const std::size_t S = drv.scenarios(), n = cp.state_dim;
    detail::check_control(cp, u, S);
    Trajectory x(n, AdaptedProcess(-g.D, g.N, S));
    for (std::size_t i = 0; i < n; ++i)
        for (int k = -g.D; k <= 0; ++k)
            std::fill(x[i].at(k).begin(), x[i].at(k).end(), cp.x_init[i][static_cast<std::size_t>(k + g.D)]);
    const Contractor cf(cp.drift.channels(), g), cg(cp.diffusion.channels(), g);
    const double dt = g.dt();
    for (int k = 0; k < g.N; ++k) {
        const auto& dW = drv.increment(k);
        const double t = g.time(k);
        parallel_chunks(S, [&](std::size_t lo, std::size_t hi) {
            std::vector<double> zf(cp.drift.width()), zg(cp.diffusion.width()), F(n), G(n);
            for (std::size_t s = lo; s < hi; ++s) {
                cf.contract(x, u, k, s, zf.data());
                cg.contract(x, u, k, s, zg.data());
                cp.drift.eval(t, zf.data(), F.data());
                cp.diffusion.eval(t, zg.data(), G.data());
                for (std::size_t i = 0; i < n; ++i) x[i](k + 1, s) = x[i](k, s) + F[i] * dt + G[i] * dW[s];
            }
        });
    }
    return x;
}

/// Linearised state: y_{k+1} = y_k + sum_c F_c dz_c dt + sum_c G_c dz_c dW_k, y = 0 on [-d, 0].
template <class Driver>
Trajectory simulate_first_variation(const ControlProblem& cp, const Trajectory& xbar, const ControlPath& ubar,
                                    const ControlPath& direction, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios(), n = cp.state_dim;
    require(xbar.size() == n && xbar[0].scenarios == S && xbar[0].first_step == -g.D && xbar[0].last_step() == g.N,
            "base trajectory does not match the driver grid");
    detail::check_control(cp, ubar, S);
    detail::check_control(cp, direction, S);
    Trajectory y(n, AdaptedProcess(-g.D, g.N, S));
    const Contractor cf(cp.drift.channels(), g), cg(cp.diffusion.channels(), g);
    const std::size_t mf = cp.drift.width(), mg = cp.diffusion.width();
    const double dt = g.dt();
    for (int k = 0; k < g.N; ++k) {
        const auto& dW = drv.increment(k);
        const double t = g.time(k);
        parallel_chunks(S, [&](std::size_t lo, std::size_t hi) {
            std::vector<double> zf(mf), zg(mg), df(mf), dg(mg), F(n), G(n), JF(n * mf), JG(n * mg);
            for (std::size_t s = lo; s < hi; ++s) {
                cf.contract(xbar, ubar, k, s, zf.data());
                cg.contract(xbar, ubar, k, s, zg.data());
                cf.contract(y, direction, k, s, df.data());
                cg.contract(y, direction, k, s, dg.data());
                cp.drift.eval(t, zf.data(), F.data(), JF.data());
                cp.diffusion.eval(t, zg.data(), G.data(), JG.data());
                for (std::size_t i = 0; i < n; ++i) {
                    double a = 0.0, b = 0.0;
                    for (std::size_t c = 0; c < mf; ++c) a += JF[i * mf + c] * df[c];
                    for (std::size_t c = 0; c < mg; ++c) b += JG[i * mg + c] * dg[c];
                    y[i](k + 1, s) = y[i](k, s) + a * dt + b * dW[s];
                }
            }
        });
    }
    return y;
}

struct CostEstimate {
    double value = 0.0;
    double standard_error = 0.0;
};

/// Per-scenario cost sum_k dt L(t_k) + H(x_T).
template <class Driver>
std::vector<double> pathwise_cost(const ControlProblem& cp, const Trajectory& x, const ControlPath& u,
                                  const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    const Contractor cl(cp.running.channels(), g), ch(cp.terminal.channels, g);
    std::vector<double> cost(S);
    parallel_chunks(S, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> zl(cp.running.width()), zh(cp.terminal.channels.size()), L(1);
        for (std::size_t s = lo; s < hi; ++s) {
            double acc = 0.0;
            for (int k = 0; k < g.N; ++k) {
                cl.contract(x, u, k, s, zl.data());
                cp.running.eval(g.time(k), zl.data(), L.data());
                acc += g.dt() * L[0];
            }
            ch.contract(x, u, g.N, s, zh.data());
            cost[s] = acc + cp.terminal.eval(zh.data(), nullptr);
        }
    });
    return cost;
}

template <class Driver>
CostEstimate evaluate_cost(const ControlProblem& cp, const Trajectory& x, const ControlPath& u, const Driver& drv) {
    const auto c = pathwise_cost(cp, x, u, drv);
    return {drv.expectation(c), Driver::exact ? 0.0 : standard_error(c)};
}

template <class Driver>
CostEstimate evaluate_cost(const ControlProblem& cp, const ControlPath& u, const Driver& drv) {
    return evaluate_cost(cp, simulate_state(cp, u, drv), u, drv);
}

struct RemainderRow {
    double rho = 0.0;
    double ratio = 0.0;  // E sup_k |R_k|^2 / rho^2
};

/// R = x(u + rho v) - x(u) - rho y for each rho.
template <class Driver>
std::vector<RemainderRow> expansion_remainder(const ControlProblem& cp, const ControlPath& ubar,
                                              const ControlPath& direction, const std::vector<double>& rhos,
                                              const Driver& drv) {
    const auto xbar = simulate_state(cp, ubar, drv);
    const auto y = simulate_first_variation(cp, xbar, ubar, direction, drv);
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<RemainderRow> out;
    for (double rho : rhos) {
        require(rho > 0.0, "remainder ladder needs positive rho");
        const auto xr = simulate_state(cp, ubar.plus(direction, rho), drv);
        std::vector<double> sup(S, 0.0);
        for (std::size_t s = 0; s < S; ++s)
            for (int k = 0; k <= g.N; ++k) {
                double r2 = 0.0;
                for (std::size_t i = 0; i < cp.state_dim; ++i) {
                    const double r = xr[i](k, s) - xbar[i](k, s) - rho * y[i](k, s);
                    r2 += r * r;
                }
                sup[s] = std::max(sup[s], r2);
            }
        out.push_back({rho, drv.expectation(sup) / (rho * rho)});
    }
    return out;
}

}  // namespace delayctl
