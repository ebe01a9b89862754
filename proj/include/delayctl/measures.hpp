#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "delayctl/error.hpp"

namespace delayctl {

struct Atom {
    double location;
    double weight;
};

inline constexpr std::size_t default_density_cells = 256;

namespace detail {
inline double location_tol(double a, double b) {
    return 1e-12 * std::max({1.0, std::abs(a), std::abs(b)});
}
}  // namespace detail

/// Finite signed measure on [a, b]: atoms plus a piecewise-constant density on
/// a uniform partition. An empty density vector means no density part.
class RegularMeasure {
public:
    RegularMeasure() = default;

    RegularMeasure(double a, double b, std::vector<Atom> atoms = {}, std::vector<double> density = {})
        : a_(a), b_(b), atoms_(std::move(atoms)), density_(std::move(density)) {
        require(std::isfinite(a) && std::isfinite(b) && a <= b, "measure support must be a finite interval [a,b]");
        const double tol = detail::location_tol(a, b);
        for (std::size_t i = 0; i < atoms_.size(); ++i) {
            auto& at = atoms_[i];
            require(std::isfinite(at.location) && std::isfinite(at.weight), "atom must be finite");
            require(at.location >= a - tol && at.location <= b + tol,
                    "atom at " + std::to_string(at.location) + " outside support [" + std::to_string(a) + "," +
                        std::to_string(b) + "]");
            at.location = std::clamp(at.location, a, b);
            if (i > 0)
                require(at.location > atoms_[i - 1].location, "atom locations must be strictly increasing");
        }
        if (!density_.empty()) {
            require(b > a, "density part needs a non-degenerate support");
            for (double v : density_) require(std::isfinite(v), "density values must be finite");
        }
    }

    static RegularMeasure zero(double a, double b) { return RegularMeasure(a, b); }

    static RegularMeasure dirac(double a, double b, double location, double weight = 1.0) {
        return RegularMeasure(a, b, {{location, weight}});
    }

    static RegularMeasure lebesgue(double a, double b, double value = 1.0,
                                   std::size_t cells = default_density_cells) {
        return RegularMeasure(a, b, {}, std::vector<double>(cells, value));
    }

    double a() const { return a_; }
    double b() const { return b_; }
    const std::vector<Atom>& atoms() const { return atoms_; }
    const std::vector<double>& density() const { return density_; }
    std::size_t cells() const { return density_.size(); }
    double cell_width() const { return density_.empty() ? 0.0 : (b_ - a_) / static_cast<double>(density_.size()); }

    double total_mass() const {
        double s = 0.0;
        for (const auto& at : atoms_) s += at.weight;
        for (double v : density_) s += v * cell_width();
        return s;
    }

    bool is_zero() const {
        return std::all_of(atoms_.begin(), atoms_.end(), [](const Atom& at) { return at.weight == 0.0; }) &&
               std::all_of(density_.begin(), density_.end(), [](double v) { return v == 0.0; });
    }

    RegularMeasure shifted(double s) const {
        auto atoms = atoms_;
        for (auto& at : atoms) at.location += s;
        return RegularMeasure(a_ + s, b_ + s, std::move(atoms), density_);
    }

    RegularMeasure scaled(double c) const {
        auto atoms = atoms_;
        for (auto& at : atoms) at.weight *= c;
        auto dens = density_;
        for (auto& v : dens) v *= c;
        return RegularMeasure(a_, b_, std::move(atoms), std::move(dens));
    }

    /// Density refined to `cells` cells (must be a multiple of the current count).
    std::vector<double> density_on(std::size_t cells) const {
        if (density_.empty()) return std::vector<double>(cells, 0.0);
        require(cells % density_.size() == 0, "density partitions are not nested");
        const std::size_t r = cells / density_.size();
        std::vector<double> out(cells);
        for (std::size_t i = 0; i < cells; ++i) out[i] = density_[i / r];
        return out;
    }

    friend RegularMeasure operator+(const RegularMeasure& x, const RegularMeasure& y) {
        const double tol = detail::location_tol(x.a_, x.b_);
        require(std::abs(x.a_ - y.a_) <= tol && std::abs(x.b_ - y.b_) <= tol, "measures live on different supports");
        std::vector<Atom> atoms;
        std::size_t i = 0, j = 0;
        while (i < x.atoms_.size() || j < y.atoms_.size()) {
            if (j == y.atoms_.size() || (i < x.atoms_.size() && x.atoms_[i].location < y.atoms_[j].location - tol)) {
                atoms.push_back(x.atoms_[i++]);
            } else if (i == x.atoms_.size() || y.atoms_[j].location < x.atoms_[i].location - tol) {
                atoms.push_back(y.atoms_[j++]);
            } else {
                atoms.push_back({x.atoms_[i].location, x.atoms_[i].weight + y.atoms_[j].weight});
                ++i;
                ++j;
            }
        }
        std::vector<double> dens;
        if (x.density_.empty()) {
            dens = y.density_;
        } else if (y.density_.empty()) {
            dens = x.density_;
        } else {
            const std::size_t cells = std::lcm(x.density_.size(), y.density_.size());
            require(cells <= (1u << 16), "density partitions too incompatible to add");
            dens = x.density_on(cells);
            const auto other = y.density_on(cells);
            for (std::size_t k = 0; k < cells; ++k) dens[k] += other[k];
        }
        return RegularMeasure(x.a_, x.b_, std::move(atoms), std::move(dens));
    }

private:
    double a_ = 0.0;
    double b_ = 0.0;
    std::vector<Atom> atoms_;
    std::vector<double> density_;
};

/// Weights w_i with sum_i w_i f(x0 + i h) = integral of the piecewise-linear
/// interpolant of f against m. Works for any grid covering the support.
inline std::vector<double> grid_weights(const RegularMeasure& m, double x0, double h, std::size_t cells) {
    std::vector<double> w(cells + 1, 0.0);
    const double x1 = x0 + h * static_cast<double>(cells);
    const double tol = detail::location_tol(x0, x1) + 1e-9 * h;
    require(m.a() >= x0 - tol && m.b() <= x1 + tol, "grid does not cover the measure support");
    if (cells == 0) {
        require(m.density().empty(), "a single-node grid cannot carry a density");
        for (const auto& at : m.atoms()) w[0] += at.weight;
        return w;
    }
    for (const auto& at : m.atoms()) {
        double r = (at.location - x0) / h;
        const double nearest = std::round(r);
        if (std::abs(r - nearest) < 1e-9) r = nearest;
        r = std::clamp(r, 0.0, static_cast<double>(cells));
        auto i = static_cast<std::size_t>(std::floor(r));
        if (i >= cells) {
            w[cells] += at.weight;
            continue;
        }
        const double lam = r - static_cast<double>(i);
        w[i] += (1.0 - lam) * at.weight;
        w[i + 1] += lam * at.weight;
    }
    const double cw = m.cell_width();
    for (std::size_t c = 0; c < m.cells(); ++c) {
        const double rho = m.density()[c];
        if (rho == 0.0) continue;
        const double c0 = m.a() + cw * static_cast<double>(c);
        const double c1 = (c + 1 == m.cells()) ? m.b() : c0 + cw;
        const auto first = static_cast<std::size_t>(std::clamp(std::floor((c0 - x0) / h), 0.0, double(cells - 1)));
        for (std::size_t i = first; i < cells; ++i) {
            const double g0 = x0 + h * static_cast<double>(i);
            const double g1 = x0 + h * static_cast<double>(i + 1);
            if (g0 >= c1) break;
            const double lo = std::max(c0, g0);
            const double hi = std::min(c1, g1);
            if (hi <= lo) continue;
            w[i] += rho * ((g1 - lo) * (g1 - lo) - (g1 - hi) * (g1 - hi)) / (2.0 * h);
            w[i + 1] += rho * ((hi - g0) * (hi - g0) - (lo - g0) * (lo - g0)) / (2.0 * h);
        }
    }
    return w;
}

/// Integral of f against m, f sampled at uniformly spaced points spanning [a, b].
inline double integrate(std::span<const double> f, const RegularMeasure& m) {
    require(!f.empty(), "integrand has no samples");
    const std::size_t cells = f.size() - 1;
    if (m.b() == m.a()) {
        require(cells == 0, "degenerate support takes a single sample");
    } else {
        require(cells >= 1, "integrand needs at least two samples");
        require(m.density().empty() || cells >= m.cells(), "integrand grid is coarser than the density partition");
    }
    const double h = cells == 0 ? 0.0 : (m.b() - m.a()) / static_cast<double>(cells);
    const auto w = grid_weights(m, m.a(), h, cells);
    double s = 0.0;
    for (std::size_t i = 0; i <= cells; ++i) s += w[i] * f[i];
    return s;
}

inline double total_variation(const RegularMeasure& m) {
    double s = 0.0;
    for (const auto& at : m.atoms()) s += std::abs(at.weight);
    for (double v : m.density()) s += std::abs(v) * m.cell_width();
    return s;
}

/// Removes the atom at the right endpoint; returns the rest and that atom's weight.
inline std::pair<RegularMeasure, double> split_terminal_atom(const RegularMeasure& m) {
    const double tol = detail::location_tol(m.a(), m.b());
    std::vector<Atom> rest;
    double c = 0.0;
    for (const auto& at : m.atoms()) {
        if (std::abs(at.location - m.b()) <= tol)
            c += at.weight;
        else
            rest.push_back(at);
    }
    return {RegularMeasure(m.a(), m.b(), std::move(rest), m.density()), c};
}

namespace detail {
// Hat kernel of half-width e: CDF and its antiderivative.
inline double hat_cdf(double x, double e) {
    if (x <= -e) return 0.0;
    if (x >= e) return 1.0;
    if (x <= 0.0) return (x + e) * (x + e) / (2.0 * e * e);
    return 1.0 - (e - x) * (e - x) / (2.0 * e * e);
}

inline double hat_cdf_integral(double x, double e) {
    if (x <= -e) return 0.0;
    if (x >= e) return x;
    if (x <= 0.0) return (x + e) * (x + e) * (x + e) / (6.0 * e * e);
    return x + (e - x) * (e - x) * (e - x) / (6.0 * e * e);
}
}  // namespace detail

/// Convolution with a hat kernel of half-width (b-a)/(2n), reflected at both
/// endpoints. The result is a pure density with the same total mass.
inline RegularMeasure mollify(const RegularMeasure& m, std::size_t n) {
    require(n >= 1, "mollification index n must be positive");
    require(m.b() > m.a(), "cannot mollify on a degenerate support");
    const double a = m.a(), b = m.b();
    const double tol = detail::location_tol(a, b);
    for (const auto& at : m.atoms())
        require(std::abs(at.location - b) > tol, "split the terminal atom before mollifying");
    const std::size_t src = std::max<std::size_t>(m.cells(), 1);
    const std::size_t want = std::max<std::size_t>(default_density_cells, 4 * n);
    const std::size_t cells = src * ((want + src - 1) / src);
    const double cw = (b - a) / static_cast<double>(cells);
    const double e = (b - a) / (2.0 * static_cast<double>(n));
    std::vector<double> mass(cells, 0.0);

    auto edge = [&](std::size_t i) { return i == cells ? b : a + cw * static_cast<double>(i); };
    for (const auto& at : m.atoms()) {
        const double x = at.location;
        for (std::size_t i = 0; i < cells; ++i) {
            const double lo = edge(i), hi = edge(i + 1);
            double s = detail::hat_cdf(hi - x, e) - detail::hat_cdf(lo - x, e);
            s += detail::hat_cdf(2 * a - lo - x, e) - detail::hat_cdf(2 * a - hi - x, e);
            s += detail::hat_cdf(2 * b - lo - x, e) - detail::hat_cdf(2 * b - hi - x, e);
            mass[i] += at.weight * s;
        }
    }
    const std::size_t src_cells = m.cells();
    const double scw = m.cell_width();
    for (std::size_t c = 0; c < src_cells; ++c) {
        const double rho = m.density()[c];
        if (rho == 0.0) continue;
        const double c0 = a + scw * static_cast<double>(c);
        const double c1 = (c + 1 == src_cells) ? b : c0 + scw;
        auto block = [&](double u) {
            return detail::hat_cdf_integral(u - c0, e) - detail::hat_cdf_integral(u - c1, e);
        };
        for (std::size_t i = 0; i < cells; ++i) {
            const double lo = edge(i), hi = edge(i + 1);
            double s = block(hi) - block(lo);
            s += block(2 * a - lo) - block(2 * a - hi);
            s += block(2 * b - lo) - block(2 * b - hi);
            mass[i] += rho * s;
        }
    }
    std::vector<double> dens(cells);
    for (std::size_t i = 0; i < cells; ++i) dens[i] = mass[i] / cw;
    return RegularMeasure(a, b, {}, std::move(dens));
}

}  // namespace delayctl
