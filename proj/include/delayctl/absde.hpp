#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "delayctl/bsde.hpp"
#include "delayctl/drivers.hpp"
#include "delayctl/measures.hpp"

namespace delayctl {

/// sum_j lags[j] E_k[ sum_l coefficient[l]_{k+j} v^l_{k+j+shift} ], v = p (shift 1) or q (shift 0).
struct AnticipatedTerm {
    std::size_t target = 0;
    bool on_q = false;
    std::vector<double> lags;                 // j = 0..D
    std::vector<AdaptedProcess> coefficient;  // one per component; missing steps count as zero
};

/// Window charge w_k E_k[xi_k] on equation `target`, measure on [T-d, T].
struct AbsdeWindow {
    std::size_t target = 0;
    RegularMeasure measure;
    AdaptedProcess xi;  // steps N-D..N
};

struct AbsdeProblem {
    TimeGrid grid;
    std::size_t dim = 1;
    std::vector<AdaptedProcess> f;  // per component, steps 0..N-1
    std::vector<AnticipatedTerm> terms;
    std::vector<AbsdeWindow> windows;
    double beta = 0.0;  // 0 selects beta automatically
    double tol = 1e-24;  // on the squared beta-norm of the increment
    int max_iter = 200;
    std::optional<std::vector<AdaptedProcess>> tail_p;  // steps N+1..N+D
    std::optional<std::vector<AdaptedProcess>> tail_q;  // steps N..N+D-1
};

/// Scalar equation with anticipated g p and h q terms contracted by m1 and m2.
template <class Driver>
AbsdeProblem scalar_absde(const Driver& drv, AdaptedProcess f, AdaptedProcess g, AdaptedProcess h,
                          AdaptedProcess xi, const RegularMeasure& m, const RegularMeasure& m1,
                          const RegularMeasure& m2) {
    const auto& grid = drv.grid();
    AbsdeProblem prob;
    prob.grid = grid;
    prob.f = {std::move(f)};
    if (!m1.is_zero()) prob.terms.push_back({0, false, lag_weights(m1, grid), {std::move(g)}});
    if (!m2.is_zero()) prob.terms.push_back({0, true, lag_weights(m2, grid), {std::move(h)}});
    if (!m.is_zero()) prob.windows.push_back({0, m, std::move(xi)});
    return prob;
}

namespace detail {
inline int q_last(const TimeGrid& g) { return g.N + g.D - 1; }

inline void check_absde(const AbsdeProblem& prob, const TimeGrid& g, std::size_t S) {
    require(prob.grid.N == g.N && prob.grid.D == g.D && prob.grid.T == g.T, "problem and driver grids differ");
    require(prob.dim >= 1 && prob.f.size() <= prob.dim, "driver term has the wrong dimension");
    for (const auto& f : prob.f) require(f.rows.empty() || f.scenarios == S, "driver term does not match the driver");
    for (const auto& t : prob.terms) {
        require(t.target < prob.dim, "anticipated term targets a missing component");
        require(t.lags.size() <= static_cast<std::size_t>(g.D) + 1, "anticipated lags exceed the delay");
        require(t.coefficient.size() == prob.dim, "anticipated term needs one coefficient per component");
        for (const auto& c : t.coefficient)
            require(c.rows.empty() || c.scenarios == S, "anticipated coefficient does not match the driver");
    }
    for (const auto& w : prob.windows) require(w.target < prob.dim, "window targets a missing component");
}

inline bool zero_tail(const AbsdeProblem& prob) { return !prob.tail_p && !prob.tail_q; }
}  // namespace detail

/// Pair of zeros on steps 0..N+D (p) and 0..N+D-1 (q), with any tail data filled in.
inline AdaptedPair zero_pair(const AbsdeProblem& prob, std::size_t S) {
    const auto& g = prob.grid;
    AdaptedPair x;
    x.p.assign(prob.dim, AdaptedProcess(0, g.N + g.D, S));
    x.q.assign(prob.dim, AdaptedProcess(0, std::max(g.N - 1, detail::q_last(g)), S));
    for (std::size_t i = 0; i < prob.dim; ++i) {
        x.p[i].extension_from = g.N + 1;
        x.q[i].extension_from = g.N;
        if (prob.tail_p)
            for (int k = g.N + 1; k <= g.N + g.D; ++k) x.p[i].at(k) = (*prob.tail_p).at(i).at(k);
        if (prob.tail_q)
            for (int k = g.N; k <= detail::q_last(g); ++k) x.q[i].at(k) = (*prob.tail_q).at(i).at(k);
    }
    return x;
}

/// E sum_k dt e^{beta t_k} (|p_k|^2 + |q_k|^2), k = 0..N+D-1 (squared norm).
template <class Driver>
double beta_norm(const AdaptedPair& x, double beta, const Driver& drv) {
    require(beta > 0.0, "beta must be positive");
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<double> tmp(S);
    double total = 0.0;
    const int last = std::max(g.N - 1, g.N + g.D - 1);
    for (int k = 0; k <= last; ++k) {
        for (std::size_t s = 0; s < S; ++s) {
            double v = 0.0;
            for (std::size_t i = 0; i < x.dim(); ++i) {
                const double pv = x.p[i].value_or_zero(k, s), qv = x.q[i].value_or_zero(k, s);
                v += pv * pv + qv * qv;
            }
            tmp[s] = v;
        }
        total += g.dt() * std::exp(beta * g.time(k)) * drv.expectation(tmp);
    }
    return total;
}

inline AdaptedPair pair_difference(const AdaptedPair& x, const AdaptedPair& y) {
    AdaptedPair d = x;
    for (std::size_t i = 0; i < d.dim(); ++i) {
        for (std::size_t r = 0; r < d.p[i].rows.size(); ++r)
            for (std::size_t s = 0; s < d.p[i].scenarios; ++s) d.p[i].rows[r][s] -= y.p[i].rows[r][s];
        for (std::size_t r = 0; r < d.q[i].rows.size(); ++r)
            for (std::size_t s = 0; s < d.q[i].scenarios; ++s) d.q[i].rows[r][s] -= y.q[i].rows[r][s];
    }
    return d;
}

/// Anticipated source a^i_k for k = 0..N-1, given the input pair.
template <class Driver>
std::vector<AdaptedProcess> anticipated_source(const AdaptedPair& x, const AbsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<AdaptedProcess> a(prob.dim, AdaptedProcess(0, g.N - 1, S));
    std::vector<double> acc(S);
    for (const auto& term : prob.terms) {
        const int shift = term.on_q ? 0 : 1;
        const auto& v = term.on_q ? x.q : x.p;
        for (int k = 0; k < g.N; ++k) {
            std::fill(acc.begin(), acc.end(), 0.0);
            bool any = false;
            for (std::size_t j = 0; j < term.lags.size(); ++j) {
                const double lj = term.lags[j];
                if (lj == 0.0) continue;
                const int kc = k + static_cast<int>(j);
                for (std::size_t l = 0; l < prob.dim; ++l) {
                    const auto& coef = term.coefficient[l];
                    if (!coef.has(kc) || !v[l].has(kc + shift)) continue;
                    const auto& cr = coef.at(kc);
                    const auto& vr = v[l].at(kc + shift);
                    for (std::size_t s = 0; s < S; ++s) acc[s] += lj * cr[s] * vr[s];
                    any = true;
                }
            }
            if (!any) continue;
            const auto e = drv.project(acc, k);
            auto& row = a[term.target].at(k);
            for (std::size_t s = 0; s < S; ++s) row[s] += e[s];
        }
    }
    return a;
}

/// The Picard map: solve each component as a linear BSDE with driver f + anticipated source.
template <class Driver>
AdaptedPair gamma_step(const AdaptedPair& x, const AbsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    detail::check_absde(prob, g, S);
    const auto a = anticipated_source(x, prob, drv);
    AdaptedPair out = zero_pair(prob, S);
    const double dt = g.dt();
    for (std::size_t i = 0; i < prob.dim; ++i) {
        AdaptedProcess src = a[i];
        if (i < prob.f.size())
            for (int k = 0; k < g.N; ++k)
                for (std::size_t s = 0; s < S; ++s) src(k, s) += prob.f[i].value_or_zero(k, s);
        AdaptedProcess charges(g.N - g.D, g.N, S);
        for (const auto& w : prob.windows) {
            if (w.target != i) continue;
            const auto c = window_charges(w.measure, w.xi, drv);
            for (int k = g.N - g.D; k <= g.N; ++k)
                for (std::size_t s = 0; s < S; ++s) charges(k, s) += c(k, s);
        }
        auto& p = out.p[i];
        auto& q = out.q[i];
        p.at(g.N) = charges.at(g.N);
        std::vector<double> prod(S);
        for (int k = g.N - 1; k >= 0; --k) {
            const auto& dW = drv.increment(k);
            const auto& next = p.at(k + 1);
            for (std::size_t s = 0; s < S; ++s) prod[s] = next[s] * dW[s];
            const auto Ep = drv.project(next, k);
            const auto EpW = drv.project(prod, k);
            for (std::size_t s = 0; s < S; ++s) {
                p(k, s) = Ep[s] + dt * src(k, s) + charges.value_or_zero(k, s);
                q(k, s) = -EpW[s] / dt;
            }
        }
    }
    return out;
}

/// Constant c with ||a(y) - a(y')|| <= c (||dp|| + ||dq||) in the squared beta-norm.
inline double contraction_constant(const AbsdeProblem& prob) {
    std::vector<double> M(prob.dim, 0.0);
    auto l1 = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += std::abs(x);
        return s;
    };
    for (const auto& t : prob.terms) M[t.target] += l1(t.lags);
    double cp = 0.0, cq = 0.0;
    for (const auto& t : prob.terms) {
        double sup2 = 0.0;
        const std::size_t S = [&] {
            for (const auto& c : t.coefficient)
                if (!c.rows.empty()) return c.scenarios;
            return std::size_t{0};
        }();
        int lo = INT_MAX, hi = INT_MIN;
        for (const auto& c : t.coefficient)
            if (!c.rows.empty()) {
                lo = std::min(lo, c.first_step);
                hi = std::max(hi, c.last_step());
            }
        for (int k = lo; k <= hi && S > 0; ++k)
            for (std::size_t s = 0; s < S; ++s) {
                double v = 0.0;
                for (const auto& c : t.coefficient) v += std::pow(c.value_or_zero(k, s), 2);
                sup2 = std::max(sup2, v);
            }
        (t.on_q ? cq : cp) += M[t.target] * l1(t.lags) * sup2;
    }
    return std::max(cp, cq);
}

/// Discrete contraction factor K(beta): min over eps of max(dt/(1-gamma), 1/(1+eps)) (1+1/eps) dt.
inline double discrete_contraction_factor(double beta, double dt) {
    const double top = std::expm1(beta * dt);
    double best = std::numeric_limits<double>::infinity();
    const int n = 4000;
    for (int i = 1; i < n; ++i) {
        const double eps = top * std::pow(10.0, -8.0 * (1.0 - static_cast<double>(i) / n));
        if (!(eps > 0.0 && eps < top)) continue;
        const double gamma = (1.0 + eps) * std::exp(-beta * dt);
        if (gamma >= 1.0) continue;
        const double v = std::max(dt / (1.0 - gamma), 1.0 / (1.0 + eps)) * (1.0 + 1.0 / eps) * dt;
        best = std::min(best, v);
    }
    return best;
}

struct PicardTrace {
    std::vector<double> increments;  // squared beta-norm of x_{i} - x_{i-1}
    std::vector<double> ratios;
    int iterations = 0;
    bool converged = false;
    double beta = 0.0;
    double c = 0.0;
    double bound_discrete = 0.0;    // c K(beta), rigorous on the lattice
    double bound_continuous = 0.0;  // c 2 / beta
    double residual = 0.0;          // squared beta-norm of Gamma(x) - x at the returned x
    double max_ratio() const {
        double m = 0.0;
        for (double r : ratios) m = std::max(m, r);
        return m;
    }
};

inline double choose_beta(const AbsdeProblem& prob, double c) {
    const auto& g = prob.grid;
    if (prob.beta > 0.0) return prob.beta;
    const double cap = 690.0 / (g.T + g.delay());
    double beta = c > 0.0 ? 8.0 * c : 1.0;
    beta = std::min(beta, cap);
    while (c * discrete_contraction_factor(beta, g.dt()) >= 0.5 && beta < cap) beta = std::min(2.0 * beta, cap);
    return beta;
}

template <class Driver>
std::pair<AdaptedPair, PicardTrace> picard_solve(const AbsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    detail::check_absde(prob, g, S);
    require(prob.max_iter >= 1, "max_iter must be positive");
    PicardTrace tr;
    tr.c = contraction_constant(prob);
    tr.beta = choose_beta(prob, tr.c);
    tr.bound_discrete = tr.c * discrete_contraction_factor(tr.beta, g.dt());
    tr.bound_continuous = tr.c * 2.0 / tr.beta;
    AdaptedPair x = zero_pair(prob, S);
    for (int it = 1; it <= prob.max_iter; ++it) {
        AdaptedPair nx = gamma_step(x, prob, drv);
        const double inc = beta_norm(pair_difference(nx, x), tr.beta, drv);
        if (!tr.increments.empty() && tr.increments.back() > 0.0) tr.ratios.push_back(inc / tr.increments.back());
        tr.increments.push_back(inc);
        x = std::move(nx);
        tr.iterations = it;
        if (inc < prob.tol) {
            tr.converged = true;
            break;
        }
    }
    if (!tr.converged) {
        const double last = tr.ratios.empty() ? 0.0 : tr.ratios.back();
        throw Error(ErrorCode::solver, "Picard iteration did not converge in " + std::to_string(prob.max_iter) +
                                           " iterations; last increment " + std::to_string(tr.increments.back()) +
                                           ", last ratio " + std::to_string(last));
    }
    tr.residual = beta_norm(pair_difference(gamma_step(x, prob, drv), x), tr.beta, drv);
    return {std::move(x), tr};
}

/// Largest violation of the discrete equations by a candidate pair (sup norm).
template <class Driver>
double equation_residual(const AdaptedPair& x, const AbsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    const auto a = anticipated_source(x, prob, drv);
    const AdaptedPair ref = zero_pair(prob, S);
    double worst = 0.0;
    const double dt = g.dt();
    for (std::size_t i = 0; i < prob.dim; ++i) {
        AdaptedProcess charges(g.N - g.D, g.N, S);
        for (const auto& w : prob.windows) {
            if (w.target != i) continue;
            const auto c = window_charges(w.measure, w.xi, drv);
            for (int k = g.N - g.D; k <= g.N; ++k)
                for (std::size_t s = 0; s < S; ++s) charges(k, s) += c(k, s);
        }
        const auto& p = x.p[i];
        const auto& q = x.q[i];
        for (std::size_t s = 0; s < S; ++s) worst = std::max(worst, std::abs(p(g.N, s) - charges(g.N, s)));
        std::vector<double> prod(S);
        for (int k = g.N - 1; k >= 0; --k) {
            const auto& dW = drv.increment(k);
            for (std::size_t s = 0; s < S; ++s) prod[s] = p(k + 1, s) * dW[s];
            const auto Ep = drv.project(p.at(k + 1), k);
            const auto EpW = drv.project(prod, k);
            for (std::size_t s = 0; s < S; ++s) {
                const double fk = i < prob.f.size() ? prob.f[i].value_or_zero(k, s) : 0.0;
                const double rp = p(k, s) - Ep[s] - dt * (fk + a[i](k, s)) - charges.value_or_zero(k, s);
                const double rq = q(k, s) + EpW[s] / dt;
                worst = std::max({worst, std::abs(rp), std::abs(rq)});
            }
        }
        for (int k = g.N + 1; k <= p.last_step(); ++k)
            for (std::size_t s = 0; s < S; ++s) worst = std::max(worst, std::abs(p(k, s) - ref.p[i](k, s)));
        for (int k = g.N; k <= q.last_step(); ++k)
            for (std::size_t s = 0; s < S; ++s) worst = std::max(worst, std::abs(q(k, s) - ref.q[i](k, s)));
    }
    return worst;
}

struct DirectSolveInfo {
    std::size_t unknowns = 0;
    double residual = 0.0;  // max |A x - b|
};

/// Assembles every node value of (p, q) as one sparse linear system and solves it.
inline std::pair<AdaptedPair, DirectSolveInfo> direct_solve(const AbsdeProblem& prob, const BinaryLattice& lat) {
    const auto& g = lat.grid();
    const int N = g.N;
    require(N <= 12, "direct solve is limited to lattices with N <= 12");
    const std::size_t S = lat.scenarios();
    detail::check_absde(prob, g, S);
    const double dt = g.dt(), sq = std::sqrt(dt);
    const AdaptedPair tail = zero_pair(prob, S);

    std::vector<std::vector<std::size_t>> off_p(prob.dim, std::vector<std::size_t>(N + 1)),
        off_q(prob.dim, std::vector<std::size_t>(N));
    std::size_t n = 0;
    for (std::size_t i = 0; i < prob.dim; ++i) {
        for (int k = 0; k <= N; ++k) {
            off_p[i][k] = n;
            n += lat.node_count(k);
        }
        for (int k = 0; k < N; ++k) {
            off_q[i][k] = n;
            n += lat.node_count(k);
        }
    }
    auto leaf = [&](int k, std::size_t b) { return b << (N - k); };

    std::vector<Eigen::Triplet<double>> trip;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < prob.dim; ++i) {
        AdaptedProcess charges(g.N - g.D, g.N, S);
        for (const auto& w : prob.windows) {
            if (w.target != i) continue;
            const auto c = window_charges(w.measure, w.xi, lat);
            for (int k = g.N - g.D; k <= g.N; ++k)
                for (std::size_t s = 0; s < S; ++s) charges(k, s) += c(k, s);
        }
        for (std::size_t b = 0; b < lat.node_count(N); ++b) {
            const auto r = static_cast<int>(off_p[i][N] + b);
            trip.emplace_back(r, r, 1.0);
            rhs[r] = charges(N, leaf(N, b));
        }
        std::vector<double> fproj;
        for (int k = 0; k < N; ++k) {
            if (i < prob.f.size() && prob.f[i].has(k)) fproj = lat.project(prob.f[i].at(k), k);
            else fproj.assign(S, 0.0);
            const std::size_t block = std::size_t{1} << (N - k);
            for (std::size_t b = 0; b < lat.node_count(k); ++b) {
                const auto rp = static_cast<int>(off_p[i][k] + b);
                const auto rq = static_cast<int>(off_q[i][k] + b);
                const auto c0 = static_cast<int>(off_p[i][k + 1] + 2 * b), c1 = c0 + 1;
                trip.emplace_back(rp, rp, 1.0);
                trip.emplace_back(rp, c0, -0.5);
                trip.emplace_back(rp, c1, -0.5);
                rhs[rp] = dt * fproj[leaf(k, b)] + charges.value_or_zero(k, leaf(k, b));
                trip.emplace_back(rq, rq, 1.0);
                trip.emplace_back(rq, c1, 0.5 * sq / dt);
                trip.emplace_back(rq, c0, -0.5 * sq / dt);
                // anticipated terms: -dt * lag_j * E_k[coef_{k+j} v_{k+j+shift}]
                for (const auto& term : prob.terms) {
                    if (term.target != i) continue;
                    const int shift = term.on_q ? 0 : 1;
                    for (std::size_t j = 0; j < term.lags.size(); ++j) {
                        const double lj = term.lags[j];
                        if (lj == 0.0) continue;
                        const int kc = k + static_cast<int>(j), m = kc + shift;
                        for (std::size_t l = 0; l < prob.dim; ++l) {
                            const auto& coef = term.coefficient[l];
                            if (!coef.has(kc)) continue;
                            const auto& cr = coef.at(kc);
                            const std::size_t first = b * block;
                            const bool unknown = term.on_q ? m <= N - 1 : m <= N;
                            if (!unknown) {
                                const auto& known = term.on_q ? tail.q[l] : tail.p[l];
                                if (!known.has(m)) continue;
                                double acc = 0.0;
                                for (std::size_t s = first; s < first + block; ++s) acc += cr[s] * known(m, s);
                                rhs[rp] += dt * lj * acc / static_cast<double>(block);
                                continue;
                            }
                            const std::size_t sub = std::size_t{1} << (N - m);
                            for (std::size_t s0 = first; s0 < first + block; s0 += sub) {
                                double acc = 0.0;
                                for (std::size_t s = s0; s < s0 + sub; ++s) acc += cr[s];
                                if (acc == 0.0) continue;
                                const std::size_t node = s0 >> (N - m);
                                const auto col = static_cast<int>((term.on_q ? off_q[l][m] : off_p[l][m]) + node);
                                trip.emplace_back(rp, col, -dt * lj * acc / static_cast<double>(block));
                            }
                        }
                    }
                }
            }
        }
    }
    Eigen::SparseMatrix<double> A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    A.setFromTriplets(trip.begin(), trip.end());
    A.makeCompressed();
    Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu;
    lu.compute(A);
    if (lu.info() != Eigen::Success) {
        std::string cond = "unavailable";
        if (n <= 6000) {
            const Eigen::MatrixXd dense(A);
            Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(dense);
            const auto d = qr.matrixR().diagonal().cwiseAbs();
            cond = std::to_string(d.maxCoeff() / std::max(d.minCoeff(), 1e-300));
        }
        throw Error(ErrorCode::solver, "direct system is singular (condition estimate " + cond + ")");
    }
    const Eigen::VectorXd x = lu.solve(rhs);
    DirectSolveInfo info;
    info.unknowns = n;
    info.residual = (A * x - rhs).cwiseAbs().maxCoeff();

    AdaptedPair out = tail;
    for (std::size_t i = 0; i < prob.dim; ++i) {
        for (int k = 0; k <= N; ++k)
            for (std::size_t s = 0; s < S; ++s)
                out.p[i](k, s) = x[static_cast<Eigen::Index>(off_p[i][k] + lat.node_of(k, s))];
        for (int k = 0; k < N; ++k)
            for (std::size_t s = 0; s < S; ++s)
                out.q[i](k, s) = x[static_cast<Eigen::Index>(off_q[i][k] + lat.node_of(k, s))];
    }
    return {std::move(out), info};
}

struct ApproxRow {
    std::size_t n = 0;
    double error = 0.0;  // L2 distance on [0,T]
};

/// Replaces each window by mollify(window minus terminal atom, n) plus the terminal atom.
inline AbsdeProblem approximate_windows(const AbsdeProblem& prob, std::size_t n) {
    AbsdeProblem out = prob;
    for (auto& w : out.windows) {
        auto [rest, c] = split_terminal_atom(w.measure);
        RegularMeasure approx = rest.is_zero() || rest.b() == rest.a() ? rest : mollify(rest, n);
        if (c != 0.0) approx = approx + RegularMeasure::dirac(w.measure.a(), w.measure.b(), w.measure.b(), c);
        w.measure = approx;
    }
    return out;
}

template <class Driver>
double l2_distance(const AdaptedPair& x, const AdaptedPair& y, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<double> tmp(S);
    double total = 0.0;
    for (int k = 0; k < g.N; ++k) {
        for (std::size_t s = 0; s < S; ++s) {
            double v = 0.0;
            for (std::size_t i = 0; i < x.dim(); ++i)
                v += std::pow(x.p[i](k, s) - y.p[i](k, s), 2) + std::pow(x.q[i](k, s) - y.q[i](k, s), 2);
            tmp[s] = v;
        }
        total += g.dt() * drv.expectation(tmp);
    }
    return std::sqrt(total);
}

template <class Driver>
std::vector<ApproxRow> solve_with_measure_approx(const AbsdeProblem& prob, const std::vector<std::size_t>& ladder,
                                                 const Driver& drv) {
    const auto exact = picard_solve(prob, drv).first;
    std::vector<ApproxRow> rows;
    for (std::size_t n : ladder) {
        const auto approx = picard_solve(approximate_windows(prob, n), drv).first;
        rows.push_back({n, l2_distance(approx, exact, drv)});
    }
    return rows;
}

struct DifferentialFormReport {
    double step_residual = 0.0;             // one-step identity with density source
    double terminal_gap = 0.0;              // max |p_N - c xi_N|
    double terminal_density_weight = 0.0;   // density weight charged to the last node
};

/// Checks the one-step form p_k - E_k p_{k+1} = dt (f + a)_k + xi_k (density weight)_k and p_N = c xi_N.
template <class Driver>
DifferentialFormReport differential_form_check(const AbsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    for (const auto& w : prob.windows)
        for (const auto& at : w.measure.atoms())
            require(std::abs(at.location - w.measure.b()) <= detail::location_tol(w.measure.a(), w.measure.b()),
                    "window has an interior atom at " + std::to_string(at.location) +
                        ": the differential form is undefined");
    const auto x = picard_solve(prob, drv).first;
    const auto a = anticipated_source(x, prob, drv);
    DifferentialFormReport rep;
    const double dt = g.dt();
    for (std::size_t i = 0; i < prob.dim; ++i) {
        AdaptedProcess dens(g.N - g.D, g.N, S), atom(g.N - g.D, g.N, S);
        for (const auto& w : prob.windows) {
            if (w.target != i) continue;
            auto [rest, c] = split_terminal_atom(w.measure);
            const auto cd = window_charges(rest, w.xi, drv);
            for (int k = g.N - g.D; k <= g.N; ++k)
                for (std::size_t s = 0; s < S; ++s) dens(k, s) += cd(k, s);
            if (!rest.is_zero()) rep.terminal_density_weight += window_weights(rest, g).back();
            if (c != 0.0) {
                const auto e = drv.project(w.xi.at(g.N), g.N);
                for (std::size_t s = 0; s < S; ++s) atom(g.N, s) += c * e[s];
            }
        }
        const auto& p = x.p[i];
        for (std::size_t s = 0; s < S; ++s)
            rep.terminal_gap = std::max(rep.terminal_gap, std::abs(p(g.N, s) - atom(g.N, s)));
        for (int k = g.N - 1; k >= 0; --k) {
            const auto Ep = drv.project(p.at(k + 1), k);
            for (std::size_t s = 0; s < S; ++s) {
                const double fk = i < prob.f.size() ? prob.f[i].value_or_zero(k, s) : 0.0;
                const double r = p(k, s) - Ep[s] - dt * (fk + a[i](k, s)) - dens.value_or_zero(k, s);
                rep.step_residual = std::max(rep.step_residual, std::abs(r));
            }
        }
    }
    return rep;
}

struct AnticipatedBound {
    double lhs = 0.0;  // E sum dt sum_j |lag_j| |coef_{k+j}|^2 |q_{k+j}|^2
    double rhs = 0.0;  // |lag|_1 sup|coef|^2 E sum dt |q|^2
};

/// Well-posedness bound of each anticipated q-term, evaluated on a solved pair.
template <class Driver>
std::vector<AnticipatedBound> anticipated_q_bounds(const AdaptedPair& x, const AbsdeProblem& prob, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<AnticipatedBound> out;
    std::vector<double> tmp(S);
    for (const auto& t : prob.terms) {
        if (!t.on_q) continue;
        AnticipatedBound b;
        double l1 = 0.0, sup2 = 0.0, qn = 0.0;
        for (double v : t.lags) l1 += std::abs(v);
        for (const auto& c : t.coefficient)
            for (const auto& r : c.rows)
                for (double v : r) sup2 = std::max(sup2, v * v);
        sup2 *= static_cast<double>(prob.dim);
        for (int k = 0; k <= detail::q_last(g); ++k) {
            for (std::size_t s = 0; s < S; ++s) {
                double v = 0.0;
                for (std::size_t l = 0; l < prob.dim; ++l) v += std::pow(x.q[l].value_or_zero(k, s), 2);
                tmp[s] = v;
            }
            qn += g.dt() * drv.expectation(tmp);
            for (std::size_t s = 0; s < S; ++s) {
                double v = 0.0;
                for (std::size_t j = 0; j < t.lags.size(); ++j) {
                    double c2 = 0.0, q2 = 0.0;
                    const int kc = k + static_cast<int>(j);
                    for (std::size_t l = 0; l < prob.dim; ++l) {
                        c2 += std::pow(t.coefficient[l].value_or_zero(kc, s), 2);
                        q2 += std::pow(x.q[l].value_or_zero(kc, s), 2);
                    }
                    v += std::abs(t.lags[j]) * c2 * q2;
                }
                tmp[s] = v;
            }
            b.lhs += g.dt() * drv.expectation(tmp);
        }
        b.rhs = l1 * sup2 * qn;
        out.push_back(b);
    }
    return out;
}

}  // namespace delayctl
