#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "delayctl/absde.hpp"
#include "delayctl/sdde.hpp"

namespace delayctl {

/// Jacobians of drift, diffusion and running cost along a base pair, steps 0..N-1.
struct Linearization {
    std::size_t n = 0, mf = 0, mg = 0, ml = 0;
    std::vector<AdaptedProcess> F, G, L;  // F[i * mf + c], G[i * mg + c], L[c]
    std::vector<std::vector<double>> H;   // terminal gradient per channel, per scenario
};

template <class Driver>
Linearization linearize(const ControlProblem& cp, const Trajectory& x, const ControlPath& u, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    Linearization lin;
    lin.n = cp.state_dim;
    lin.mf = cp.drift.width();
    lin.mg = cp.diffusion.width();
    lin.ml = cp.running.width();
    lin.F.assign(lin.n * lin.mf, AdaptedProcess(0, g.N - 1, S));
    lin.G.assign(lin.n * lin.mg, AdaptedProcess(0, g.N - 1, S));
    lin.L.assign(lin.ml, AdaptedProcess(0, g.N - 1, S));
    const Contractor cf(cp.drift.channels(), g), cg(cp.diffusion.channels(), g), cl(cp.running.channels(), g),
        ch(cp.terminal.channels, g);
    const std::size_t n = lin.n, mf = lin.mf, mg = lin.mg, ml = lin.ml, mh = cp.terminal.channels.size();
    lin.H.assign(mh, std::vector<double>(S));
    parallel_chunks(S, [&](std::size_t lo, std::size_t hi) {
        std::vector<double> z(std::max({mf, mg, ml, mh, std::size_t{1}})), v(std::max<std::size_t>(n, 1)),
            J(std::max({n * mf, n * mg, ml, std::size_t{1}}));
        for (std::size_t s = lo; s < hi; ++s) {
            for (int k = 0; k < g.N; ++k) {
                const double t = g.time(k);
                cf.contract(x, u, k, s, z.data());
                cp.drift.eval(t, z.data(), v.data(), J.data());
                for (std::size_t a = 0; a < n * mf; ++a) lin.F[a](k, s) = J[a];
                cg.contract(x, u, k, s, z.data());
                cp.diffusion.eval(t, z.data(), v.data(), J.data());
                for (std::size_t a = 0; a < n * mg; ++a) lin.G[a](k, s) = J[a];
                cl.contract(x, u, k, s, z.data());
                cp.running.eval(t, z.data(), v.data(), J.data());
                for (std::size_t a = 0; a < ml; ++a) lin.L[a](k, s) = J[a];
            }
            ch.contract(x, u, g.N, s, z.data());
            std::vector<double> grad(std::max<std::size_t>(mh, 1));
            cp.terminal.eval(z.data(), grad.data());
            for (std::size_t c = 0; c < mh; ++c) lin.H[c][s] = grad[c];
        }
    });
    return lin;
}

/// Adjoint equation of the discrete problem along (x, u). Its q is the negative of the
/// martingale integrand of p, so diffusion terms enter with a minus sign.
template <class Driver>
AbsdeProblem build_adjoint(const ControlProblem& cp, const Trajectory& x, const ControlPath& u, const Driver& drv) {
    const auto& g = drv.grid();
    require(g.N == cp.grid.N && g.D == cp.grid.D && g.T == cp.grid.T, "candidate and driver grids differ");
    require(x.size() == cp.state_dim && x[0].scenarios == drv.scenarios(), "candidate was simulated on another driver");
    const std::size_t S = drv.scenarios();
    const auto lin = linearize(cp, x, u, drv);
    AbsdeProblem prob;
    prob.grid = g;
    prob.dim = cp.state_dim;
    prob.f.assign(prob.dim, AdaptedProcess(0, g.N - 1, S));
    const auto& fc = cp.drift.channels();
    for (std::size_t c = 0; c < fc.size(); ++c) {
        if (fc[c].source != Source::state) continue;
        AnticipatedTerm t{fc[c].component, false, lag_weights(fc[c].measure, g), {}};
        for (std::size_t l = 0; l < prob.dim; ++l) t.coefficient.push_back(lin.F[l * lin.mf + c]);
        prob.terms.push_back(std::move(t));
    }
    const auto& gc = cp.diffusion.channels();
    for (std::size_t c = 0; c < gc.size(); ++c) {
        if (gc[c].source != Source::state) continue;
        AnticipatedTerm t{gc[c].component, true, lag_weights(gc[c].measure, g), {}};
        for (std::size_t l = 0; l < prob.dim; ++l) {
            auto coef = lin.G[l * lin.mg + c];
            coef *= -1.0;
            t.coefficient.push_back(std::move(coef));
        }
        prob.terms.push_back(std::move(t));
    }
    const auto& lc = cp.running.channels();
    std::vector<double> acc(S);
    for (std::size_t c = 0; c < lc.size(); ++c) {
        if (lc[c].source != Source::state) continue;
        const auto a = lag_weights(lc[c].measure, g);
        for (int k = 0; k < g.N; ++k) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t j = 0; j < a.size() && k + static_cast<int>(j) < g.N; ++j)
                for (std::size_t s = 0; s < S; ++s) acc[s] += a[j] * lin.L[c](k + static_cast<int>(j), s);
            const auto e = drv.project(acc, k);
            for (std::size_t s = 0; s < S; ++s) prob.f[lc[c].component](k, s) += e[s];
        }
    }
    const auto& hc = cp.terminal.channels;
    for (std::size_t c = 0; c < hc.size(); ++c) {
        AbsdeWindow w{hc[c].component, hc[c].measure.shifted(g.T), AdaptedProcess(g.N - g.D, g.N, S)};
        for (int k = g.N - g.D; k <= g.N; ++k) w.xi.at(k) = lin.H[c];
        prob.windows.push_back(std::move(w));
    }
    return prob;
}

/// Derivative of the cost along a control perturbation at each (step, scenario).
struct SmpGradient {
    std::vector<AdaptedProcess> phi;        // per control component, steps 0..N-1
    std::vector<AdaptedProcess> magnitude;  // sum of |pieces| entering phi
};

template <class Driver>
SmpGradient smp_gradient(const ControlProblem& cp, const Linearization& lin, const AdaptedPair& adj,
                         const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios(), n = cp.state_dim;
    std::vector<AdaptedProcess> P(n, AdaptedProcess(0, g.N - 1, S)), Q(n, AdaptedProcess(0, g.N - 1, S));
    for (std::size_t l = 0; l < n; ++l)
        for (int k = 0; k < g.N; ++k) {
            P[l].at(k) = drv.project(adj.p[l].at(k + 1), k);
            for (std::size_t s = 0; s < S; ++s) Q[l](k, s) = -adj.q[l](k, s);
        }
    SmpGradient out;
    out.phi.assign(cp.control_dim, AdaptedProcess(0, g.N - 1, S));
    out.magnitude.assign(cp.control_dim, AdaptedProcess(0, g.N - 1, S));
    std::vector<double> acc(S);
    auto add_piece = [&](const Channel& ch, auto&& B) {
        const auto a = lag_weights(ch.measure, g);
        for (int m = 0; m < g.N; ++m) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t j = 0; j < a.size() && m + static_cast<int>(j) < g.N; ++j)
                if (a[j] != 0.0)
                    for (std::size_t s = 0; s < S; ++s) acc[s] += a[j] * B(m + static_cast<int>(j), s);
            const auto e = drv.project(acc, m);
            for (std::size_t s = 0; s < S; ++s) {
                out.phi[ch.component](m, s) += e[s];
                out.magnitude[ch.component](m, s) += std::abs(e[s]);
            }
        }
    };
    const auto& fc = cp.drift.channels();
    for (std::size_t c = 0; c < fc.size(); ++c)
        if (fc[c].source == Source::control)
            add_piece(fc[c], [&](int k, std::size_t s) {
                double v = 0.0;
                for (std::size_t l = 0; l < n; ++l) v += lin.F[l * lin.mf + c](k, s) * P[l](k, s);
                return v;
            });
    const auto& gc = cp.diffusion.channels();
    for (std::size_t c = 0; c < gc.size(); ++c)
        if (gc[c].source == Source::control)
            add_piece(gc[c], [&](int k, std::size_t s) {
                double v = 0.0;
                for (std::size_t l = 0; l < n; ++l) v += lin.G[l * lin.mg + c](k, s) * Q[l](k, s);
                return v;
            });
    const auto& lc = cp.running.channels();
    for (std::size_t c = 0; c < lc.size(); ++c)
        if (lc[c].source == Source::control)
            add_piece(lc[c], [&](int k, std::size_t s) { return lin.L[c](k, s); });
    return out;
}

struct SmpReport {
    AdaptedProcess residual;          // r on steps 0..N-1
    double violation_fraction = 0.0;  // probability-weighted share of (t, omega) with r < -tol
    double min_residual = 0.0;
    double residual_scale = 0.0;      // largest |v - u| times the summed magnitude of the pieces
    double tol = 0.0;
    double duality_gap = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> hamiltonian_samples;
};

namespace detail {
template <class Driver>
void summarize(SmpReport& rep, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<double> flag(S);
    double frac = 0.0;
    rep.min_residual = std::numeric_limits<double>::infinity();
    for (int m = 0; m < g.N; ++m) {
        for (std::size_t s = 0; s < S; ++s) {
            flag[s] = rep.residual(m, s) < -rep.tol ? 1.0 : 0.0;
            rep.min_residual = std::min(rep.min_residual, rep.residual(m, s));
        }
        frac += drv.expectation(flag);
    }
    rep.violation_fraction = frac / g.N;
}
}  // namespace detail

/// r_m = <v_m - u_m, phi_m>.
template <class Driver>
SmpReport optimality_residual(const SmpGradient& grad, const ControlPath& ubar, const ControlPath& v,
                              const Driver& drv, double tol_opt = 1e-8) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    require(v.dim() == ubar.dim() && v.dim() == grad.phi.size(), "comparison control has the wrong dimension");
    SmpReport rep;
    rep.tol = tol_opt;
    rep.residual = AdaptedProcess(0, g.N - 1, S);
    for (std::size_t i = 0; i < v.dim(); ++i)
        for (int m = 0; m < g.N; ++m)
            for (std::size_t s = 0; s < S; ++s) {
                const double dv = v.components[i](m, s) - ubar.components[i](m, s);
                rep.residual(m, s) += dv * grad.phi[i](m, s);
                rep.residual_scale = std::max(rep.residual_scale, std::abs(dv) * grad.magnitude[i](m, s));
            }
    detail::summarize(rep, drv);
    return rep;
}

template <class Driver>
SmpReport optimality_residual(const ControlProblem& cp, const ControlPath& ubar, const ControlPath& v,
                              const Driver& drv, double tol_opt = 1e-8) {
    const auto x = simulate_state(cp, ubar, drv);
    const auto adj = picard_solve(build_adjoint(cp, x, ubar, drv), drv).first;
    return optimality_residual(smp_gradient(cp, linearize(cp, x, ubar, drv), adj, drv), ubar, v, drv, tol_opt);
}

/// Needle form: the control at step m moves by rho (v - u)_m, coefficient differences replace derivatives.
template <class Driver>
SmpReport variational_residual(const ControlProblem& cp, const Trajectory& x, const ControlPath& ubar,
                               const AdaptedPair& adj, double rho, const ControlPath& direction, const Driver& drv,
                               double tol_opt = 1e-8) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios(), n = cp.state_dim;
    std::vector<AdaptedProcess> P(n, AdaptedProcess(0, g.N - 1, S));
    for (std::size_t l = 0; l < n; ++l)
        for (int k = 0; k < g.N; ++k) P[l].at(k) = drv.project(adj.p[l].at(k + 1), k);
    SmpReport rep;
    rep.tol = tol_opt;
    rep.residual = AdaptedProcess(0, g.N - 1, S);
    struct Role {
        const DelayedCoefficient* coef;
        int kind;  // 0 drift, 1 diffusion, 2 running
    };
    const Role roles[] = {{&cp.drift, 0}, {&cp.diffusion, 1}, {&cp.running, 2}};
    std::vector<double> acc(S);
    for (const auto& role : roles) {
        const auto& chans = role.coef->channels();
        bool has_control = false;
        for (const auto& ch : chans) has_control |= ch.source == Source::control;
        if (!has_control) continue;
        const Contractor con(chans, g);
        const std::size_t w = chans.size(), od = role.coef->out_dim();
        for (int m = 0; m < g.N; ++m) {
            std::fill(acc.begin(), acc.end(), 0.0);
            parallel_chunks(S, [&](std::size_t lo, std::size_t hi) {
                std::vector<double> z(w), zr(w), v0(od), v1(od);
                for (std::size_t s = lo; s < hi; ++s) {
                    double total = 0.0;
                    for (int j = 0; j <= g.D && m + j < g.N; ++j) {
                        const int k = m + j;
                        con.contract(x, ubar, k, s, z.data());
                        zr = z;
                        bool moved = false;
                        for (std::size_t c = 0; c < w; ++c) {
                            if (chans[c].source != Source::control) continue;
                            const double a = con.lags()[c][static_cast<std::size_t>(j)];
                            const double dv = direction.components[chans[c].component](m, s);
                            if (a != 0.0 && dv != 0.0) {
                                zr[c] += rho * a * dv;
                                moved = true;
                            }
                        }
                        if (!moved) continue;
                        const double t = g.time(k);
                        role.coef->eval(t, z.data(), v0.data());
                        role.coef->eval(t, zr.data(), v1.data());
                        for (std::size_t i = 0; i < od; ++i) {
                            const double pair = role.kind == 0 ? P[i](k, s) : role.kind == 1 ? -adj.q[i](k, s) : 1.0;
                            total += (v1[i] - v0[i]) * pair;
                        }
                    }
                    acc[s] = total;
                }
            });
            const auto e = drv.project(acc, m);
            for (std::size_t s = 0; s < S; ++s) rep.residual(m, s) += e[s];
        }
    }
    detail::summarize(rep, drv);
    return rep;
}

struct DualityRow {
    double rho = 0.0;
    double fd_forward = 0.0, fd_central = 0.0;
    double gap_forward = 0.0, gap_central = 0.0;
};

struct DualityReport {
    double pairing = 0.0;  // E sum_m dt <v_m, phi_m>
    double cost = 0.0;
    std::vector<DualityRow> rows;
};

template <class Driver>
double pairing(const SmpGradient& grad, const ControlPath& direction, const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<double> tmp(S);
    double total = 0.0;
    for (int m = 0; m < g.N; ++m) {
        for (std::size_t s = 0; s < S; ++s) {
            double v = 0.0;
            for (std::size_t i = 0; i < grad.phi.size(); ++i) v += direction.components[i](m, s) * grad.phi[i](m, s);
            tmp[s] = v;
        }
        total += g.dt() * drv.expectation(tmp);
    }
    return total;
}

/// Finite-difference cost derivative against the adjoint pairing along one direction.
template <class Driver>
DualityReport duality_check(const ControlProblem& cp, const ControlPath& ubar, const ControlPath& direction,
                            const std::vector<double>& rhos, const Driver& drv) {
    const auto x = simulate_state(cp, ubar, drv);
    const auto adj = picard_solve(build_adjoint(cp, x, ubar, drv), drv).first;
    const auto grad = smp_gradient(cp, linearize(cp, x, ubar, drv), adj, drv);
    DualityReport rep;
    rep.pairing = pairing(grad, direction, drv);
    rep.cost = evaluate_cost(cp, x, ubar, drv).value;
    for (double rho : rhos) {
        require(rho > 0.0, "duality ladder needs positive rho");
        const double jp = evaluate_cost(cp, ubar.plus(direction, rho), drv).value;
        const double jm = evaluate_cost(cp, ubar.plus(direction, -rho), drv).value;
        DualityRow row;
        row.rho = rho;
        row.fd_forward = (jp - rep.cost) / rho;
        row.fd_central = (jp - jm) / (2 * rho);
        row.gap_forward = std::abs(row.fd_forward - rep.pairing);
        row.gap_central = std::abs(row.fd_central - rep.pairing);
        rep.rows.push_back(row);
    }
    return rep;
}

/// <F, p> + <G, q> + L at step k; segments hold D+1 values, index i at theta = -d + i dt.
inline double hamiltonian(const ControlProblem& cp, int k, const std::vector<std::vector<double>>& x_segment,
                          const std::vector<std::vector<double>>& u_segment, const std::vector<double>& p,
                          const std::vector<double>& q) {
    const auto& g = cp.grid;
    const auto D = static_cast<std::size_t>(g.D);
    require(x_segment.size() == cp.state_dim && u_segment.size() == cp.control_dim, "segments have wrong dimension");
    for (const auto& s : x_segment) require(s.size() == D + 1, "state segment needs D+1 values");
    for (const auto& s : u_segment) require(s.size() == D + 1, "control segment needs D+1 values");
    require(p.size() == cp.state_dim && q.size() == cp.state_dim, "adjoint values have wrong dimension");
    auto contract = [&](const DelayedCoefficient& c) {
        std::vector<double> z(c.width());
        for (std::size_t i = 0; i < c.width(); ++i) {
            const auto& ch = c.channels()[i];
            const auto a = lag_weights(ch.measure, g);
            const auto& seg = ch.source == Source::state ? x_segment[ch.component] : u_segment[ch.component];
            for (std::size_t j = 0; j <= D; ++j) z[i] += a[j] * seg[D - j];
        }
        return z;
    };
    const double t = g.time(k);
    std::vector<double> F(cp.state_dim), G(cp.state_dim), L(1);
    auto zf = contract(cp.drift), zg = contract(cp.diffusion), zl = contract(cp.running);
    cp.drift.eval(t, zf.data(), F.data());
    cp.diffusion.eval(t, zg.data(), G.data());
    cp.running.eval(t, zl.data(), L.data());
    double h = L[0];
    for (std::size_t i = 0; i < cp.state_dim; ++i) h += F[i] * p[i] + G[i] * q[i];
    return h;
}

/// Comparison controls: constant corners of the box, sinusoidal perturbations and bang-bang switches.
/// Unbounded sides are replaced by u +- 1.
template <class Driver>
std::vector<ControlPath> comparison_family(const ControlProblem& cp, const ControlPath& ubar, std::size_t count,
                                           const Driver& drv) {
    const auto& g = drv.grid();
    const std::size_t S = drv.scenarios();
    std::vector<ControlPath> out;
    auto level = [&](std::size_t i, int m, std::size_t s, bool upper) {
        const double b = upper ? cp.admissible.upper[i] : cp.admissible.lower[i];
        return std::isfinite(b) ? b : ubar.components[i](m, s) + (upper ? 1.0 : -1.0);
    };
    auto make = [&](auto&& value) {
        ControlPath v = ubar;
        for (std::size_t i = 0; i < v.dim(); ++i)
            for (int m = 0; m < g.N; ++m)
                for (std::size_t s = 0; s < S; ++s) v.components[i](m, s) = cp.admissible.project(i, value(i, m, s));
        out.push_back(std::move(v));
    };
    const std::size_t corners = std::size_t{1} << std::min<std::size_t>(cp.control_dim, 4);
    for (std::size_t c = 0; c < corners && out.size() < count; ++c)
        make([&](std::size_t i, int m, std::size_t s) { return level(i, m, s, (c >> (i % 4)) & 1u); });
    for (int f = 1; out.size() < count && f <= 4; ++f)
        for (double amp : {0.5, -0.5}) {
            if (out.size() >= count) break;
            make([&](std::size_t i, int m, std::size_t s) {
                return ubar.components[i](m, s) + amp * std::sin(2.0 * std::numbers::pi * f * g.time(m) / g.T);
            });
        }
    for (int cut = 1; out.size() < count && cut < 4; ++cut)
        for (bool up_first : {true, false}) {
            if (out.size() >= count) break;
            make([&](std::size_t i, int m, std::size_t s) {
                const bool first = g.time(m) < cut * g.T / 4.0;
                return level(i, m, s, first == up_first);
            });
        }
    return out;
}

}  // namespace delayctl
