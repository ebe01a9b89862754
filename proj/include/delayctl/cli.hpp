#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "delayctl/absde.hpp"
#include "delayctl/bsde.hpp"
#include "delayctl/config.hpp"
#include "delayctl/exec.hpp"
#include "delayctl/models.hpp"
#include "delayctl/report.hpp"
#include "delayctl/smp.hpp"

namespace delayctl::cli {

inline constexpr const char* output_env = "DELAYCTL_OUTPUT_DIR";

struct Options {
    std::string command;  // solve-bsde | solve-absde | check-smp | run-model | convergence-study
    std::string config;
    std::string out;  // empty: $DELAYCTL_OUTPUT_DIR, then ./delayctl-out
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    bool oracle = false;
    std::vector<std::size_t> ladder;
    std::string candidate;
    std::optional<int> directions;
    std::string model;
};

inline int exit_code(ErrorCode c) {
    switch (c) {
        case ErrorCode::schema: return 2;
        case ErrorCode::solver: return 3;
        case ErrorCode::oracle: return 4;
        default: return 1;
    }
}

inline const char* code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::schema: return "schema";
        case ErrorCode::solver: return "solver";
        case ErrorCode::oracle: return "oracle";
        default: return "invalid_argument";
    }
}

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys = grid_keys();
    for (const auto& k : measure_keys()) keys.push_back(k);
    for (const char* k : {R"(output\.csv)", R"(solver\.(beta|tol|max_iter|oracle|oracle_tol|ladder))",
                          R"(bsde\.(f|g|h|xi|window|scheme|audit_beta))", R"(absde\.(f|g|h|xi|window|m1|m2))",
                          R"(model\.(name|control))", R"(smp\.(tol|directions))", R"(study\.(kind|N))",
                          R"(advertising\.(a0|b0|sigma_a|sigma_b|r|q|y_target|y0|u0|u_min|u_max|mu_a|mu_b|mu_phi|)"
                          R"(phi_kind|phi_weight|phi_target|phi_lambda|phi_clip))",
                          R"(portfolio\.(b|sigma|r|mu_b|mu_sigma|mu_r|mu_U|U_kind|U_weight|U_target|U_lambda|)"
                          R"(U_clip|S0|V0|pi0|c0|pi_min|pi_max|c_min|c_max|nu0|eta|pi_init))"})
        keys.emplace_back(k);
    return keys;
}

namespace detail {

struct Context {
    Options opt;
    Config cfg;
    TimeGrid grid;
    DriverSpec driver;
    std::filesystem::path out;
    bool csv = true;
    Json results = Json::object();
    std::vector<Check> checks;

    void check(std::string name, bool passed, double value, double tolerance, bool oracle = false) {
        checks.push_back({std::move(name), passed, value, tolerance, oracle});
    }
};

inline double sup_abs(const AdaptedPair& x) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.dim(); ++i) m = std::max({m, x.p[i].sup_abs(), x.q[i].sup_abs()});
    return m;
}

/// Sup distance over steps 0..N for p and 0..N-1 for q.
inline double pair_gap(const AdaptedPair& x, const AdaptedPair& y, int N) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.dim(); ++i)
        for (int k = 0; k <= N; ++k)
            for (std::size_t s = 0; s < x.p[i].scenarios; ++s) {
                m = std::max(m, std::abs(x.p[i](k, s) - y.p[i](k, s)));
                if (k < N) m = std::max(m, std::abs(x.q[i](k, s) - y.q[i](k, s)));
            }
    return m;
}

template <class Driver>
double initial_value(const AdaptedProcess& p, const Driver& drv) {
    return drv.expectation(p.at(0));
}

inline RegularMeasure lag_zero(const TimeGrid& g) { return RegularMeasure::dirac(-g.delay(), 0.0, 0.0); }

template <class Driver>
LinearBsdeProblem bsde_from_config(const Config& cfg, const Driver& drv) {
    const auto& g = drv.grid();
    LinearBsdeProblem p;
    p.grid = g;
    p.f = ProcessSpec::parse(cfg, "bsde.f").sample(drv, 0, g.N - 1);
    p.g = ProcessSpec::parse(cfg, "bsde.g").sample(drv, 0, g.N - 1);
    p.h = ProcessSpec::parse(cfg, "bsde.h").sample(drv, 0, g.N - 1);
    p.xi = ProcessSpec::parse(cfg, "bsde.xi").sample(drv, g.N - g.D, g.N);
    p.window = named_measure(cfg, "bsde.window", g.delay(), lag_zero(g)).shifted(g.T);
    const std::string scheme = cfg.text("bsde.scheme", "implicit");
    if (scheme == "implicit") p.scheme = GScheme::implicit;
    else if (scheme == "explicit") p.scheme = GScheme::explicit_;
    else throw Error(ErrorCode::schema, "bsde.scheme must be 'implicit' or 'explicit'");
    return p;
}

inline void apply_solver(const Config& cfg, AbsdeProblem& prob) {
    prob.beta = cfg.number("solver.beta", 0.0);
    prob.tol = cfg.number("solver.tol", prob.tol);
    prob.max_iter = static_cast<int>(cfg.integer("solver.max_iter", prob.max_iter));
    if (prob.beta < 0.0) throw Error(ErrorCode::schema, "solver.beta must be >= 0 (0 selects it automatically)");
    if (prob.tol <= 0.0) throw Error(ErrorCode::schema, "solver.tol must be positive");
    if (prob.max_iter < 1) throw Error(ErrorCode::schema, "solver.max_iter must be positive");
}

template <class Driver>
AbsdeProblem absde_from_config(const Config& cfg, const Driver& drv) {
    const auto& g = drv.grid();
    const double d = g.delay();
    const int last = std::max(g.N - 1, g.N + g.D - 1);
    const auto zero = RegularMeasure::zero(-d, 0.0);
    auto prob = scalar_absde(drv, ProcessSpec::parse(cfg, "absde.f").sample(drv, 0, g.N - 1),
                             ProcessSpec::parse(cfg, "absde.g").sample(drv, 0, last),
                             ProcessSpec::parse(cfg, "absde.h").sample(drv, 0, last),
                             ProcessSpec::parse(cfg, "absde.xi").sample(drv, g.N - g.D, g.N),
                             named_measure(cfg, "absde.window", d, lag_zero(g)).shifted(g.T),
                             named_measure(cfg, "absde.m1", d, zero), named_measure(cfg, "absde.m2", d, zero));
    apply_solver(cfg, prob);
    return prob;
}

inline Payoff payoff_from_config(const Config& cfg, const std::string& prefix, Payoff p) {
    if (cfg.has(prefix + "_kind")) {
        const std::string k = cfg.text(prefix + "_kind");
        if (k == "quadratic") p.kind = Payoff::Kind::quadratic;
        else if (k == "linear") p.kind = Payoff::Kind::linear;
        else if (k == "utility") p.kind = Payoff::Kind::utility;
        else throw Error(ErrorCode::schema, prefix + "_kind must be quadratic, linear or utility");
    }
    p.weight = cfg.number(prefix + "_weight", p.weight);
    p.target = cfg.number(prefix + "_target", p.target);
    p.lambda = cfg.number(prefix + "_lambda", p.lambda);
    p.clip = cfg.number(prefix + "_clip", p.clip);
    if (p.lambda <= 0.0 || p.clip <= 0.0) throw Error(ErrorCode::schema, prefix + ": lambda and clip must be positive");
    return p;
}

inline AdvertisingParams advertising_from_config(const Config& cfg, const TimeGrid& g) {
    AdvertisingParams p;
    p.T = g.T;
    p.N = g.N;
    p.d = g.delay();
    const std::string s = "advertising.";
    p.a0 = cfg.number(s + "a0", p.a0);
    p.b0 = cfg.number(s + "b0", p.b0);
    p.sigma_a = cfg.number(s + "sigma_a", p.sigma_a);
    p.sigma_b = cfg.number(s + "sigma_b", p.sigma_b);
    p.r = cfg.number(s + "r", p.r);
    p.q = cfg.number(s + "q", p.q);
    p.y_target = cfg.number(s + "y_target", p.y_target);
    p.y0 = cfg.number(s + "y0", p.y0);
    p.u0 = cfg.number(s + "u0", p.u0);
    p.u_min = cfg.number(s + "u_min", p.u_min);
    p.u_max = cfg.number(s + "u_max", p.u_max);
    p.mu_a = named_measure(cfg, s + "mu_a", p.d, p.mu_a);
    p.mu_b = named_measure(cfg, s + "mu_b", p.d, p.mu_b);
    p.mu_phi = named_measure(cfg, s + "mu_phi", p.d, p.mu_phi);
    p.phi = payoff_from_config(cfg, s + "phi", p.phi);
    return p;
}

inline SmoothRate rate_from_config(const Config& cfg, const std::string& key, SmoothRate r) {
    if (!cfg.has(key)) return r;
    const auto v = cfg.numbers(key);
    if (v.empty() || v.size() > 3) throw Error(ErrorCode::schema, key + " expects 'x0 [x1 [scale]]'");
    r.x0 = v[0];
    r.x1 = v.size() > 1 ? v[1] : 0.0;
    r.scale = v.size() > 2 ? v[2] : 1.0;
    if (r.scale <= 0.0) throw Error(ErrorCode::schema, key + ": scale must be positive");
    return r;
}

inline PortfolioParams portfolio_from_config(const Config& cfg, const TimeGrid& g) {
    PortfolioParams p;
    p.T = g.T;
    p.N = g.N;
    p.d = g.delay();
    const std::string s = "portfolio.";
    p.b = rate_from_config(cfg, s + "b", p.b);
    p.sigma = rate_from_config(cfg, s + "sigma", p.sigma);
    p.r = rate_from_config(cfg, s + "r", p.r);
    p.mu_b = named_measure(cfg, s + "mu_b", p.d, p.mu_b);
    p.mu_sigma = named_measure(cfg, s + "mu_sigma", p.d, p.mu_sigma);
    p.mu_r = named_measure(cfg, s + "mu_r", p.d, p.mu_r);
    p.mu_U = named_measure(cfg, s + "mu_U", p.d, p.mu_U);
    p.U = payoff_from_config(cfg, s + "U", p.U);
    p.S0 = cfg.number(s + "S0", p.S0);
    p.V0 = cfg.number(s + "V0", p.V0);
    p.pi0 = cfg.number(s + "pi0", p.pi0);
    p.c0 = cfg.number(s + "c0", p.c0);
    p.pi_min = cfg.number(s + "pi_min", p.pi_min);
    p.pi_max = cfg.number(s + "pi_max", p.pi_max);
    p.c_min = cfg.number(s + "c_min", p.c_min);
    p.c_max = cfg.number(s + "c_max", p.c_max);
    p.nu0 = cfg.numbers(s + "nu0", {});
    p.eta = cfg.numbers(s + "eta", {});
    p.pi_init = cfg.numbers(s + "pi_init", {});
    return p;
}

inline std::string model_name(const Context& ctx) {
    const std::string name = ctx.opt.model.empty() ? ctx.cfg.text("model.name", "") : ctx.opt.model;
    if (name != "advertising" && name != "portfolio")
        throw Error(ErrorCode::schema, "model must be 'advertising' or 'portfolio', got '" + name + "'");
    return name;
}

inline ControlProblem model_problem(const Context& ctx, const std::string& name) {
    try {
        if (name == "advertising") return advertising_problem(advertising_from_config(ctx.cfg, ctx.grid));
        return portfolio_problem(portfolio_from_config(ctx.cfg, ctx.grid));
    } catch (const Error& e) {
        if (e.code() != ErrorCode::invalid_argument) throw;
        throw Error(ErrorCode::schema, std::string("model parameters: ") + e.what());
    }
}

/// Candidate control from a long-format CSV (time, scenario, component u<i>, value) on steps 0..N-1.
inline ControlPath read_candidate(const std::string& path, const ControlProblem& cp, std::size_t S) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::schema, "cannot open candidate file '" + path + "'");
    const auto& g = cp.grid;
    auto u = cp.constant_control(std::vector<double>(cp.control_dim, 0.0), S);
    std::vector<std::vector<char>> seen(cp.control_dim, std::vector<char>(static_cast<std::size_t>(g.N) * S, 0));
    std::string line;
    std::getline(in, line);
    if (line != "time,scenario,component,value")
        throw Error(ErrorCode::schema, "candidate file must start with 'time,scenario,component,value'");
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string tok;
        while (std::getline(ss, tok, ',')) f.push_back(tok);
        const std::string where = "candidate line " + std::to_string(lineno);
        if (f.size() != 4) throw Error(ErrorCode::schema, where + ": expected 4 fields");
        if (f[2].size() < 2 || f[2][0] != 'u') throw Error(ErrorCode::schema, where + ": component must be u<i>");
        double t = 0.0, v = 0.0;
        long s = 0, c = 0;
        try {
            t = std::stod(f[0]);
            s = std::stol(f[1]);
            c = std::stol(f[2].substr(1));
            v = std::stod(f[3]);
        } catch (const std::exception&) {
            throw Error(ErrorCode::schema, where + ": malformed number");
        }
        const long k = std::lround(t / g.dt());
        if (std::abs(t - k * g.dt()) > 1e-9 * g.T) throw Error(ErrorCode::schema, where + ": time is off the grid");
        if (k < 0) continue;
        if (k >= g.N || s < 0 || static_cast<std::size_t>(s) >= S || c < 0 ||
            static_cast<std::size_t>(c) >= cp.control_dim)
            throw Error(ErrorCode::schema, where + ": step, scenario or component out of range");
        if (!std::isfinite(v)) throw Error(ErrorCode::schema, where + ": value is not finite");
        const auto ci = static_cast<std::size_t>(c), si = static_cast<std::size_t>(s);
        u.components[ci](static_cast<int>(k), si) = v;
        seen[ci][static_cast<std::size_t>(k) * S + si] = 1;
    }
    for (std::size_t i = 0; i < cp.control_dim; ++i)
        for (std::size_t j = 0; j < seen[i].size(); ++j)
            if (!seen[i][j])
                throw Error(ErrorCode::schema, "candidate misses u" + std::to_string(i) + " at step " +
                                                   std::to_string(j / S) + ", scenario " + std::to_string(j % S));
    return u;
}

inline void write_control_csv(const std::filesystem::path& path, const ControlPath& u, const TimeGrid& g) {
    CsvWriter w(path);
    for (std::size_t i = 0; i < u.dim(); ++i) {
        AdaptedProcess part(0, g.N - 1, u.components[i].scenarios);
        for (int k = 0; k < g.N; ++k) part.at(k) = u.components[i].at(k);
        w.add(part, g, "u" + std::to_string(i));
    }
}

/// Residual report over a family of comparison controls; the MC threshold is three standard errors.
template <class Driver>
Json smp_family(Context& ctx, const ControlProblem& cp, const ControlPath& ubar, const SmpGradient& grad,
                std::size_t count, const Driver& drv, CsvWriter* csv) {
    const double tol_cfg = ctx.cfg.number("smp.tol", 1e-8);
    Json rows = Json::array();
    double worst_fraction = 0.0, worst_ratio = std::numeric_limits<double>::infinity();
    std::size_t idx = 0;
    for (const auto& v : comparison_family(cp, ubar, count, drv)) {
        auto rep = optimality_residual(grad, ubar, v, drv, tol_cfg);
        if (!Driver::exact && !ctx.cfg.has("smp.tol")) {
            double se = 0.0;
            for (int m = 0; m < drv.grid().N; ++m) se = std::max(se, standard_error(rep.residual.at(m)));
            rep.tol = 3.0 * se;
            delayctl::detail::summarize(rep, drv);
        }
        const double ratio = rep.residual_scale > 0.0 ? rep.min_residual / rep.residual_scale : 0.0;
        worst_fraction = std::max(worst_fraction, rep.violation_fraction);
        worst_ratio = std::min(worst_ratio, ratio);
        rows.push_back({{"direction", idx}, {"violation_fraction", rep.violation_fraction},
                        {"min_residual", number_or_null(rep.min_residual)},
                        {"residual_scale", rep.residual_scale}, {"tol", rep.tol}});
        if (csv) csv->add(rep.residual, drv.grid(), "r" + std::to_string(idx));
        ++idx;
    }
    ctx.check("necessary_condition", worst_fraction == 0.0, worst_fraction, 0.0);
    return {{"directions", rows},
            {"worst_violation_fraction", worst_fraction},
            {"worst_relative_residual", number_or_null(worst_ratio)}};
}

inline void solve_bsde(Context& ctx) {
    with_driver(ctx.grid, ctx.driver, [&](const auto& drv) {
        using D = std::decay_t<decltype(drv)>;
        const auto prob = bsde_from_config(ctx.cfg, drv);
        const auto sol = solve_recursion(prob, drv);
        const auto alt = solve_explicit(prob, drv);
        const double gap = pair_gap(sol, alt, ctx.grid.N);
        ctx.results["p0"] = initial_value(sol.p[0], drv);
        ctx.results["p0_explicit_formula"] = initial_value(alt.p[0], drv);
        ctx.results["cross_solver_sup_diff"] = gap;
        if (D::exact) ctx.check("cross_solver_agreement", gap < 1e-10, gap, 1e-10, true);
        if (prob.scheme == GScheme::implicit) {
            const double beta = ctx.cfg.number("bsde.audit_beta", 1.0);
            if (beta <= 0.0) throw Error(ErrorCode::schema, "bsde.audit_beta must be positive");
            const auto a = audit_estimates(prob, sol, beta, drv);
            ctx.results["audit"] = {{"beta", a.beta},          {"lhs", a.lhs},          {"lhs_p", a.lhs_p},
                                    {"lhs_q", a.lhs_q},        {"rhs", a.rhs},          {"rhs_p", a.rhs_p},
                                    {"rhs_q", a.rhs_q},        {"bracket", a.bracket},  {"implied_c", a.implied_c},
                                    {"bound_c", a.bound_c},    {"holds", a.holds}};
            ctx.check("audit_inequality", a.holds, a.lhs, a.rhs);
        }
        if (ctx.csv) write_pair_csv(ctx.out / "solution.csv", sol, ctx.grid);
    });
}

inline Json trace_json(const PicardTrace& tr) {
    Json inc = Json::array(), rat = Json::array();
    for (double v : tr.increments) inc.push_back(v);
    for (double v : tr.ratios) rat.push_back(v);
    return {{"iterations", tr.iterations},
            {"converged", tr.converged},
            {"beta", tr.beta},
            {"c", tr.c},
            {"bound_discrete", tr.bound_discrete},
            {"bound_continuous", tr.bound_continuous},
            {"max_ratio", tr.max_ratio()},
            {"residual", tr.residual},
            {"increments", inc},
            {"ratios", rat}};
}

inline std::vector<std::size_t> ladder_of(const Context& ctx, std::vector<std::size_t> fallback) {
    if (!ctx.opt.ladder.empty()) return ctx.opt.ladder;
    if (ctx.cfg.has("solver.ladder")) {
        std::vector<std::size_t> out;
        for (double v : ctx.cfg.numbers("solver.ladder")) {
            if (v < 1 || v != std::floor(v)) throw Error(ErrorCode::schema, "solver.ladder expects positive integers");
            out.push_back(static_cast<std::size_t>(v));
        }
        return out;
    }
    return fallback;
}

template <class Driver>
void run_ladder(Context& ctx, const AbsdeProblem& prob, const std::vector<std::size_t>& ladder, const Driver& drv) {
    const auto rows = solve_with_measure_approx(prob, ladder, drv);
    Json arr = Json::array();
    bool monotone = true;
    double worst = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        arr.push_back({{"n", rows[i].n}, {"error", rows[i].error}});
        if (i > 0) {
            monotone = monotone && rows[i].error <= rows[i - 1].error + 1e-12;
            worst = std::max(worst, rows[i].error - rows[i - 1].error);
        }
    }
    ctx.results["approx_ladder"] = arr;
    ctx.check("approx_ladder_non_increasing", monotone, worst, 1e-12);
    if (ctx.csv) {
        std::ofstream f(ctx.out / "ladder.csv");
        f << "n,error\n";
        for (const auto& r : rows) f << r.n << ',' << format_double(r.error) << '\n';
    }
}

inline void solve_absde(Context& ctx) {
    const bool oracle = ctx.opt.oracle || ctx.cfg.flag("solver.oracle", false);
    if (oracle && ctx.driver.kind != "lattice")
        throw Error(ErrorCode::schema, "the direct-solve oracle needs driver.kind = lattice");
    if (oracle && ctx.grid.N > 12) throw Error(ErrorCode::schema, "the direct-solve oracle needs grid.N <= 12");
    with_driver(ctx.grid, ctx.driver, [&](const auto& drv) {
        const auto prob = absde_from_config(ctx.cfg, drv);
        const auto [x, tr] = picard_solve(prob, drv);
        const double res = equation_residual(x, prob, drv);
        const double scale = std::max(1.0, sup_abs(x));
        ctx.results["p0"] = initial_value(x.p[0], drv);
        ctx.results["sup_abs"] = sup_abs(x);
        ctx.results["picard"] = trace_json(tr);
        ctx.results["equation_residual"] = res;
        ctx.check("picard_converged", tr.converged, static_cast<double>(tr.iterations), prob.max_iter);
        ctx.check("contraction_ratio", tr.max_ratio() <= 1.05 * tr.bound_discrete, tr.max_ratio(),
                  1.05 * tr.bound_discrete);
        ctx.check("equation_residual", res <= 1e-9 * scale, res, 1e-9 * scale);
        Json bounds = Json::array();
        for (const auto& b : anticipated_q_bounds(x, prob, drv)) {
            bounds.push_back({{"lhs", b.lhs}, {"rhs", b.rhs}});
            ctx.check("anticipated_q_bound", b.lhs <= b.rhs * (1 + 1e-12), b.lhs, b.rhs);
        }
        ctx.results["anticipated_q_bounds"] = bounds;
        if constexpr (std::is_same_v<std::decay_t<decltype(drv)>, BinaryLattice>) {
            if (oracle) {
                const auto [y, info] = direct_solve(prob, drv);
                const double tol = ctx.cfg.number("solver.oracle_tol", 1e-9);
                const double gap = pair_gap(x, y, ctx.grid.N);
                ctx.results["oracle"] = {{"unknowns", info.unknowns}, {"system_residual", info.residual},
                                         {"sup_diff", gap}};
                ctx.check("direct_solve_agreement", gap < tol, gap, tol, true);
            }
        }
        const auto ladder = ladder_of(ctx, {});
        if (!ladder.empty()) run_ladder(ctx, prob, ladder, drv);
        if (ctx.csv) write_pair_csv(ctx.out / "solution.csv", x, ctx.grid);
    });
}

inline void check_smp(Context& ctx) {
    if (ctx.opt.candidate.empty()) throw Error(ErrorCode::schema, "check-smp needs --candidate <csv>");
    const std::string name = model_name(ctx);
    const auto cp = model_problem(ctx, name);
    const long dirs = ctx.opt.directions ? *ctx.opt.directions : ctx.cfg.integer("smp.directions", 8);
    if (dirs < 1) throw Error(ErrorCode::schema, "--directions must be positive");
    with_driver(ctx.grid, ctx.driver, [&](const auto& drv) {
        const auto ubar = read_candidate(ctx.opt.candidate, cp, drv.scenarios());
        const auto x = simulate_state(cp, ubar, drv);
        const auto adj = picard_solve(build_adjoint(cp, x, ubar, drv), drv).first;
        const auto grad = smp_gradient(cp, linearize(cp, x, ubar, drv), adj, drv);
        std::optional<CsvWriter> csv;
        if (ctx.csv) csv.emplace(ctx.out / "residual.csv");
        ctx.results["model"] = name;
        ctx.results["cost"] = evaluate_cost(cp, x, ubar, drv).value;
        ctx.results["smp"] = smp_family(ctx, cp, ubar, grad, static_cast<std::size_t>(dirs), drv, csv ? &*csv : nullptr);
    });
}

inline void run_model(Context& ctx) {
    const std::string name = model_name(ctx);
    const auto cp = model_problem(ctx, name);
    std::vector<double> control(cp.control_dim, 0.0);
    if (ctx.cfg.has("model.control")) control = ctx.cfg.numbers("model.control");
    if (control.size() != cp.control_dim)
        throw Error(ErrorCode::schema, "model.control needs " + std::to_string(cp.control_dim) + " values");
    for (std::size_t i = 0; i < control.size(); ++i)
        if (!cp.admissible.contains(i, control[i])) throw Error(ErrorCode::schema, "model.control leaves the box");
    const long dirs = ctx.opt.directions ? *ctx.opt.directions : ctx.cfg.integer("smp.directions", 8);
    with_driver(ctx.grid, ctx.driver, [&](const auto& drv) {
        using D = std::decay_t<decltype(drv)>;
        const auto ubar = cp.constant_control(control, drv.scenarios());
        const auto x = simulate_state(cp, ubar, drv);
        const auto [adj, tr] = picard_solve(build_adjoint(cp, x, ubar, drv), drv);
        const auto grad = smp_gradient(cp, linearize(cp, x, ubar, drv), adj, drv);
        const auto cost = evaluate_cost(cp, x, ubar, drv);
        ctx.results["model"] = name;
        ctx.results["cost"] = cost.value;
        ctx.results["cost_standard_error"] = cost.standard_error;
        ctx.results["picard"] = trace_json(tr);
        Json p0 = Json::array();
        for (std::size_t i = 0; i < adj.dim(); ++i) p0.push_back(initial_value(adj.p[i], drv));
        ctx.results["adjoint_p0"] = p0;
        if (name == "advertising") {
            const auto prm = advertising_from_config(ctx.cfg, ctx.grid);
            auto hand = advertising_adjoint(prm, x, drv);
            const auto y = picard_solve(hand, drv).first;
            const double gap = pair_gap(adj, y, ctx.grid.N);
            ctx.results["hand_adjoint_sup_diff"] = gap;
            ctx.check("hand_adjoint_agreement", gap < 1e-10, gap, 1e-10, true);
        } else {
            const auto prm = portfolio_from_config(ctx.cfg, ctx.grid);
            const auto first = picard_solve(portfolio_first_adjoint(prm, x, drv), drv).first;
            const double sup = sup_abs(first);
            ctx.results["first_adjoint_sup"] = sup;
            ctx.results["generic_first_adjoint_sup"] = std::max(adj.p[0].sup_abs(), adj.q[0].sup_abs());
            ctx.check("first_adjoint_zero", sup < 1e-12, sup, 1e-12, true);
        }
        auto dir = cp.zero_direction(drv.scenarios());
        for (auto& c : dir.components)
            for (int k = 0; k < ctx.grid.N; ++k) std::fill(c.at(k).begin(), c.at(k).end(), 1.0);
        const auto dual = duality_check(cp, ubar, dir, {1e-2, 1e-3}, drv);
        Json rows = Json::array();
        for (const auto& r : dual.rows)
            rows.push_back({{"rho", r.rho}, {"fd_forward", r.fd_forward}, {"fd_central", r.fd_central},
                            {"gap_forward", r.gap_forward}, {"gap_central", r.gap_central}});
        ctx.results["duality"] = {{"pairing", dual.pairing}, {"rows", rows}};
        if (D::exact) {
            const double tol = 1e-6 * std::max(1.0, std::abs(dual.pairing));
            ctx.check("duality_gap_central", dual.rows.back().gap_central < tol, dual.rows.back().gap_central, tol,
                      true);
        }
        std::optional<CsvWriter> rcsv;
        if (ctx.csv) rcsv.emplace(ctx.out / "residual.csv");
        ctx.results["smp"] =
            smp_family(ctx, cp, ubar, grad, static_cast<std::size_t>(std::max(1L, dirs)), drv, rcsv ? &*rcsv : nullptr);
        if (ctx.csv) {
            CsvWriter st(ctx.out / "state.csv");
            for (std::size_t i = 0; i < x.size(); ++i) st.add(x[i], ctx.grid, "x" + std::to_string(i));
            write_control_csv(ctx.out / "control.csv", ubar, ctx.grid);
            write_pair_csv(ctx.out / "adjoint.csv", adj, ctx.grid);
        }
    });
}

inline void convergence_study(Context& ctx) {
    const std::string kind = ctx.cfg.text("study.kind", "measure");
    if (kind == "measure") {
        with_driver(ctx.grid, ctx.driver, [&](const auto& drv) {
            const auto prob = absde_from_config(ctx.cfg, drv);
            run_ladder(ctx, prob, ladder_of(ctx, {4, 8, 16, 32, 64}), drv);
        });
        return;
    }
    if (kind != "grid") throw Error(ErrorCode::schema, "study.kind must be 'measure' or 'grid'");
    std::vector<double> Ns = ctx.cfg.numbers("study.N", {8, 10, 12});
    Json rows = Json::array();
    double cmin = std::numeric_limits<double>::infinity(), cmax = 0.0;
    bool all_hold = true;
    std::ofstream csv;
    if (ctx.csv) {
        csv.open(ctx.out / "ladder.csv");
        csv << "N,implied_c,bound_c,p0\n";
    }
    for (double nv : Ns) {
        if (nv < 1 || nv != std::floor(nv)) throw Error(ErrorCode::schema, "study.N expects positive integers");
        TimeGrid g;
        try {
            g = TimeGrid::with_delay(ctx.grid.T, static_cast<int>(nv), ctx.grid.delay());
        } catch (const Error& e) {
            throw Error(ErrorCode::schema, std::string("study.N: ") + e.what());
        }
        with_driver(g, ctx.driver, [&](const auto& drv) {
            auto prob = bsde_from_config(ctx.cfg, drv);
            if (prob.scheme != GScheme::implicit) throw Error(ErrorCode::schema, "grid study needs bsde.scheme = implicit");
            const auto sol = solve_recursion(prob, drv);
            const auto a = audit_estimates(prob, sol, ctx.cfg.number("bsde.audit_beta", 1.0), drv);
            const double p0 = initial_value(sol.p[0], drv);
            rows.push_back({{"N", g.N}, {"implied_c", a.implied_c}, {"bound_c", a.bound_c}, {"holds", a.holds},
                            {"p0", p0}});
            cmin = std::min(cmin, a.implied_c);
            cmax = std::max(cmax, a.implied_c);
            all_hold = all_hold && a.holds;
            if (ctx.csv)
                csv << g.N << ',' << format_double(a.implied_c) << ',' << format_double(a.bound_c) << ','
                    << format_double(p0) << '\n';
        });
    }
    ctx.results["grid_ladder"] = rows;
    const double spread = cmin > 0.0 ? cmax / cmin : std::numeric_limits<double>::infinity();
    ctx.check("audit_inequality", all_hold, all_hold ? 1.0 : 0.0, 1.0);
    ctx.check("implied_constant_stable", spread <= 4.0, spread, 4.0);
}

inline Json command_json(const Options& o) {
    Json c{{"name", o.command}};
    if (!o.model.empty()) c["model"] = o.model;
    if (o.oracle) c["oracle"] = true;
    if (!o.ladder.empty()) c["approx_ladder"] = o.ladder;
    if (!o.candidate.empty()) c["candidate"] = std::filesystem::path(o.candidate).filename().string();
    if (o.directions) c["directions"] = *o.directions;
    return c;
}

inline Json resolved_json(const Context& ctx) {
    return {{"grid", {{"T", ctx.grid.T}, {"N", ctx.grid.N}, {"D", ctx.grid.D}, {"d", ctx.grid.delay()}}},
            {"driver",
             {{"kind", ctx.driver.kind},
              {"paths", ctx.driver.paths},
              {"seed", ctx.driver.seed},
              {"basis_degree", ctx.driver.degree}}}};
}

}  // namespace detail

inline std::filesystem::path output_dir(const Options& o) {
    if (!o.out.empty()) return o.out;
    if (const char* env = std::getenv(output_env); env && *env) return env;
    return "delayctl-out";
}

/// Runs one subcommand; returns the process exit code. Writes report.json (or error.json) to the output directory.
inline int run(const Options& opt, std::ostream& log = std::cerr) {
    std::filesystem::path out;
    try {
        set_threads(opt.threads);
        detail::Context ctx;
        ctx.opt = opt;
        ctx.out = out = output_dir(opt);
        if (opt.config.empty()) throw Error(ErrorCode::schema, "--config is required");
        ctx.cfg = Config::from_file(opt.config);
        ctx.cfg.validate(config_keys());
        if (opt.seed) ctx.cfg.set("mc.seed", std::to_string(*opt.seed));
        ctx.grid = grid_from_config(ctx.cfg);
        ctx.driver = driver_from_config(ctx.cfg);
        ctx.csv = ctx.cfg.flag("output.csv", true);
        std::filesystem::create_directories(ctx.out);

        if (opt.command == "solve-bsde") detail::solve_bsde(ctx);
        else if (opt.command == "solve-absde") detail::solve_absde(ctx);
        else if (opt.command == "check-smp") detail::check_smp(ctx);
        else if (opt.command == "run-model") detail::run_model(ctx);
        else if (opt.command == "convergence-study") detail::convergence_study(ctx);
        else throw Error(ErrorCode::schema, "unknown command '" + opt.command + "'");

        bool passed = true, oracle_ok = true;
        for (const auto& c : ctx.checks) {
            passed = passed && c.passed;
            if (c.oracle && !c.passed) oracle_ok = false;
        }
        Json report{{"tool", "delayctl"},
                    {"version", version},
                    {"command", detail::command_json(opt)},
                    {"config", ctx.cfg.values()},
                    {"resolved", detail::resolved_json(ctx)},
                    {"results", ctx.results},
                    {"checks", to_json(ctx.checks)},
                    {"passed", passed}};
        write_json(ctx.out / "report.json", report);
        for (const auto& c : ctx.checks)
            log << (c.passed ? "PASS " : "FAIL ") << c.name << " value=" << format_double(c.value)
                << " tol=" << format_double(c.tolerance) << '\n';
        if (!oracle_ok) {
            log << "error: oracle disagreement beyond tolerance\n";
            return exit_code(ErrorCode::oracle);
        }
        return 0;
    } catch (const Error& e) {
        log << "error (" << code_name(e.code()) << "): " << e.what() << '\n';
        if (!out.empty()) {
            try {
                std::filesystem::create_directories(out);
                write_json(out / "error.json", Json{{"tool", "delayctl"},
                                                    {"version", version},
                                                    {"command", detail::command_json(opt)},
                                                    {"error", {{"kind", code_name(e.code())}, {"message", e.what()}}}});
            } catch (const std::exception&) {
            }
        }
        return exit_code(e.code());
    } catch (const std::exception& e) {
        log << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace delayctl::cli
