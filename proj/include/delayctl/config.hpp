#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cmath>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "delayctl/drivers.hpp"
#include "delayctl/error.hpp"
#include "delayctl/measures.hpp"

namespace delayctl {

/// Flattened INI file: "section.key" -> value. Every lookup is recorded so unused keys can be reported.
class Config {
public:
    Config() = default;
    explicit Config(std::map<std::string, std::string> values) : values_(std::move(values)) {}

    static Config from_file(const std::string& path) {
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::ini_parser::read_ini(path, tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw Error(ErrorCode::schema, "cannot read config: " + std::string(e.what()));
        }
        return from_tree(tree);
    }

    static Config from_string(const std::string& text) {
        std::istringstream in(text);
        boost::property_tree::ptree tree;
        try {
            boost::property_tree::ini_parser::read_ini(in, tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw Error(ErrorCode::schema, "cannot parse config: " + std::string(e.what()));
        }
        return from_tree(tree);
    }

    const std::map<std::string, std::string>& values() const { return values_; }
    bool has(const std::string& key) const { return values_.count(key) > 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string text(const std::string& key, const std::string& fallback) const {
        const auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string text(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) throw Error(ErrorCode::schema, "missing required key '" + key + "'");
        return it->second;
    }

    double number(const std::string& key, double fallback) const {
        return has(key) ? number(key) : fallback;
    }

    double number(const std::string& key) const {
        const std::string v = text(key);
        try {
            std::size_t used = 0;
            const double x = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("trailing text");
            return x;
        } catch (const std::exception&) {
            throw Error(ErrorCode::schema, "key '" + key + "' expects a number, got '" + v + "'");
        }
    }

    long integer(const std::string& key, long fallback) const {
        if (!has(key)) return fallback;
        const double x = number(key);
        if (x != std::floor(x) || std::abs(x) > 1e15)
            throw Error(ErrorCode::schema, "key '" + key + "' expects an integer");
        return static_cast<long>(x);
    }

    bool flag(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string v = text(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw Error(ErrorCode::schema, "key '" + key + "' expects a boolean, got '" + v + "'");
    }

    std::vector<double> numbers(const std::string& key) const { return parse_list(key, text(key)); }

    std::vector<double> numbers(const std::string& key, const std::vector<double>& fallback) const {
        return has(key) ? numbers(key) : fallback;
    }

    /// Rejects keys that match none of the patterns. A pattern is a regex over the full "section.key".
    void validate(const std::vector<std::string>& patterns) const {
        std::vector<std::regex> res;
        for (const auto& p : patterns) res.emplace_back(p);
        for (const auto& [k, v] : values_) {
            bool ok = false;
            for (const auto& re : res) ok = ok || std::regex_match(k, re);
            if (!ok) throw Error(ErrorCode::schema, "unknown config key '" + k + "'");
        }
    }

    static std::vector<double> parse_list(const std::string& key, const std::string& v) {
        std::vector<double> out;
        std::string tok;
        auto flush = [&] {
            if (tok.empty()) return;
            try {
                std::size_t used = 0;
                out.push_back(std::stod(tok, &used));
                if (used != tok.size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw Error(ErrorCode::schema, "key '" + key + "': '" + tok + "' is not a number");
            }
            tok.clear();
        };
        for (char ch : v) {
            if (ch == ',' || ch == ' ' || ch == '\t') flush();
            else tok.push_back(ch);
        }
        flush();
        return out;
    }

private:
    static Config from_tree(const boost::property_tree::ptree& tree) {
        std::map<std::string, std::string> out;
        for (const auto& [section, body] : tree) {
            if (body.empty()) {
                out[section] = strip_comment(body.data());
                continue;
            }
            for (const auto& [key, value] : body) out[section + "." + key] = strip_comment(value.data());
        }
        return Config(std::move(out));
    }

    /// Drops a trailing "; ..." or "# ..." comment that follows whitespace.
    static std::string strip_comment(std::string v) {
        for (std::size_t i = 1; i < v.size(); ++i)
            if ((v[i] == ';' || v[i] == '#') && (v[i - 1] == ' ' || v[i - 1] == '\t')) {
                v.erase(i);
                break;
            }
        const auto end = v.find_last_not_of(" \t");
        return end == std::string::npos ? std::string() : v.substr(0, end + 1);
    }

    std::map<std::string, std::string> values_;
};

/// Measure on [-d, 0] from section "measure.<name>":
///   atoms = (theta, weight) (theta, weight) ...
///   density = v1 v2 ...          (one value per cell, or a single value)
///   density_cells = n            (broadcasts a single density value)
inline RegularMeasure measure_from_config(const Config& cfg, const std::string& name, double d) {
    const std::string sec = "measure." + name + ".";
    std::vector<Atom> atoms;
    if (cfg.has(sec + "atoms")) {
        const std::string v = cfg.text(sec + "atoms");
        static const std::regex pair_re(R"(\(\s*([^,()]+?)\s*,\s*([^,()]+?)\s*\))");
        std::string rest;
        auto it = std::sregex_iterator(v.begin(), v.end(), pair_re);
        std::size_t consumed = 0;
        for (; it != std::sregex_iterator(); ++it) {
            const auto& m = *it;
            rest += v.substr(consumed, static_cast<std::size_t>(m.position()) - consumed);
            consumed = static_cast<std::size_t>(m.position() + m.length());
            const auto loc = Config::parse_list(sec + "atoms", m[1].str());
            const auto w = Config::parse_list(sec + "atoms", m[2].str());
            if (loc.size() != 1 || w.size() != 1)
                throw Error(ErrorCode::schema, "measure '" + name + "': malformed atom '" + m.str() + "'");
            atoms.push_back({loc[0], w[0]});
        }
        rest += v.substr(consumed);
        if (rest.find_first_not_of(" \t,") != std::string::npos)
            throw Error(ErrorCode::schema, "measure '" + name + "': atoms must be written as (location, weight)");
    }
    std::vector<double> density;
    if (cfg.has(sec + "density")) {
        density = cfg.numbers(sec + "density");
        const long cells = cfg.integer(sec + "density_cells", static_cast<long>(density.size()));
        if (cells < 1) throw Error(ErrorCode::schema, "measure '" + name + "': density_cells must be positive");
        if (density.size() == 1) density.assign(static_cast<std::size_t>(cells), density[0]);
        if (density.size() != static_cast<std::size_t>(cells))
            throw Error(ErrorCode::schema, "measure '" + name + "': density has " + std::to_string(density.size()) +
                                               " values for " + std::to_string(cells) + " cells");
    } else if (cfg.has(sec + "density_cells")) {
        throw Error(ErrorCode::schema, "measure '" + name + "': density_cells without density");
    }
    try {
        return RegularMeasure(-d, 0.0, std::move(atoms), std::move(density));
    } catch (const Error& e) {
        throw Error(ErrorCode::schema, "measure '" + name + "': " + e.what());
    }
}

inline std::vector<std::string> measure_keys() {
    return {R"(measure\.[A-Za-z0-9_]+\.(atoms|density|density_cells))"};
}

/// Deterministic-in-form process c0 + ct t + cw W_t + cw2 W_t^2, written "c0 ct cw cw2" (trailing terms optional).
struct ProcessSpec {
    double c0 = 0.0, ct = 0.0, cw = 0.0, cw2 = 0.0;

    static ProcessSpec parse(const Config& cfg, const std::string& key) {
        ProcessSpec p;
        if (!cfg.has(key)) return p;
        const auto v = cfg.numbers(key);
        if (v.empty() || v.size() > 4)
            throw Error(ErrorCode::schema, "key '" + key + "' expects 1 to 4 coefficients (c0 ct cw cw2)");
        double* dst[] = {&p.c0, &p.ct, &p.cw, &p.cw2};
        for (std::size_t i = 0; i < v.size(); ++i) *dst[i] = v[i];
        return p;
    }

    template <class Driver>
    AdaptedProcess sample(const Driver& drv, int first, int last) const {
        const auto& g = drv.grid();
        const std::size_t S = drv.scenarios();
        AdaptedProcess x(first, last, S);
        for (int k = first; k <= last; ++k) {
            const int kk = std::clamp(k, 0, g.N);
            const auto& W = drv.brownian(kk);
            const double t = g.time(k);
            for (std::size_t s = 0; s < S; ++s) x(k, s) = c0 + ct * t + cw * W[s] + cw2 * W[s] * W[s];
        }
        return x;
    }
};

/// grid.T (default 1), grid.N (default 10), and the delay as grid.D steps or grid.d time (default 0.3 T).
inline TimeGrid grid_from_config(const Config& cfg) {
    const double T = cfg.number("grid.T", 1.0);
    const long N = cfg.integer("grid.N", 10);
    if (N < 1 || N > 100000) throw Error(ErrorCode::schema, "grid.N must be in 1..100000");
    try {
        if (cfg.has("grid.D")) {
            const long D = cfg.integer("grid.D", 0);
            if (D < 0 || D > N) throw Error(ErrorCode::schema, "grid.D must be in 0..grid.N");
            const TimeGrid g(static_cast<int>(N), static_cast<int>(D), T);
            if (cfg.has("grid.d") && std::abs(cfg.number("grid.d") - g.delay()) > 1e-9 * T)
                throw Error(ErrorCode::schema, "grid.d and grid.D disagree");
            return g;
        }
        return TimeGrid::with_delay(T, static_cast<int>(N), cfg.number("grid.d", 0.3 * T));
    } catch (const Error& e) {
        throw Error(ErrorCode::schema, std::string("grid: ") + e.what());
    }
}

inline std::vector<std::string> grid_keys() {
    return {R"(grid\.(T|N|D|d))", R"(driver\.kind)", R"(mc\.(paths|seed|basis_degree))"};
}

struct DriverSpec {
    std::string kind = "lattice";
    std::size_t paths = 2000;
    std::uint64_t seed = 1;
    int degree = 2;
};

inline DriverSpec driver_from_config(const Config& cfg) {
    DriverSpec d;
    d.kind = cfg.text("driver.kind", "lattice");
    if (d.kind != "lattice" && d.kind != "mc")
        throw Error(ErrorCode::schema, "driver.kind must be 'lattice' or 'mc', got '" + d.kind + "'");
    const long paths = cfg.integer("mc.paths", 2000), seed = cfg.integer("mc.seed", 1),
               degree = cfg.integer("mc.basis_degree", 2);
    if (paths < 2) throw Error(ErrorCode::schema, "mc.paths must be at least 2");
    if (seed < 0) throw Error(ErrorCode::schema, "mc.seed must be non-negative");
    if (degree < 0 || degree > 3) throw Error(ErrorCode::schema, "mc.basis_degree must be in 0..3");
    d.paths = static_cast<std::size_t>(paths);
    d.seed = static_cast<std::uint64_t>(seed);
    d.degree = static_cast<int>(degree);
    return d;
}

/// Calls f with the configured driver.
template <class F>
decltype(auto) with_driver(const TimeGrid& g, const DriverSpec& spec, F&& f) {
    if (spec.kind == "lattice") {
        if (g.N > BinaryLattice::default_max_depth)
            throw Error(ErrorCode::schema, "lattice driver supports grid.N <= " +
                                               std::to_string(BinaryLattice::default_max_depth) + "; use driver.kind = mc");
        const BinaryLattice lat(g);
        return f(lat);
    }
    const MonteCarloDriver mc(g, spec.paths, spec.seed, spec.degree);
    return f(mc);
}

/// True when the config defines section "measure.<name>".
inline bool has_measure(const Config& cfg, const std::string& name) {
    const std::string sec = "measure." + name + ".";
    for (const auto& [k, v] : cfg.values())
        if (k.rfind(sec, 0) == 0) return true;
    return false;
}

/// Measure named by `key`, or `fallback` when the key is absent.
inline RegularMeasure named_measure(const Config& cfg, const std::string& key, double d,
                                    const RegularMeasure& fallback) {
    if (!cfg.has(key)) return fallback;
    const std::string name = cfg.text(key);
    if (!has_measure(cfg, name)) throw Error(ErrorCode::schema, key + " names an undefined measure '" + name + "'");
    return measure_from_config(cfg, name, d);
}

}  // namespace delayctl
