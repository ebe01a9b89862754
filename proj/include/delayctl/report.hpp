#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "delayctl/bsde.hpp"
#include "delayctl/drivers.hpp"
#include "delayctl/error.hpp"

namespace delayctl {

inline constexpr const char* version = "0.1.0";

using Json = nlohmann::ordered_json;

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// JSON number, or null for non-finite values.
inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

struct Check {
    std::string name;
    bool passed = false;
    double value = 0.0;
    double tolerance = 0.0;
    bool oracle = false;  // failure means disagreement with an independent reference
};

inline Json to_json(const Check& c) {
    return Json{{"name", c.name}, {"passed", c.passed}, {"value", number_or_null(c.value)},
                {"tolerance", number_or_null(c.tolerance)},
                {"kind", c.oracle ? "oracle" : "invariant"}};
}

inline Json to_json(const std::vector<Check>& cs) {
    Json a = Json::array();
    for (const auto& c : cs) a.push_back(to_json(c));
    return a;
}

/// Long-format rows: time, scenario, component, value.
class CsvWriter {
public:
    explicit CsvWriter(const std::filesystem::path& path) : out_(path) {
        require(out_.good(), "cannot open " + path.string() + " for writing");
        out_ << "time,scenario,component,value\n";
    }

    void add(const AdaptedProcess& x, const TimeGrid& g, const std::string& component) {
        for (int k = x.first_step; k <= x.last_step(); ++k)
            for (std::size_t s = 0; s < x.scenarios; ++s)
                out_ << format_double(g.time(k)) << ',' << s << ',' << component << ',' << format_double(x(k, s))
                     << '\n';
    }

private:
    std::ofstream out_;
};

inline void write_pair_csv(const std::filesystem::path& path, const AdaptedPair& x, const TimeGrid& g) {
    CsvWriter w(path);
    for (std::size_t i = 0; i < x.dim(); ++i) {
        w.add(x.p[i], g, "p" + std::to_string(i));
        w.add(x.q[i], g, "q" + std::to_string(i));
    }
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
    std::ofstream out(path);
    require(out.good(), "cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
}

}  // namespace delayctl
