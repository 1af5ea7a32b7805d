#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nlbilevel/csv.hpp"
#include "nlbilevel/error.hpp"
#include "nlbilevel/image.hpp"

namespace nlbilevel {

inline constexpr double kUnset = std::numeric_limits<double>::quiet_NaN();

/// Everything a run needs. Entries left NaN (or 0 where noted) are filled in
/// per problem by resolve().
struct RunConfig {
    std::string problem;
    std::vector<std::string> input;  // noisy image(s)
    std::vector<std::string> truth;  // ground truth image(s)
    std::string out = "out";
    bool overwrite = false;

    // noise for synthetic experiments (applied to truth when no input is given)
    std::string preset;  // a-d, sets sigma2, delta and the weight-bound factor
    double sigma2 = kUnset;
    std::uint64_t seed = 0;

    // kernel
    int rho = 5;
    int eps = 0;  // 0: largest radius with at most 5 min(N, M) neighbours
    double iota = kUnset;
    double delta = kUnset;   // w = delta^-2
    double weight = kUnset;  // overrides delta

    // fidelity / weight problems
    double lambda0 = kUnset;
    double upper = kUnset;
    double beta = 1e-4;
    double kappa = 1e-6;
    double bound_factor = kUnset;  // K in the weight bound
    double weight0 = 1.1e-6;
    double weight_lambda = 0.5;
    std::string spatial_gradient = "dual";
    int threads = 0;

    // optimizer
    double tol = 1e-8;
    double rtol = 1e-8;
    int max_iter = 100;
    int memory = 10;
    double radius0 = 1.0;
    int line_search = 10;

    // lower-level solver
    std::string krylov = "lgmres";
    double krylov_tol = 1e-10;
    int krylov_max_iter = 2000;

    // sweep grid (log-spaced)
    double lambda_min = 1e-2;
    double lambda_max = 1e2;
    int lambda_count = 9;
    double weight_min = 1e-5;
    double weight_max = 1e-3;
    int weight_count = 5;
};

inline const std::vector<std::string>& problem_names() {
    static const std::vector<std::string> names = {
        "denoise", "learn-lambda-scalar", "learn-lambda-spatial", "learn-weight",
        "train-batch", "sweep", "metrics", "synth"};
    return names;
}

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
}

template <class Int>
Int parse_int(const std::string& key, const std::string& v) {
    Int out{};
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ConfigError(key + ": expected an integer, got '" + v + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
}

inline std::string show(double v) { return std::isnan(v) ? "auto" : format_double(v); }

}  // namespace detail

/// One configurable key: how to set it from text and how to print it.
struct ConfigKey {
    std::string name;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
    using namespace detail;
    auto real = [](const char* name, double RunConfig::*m) {
        return ConfigKey{name,
                         [=](RunConfig& c, const std::string& v) {
                             c.*m = (v == "auto") ? kUnset : parse_double(name, v);
                         },
                         [=](const RunConfig& c) { return show(c.*m); }};
    };
    auto integer = [](const char* name, int RunConfig::*m) {
        return ConfigKey{name, [=](RunConfig& c, const std::string& v) { c.*m = parse_int<int>(name, v); },
                         [=](const RunConfig& c) { return std::to_string(c.*m); }};
    };
    auto text = [](const char* name, std::string RunConfig::*m) {
        return ConfigKey{name, [=](RunConfig& c, const std::string& v) { c.*m = v; },
                         [=](const RunConfig& c) { return c.*m; }};
    };
    auto list = [](const char* name, std::vector<std::string> RunConfig::*m) {
        return ConfigKey{name, [=](RunConfig& c, const std::string& v) { c.*m = split_list(v); },
                         [=](const RunConfig& c) { return join_list(c.*m); }};
    };
    static const std::vector<ConfigKey> keys = {
        list("input", &RunConfig::input),
        list("truth", &RunConfig::truth),
        text("out", &RunConfig::out),
        ConfigKey{"overwrite",
                  [](RunConfig& c, const std::string& v) { c.overwrite = parse_bool("overwrite", v); },
                  [](const RunConfig& c) { return std::string(c.overwrite ? "true" : "false"); }},
        text("preset", &RunConfig::preset),
        real("sigma2", &RunConfig::sigma2),
        ConfigKey{"seed",
                  [](RunConfig& c, const std::string& v) { c.seed = parse_int<std::uint64_t>("seed", v); },
                  [](const RunConfig& c) { return std::to_string(c.seed); }},
        integer("rho", &RunConfig::rho),
        integer("eps", &RunConfig::eps),
        real("iota", &RunConfig::iota),
        real("delta", &RunConfig::delta),
        real("weight", &RunConfig::weight),
        real("lambda0", &RunConfig::lambda0),
        real("upper", &RunConfig::upper),
        real("beta", &RunConfig::beta),
        real("kappa", &RunConfig::kappa),
        real("bound-factor", &RunConfig::bound_factor),
        real("weight0", &RunConfig::weight0),
        real("weight-lambda", &RunConfig::weight_lambda),
        text("spatial-gradient", &RunConfig::spatial_gradient),
        integer("threads", &RunConfig::threads),
        real("tol", &RunConfig::tol),
        real("rtol", &RunConfig::rtol),
        integer("max-iter", &RunConfig::max_iter),
        integer("memory", &RunConfig::memory),
        real("radius0", &RunConfig::radius0),
        integer("line-search", &RunConfig::line_search),
        text("krylov", &RunConfig::krylov),
        real("krylov-tol", &RunConfig::krylov_tol),
        integer("krylov-max-iter", &RunConfig::krylov_max_iter),
        real("lambda-min", &RunConfig::lambda_min),
        real("lambda-max", &RunConfig::lambda_max),
        integer("lambda-count", &RunConfig::lambda_count),
        real("weight-min", &RunConfig::weight_min),
        real("weight-max", &RunConfig::weight_max),
        integer("weight-count", &RunConfig::weight_count),
    };
    return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& k : config_keys()) {
        if (k.name == key) {
            k.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown configuration key '" + key + "'");
}

/// Reads a flat key=value file. '#' starts a comment; blank lines are skipped.
inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config file " + path.string());
    }
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
        }
        set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

/// All settings as key=value lines, in a form load_config_file accepts.
inline std::string dump_config(const RunConfig& cfg) {
    std::string out = "# problem=" + cfg.problem + "\n";
    for (const auto& k : config_keys()) out += k.name + "=" + k.get(cfg) + "\n";
    return out;
}

/// Fills problem-dependent defaults and validates ranges.
inline void resolve(RunConfig& c) {
    const auto& names = problem_names();
    if (std::find(names.begin(), names.end(), c.problem) == names.end()) {
        throw ConfigError("unknown problem '" + c.problem + "'");
    }
    double preset_factor = 9.0;
    const bool kernel_given = !std::isnan(c.delta) || !std::isnan(c.weight);
    if (!c.preset.empty()) {
        if (c.preset.size() != 1) throw ConfigError("preset must be one of a, b, c, d");
        const NoisePreset& p = noise_preset(c.preset[0]);
        if (std::isnan(c.sigma2)) c.sigma2 = p.variance;
        if (std::isnan(c.delta)) c.delta = p.delta;
        preset_factor = p.weight_bound_factor;
    }
    if (std::isnan(c.bound_factor)) c.bound_factor = preset_factor;
    if (std::isnan(c.weight)) {
        if (c.problem == "train-batch" && !kernel_given && c.preset.empty()) {
            c.weight = 9.3e-5;
        } else {
            if (std::isnan(c.delta)) c.delta = 1e2;
            if (!(c.delta > 0.0)) throw ConfigError("delta must be positive");
            c.weight = 1.0 / (c.delta * c.delta);
        }
    }
    if (std::isnan(c.iota)) c.iota = c.problem == "learn-weight" ? 1e-10 : 1e-9;

    if (c.problem == "learn-lambda-spatial") {
        if (std::isnan(c.lambda0)) c.lambda0 = 200.0;
        if (std::isnan(c.upper)) c.upper = 255.0;
    } else if (c.problem == "train-batch") {
        if (std::isnan(c.lambda0)) c.lambda0 = 0.1;
        if (std::isnan(c.upper)) c.upper = 1e10;
    } else if (c.problem != "learn-weight") {
        if (std::isnan(c.lambda0)) c.lambda0 = 100.0;
        if (std::isnan(c.upper)) c.upper = 1e5;
    }

    auto require = [](bool ok, const char* msg) {
        if (!ok) throw ConfigError(msg);
    };
    require(c.rho >= 0, "rho must be >= 0");
    require(c.eps >= 0, "eps must be >= 0 (0 selects the default)");
    require(c.iota >= 0.0, "iota must be >= 0");
    require(c.weight >= 0.0, "kernel weight must be >= 0");
    require(std::isnan(c.sigma2) || c.sigma2 > 0.0, "sigma2 must be positive");
    require(std::isnan(c.lambda0) || c.lambda0 >= 0.0, "lambda0 must be >= 0");
    require(std::isnan(c.upper) || c.upper > 0.0, "upper must be positive");
    require(std::isnan(c.lambda0) || std::isnan(c.upper) || c.lambda0 <= c.upper,
            "lambda0 must not exceed upper");
    require(c.beta >= 0.0, "beta must be >= 0");
    require(c.kappa > 0.0, "kappa must be positive");
    require(c.bound_factor > 0.0, "bound-factor must be positive");
    require(c.weight0 >= 0.0, "weight0 must be >= 0");
    require(c.weight_lambda > 0.0, "weight-lambda must be positive");
    require(c.spatial_gradient == "dual" || c.spatial_gradient == "riesz",
            "spatial-gradient must be dual or riesz");
    require(c.tol > 0.0, "tol must be positive");
    require(c.rtol >= 0.0, "rtol must be >= 0");
    require(c.max_iter >= 0, "max-iter must be >= 0");
    require(c.memory >= 1, "memory must be >= 1");
    require(c.radius0 > 0.0, "radius0 must be positive");
    require(c.line_search >= 1, "line-search must be >= 1");
    require(c.krylov == "lgmres" || c.krylov == "cg", "krylov must be lgmres or cg");
    require(c.krylov_tol > 0.0, "krylov-tol must be positive");
    require(c.krylov_max_iter >= 1, "krylov-max-iter must be >= 1");
    require(c.lambda_min > 0.0 && c.lambda_max >= c.lambda_min && c.lambda_count >= 1,
            "lambda grid needs 0 < lambda-min <= lambda-max and lambda-count >= 1");
    require(c.weight_min > 0.0 && c.weight_max >= c.weight_min && c.weight_count >= 1,
            "weight grid needs 0 < weight-min <= weight-max and weight-count >= 1");
    require(c.threads >= 0, "threads must be >= 0");

    if (c.problem == "synth") return;
    require(!c.truth.empty() || !c.input.empty(), "need --input or --truth");
    if (c.input.empty()) {
        require(!std::isnan(c.sigma2), "no --input given: set --sigma2 or --preset to synthesize one");
    }
    if (c.problem != "denoise" && c.problem != "metrics") {
        require(!c.truth.empty(), "this problem needs --truth");
    }
    if (!c.input.empty() && !c.truth.empty()) {
        require(c.input.size() == c.truth.size(), "--input and --truth counts differ");
    }
    if (c.problem != "train-batch") {
        require(c.input.size() <= 1 && c.truth.size() <= 1, "only train-batch accepts several images");
    }
    for (const auto& lists : {c.input, c.truth}) {
        for (const auto& p : lists) {
            if (!std::filesystem::exists(p)) throw ConfigError("file not found: " + p);
        }
    }
}

}  // namespace nlbilevel
