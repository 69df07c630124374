#pragma once

// Experiment configuration and the named experiment suites behind the command-line driver.
// Every suite computes its artifacts in memory first; nothing touches the file system
// until the whole run has succeeded.

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bismut/bismut_estimator.hpp"
#include "bismut/bsde_solver.hpp"
#include "bismut/control_builder.hpp"
#include "bismut/path_simulator.hpp"
#include "bismut/spectral_core.hpp"

namespace bismut {

inline constexpr const char* kVersion = "1.0.0";

using json = nlohmann::json;

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names{"identity", "scaling",  "hsnorm", "gradient",     "girsanov",
                                                "bsde",     "kolmogorov", "zcheck", "ygrad-scaling"};
    return names;
}

namespace config_detail {

[[noreturn]] inline void config_fail(const std::string& where, const std::string& what) {
    fail(ErrorCode::ConfigError, where + ": " + what);
}

inline void check_object(const json& j, const std::string& where) {
    if (!j.is_object()) config_fail(where, "expected an object");
}

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    check_object(j, where);
    for (const auto& [key, value] : j.items()) {
        if (!allowed.count(key)) config_fail(where, "unknown key '" + key + "'");
    }
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        config_fail(where + "." + key, "wrong type");
    }
}

template <class T>
T get_required(const json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) config_fail(where, "missing key '" + key + "'");
    return get_or<T>(j, key, T{}, where);
}

template <class E>
E parse_enum(const std::string& text, std::initializer_list<E> values, const std::string& where) {
    for (E v : values) {
        if (to_string(v) == text) return v;
    }
    config_fail(where, "unknown value '" + text + "'");
}

inline ModelKind parse_kind(const std::string& s, const std::string& where) {
    return parse_enum(s, {ModelKind::Wave, ModelKind::Damped, ModelKind::DampedSmoothed}, where);
}
inline ControlVariant parse_variant(const std::string& s, const std::string& where) {
    return parse_enum(s,
                      {ControlVariant::WaveK, ControlVariant::WaveJ, ControlVariant::DampedJ, ControlVariant::SmoothedJ,
                       ControlVariant::SmoothedJ1},
                      where);
}
inline FunctionalForm parse_form(const std::string& s, const std::string& where) {
    return parse_enum(s,
                      {FunctionalForm::Linear, FunctionalForm::Quadratic, FunctionalForm::BoundedSmooth,
                       FunctionalForm::BoundedNonsmooth, FunctionalForm::PolyGrowth},
                      where);
}
inline DriftForm parse_drift_form(const std::string& s, const std::string& where) {
    return parse_enum(s, {DriftForm::Zero, DriftForm::Saturating, DriftForm::Clamp, DriftForm::Constant}, where);
}
inline GeneratorForm parse_generator_form(const std::string& s, const std::string& where) {
    return parse_enum(s, {GeneratorForm::Zero, GeneratorForm::AffineY, GeneratorForm::LipschitzNonlinear}, where);
}

}  // namespace config_detail

inline ModelParams model_from_json(const json& j) {
    using namespace config_detail;
    const std::string w = "model";
    check_keys(j, {"kind", "N", "delta", "rho", "alpha", "eps", "sigma", "T"}, w);
    ModelParams p;
    p.kind = parse_kind(get_or<std::string>(j, "kind", "Wave", w), w + ".kind");
    p.N = get_or<int>(j, "N", p.N, w);
    p.delta = get_or<double>(j, "delta", p.delta, w);
    p.rho = get_or<double>(j, "rho", p.rho, w);
    p.alpha = get_or<double>(j, "alpha", p.alpha, w);
    p.eps = get_or<double>(j, "eps", p.eps, w);
    p.T = get_or<double>(j, "T", p.T, w);
    if (j.contains("sigma")) {
        const json& s = j.at("sigma");
        check_keys(s, {"base", "amplitude", "frequency"}, w + ".sigma");
        p.sigma.base = get_or<double>(s, "base", 1.0, w + ".sigma");
        p.sigma.amplitude = get_or<double>(s, "amplitude", 0.0, w + ".sigma");
        p.sigma.frequency = get_or<double>(s, "frequency", 1.0, w + ".sigma");
    }
    try {
        p.validate();
    } catch (const Error& e) {
        config_fail(w, e.what());
    }
    return p;
}

inline json model_to_json(const ModelParams& p) {
    return json{{"kind", to_string(p.kind)},
                {"N", p.N},
                {"delta", p.delta},
                {"rho", p.rho},
                {"alpha", p.alpha},
                {"eps", p.eps},
                {"T", p.T},
                {"sigma", {{"base", p.sigma.base}, {"amplitude", p.sigma.amplitude}, {"frequency", p.sigma.frequency}}}};
}

inline SimConfig sim_from_json(const json& j, double horizon) {
    using namespace config_detail;
    const std::string w = "sim";
    check_keys(j, {"steps", "M", "seed", "s", "t_end"}, w);
    SimConfig c;
    c.steps = get_or<int>(j, "steps", c.steps, w);
    c.M = get_or<std::int64_t>(j, "M", c.M, w);
    c.seed = get_or<std::uint64_t>(j, "seed", c.seed, w);
    c.s = get_or<double>(j, "s", c.s, w);
    c.t_end = get_or<double>(j, "t_end", horizon, w);
    try {
        c.validate(horizon);
    } catch (const Error& e) {
        config_fail(w, e.what());
    }
    return c;
}

inline json sim_to_json(const SimConfig& c) {
    return json{{"steps", c.steps}, {"M", c.M}, {"seed", c.seed}, {"s", c.s}, {"t_end", c.t_end}};
}

/// Parsed configuration. Experiment-specific parameters stay as validated JSON so
/// serialization is lossless.
struct ExperimentConfig {
    std::string experiment;
    ModelParams model;
    SimConfig sim;
    json params = json::object();
    std::string output = "results";

    friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
        return a.experiment == b.experiment && a.model == b.model && a.sim == b.sim && a.params == b.params &&
               a.output == b.output;
    }
};

inline json config_to_json(const ExperimentConfig& c) {
    return json{{"experiment", c.experiment},
                {"model", model_to_json(c.model)},
                {"sim", sim_to_json(c.sim)},
                {"params", c.params},
                {"output", c.output}};
}

namespace config_detail {

inline const std::set<std::string>& allowed_params(const std::string& experiment) {
    static const std::map<std::string, std::set<std::string>> table{
        {"identity", {"variant", "a", "h", "times", "panels", "checks"}},
        {"scaling", {"cases", "t_min", "t_max", "points", "checks"}},
        {"hsnorm", {"times", "structural", "extra_models", "checks"}},
        {"gradient", {"variant", "a", "h", "x", "functional", "methods", "fd_epsilon", "checks"}},
        {"girsanov", {"x", "functional", "drift", "checks"}},
        {"bsde", {"x", "drift", "generator", "terminal", "gradient", "checks"}},
        {"kolmogorov", {"drift", "generator", "terminal", "probes", "tolerance", "checks"}},
        {"zcheck", {"x", "terminal", "checks"}},
        {"ygrad-scaling", {"x", "drift", "generator", "terminal", "variant", "a", "s_grid", "checks"}},
    };
    return table.at(experiment);
}

inline HVector hvector_from_json(const json& j, int n, const std::string& where) {
    check_keys(j, {"c1", "c2"}, where);
    HVector h(n);
    for (const char* key : {"c1", "c2"}) {
        if (!j.contains(key)) continue;
        const auto v = get_or<std::vector<double>>(j, key, {}, where);
        if (static_cast<int>(v.size()) > n) config_fail(where + "." + key, "more coefficients than modes");
        auto& dst = std::string(key) == "c1" ? h.c1 : h.c2;
        std::copy(v.begin(), v.end(), dst.begin());
    }
    return h;
}

inline std::vector<double> uvector_from_json(const json& j, const std::string& key, int n, const std::string& where) {
    const auto v = get_or<std::vector<double>>(j, key, {}, where);
    if (static_cast<int>(v.size()) > n) config_fail(where + "." + key, "more coefficients than modes");
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    std::copy(v.begin(), v.end(), out.begin());
    return out;
}

inline TestFunctional functional_from_json(const ModeBasis& basis, const json& j, const std::string& where) {
    check_keys(j, {"form", "c", "K"}, where);
    const FunctionalForm form = parse_form(get_required<std::string>(j, "form", where), where + ".form");
    const HVector c = j.contains("c") ? hvector_from_json(j.at("c"), basis.size(), where + ".c") : HVector(basis.size());
    try {
        return TestFunctional(basis, form, c, get_or<int>(j, "K", 1, where));
    } catch (const Error& e) {
        config_fail(where, e.what());
    }
}

inline DriftSpec drift_from_json(const ModeBasis& basis, const json& j, const std::string& where) {
    check_keys(j, {"form", "amplitude", "constant"}, where);
    DriftSpec d;
    d.form = parse_drift_form(get_or<std::string>(j, "form", "Zero", where), where + ".form");
    d.amplitude = get_or<double>(j, "amplitude", 0.0, where);
    if (d.form == DriftForm::Constant) d.constant = uvector_from_json(j, "constant", basis.size(), where);
    try {
        validate_drift(basis, d);
    } catch (const Error& e) {
        config_fail(where, e.what());
    }
    return d;
}

inline GeneratorSpec generator_from_json(const ModeBasis& basis, const json& j, const std::string& where) {
    check_keys(j, {"form", "lambda", "ly", "lz", "k0", "lipschitz", "growth", "m"}, where);
    GeneratorSpec g;
    g.form = parse_generator_form(get_or<std::string>(j, "form", "Zero", where), where + ".form");
    g.lambda = get_or<double>(j, "lambda", 0.0, where);
    g.ly = get_or<double>(j, "ly", 0.0, where);
    g.lz = get_or<double>(j, "lz", 0.0, where);
    g.k0 = get_or<double>(j, "k0", 0.0, where);
    g.lipschitz = get_or<double>(j, "lipschitz", -1.0, where);
    g.growth = get_or<double>(j, "growth", -1.0, where);
    g.m = get_or<double>(j, "m", 0.0, where);
    validate_generator(g, basis.size());
    return g;
}

inline TerminalSpec terminal_from_json(const ModeBasis& basis, const json& j, const std::string& where) {
    check_keys(j, {"functional", "scale", "offset", "growth"}, where);
    TerminalSpec t{functional_from_json(basis, get_required<json>(j, "functional", where), where + ".functional")};
    t.scale = get_or<double>(j, "scale", 1.0, where);
    t.offset = get_or<double>(j, "offset", 0.0, where);
    t.growth = get_or<double>(j, "growth", -1.0, where);
    return t;
}

// Direction h from either "a" (U-vector mapped by the variant) or "h" (an H-vector).
inline HVector direction_from_json(const ModeBasis& basis, const json& params, ControlVariant variant,
                                   const std::string& where) {
    if (params.contains("a") && params.contains("h")) config_fail(where, "give either 'a' or 'h', not both");
    try {
        if (params.contains("h")) return hvector_from_json(params.at("h"), basis.size(), where + ".h");
        if (params.contains("a")) return direction_from_u(basis, variant, uvector_from_json(params, "a", basis.size(), where));
    } catch (const Error& e) {
        if (e.code() == ErrorCode::ConfigError) throw;
        config_fail(where, e.what());
    }
    config_fail(where, "missing direction 'a' or 'h'");
}

struct Check {
    std::string metric;
    bool has_min = false, has_max = false;
    double min = 0.0, max = 0.0;
};

inline std::vector<Check> checks_from_json(const json& params) {
    std::vector<Check> out;
    if (!params.contains("checks")) return out;
    const json& c = params.at("checks");
    check_object(c, "params.checks");
    for (const auto& [metric, bounds] : c.items()) {
        const std::string w = "params.checks." + metric;
        check_keys(bounds, {"min", "max"}, w);
        Check k;
        k.metric = metric;
        if (bounds.contains("min")) {
            k.has_min = true;
            k.min = get_or<double>(bounds, "min", 0.0, w);
        }
        if (bounds.contains("max")) {
            k.has_max = true;
            k.max = get_or<double>(bounds, "max", 0.0, w);
        }
        out.push_back(k);
    }
    return out;
}

}  // namespace config_detail

/// Everything a run produces, held in memory until the run has succeeded.
struct ExperimentResult {
    std::vector<std::pair<std::string, std::string>> files;  // file name, contents
    std::vector<std::pair<std::string, double>> metrics;
    std::vector<std::string> failed_checks;

    double metric(const std::string& name) const {
        for (const auto& [k, v] : metrics) {
            if (k == name) return v;
        }
        fail(ErrorCode::InvalidParams, "no metric named " + name);
    }
    bool has_metric(const std::string& name) const {
        for (const auto& [k, v] : metrics) {
            if (k == name) return true;
        }
        return false;
    }
};

namespace experiment_detail {

using namespace config_detail;

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<double> list_or(const json& params, const std::string& key, std::vector<double> fallback) {
    return get_or<std::vector<double>>(params, key, std::move(fallback), "params");
}

// Random unit direction: K-unit for WaveK, otherwise J a (or J₁ a) with |a|_U = 1.
inline HVector random_direction(const ModeBasis& basis, ControlVariant variant, std::uint64_t seed) {
    std::mt19937_64 rng(mix64(seed ^ 0x9e3779b97f4a7c15ULL));
    std::normal_distribution<double> g;
    const int n = basis.size();
    if (variant == ControlVariant::WaveK) {
        HVector h(n);
        for (auto& v : h.c1) v = g(rng);
        for (auto& v : h.c2) v = g(rng);
        return (1.0 / norm_K(basis, h)) * h;
    }
    std::vector<double> a(static_cast<std::size_t>(n));
    double sq = 0.0;
    for (auto& v : a) {
        v = g(rng);
        sq += v * v;
    }
    for (auto& v : a) v /= std::sqrt(sq);
    return direction_from_u(basis, variant, a);
}

inline HVector state_or_zero(const ModeBasis& basis, const json& params, const std::string& key) {
    return params.contains(key) ? hvector_from_json(params.at(key), basis.size(), "params." + key) : HVector(basis.size());
}

inline ControlVariant variant_or_default(const ModeBasis& basis, const json& params) {
    if (params.contains("variant")) return parse_variant(get_or<std::string>(params, "variant", "", "params"), "params.variant");
    switch (basis.kind()) {
        case ModelKind::Wave: return ControlVariant::WaveK;
        case ModelKind::Damped: return ControlVariant::DampedJ;
        case ModelKind::DampedSmoothed: return ControlVariant::SmoothedJ;
    }
    return ControlVariant::WaveK;
}

inline void add(ExperimentResult& r, const std::string& name, double v) { r.metrics.emplace_back(name, v); }

inline ExperimentResult run_identity(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const ControlVariant variant = variant_or_default(basis, p);
    const HVector h = (p.contains("a") || p.contains("h")) ? direction_from_json(basis, p, variant, "params")
                                                           : random_direction(basis, variant, cfg.sim.seed);
    const std::vector<double> times = list_or(p, "times", {0.1, 1.0});
    std::vector<int> panels = get_or<std::vector<int>>(p, "panels", {64, 128, 256, 512, 1024, 2048}, "params");
    require(!panels.empty() && std::is_sorted(panels.begin(), panels.end()), ErrorCode::ConfigError,
            "params.panels: must be a non-empty increasing list");
    std::ostringstream csv;
    csv << "t,panels,residual\n";
    double worst = 0.0, min_ratio = std::numeric_limits<double>::infinity();
    for (double t : times) {
        const ControlRequest req{variant, h, cfg.sim.s, cfg.sim.s + t};
        const Control ctrl = build_control(basis, req);
        double prev = 0.0;
        for (std::size_t i = 0; i < panels.size(); ++i) {
            const double r = reproducing_residual(basis, ctrl, req, panels[i]);
            csv << fmt(t) << ',' << panels[i] << ',' << fmt(r) << '\n';
            if (i + 1 == panels.size()) {
                worst = std::max(worst, r);
                if (i > 0) min_ratio = std::min(min_ratio, r > 0.0 ? prev / r : std::numeric_limits<double>::infinity());
            }
            prev = r;
        }
    }
    ExperimentResult out;
    out.files.emplace_back("identity.csv", csv.str());
    add(out, "max_residual", worst);
    add(out, "min_ratio", min_ratio);
    return out;
}

inline ExperimentResult run_scaling(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const double t_min = get_or<double>(p, "t_min", 1e-3, "params"), t_max = get_or<double>(p, "t_max", 1.0, "params");
    const int points = get_or<int>(p, "points", 20, "params");
    require(t_min > 0.0 && t_max > t_min && points >= 2, ErrorCode::ConfigError, "params: need 0 < t_min < t_max, points >= 2");
    const std::vector<double> grid = logspace(t_min, t_max, points);
    json cases = p.contains("cases") ? p.at("cases") : json::array({json{{"variant", to_string(variant_or_default(basis, p))}}});
    if (!cases.is_array() || cases.empty()) fail(ErrorCode::ConfigError, "params.cases: expected a non-empty array");
    ExperimentResult out;
    std::ostringstream csv, fits;
    csv << "variant,t,norm\n";
    fits << "variant,slope,intercept\n";
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const std::string w = "params.cases[" + std::to_string(i) + "]";
        const json& c = cases[i];
        check_keys(c, {"variant", "model", "direction"}, w);
        const ModelParams model = c.contains("model") ? model_from_json(c.at("model")) : cfg.model;
        const ModeBasis b = c.contains("model") ? build_basis(model) : basis;
        const ControlVariant variant = parse_variant(get_required<std::string>(c, "variant", w), w + ".variant");
        std::optional<std::vector<double>> dir;
        if (c.contains("direction")) dir = get_or<std::vector<double>>(c, "direction", {}, w);
        const ScalingFit fit = control_norm_scaling(b, variant, dir, grid);
        for (std::size_t k = 0; k < fit.t.size(); ++k) csv << to_string(variant) << ',' << fmt(fit.t[k]) << ',' << fmt(fit.norm[k]) << '\n';
        fits << to_string(variant) << ',' << fmt(fit.slope) << ',' << fmt(fit.intercept) << '\n';
        add(out, "slope_" + to_string(variant), fit.slope);
    }
    out.files.emplace_back("scaling.csv", csv.str());
    out.files.emplace_back("scaling_fit.csv", fits.str());
    return out;
}

// Largest relative deviation from the structural identities, on random data.
inline std::vector<std::pair<std::string, double>> structural_errors(const ModeBasis& basis, std::uint64_t seed) {
    std::mt19937_64 rng(mix64(seed + 17));
    std::normal_distribution<double> g;
    const int n = basis.size();
    auto random_h = [&] {
        HVector h(n);
        for (auto& v : h.c1) v = g(rng);
        for (auto& v : h.c2) v = g(rng);
        return h;
    };
    double semigroup = 0.0, unitarity = 0.0, eigen = 0.0, linearity = 0.0, translation = 0.0;
    for (int trial = 0; trial < 4; ++trial) {
        const HVector h = random_h();
        const double a = 0.1 + 0.3 * trial, b = 0.7 - 0.1 * trial;
        const HVector lhs = apply_semigroup(basis, a + b, h), rhs = apply_semigroup(basis, a, apply_semigroup(basis, b, h));
        semigroup = std::max(semigroup, norm_H(basis, lhs - rhs) / norm_H(basis, lhs));
        if (basis.kind() == ModelKind::Wave) {
            unitarity = std::max(unitarity, std::abs(norm_H(basis, lhs) - norm_H(basis, h)) / norm_H(basis, h));
        }
    }
    for (int m = 0; m < static_cast<int>(basis.eig.size()); ++m) {
        const Mat2& A = basis.generator[m];
        const DampedEigen& e = basis.eig[m];
        for (int side = 0; side < 2; ++side) {
            const auto& phi = side == 0 ? e.phi_plus : e.phi_minus;
            const cplx lam = side == 0 ? e.lambda_plus : e.lambda_minus;
            const cplx r0 = A.a00 * phi[0] + A.a01 * phi[1] - lam * phi[0];
            const cplx r1 = A.a10 * phi[0] + A.a11 * phi[1] - lam * phi[1];
            eigen = std::max(eigen, std::sqrt(std::norm(r0) + std::norm(r1)) /
                                        (std::abs(lam) * std::sqrt(std::norm(phi[0]) + std::norm(phi[1]))));
        }
    }
    const ControlVariant variant = basis.kind() == ModelKind::Wave ? ControlVariant::WaveK
                                   : basis.kind() == ModelKind::Damped ? ControlVariant::DampedJ
                                                                       : ControlVariant::SmoothedJ;
    auto direction = [&] {
        if (variant == ControlVariant::WaveK) return random_h();
        std::vector<double> a(static_cast<std::size_t>(n));
        for (auto& v : a) v = g(rng);
        return direction_from_u(basis, variant, a);
    };
    const HVector h1 = direction(), h2 = direction();
    const double ca = 0.7, cb = -1.3;
    const Control u1 = build_control(basis, {variant, h1, 0.0, 0.8}), u2 = build_control(basis, {variant, h2, 0.0, 0.8});
    const Control u12 = build_control(basis, {variant, ca * h1 + cb * h2, 0.0, 0.8});
    const Control shifted = build_control(basis, {variant, h1, 0.15, 0.95});
    const bool constant_sigma = basis.params.sigma.amplitude == 0.0;
    for (int k = 1; k < 40; ++k) {
        const double tau = 0.8 * k / 40.0;
        const auto v1 = u1(tau), v2 = u2(tau), v12 = u12(tau), vs = shifted(tau + 0.15);
        double scale = 0.0, diff = 0.0, tdiff = 0.0, tscale = 0.0;
        for (int m = 0; m < n; ++m) {
            const double comb = ca * v1[m] + cb * v2[m];
            diff += (v12[m] - comb) * (v12[m] - comb);
            scale += comb * comb;
            tdiff += (vs[m] - v1[m]) * (vs[m] - v1[m]);
            tscale += v1[m] * v1[m];
        }
        if (scale > 0.0) linearity = std::max(linearity, std::sqrt(diff / scale));
        if (constant_sigma && tscale > 0.0) translation = std::max(translation, std::sqrt(tdiff / tscale));
    }
    return {{"semigroup_error", semigroup},
            {"unitarity_error", unitarity},
            {"eigen_residual", eigen},
            {"linearity_error", linearity},
            {"translation_error", translation}};
}

inline ExperimentResult run_hsnorm(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const std::vector<double> times = list_or(p, "times", logspace(1e-3, 1.0, 13));
    const bool wave = basis.kind() == ModelKind::Wave;
    double trace = 0.0;
    for (double mu : basis.mu) trace += 1.0 / mu;
    std::ostringstream csv;
    csv << "t,hs_norm_squared,integrated\n";
    double worst = 0.0;
    for (double t : times) {
        const double hs = hs_norm_squared(basis, t);
        csv << fmt(t) << ',' << fmt(hs) << ',' << fmt(hs_norm_integrated(basis, t)) << '\n';
        if (wave) worst = std::max(worst, std::abs(hs - trace) / trace);
    }
    ExperimentResult out;
    out.files.emplace_back("hsnorm.csv", csv.str());
    if (wave) add(out, "hs_trace_error", worst);
    if (get_or<bool>(p, "structural", false, "params")) {
        std::vector<ModeBasis> bases{basis};
        if (p.contains("extra_models")) {
            const json& extra = p.at("extra_models");
            if (!extra.is_array()) fail(ErrorCode::ConfigError, "params.extra_models: expected an array");
            for (const json& m : extra) bases.push_back(build_basis(model_from_json(m)));
        }
        std::ostringstream s;
        s << "model,identity,max_relative_error\n";
        for (const ModeBasis& b : bases) {
            for (const auto& [name, v] : structural_errors(b, cfg.sim.seed)) {
                s << to_string(b.kind()) << ',' << name << ',' << fmt(v) << '\n';
                add(out, name + "_" + to_string(b.kind()), v);
            }
        }
        out.files.emplace_back("structure.csv", s.str());
    }
    return out;
}

inline ExperimentResult run_gradient(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const ControlVariant variant = variant_or_default(basis, p);
    const HVector h = direction_from_json(basis, p, variant, "params");
    const HVector x = state_or_zero(basis, p, "x");
    const TestFunctional f = functional_from_json(basis, get_required<json>(p, "functional", "params"), "params.functional");
    const auto methods = get_or<std::vector<std::string>>(p, "methods", {"bismut"}, "params");
    const double eps = get_or<double>(p, "fd_epsilon", 1e-2, "params");
    const SimConfig& sim = cfg.sim;
    const Control ctrl = build_control(basis, {variant, h, sim.s, sim.t_end});
    std::ostringstream csv;
    write_report_header(csv);
    ExperimentResult out;
    std::map<std::string, GradientReport> reports;
    for (const std::string& m : methods) {
        if (m == "bismut") {
            reports[m] = estimate_gradient_bismut(basis, sim, x, f, ctrl, h);
        } else if (m == "pathwise") {
            reports[m] = estimate_gradient_pathwise(basis, sim, x, f, h);
        } else if (m == "fd") {
            reports[m] = estimate_gradient_fd(basis, sim, x, f, h, eps);
        } else if (m == "isometry") {
            // sample variance of δ(ũ) against ‖ũ‖²
            const PathBundle bundle = simulate_reference(basis, sim, x);
            const std::vector<double> delta = skorokhod_integral(ctrl, bundle);
            Moments mom;
            for (double d : delta) mom.add(d);
            const double target = ctrl.l2norm() * ctrl.l2norm();
            add(out, "isometry_variance", mom.variance());
            add(out, "isometry_target", target);
            add(out, "isometry_rel_error", std::abs(mom.variance() - target) / target);
            add(out, "isometry_mean_z", std::abs(mom.mean) / mom.stderr_mean());
            continue;
        } else {
            fail(ErrorCode::ConfigError, "params.methods: unknown method '" + m + "'");
        }
        write_report_row(csv, reports[m]);
        add(out, m + "_estimate", reports[m].estimate);
        add(out, m + "_stderr", reports[m].stderr);
    }
    if (f.form() == FunctionalForm::Linear && !reports.empty()) {
        const double exact = f.project(basis, apply_semigroup(basis, sim.t_end - sim.s, h));
        add(out, "exact", exact);
        for (const auto& [m, r] : reports) {
            add(out, m + "_z_exact", std::abs(r.estimate - exact) / r.stderr);
            add(out, m + "_rel_stderr", r.stderr / std::abs(exact));
        }
    }
    if (reports.count("bismut") && reports.count("fd")) {
        const auto& a = reports["bismut"];
        const auto& b = reports["fd"];
        add(out, "z_bismut_fd", std::abs(a.estimate - b.estimate) / std::hypot(a.stderr, b.stderr));
    }
    if (!reports.empty()) out.files.emplace_back("gradient.csv", csv.str());
    return out;
}

inline ExperimentResult run_girsanov(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const HVector x = state_or_zero(basis, p, "x");
    const TestFunctional f = functional_from_json(basis, get_required<json>(p, "functional", "params"), "params.functional");
    const DriftSpec drift = drift_from_json(basis, get_required<json>(p, "drift", "params"), "params.drift");
    const PathBundle ref = simulate_reference(basis, cfg.sim, x);
    const std::vector<double> w = girsanov_weight(basis, ref, drift);
    Moments weighted, weight;
    for (std::int64_t q = 0; q < ref.M; ++q) {
        weighted.add(f(ref.state(q, ref.steps)) * w[q]);
        weight.add(w[q]);
    }
    SimConfig other = cfg.sim;
    other.seed = mix64(cfg.sim.seed ^ 0xd1b54a32d192ed03ULL);
    const PathBundle drifted = simulate_drifted(basis, other, drift, x);
    Moments direct;
    for (std::int64_t q = 0; q < drifted.M; ++q) direct.add(f(drifted.state(q, drifted.steps)));
    std::ostringstream csv;
    csv << "quantity,estimate,stderr\n"
        << "weighted_reference," << fmt(weighted.mean) << ',' << fmt(weighted.stderr_mean()) << '\n'
        << "drifted," << fmt(direct.mean) << ',' << fmt(direct.stderr_mean()) << '\n'
        << "mean_weight," << fmt(weight.mean) << ',' << fmt(weight.stderr_mean()) << '\n';
    ExperimentResult out;
    out.files.emplace_back("girsanov.csv", csv.str());
    add(out, "weighted_estimate", weighted.mean);
    add(out, "drifted_estimate", direct.mean);
    add(out, "z_estimates", std::abs(weighted.mean - direct.mean) / std::hypot(weighted.stderr_mean(), direct.stderr_mean()));
    add(out, "mean_weight", weight.mean);
    add(out, "z_weight", std::abs(weight.mean - 1.0) / weight.stderr_mean());
    return out;
}

// E φ(X_T) for the driftless dynamics from the exact Gaussian law of ⟨c, X_T⟩.
inline double terminal_expectation(const ModeBasis& basis, const SimConfig& sim, const HVector& x, const TerminalSpec& term) {
    const PathSimulator ps(basis, SimConfig{sim.steps, 1, sim.seed, sim.s, sim.t_end});
    const detail::ProfileData prof = detail::profile_data(ps, term.f);
    return term.gaussian_mean(term.f.project(basis, apply_semigroup(basis, sim.t_end - sim.s, x)), prof.var[0]);
}

inline ExperimentResult run_bsde(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const HVector x = state_or_zero(basis, p, "x");
    const DriftSpec drift = p.contains("drift") ? drift_from_json(basis, p.at("drift"), "params.drift") : DriftSpec{};
    const GeneratorSpec gen =
        generator_from_json(basis, p.contains("generator") ? p.at("generator") : json::object(), "params.generator");
    const TerminalSpec term = terminal_from_json(basis, get_required<json>(p, "terminal", "params"), "params.terminal");
    const BsdeSolution sol = solve_lsmc(basis, cfg.sim, drift, x, gen, term);
    ExperimentResult out;
    std::ostringstream csv, summary;
    write_solution_csv(csv, sol);
    out.files.emplace_back("bsde.csv", csv.str());
    summary << "quantity,value\n" << "y0," << fmt(sol.y0) << '\n' << "y0_stderr," << fmt(sol.y0_stderr) << '\n';
    add(out, "y0", sol.y0);
    add(out, "y0_stderr", sol.y0_stderr);
    if (drift.is_zero() && gen.form != GeneratorForm::LipschitzNonlinear) {
        const double lambda = gen.form == GeneratorForm::AffineY ? gen.lambda : 0.0;
        const double closed = std::exp(lambda * (cfg.sim.t_end - cfg.sim.s)) * terminal_expectation(basis, cfg.sim, x, term);
        summary << "closed_form," << fmt(closed) << '\n';
        add(out, "closed_form", closed);
        add(out, "rel_error", std::abs(sol.y0 - closed) / std::abs(closed));
    }
    if (p.contains("gradient")) {
        const json& g = p.at("gradient");
        check_keys(g, {"variant", "a", "h", "fd_epsilon"}, "params.gradient");
        const ControlVariant variant = variant_or_default(basis, g);
        const HVector h = direction_from_json(basis, g, variant, "params.gradient");
        const double eps = get_or<double>(g, "fd_epsilon", 0.05, "params.gradient");
        const SemilinearReport r = semilinear_bismut(basis, sol, build_control_family(basis, variant, h, cfg.sim), h);
        const BsdeSolution up = solve_lsmc(basis, cfg.sim, drift, x + eps * h, gen, term);
        const BsdeSolution down = solve_lsmc(basis, cfg.sim, drift, x - eps * h, gen, term);
        Moments fd;
        for (std::int64_t q = 0; q < cfg.sim.M; ++q) fd.add((up.multistep0[q] - down.multistep0[q]) / (2 * eps));
        const double gap = std::abs(r.report.estimate - fd.mean);
        const double tol = std::max(3.0 * std::hypot(r.report.stderr, fd.stderr_mean()), 0.1 * std::abs(fd.mean));
        summary << "semilinear_bismut," << fmt(r.report.estimate) << '\n'
                << "semilinear_bismut_stderr," << fmt(r.report.stderr) << '\n'
                << "terminal_term," << fmt(r.terminal_term) << '\n'
                << "generator_term," << fmt(r.generator_term) << '\n'
                << "drift_term," << fmt(r.drift_term) << '\n'
                << "fd," << fmt(fd.mean) << '\n'
                << "fd_stderr," << fmt(fd.stderr_mean()) << '\n';
        add(out, "semilinear_estimate", r.report.estimate);
        add(out, "semilinear_stderr", r.report.stderr);
        add(out, "fd_estimate", fd.mean);
        add(out, "fd_stderr", fd.stderr_mean());
        add(out, "gradient_gap_over_tolerance", gap / tol);
    }
    out.files.emplace_back("bsde_summary.csv", summary.str());
    return out;
}

inline ExperimentResult run_kolmogorov(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const DriftSpec drift = p.contains("drift") ? drift_from_json(basis, p.at("drift"), "params.drift") : DriftSpec{};
    const GeneratorSpec gen =
        generator_from_json(basis, p.contains("generator") ? p.at("generator") : json::object(), "params.generator");
    const TerminalSpec term = terminal_from_json(basis, get_required<json>(p, "terminal", "params"), "params.terminal");
    const double tol = get_or<double>(p, "tolerance", 0.05, "params");
    std::vector<ProbePoint> probes;
    const json pr = p.contains("probes") ? p.at("probes") : json::array({json{{"s", cfg.sim.s}}});
    if (!pr.is_array()) fail(ErrorCode::ConfigError, "params.probes: expected an array");
    for (std::size_t i = 0; i < pr.size(); ++i) {
        const std::string w = "params.probes[" + std::to_string(i) + "]";
        check_keys(pr[i], {"s", "x"}, w);
        probes.push_back({get_or<double>(pr[i], "s", cfg.sim.s, w),
                          pr[i].contains("x") ? hvector_from_json(pr[i].at("x"), basis.size(), w + ".x") : HVector(basis.size())});
    }
    const auto recs = kolmogorov_residual(basis, cfg.sim, drift, gen, term, probes, tol);
    std::ostringstream txt;
    write_residual_records(txt, recs);
    ExperimentResult out;
    out.files.emplace_back("residuals.txt", txt.str());
    double worst = 0.0, worst_z = 0.0;
    for (const auto& r : recs) {
        worst = std::max(worst, std::abs(r.residual));
        worst_z = std::max(worst_z, std::abs(r.residual) / r.stderr);
    }
    add(out, "max_abs_residual", worst);
    add(out, "max_z", worst_z);
    return out;
}

inline ExperimentResult run_zcheck(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const HVector x = state_or_zero(basis, p, "x");
    const TerminalSpec term = terminal_from_json(basis, get_required<json>(p, "terminal", "params"), "params.terminal");
    require(term.f.form() == FunctionalForm::Linear, ErrorCode::ConfigError, "params.terminal: zcheck needs a linear functional");
    require(basis.kind() == ModelKind::Wave || basis.kind() == ModelKind::Damped, ErrorCode::ConfigError,
            "model: zcheck uses the J direction of the Wave or Damped model");
    const BsdeSolution sol = solve_lsmc(basis, cfg.sim, DriftSpec{}, x, GeneratorSpec{}, term);
    const ControlVariant variant = basis.kind() == ModelKind::Wave ? ControlVariant::WaveJ : ControlVariant::DampedJ;
    const int n = basis.size();
    std::vector<double> grads(static_cast<std::size_t>(n));
    std::vector<double> closed = linear_terminal_z(basis, term.f.direction(), cfg.sim.s, cfg.sim.t_end);
    for (auto& z : closed) z *= term.scale;
    std::ostringstream csv;
    csv << "mode,z_regression,z_closed_form,sigma_times_gradient\n";
    const double sig = basis.params.sigma(cfg.sim.s);
    double num = 0.0, den = 0.0;
    for (int m = 0; m < n; ++m) {
        std::vector<double> e(static_cast<std::size_t>(n), 0.0);
        e[m] = 1.0;
        const HVector h = apply_J(basis, e);
        grads[m] = semilinear_bismut(basis, sol, build_control_family(basis, variant, h, cfg.sim), h).report.estimate;
        csv << m + 1 << ',' << fmt(sol.z0[m]) << ',' << fmt(closed[m]) << ',' << fmt(sig * grads[m]) << '\n';
        num += (sol.z0[m] - closed[m]) * (sol.z0[m] - closed[m]);
        den += closed[m] * closed[m];
    }
    // σ-doubling on the closed-form side
    ModelParams doubled = basis.params;
    doubled.sigma.base *= 2.0;
    const ModeBasis b2 = build_basis(doubled);
    const std::vector<double> z2 = linear_terminal_z(b2, term.f.direction(), cfg.sim.s, cfg.sim.t_end);
    double doubling = 0.0;
    for (int m = 0; m < n; ++m) {
        const double ref = 2.0 * closed[m] / term.scale;
        if (ref != 0.0) doubling = std::max(doubling, std::abs(z2[m] - ref) / std::abs(ref));
    }
    ExperimentResult out;
    out.files.emplace_back("zcheck.csv", csv.str());
    add(out, "rel_error_closed_form", den > 0.0 ? std::sqrt(num / den) : std::sqrt(num));
    add(out, "rel_error_bismut", z_identification_check(sol, grads));
    add(out, "sigma_doubling_error", doubling);
    return out;
}

inline ExperimentResult run_ygrad(const ExperimentConfig& cfg, const ModeBasis& basis) {
    const json& p = cfg.params;
    const HVector x = state_or_zero(basis, p, "x");
    const DriftSpec drift = p.contains("drift") ? drift_from_json(basis, p.at("drift"), "params.drift") : DriftSpec{};
    const GeneratorSpec gen =
        generator_from_json(basis, p.contains("generator") ? p.at("generator") : json::object(), "params.generator");
    const TerminalSpec term = terminal_from_json(basis, get_required<json>(p, "terminal", "params"), "params.terminal");
    const ControlVariant variant = variant_or_default(basis, p);
    require(is_j_variant(variant), ErrorCode::ConfigError, "params.variant: needs a J variant");
    const std::vector<double> a = uvector_from_json(p, "a", basis.size(), "params");
    const std::vector<double> s_grid = list_or(p, "s_grid", {0.0, 0.7, 0.9, 0.97});
    const ScalingFit fit = y_gradient_scaling(basis, cfg.sim, drift, x, gen, term, variant, a, s_grid);
    std::ostringstream csv;
    write_scaling_csv(csv, fit);
    ExperimentResult out;
    out.files.emplace_back("ygrad.csv", csv.str());
    add(out, "slope", fit.slope);
    return out;
}

}  // namespace experiment_detail

/// Parses and validates a configuration; ConfigError on anything malformed.
inline ExperimentConfig config_from_json(const json& j) {
    using namespace config_detail;
    check_keys(j, {"experiment", "model", "sim", "params", "output"}, "config");
    ExperimentConfig c;
    c.experiment = get_required<std::string>(j, "experiment", "config");
    const auto& names = experiment_names();
    if (std::find(names.begin(), names.end(), c.experiment) == names.end()) {
        config_fail("config.experiment", "unknown experiment '" + c.experiment + "'");
    }
    c.model = model_from_json(j.contains("model") ? j.at("model") : json::object());
    c.sim = sim_from_json(j.contains("sim") ? j.at("sim") : json::object(), c.model.T);
    c.params = j.contains("params") ? j.at("params") : json::object();
    check_keys(c.params, allowed_params(c.experiment), "params");
    checks_from_json(c.params);
    c.output = get_or<std::string>(j, "output", c.output, "config");
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::ConfigError, "cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCode::ConfigError, std::string("malformed JSON: ") + e.what());
    }
    return config_from_json(j);
}

/// FNV-1a over the canonical serialization.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : config_to_json(c).dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Runs the named suite and evaluates the configured checks. Nothing is written.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    using namespace experiment_detail;
    const ModeBasis basis = build_basis(cfg.model);
    ExperimentResult out;
    const std::string& e = cfg.experiment;
    if (e == "identity") out = run_identity(cfg, basis);
    else if (e == "scaling") out = run_scaling(cfg, basis);
    else if (e == "hsnorm") out = run_hsnorm(cfg, basis);
    else if (e == "gradient") out = run_gradient(cfg, basis);
    else if (e == "girsanov") out = run_girsanov(cfg, basis);
    else if (e == "bsde") out = run_bsde(cfg, basis);
    else if (e == "kolmogorov") out = run_kolmogorov(cfg, basis);
    else if (e == "zcheck") out = run_zcheck(cfg, basis);
    else out = run_ygrad(cfg, basis);

    std::ostringstream metrics;
    metrics << "metric,value\n";
    for (const auto& [k, v] : out.metrics) metrics << k << ',' << fmt(v) << '\n';
    out.files.emplace_back("metrics.csv", metrics.str());
    for (const auto& c : config_detail::checks_from_json(cfg.params)) {
        if (!out.has_metric(c.metric)) fail(ErrorCode::ConfigError, "params.checks: no metric named '" + c.metric + "'");
        const double v = out.metric(c.metric);
        if ((c.has_min && !(v >= c.min)) || (c.has_max && !(v <= c.max))) out.failed_checks.push_back(c.metric);
    }
    return out;
}

/// Writes results and the manifest into `dir`.
inline void write_results(const std::filesystem::path& dir, const ExperimentConfig& cfg, const ExperimentResult& res,
                          double wall_seconds) {
    std::filesystem::create_directories(dir);
    for (const auto& [name, contents] : res.files) {
        std::ofstream f(dir / name, std::ios::binary);
        f << contents;
        if (!f) fail(ErrorCode::InvalidParams, "cannot write " + (dir / name).string());
    }
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
    json files = json::array();
    for (const auto& [name, contents] : res.files) files.push_back(name);
    const json manifest{{"config_hash", hash},
                        {"seed", cfg.sim.seed},
                        {"version", kVersion},
                        {"compiler", __VERSION__},
                        {"cxx_standard", static_cast<long>(__cplusplus)},
                        {"wall_time_seconds", wall_seconds},
                        {"experiment", cfg.experiment},
                        {"files", files},
                        {"failed_checks", res.failed_checks},
                        {"config", config_to_json(cfg)}};
    std::ofstream m(dir / "manifest.json", std::ios::binary);
    m << manifest.dump(2) << '\n';
}

}  // namespace bismut
