#pragma once

// Monte Carlo estimators of ⟨∇_x P_{s,t} f(x), h⟩ for the driftless equation:
// the Malliavin-weight (Bismut) estimator, the pathwise derivative and a
// common-noise central difference.

#include <cmath>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "bismut/control_builder.hpp"
#include "bismut/numerics.hpp"
#include "bismut/path_simulator.hpp"

namespace bismut {

enum class FunctionalForm { Linear, Quadratic, BoundedSmooth, BoundedNonsmooth, PolyGrowth };

inline std::string to_string(FunctionalForm f) {
    switch (f) {
        case FunctionalForm::Linear: return "Linear";
        case FunctionalForm::Quadratic: return "Quadratic";
        case FunctionalForm::BoundedSmooth: return "BoundedSmooth";
        case FunctionalForm::BoundedNonsmooth: return "BoundedNonsmooth";
        case FunctionalForm::PolyGrowth: return "PolyGrowth";
    }
    return "?";
}

/// Scalar profile of a projection y: the functional is f(x) = g(⟨c, x⟩_H).
inline double profile_value(FunctionalForm form, int K, double y) {
    switch (form) {
        case FunctionalForm::Linear: return y;
        case FunctionalForm::Quadratic: return y * y;
        case FunctionalForm::BoundedSmooth: return std::cos(y);
        case FunctionalForm::BoundedNonsmooth: return std::clamp(y, -1.0, 1.0);
        case FunctionalForm::PolyGrowth: return std::pow(y, K);
    }
    return 0.0;
}

inline double profile_derivative(FunctionalForm form, int K, double y) {
    switch (form) {
        case FunctionalForm::Linear: return 1.0;
        case FunctionalForm::Quadratic: return 2.0 * y;
        case FunctionalForm::BoundedSmooth: return -std::sin(y);
        case FunctionalForm::BoundedNonsmooth:
            fail(ErrorCode::UnsupportedFunctional, "clamped functional is not differentiable");
        case FunctionalForm::PolyGrowth: return K == 0 ? 0.0 : K * std::pow(y, K - 1);
    }
    return 0.0;
}

/// E[g(Y)] for Y ~ N(mean, var), in closed form for every profile.
inline double profile_gaussian_mean(FunctionalForm form, int K, double mean, double var) {
    var = std::max(var, 0.0);
    switch (form) {
        case FunctionalForm::Linear: return mean;
        case FunctionalForm::Quadratic: return mean * mean + var;
        case FunctionalForm::BoundedSmooth: return std::cos(mean) * std::exp(-0.5 * var);
        case FunctionalForm::BoundedNonsmooth: {
            if (var == 0.0) return std::clamp(mean, -1.0, 1.0);
            const double sd = std::sqrt(var);
            const double a = (-1.0 - mean) / sd, b = (1.0 - mean) / sd;
            // E[Y; |Y| < 1] + P(Y > 1) - P(Y < -1)
            return mean * (normal_cdf(b) - normal_cdf(a)) - sd * (normal_pdf(b) - normal_pdf(a)) +
                   (1.0 - normal_cdf(b)) - normal_cdf(a);
        }
        case FunctionalForm::PolyGrowth: {
            // E[Y^k] = mean E[Y^{k-1}] + (k-1) var E[Y^{k-2}]
            double prev = 1.0, cur = mean;
            if (K == 0) return 1.0;
            for (int k = 2; k <= K; ++k) {
                const double next = mean * cur + (k - 1) * var * prev;
                prev = cur;
                cur = next;
            }
            return cur;
        }
    }
    return 0.0;
}

/// f(x) = g(⟨c, x⟩_H) with g one of the built-in profiles.
class TestFunctional {
public:
    TestFunctional(const ModeBasis& basis, FunctionalForm form, HVector c, int K = 1)
        : form_(form), K_(form == FunctionalForm::Linear ? 1 : form == FunctionalForm::Quadratic ? 2 : K),
          c_(std::move(c)) {
        require(c_.size() == basis.size(), ErrorCode::UnsupportedFunctional, "functional direction length differs from N");
        if (form == FunctionalForm::PolyGrowth) {
            require(K >= 0 && K <= 12, ErrorCode::UnsupportedFunctional, "PolyGrowth exponent must lie in [0, 12]");
        }
        if (form == FunctionalForm::BoundedSmooth || form == FunctionalForm::BoundedNonsmooth) K_ = 0;
        weighted_.resize(2 * static_cast<std::size_t>(basis.size()));
        for (int n = 0; n < basis.size(); ++n) {
            weighted_[n] = basis.u_weight[n] * basis.u_weight[n] * c_.c1[n];
            weighted_[basis.size() + n] = basis.v_weight[n] * basis.v_weight[n] * c_.c2[n];
        }
        c_norm_ = norm_H(basis, c_);
    }

    FunctionalForm form() const { return form_; }
    int growth() const { return K_; }
    const HVector& direction() const { return c_; }
    bool bounded() const {
        return form_ == FunctionalForm::BoundedSmooth || form_ == FunctionalForm::BoundedNonsmooth ||
               (form_ == FunctionalForm::PolyGrowth && K_ == 0);
    }
    bool differentiable() const { return form_ != FunctionalForm::BoundedNonsmooth; }
    /// ‖f‖_∞ for bounded forms.
    double sup_norm() const {
        require(bounded(), ErrorCode::UnsupportedFunctional, "sup norm of an unbounded functional");
        return 1.0;
    }
    /// sup |f(x)| / (1 + |x|²)^{K/2}.
    double ck_norm() const { return bounded() ? 1.0 : std::pow(c_norm_, K_); }

    /// ⟨c, x⟩_H for x given as [c1 | c2].
    double project(std::span<const double> x) const {
        double s = 0.0;
        for (std::size_t i = 0; i < weighted_.size(); ++i) s += weighted_[i] * x[i];
        return s;
    }
    double project(const ModeBasis& basis, const HVector& x) const { return inner_H(basis, c_, x); }
    double operator()(std::span<const double> x) const { return profile_value(form_, K_, project(x)); }
    /// ∇f(x)·k.
    double derivative(std::span<const double> x, double ck) const {
        return profile_derivative(form_, K_, project(x)) * ck;
    }
    double gaussian_mean(double mean, double var) const { return profile_gaussian_mean(form_, K_, mean, var); }

private:
    FunctionalForm form_;
    int K_;
    HVector c_;
    std::vector<double> weighted_;
    double c_norm_ = 0.0;
};

struct GradientReport {
    double estimate = 0.0;
    double stderr = 0.0;
    std::int64_t M = 0;
    std::string method;
    double bound = 0.0;
    double s = 0.0;
    double t = 0.0;
};

inline void write_report_header(std::ostream& os) { os << "method,t,s,M,estimate,stderr,bound\n"; }

inline void write_report_row(std::ostream& os, const GradientReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%lld,%.17g,%.17g,%.17g\n", r.method.c_str(), r.t, r.s,
                  static_cast<long long>(r.M), r.estimate, r.stderr, r.bound);
    os << buf;
}

namespace detail {

inline bool on_grid(double time, double s, double t_end, int steps, int& index) {
    const double pos = (time - s) / (t_end - s) * steps;
    index = static_cast<int>(std::lround(pos));
    return std::abs(pos - index) < 1e-9 && index >= 0 && index <= steps;
}

}  // namespace detail

/// ũ at the step midpoints of a grid; rows are steps, zero outside the control window.
inline std::vector<double> control_midpoints(const Control& ctrl, double s, double t_end, int steps) {
    int first = 0, last = 0;
    require(detail::on_grid(ctrl.s(), s, t_end, steps, first) && detail::on_grid(ctrl.t(), s, t_end, steps, last),
            ErrorCode::WindowMismatch, "control window does not lie on the path grid");
    const int n_modes = ctrl.size();
    std::vector<double> out(static_cast<std::size_t>(steps) * n_modes, 0.0);
    const double dt = (t_end - s) / steps;
    for (int k = first; k < last; ++k) {
        ctrl.evaluate_into(s + (k + 0.5) * dt, std::span<double>(out).subspan(static_cast<std::size_t>(k) * n_modes, n_modes));
    }
    return out;
}

/// Σ_k ⟨ũ(t_k + Δt/2), ΔW_k⟩ for increments laid out [step][mode].
inline double wiener_integral(std::span<const double> midpoints, std::span<const double> dw) {
    double s = 0.0;
    for (std::size_t i = 0; i < dw.size(); ++i) s += midpoints[i] * dw[i];
    return s;
}

/// δ(ũ) per path: the Wiener integral of the deterministic control against the bundle's noise.
inline std::vector<double> skorokhod_integral(const Control& ctrl, const PathBundle& bundle) {
    require(ctrl.size() == bundle.N, ErrorCode::WindowMismatch, "control and bundle mode counts differ");
    require(ctrl.s() >= bundle.s - 1e-12 && ctrl.t() <= bundle.t_end + 1e-12, ErrorCode::WindowMismatch,
            "bundle window does not cover the control window");
    const std::vector<double> mid = control_midpoints(ctrl, bundle.s, bundle.t_end, bundle.steps);
    std::vector<double> out(static_cast<std::size_t>(bundle.M));
    for_each_chunk(bundle.M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
        for (std::int64_t p = begin; p < end; ++p) out[static_cast<std::size_t>(p)] = wiener_integral(mid, bundle.increments(p));
    });
    return out;
}

namespace detail {

struct BismutAcc {
    Moments value;
    Moments growth;  // (1 + |X_t|²)^K, for the polynomial-growth bound
    void merge(const BismutAcc& o) {
        value.merge(o.value);
        growth.merge(o.growth);
    }
};

}  // namespace detail

/// Mean of [f(X_t) - f(e^{(t-s)A}x)]·δ(ũ_t) over reference paths. The subtracted
/// term has zero mean against δ(ũ_t) and removes the dominant variance at small t.
inline GradientReport estimate_gradient_bismut(const ModeBasis& basis, const SimConfig& cfg, const HVector& x,
                                               const TestFunctional& f, const Control& ctrl, const HVector& h) {
    require(std::abs(ctrl.s() - cfg.s) < 1e-12 && std::abs(ctrl.t() - cfg.t_end) < 1e-12, ErrorCode::WindowMismatch,
            "control window differs from the simulation window");
    require(norm_H(basis, ctrl.request().h - h) <= 1e-12 * (1.0 + norm_H(basis, h)), ErrorCode::InvalidParams,
            "control was built for a different direction");
    const PathSimulator sim(basis, cfg);
    const std::vector<double> mid = control_midpoints(ctrl, cfg.s, cfg.t_end, cfg.steps);
    const HVector mean_path = apply_semigroup(basis, cfg.t_end - cfg.s, x);
    std::vector<double> centre(mean_path.c1);
    centre.insert(centre.end(), mean_path.c2.begin(), mean_path.c2.end());
    const double f_centre = f(centre);
    const int n_modes = basis.size();
    const auto acc = stream_paths<detail::BismutAcc>(
        sim, x, nullptr, [&](detail::BismutAcc& a, std::int64_t, std::span<const double> dw, std::span<const double> xs) {
            const auto xt = xs.subspan(static_cast<std::size_t>(cfg.steps) * 2 * n_modes);
            a.value.add((f(xt) - f_centre) * wiener_integral(mid, dw));
            if (!f.bounded()) {
                double sq = 0.0;
                for (int n = 0; n < n_modes; ++n) {
                    sq += basis.u_weight[n] * basis.u_weight[n] * xt[n] * xt[n] +
                          basis.v_weight[n] * basis.v_weight[n] * xt[n_modes + n] * xt[n_modes + n];
                }
                a.growth.add(std::pow(1.0 + sq, f.growth()));
            }
        });
    GradientReport r;
    r.estimate = acc.value.mean;
    r.stderr = acc.value.stderr_mean();
    r.M = cfg.M;
    r.method = "bismut";
    r.s = cfg.s;
    r.t = cfg.t_end;
    // |E[f δ]| <= ‖f‖_∞ ‖ũ‖, or ‖f‖_{C_K} (E(1+|X_t|²)^K)^{1/2} ‖ũ‖ by Cauchy-Schwarz
    r.bound = f.bounded() ? f.sup_norm() * ctrl.l2norm() : f.ck_norm() * std::sqrt(acc.growth.mean) * ctrl.l2norm();
    return r;
}

/// Mean of ∇f(X_t)·e^{(t-s)A}h over reference paths.
inline GradientReport estimate_gradient_pathwise(const ModeBasis& basis, const SimConfig& cfg, const HVector& x,
                                                 const TestFunctional& f, const HVector& h) {
    require(f.differentiable(), ErrorCode::UnsupportedFunctional, "pathwise estimator needs a differentiable functional");
    const PathSimulator sim(basis, cfg);
    const double ch = f.project(basis, apply_semigroup(basis, cfg.t_end - cfg.s, h));
    const int n_modes = basis.size();
    const Moments acc = stream_paths<Moments>(sim, x, nullptr,
                                              [&](Moments& a, std::int64_t, std::span<const double>, std::span<const double> xs) {
                                                  a.add(f.derivative(xs.subspan(static_cast<std::size_t>(cfg.steps) * 2 * n_modes), ch));
                                              });
    return {acc.mean, acc.stderr_mean(), cfg.M, "pathwise", 0.0, cfg.s, cfg.t_end};
}

/// (P̂f(x+εh) - P̂f(x-εh)) / 2ε with both estimates driven by the same noise per path.
inline GradientReport estimate_gradient_fd(const ModeBasis& basis, const SimConfig& cfg, const HVector& x,
                                           const TestFunctional& f, const HVector& h, double epsilon) {
    require(epsilon > 0.0, ErrorCode::InvalidParams, "epsilon must be > 0");
    const PathSimulator sim(basis, cfg);
    const HVector up = x + epsilon * h, down = x - epsilon * h;
    const int n_modes = basis.size();
    const std::int64_t chunks = (cfg.M + kPathChunk - 1) / kPathChunk;
    std::vector<Moments> slots(static_cast<std::size_t>(chunks));
    for_each_chunk(cfg.M, [&](std::int64_t c, std::int64_t begin, std::int64_t end) {
        std::vector<double> dw(static_cast<std::size_t>(cfg.steps) * n_modes);
        std::vector<double> xa(static_cast<std::size_t>(cfg.steps + 1) * 2 * n_modes), xb(xa.size());
        const std::size_t last = static_cast<std::size_t>(cfg.steps) * 2 * n_modes;
        for (std::int64_t p = begin; p < end; ++p) {
            sim.run_path(p, up, nullptr, dw, xa);
            sim.run_path(p, down, nullptr, dw, xb);
            slots[static_cast<std::size_t>(c)].add((f(std::span<const double>(xa).subspan(last)) -
                                                    f(std::span<const double>(xb).subspan(last))) /
                                                   (2.0 * epsilon));
        }
    });
    Moments acc;
    for (const auto& s : slots) acc.merge(s);
    return {acc.mean, acc.stderr_mean(), cfg.M, "fd", 0.0, cfg.s, cfg.t_end};
}

}  // namespace bismut
