#pragma once

// Reproducing controls: deterministic ũ on (s,t) with
//   ∫_s^t e^{(t-τ)A} J σ(τ) ũ(τ) dτ = e^{(t-s)A} h.
//
// Per mode the 2-vector ψ(τ) = Φ(τ-s) e^{(τ-s)A} h is split along the pair
// (J, AJ); with (K1, K2) the rows of [J | AJ]^{-1}, the scalar
// σ(τ) ũ(τ) = K1·ψ(τ) + K2·ψ'(τ) reproduces h because Φ vanishes with its
// derivative at both ends.

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "bismut/numerics.hpp"
#include "bismut/spectral_core.hpp"

namespace bismut {

/// Φ_t(τ) = 30 τ²(t-τ)² / t⁵, a smooth bump with unit mass on [0, t].
inline double bump_profile(double t_end, double tau) {
    require(t_end > 0.0, ErrorCode::InvalidTime, "bump_profile needs t_end > 0");
    require(tau >= 0.0 && tau <= t_end, ErrorCode::InvalidTime, "bump_profile evaluated outside [0, t_end]");
    const double a = tau * (t_end - tau);
    return 30.0 * a * a / std::pow(t_end, 5);
}

inline double bump_derivative(double t_end, double tau) {
    require(t_end > 0.0, ErrorCode::InvalidTime, "bump_derivative needs t_end > 0");
    require(tau >= 0.0 && tau <= t_end, ErrorCode::InvalidTime, "bump_derivative evaluated outside [0, t_end]");
    return 60.0 * tau * (t_end - tau) * (t_end - 2.0 * tau) / std::pow(t_end, 5);
}

enum class ControlVariant { WaveK, WaveJ, DampedJ, SmoothedJ, SmoothedJ1 };

inline std::string to_string(ControlVariant v) {
    switch (v) {
        case ControlVariant::WaveK: return "WaveK";
        case ControlVariant::WaveJ: return "WaveJ";
        case ControlVariant::DampedJ: return "DampedJ";
        case ControlVariant::SmoothedJ: return "SmoothedJ";
        case ControlVariant::SmoothedJ1: return "SmoothedJ1";
    }
    return "?";
}

inline ModelKind variant_kind(ControlVariant v) {
    switch (v) {
        case ControlVariant::WaveK:
        case ControlVariant::WaveJ: return ModelKind::Wave;
        case ControlVariant::DampedJ: return ModelKind::Damped;
        case ControlVariant::SmoothedJ:
        case ControlVariant::SmoothedJ1: return ModelKind::DampedSmoothed;
    }
    return ModelKind::Wave;
}

inline bool is_j_variant(ControlVariant v) { return v != ControlVariant::WaveK; }

/// Direction h built from a U-vector a: Ja for the *J variants, J₁a for SmoothedJ1.
inline HVector direction_from_u(const ModeBasis& basis, ControlVariant v, std::span<const double> a) {
    require(variant_kind(v) == basis.kind(), ErrorCode::InvalidParams, "control variant does not match model kind");
    require(is_j_variant(v), ErrorCode::UnsupportedDirection, "WaveK directions are not of the form Ja");
    require(static_cast<int>(a.size()) == basis.size(), ErrorCode::InvalidParams, "direction length differs from N");
    return v == ControlVariant::SmoothedJ1 ? apply_J1(basis, a) : apply_J(basis, a);
}

struct ControlRequest {
    ControlVariant variant = ControlVariant::WaveK;
    HVector h;
    double s = 0.0;
    double t = 1.0;
};

namespace detail {

inline void validate_request(const ModeBasis& basis, const ControlRequest& req) {
    require(variant_kind(req.variant) == basis.kind(), ErrorCode::InvalidParams,
            "control variant " + to_string(req.variant) + " does not match model kind " + to_string(basis.kind()));
    require(req.h.size() == basis.size(), ErrorCode::InvalidParams, "direction length differs from N");
    require(req.s >= 0.0 && req.s < req.t && req.t <= basis.params.T, ErrorCode::InvalidTime,
            "control window must satisfy 0 <= s < t <= T");
    for (int n = 0; n < basis.size(); ++n) {
        require(std::isfinite(req.h.c1[n]) && std::isfinite(req.h.c2[n]), ErrorCode::UnsupportedDirection,
                "direction has non-finite coefficients");
        if (is_j_variant(req.variant)) {
            require(req.h.c1[n] == 0.0, ErrorCode::UnsupportedDirection,
                    to_string(req.variant) + " needs a direction with zero first component");
        }
    }
}

// σ(τ)ũ_n(τ) for one mode, r = τ - s in (0, length).
inline double control_mode_value(const ModeBasis& basis, int n, double h1, double h2, double length, double r) {
    if (h1 == 0.0 && h2 == 0.0) return 0.0;
    const double phi = bump_profile(length, r);
    const double dphi = bump_derivative(length, r);
    const Mat2 e = semigroup_block(basis, n, r);
    const auto [v1, v2] = e(h1, h2);
    const Mat2& a = basis.generator[static_cast<std::size_t>(n)];
    const auto [av1, av2] = a(v1, v2);
    const double psi1 = phi * v1, psi2 = phi * v2;
    const double dpsi1 = dphi * v1 + phi * av1;
    // rows of [J | AJ]^{-1} with J = (0,1): K1 = (-a11/a01, 1), K2 = (1/a01, 0)
    return (-a.a11 / a.a01) * psi1 + psi2 + dpsi1 / a.a01;
}

}  // namespace detail

/// Reproducing control with an exact closed-form evaluator and a cached sample grid.
class Control {
public:
    Control(const ModeBasis& basis, ControlRequest req, int sample_steps)
        : basis_(basis), req_(std::move(req)) {
        require(sample_steps >= 2, ErrorCode::InvalidParams, "sample_steps must be >= 2");
        const int n_modes = basis_.size();
        sample_times_.resize(static_cast<std::size_t>(sample_steps) + 1);
        samples_.assign(sample_times_.size() * static_cast<std::size_t>(n_modes), 0.0);
        for (int k = 0; k <= sample_steps; ++k) {
            const double tau = req_.s + (req_.t - req_.s) * k / sample_steps;
            sample_times_[k] = tau;
            evaluate_into(tau, std::span<double>(samples_).subspan(static_cast<std::size_t>(k) * n_modes, n_modes));
        }
        mode_norms_ = compute_mode_norms();
        double sum = 0.0;
        for (double c : mode_norms_) sum += c;
        l2norm_ = std::sqrt(sum);
    }

    double s() const { return req_.s; }
    double t() const { return req_.t; }
    const ControlRequest& request() const { return req_; }
    const ModeBasis& basis() const { return basis_; }
    int size() const { return basis_.size(); }

    /// ũ(τ) in U-orthonormal coordinates; zero outside (s, t).
    void evaluate_into(double tau, std::span<double> out) const {
        const int n_modes = basis_.size();
        if (!(tau > req_.s && tau < req_.t)) {
            std::fill(out.begin(), out.begin() + n_modes, 0.0);
            return;
        }
        const double length = req_.t - req_.s;
        const double inv_sigma = 1.0 / basis_.params.sigma(tau);
        for (int n = 0; n < n_modes; ++n) {
            out[n] = inv_sigma * detail::control_mode_value(basis_, n, req_.h.c1[n], req_.h.c2[n], length, tau - req_.s);
        }
    }

    std::vector<double> operator()(double tau) const {
        std::vector<double> out(static_cast<std::size_t>(basis_.size()));
        evaluate_into(tau, out);
        return out;
    }

    /// Single-mode value of ũ(τ).
    double mode_value(int n, double tau) const {
        if (!(tau > req_.s && tau < req_.t)) return 0.0;
        return detail::control_mode_value(basis_, n, req_.h.c1[n], req_.h.c2[n], req_.t - req_.s, tau - req_.s) /
               basis_.params.sigma(tau);
    }

    const std::vector<double>& sample_times() const { return sample_times_; }
    std::span<const double> sample(std::size_t k) const {
        return std::span<const double>(samples_).subspan(k * static_cast<std::size_t>(basis_.size()),
                                                         static_cast<std::size_t>(basis_.size()));
    }

    /// ‖ũ‖_{L²(s,t;U)}.
    double l2norm() const { return l2norm_; }
    /// Per-mode contributions ∫ ũ_n² dτ.
    const std::vector<double>& mode_norms_squared() const { return mode_norms_; }

private:
    std::vector<double> compute_mode_norms() const {
        std::vector<double> out(static_cast<std::size_t>(basis_.size()), 0.0);
        const double length = req_.t - req_.s;
        for (int n = 0; n < basis_.size(); ++n) {
            if (req_.h.c1[n] == 0.0 && req_.h.c2[n] == 0.0) continue;
            out[n] = mode_norm_squared(n, length);
        }
        return out;
    }

    double mode_norm_squared(int n, double length) const {
        double rate = 1.0 / length;
        if (basis_.kind() == ModelKind::Wave) {
            rate = std::max(rate, std::sqrt(basis_.mu[n]));
        } else {
            rate = std::max({rate, std::abs(basis_.eig[n].lambda_plus), std::abs(basis_.eig[n].lambda_minus)});
        }
        rate = std::max(rate, 2.0 * std::numbers::pi * std::abs(basis_.params.sigma.frequency) *
                                  (basis_.params.sigma.amplitude != 0.0 ? 1.0 : 0.0));
        const int panels = resolving_panels(rate, length, 1024);
        return simpson(
            [&](double tau) {
                const double v = mode_value(n, tau);
                return v * v;
            },
            req_.s, req_.t, panels);
    }

    ModeBasis basis_;
    ControlRequest req_;
    std::vector<double> sample_times_;
    std::vector<double> samples_;
    std::vector<double> mode_norms_;
    double l2norm_ = 0.0;
};

inline Control build_control(const ModeBasis& basis, const ControlRequest& req, int sample_steps = 512) {
    detail::validate_request(basis, req);
    return Control(basis, req, sample_steps);
}

/// ‖ũ‖_{L²(s,t;U)}.
inline double control_norm(const Control& ctrl) { return ctrl.l2norm(); }

/// |∫_s^t e^{(t-τ)A} J σ(τ) ũ(τ) dτ - e^{(t-s)A} h|_H / |h|_H by composite Simpson.
inline double reproducing_residual(const ModeBasis& basis, const Control& ctrl, const ControlRequest& req,
                                   int panels) {
    require(panels >= 8 && panels % 2 == 0, ErrorCode::InvalidParams, "panels must be even and >= 8");
    const double h_norm = norm_H(basis, req.h);
    if (h_norm == 0.0) return 0.0;
    const int n_modes = basis.size();
    const double step = (req.t - req.s) / panels;
    HVector integral(n_modes);
    for (int i = 1; i < panels; ++i) {  // ũ vanishes at both ends
        const double tau = req.s + i * step;
        const double w = simpson_weight(i, panels, step) * basis.params.sigma(tau);
        for (int n = 0; n < n_modes; ++n) {
            const double g = ctrl.mode_value(n, tau);
            if (g == 0.0) continue;
            const Mat2 e = semigroup_block(basis, n, req.t - tau);
            integral.c1[n] += w * e.a01 * g;
            integral.c2[n] += w * e.a11 * g;
        }
    }
    const HVector target = apply_semigroup(basis, req.t - req.s, req.h);
    return norm_H(basis, integral - target) / h_norm;
}

struct ScalingFit {
    double slope = 0.0;
    double intercept = 0.0;  // log-constant
    std::vector<double> t;
    std::vector<double> norm;
};

namespace detail {

// Slowest decay rate of mode n.
inline double slowest_decay(const ModeBasis& basis, int n) {
    if (basis.kind() == ModelKind::Wave) return 0.0;
    return std::min(-basis.eig[n].lambda_plus.real(), -basis.eig[n].lambda_minus.real());
}

inline ModeBasis single_mode(const ModeBasis& basis, int n) {
    ModeBasis one;
    one.params = basis.params;
    one.params.N = 1;
    one.mu = {basis.mu[n]};
    one.u_weight = {basis.u_weight[n]};
    one.v_weight = {basis.v_weight[n]};
    one.generator = {basis.generator[n]};
    if (!basis.eig.empty()) one.eig = {basis.eig[n]};
    return one;
}

// Largest ‖ũ‖² over unit directions supported on mode n: unit U-vector for the *J
// variants, unit K-norm for WaveK (top eigenvalue of the 2x2 cost form).
inline double worst_mode_cost(const ModeBasis& basis, ControlVariant variant, int n, double t) {
    const ModeBasis one = single_mode(basis, n);
    auto cost = [&](double h1, double h2) {
        return build_control(one, {variant, HVector({h1}, {h2}), 0.0, t}, 2).mode_norms_squared()[0];
    };
    if (is_j_variant(variant)) {
        return cost(0.0, variant == ControlVariant::SmoothedJ1 ? std::pow(basis.mu[n], basis.params.eps) : 1.0);
    }
    const double e1 = 1.0 / std::sqrt(basis.mu[n]);
    const double a = cost(e1, 0.0), d = cost(0.0, 1.0);
    const double b = 0.5 * (cost(e1, 1.0) - a - d);
    return 0.5 * (a + d) + std::sqrt(0.25 * (a - d) * (a - d) + b * b);
}

// Modes visited by the worst-case scan: all of the first 128, then a geometric
// subset (ratio 1.02) since single-mode costs vary smoothly in n.
inline std::vector<int> scan_modes(int n_modes) {
    std::vector<int> out;
    for (int n = 0; n < std::min(n_modes, 128); ++n) out.push_back(n);
    double next = 128.0;
    while (static_cast<int>(next) < n_modes) {
        const int n = static_cast<int>(next);
        if (n > out.back()) out.push_back(n);
        next *= 1.02;
    }
    if (out.back() != n_modes - 1) out.push_back(n_modes - 1);
    return out;
}

}  // namespace detail

/// Worst-case ‖ũ_t‖ over unit directions: by mode decoupling, the square root of the
/// largest single-mode cost. Damped modes that have decayed by e^{-50} over (0, t)
/// are past the cost maximum in n and are skipped.
inline double worst_case_control_norm(const ModeBasis& basis, ControlVariant variant, double t) {
    require(variant_kind(variant) == basis.kind(), ErrorCode::InvalidParams, "control variant does not match model kind");
    double worst = 0.0;
    for (int n : detail::scan_modes(basis.size())) {
        if (detail::slowest_decay(basis, n) * t > 50.0) continue;
        worst = std::max(worst, detail::worst_mode_cost(basis, variant, n, t));
    }
    return std::sqrt(worst);
}

/// ‖ũ_t‖_{L²(0,t;U)} on t_grid and the least-squares slope of its log against log t.
/// With a direction, h is that direction (J or J₁ applied for the *J variants, the 2N
/// coefficients [c1 | c2] for WaveK). Without one, the norm is the worst case over
/// unit directions.
inline ScalingFit control_norm_scaling(const ModeBasis& basis, ControlVariant variant,
                                       const std::optional<std::vector<double>>& direction,
                                       std::span<const double> t_grid) {
    require(variant_kind(variant) == basis.kind(), ErrorCode::InvalidParams, "control variant does not match model kind");
    ScalingFit fit;
    const int n_modes = basis.size();
    for (double t : t_grid) {
        double norm = 0.0;
        if (direction) {
            HVector h;
            if (is_j_variant(variant)) {
                h = direction_from_u(basis, variant, *direction);
            } else {
                require(static_cast<int>(direction->size()) == 2 * n_modes, ErrorCode::InvalidParams,
                        "WaveK direction needs 2N coefficients");
                h = HVector(std::vector<double>(direction->begin(), direction->begin() + n_modes),
                            std::vector<double>(direction->begin() + n_modes, direction->end()));
            }
            norm = build_control(basis, {variant, h, 0.0, t}, 2).l2norm();
        } else {
            norm = worst_case_control_norm(basis, variant, t);
        }
        fit.t.push_back(t);
        fit.norm.push_back(norm);
    }
    const LineFit line = fit_loglog(fit.t, fit.norm);
    fit.slope = line.slope;
    fit.intercept = line.intercept;
    return fit;
}

/// CSV rows (tau, mode, coefficient) over the cached sample grid; modes are 1-based.
inline void write_control_csv(std::ostream& os, const Control& ctrl) {
    os << "tau,mode,coefficient\n";
    char buf[96];
    for (std::size_t k = 0; k < ctrl.sample_times().size(); ++k) {
        const auto values = ctrl.sample(k);
        for (int n = 0; n < ctrl.size(); ++n) {
            std::snprintf(buf, sizeof buf, "%.17g,%d,%.17g\n", ctrl.sample_times()[k], n + 1, values[n]);
            os << buf;
        }
    }
}

inline void write_scaling_csv(std::ostream& os, const ScalingFit& fit) {
    os << "t,norm\n";
    char buf[96];
    for (std::size_t i = 0; i < fit.t.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", fit.t[i], fit.norm[i]);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "# slope,%.17g\n# intercept,%.17g\n", fit.slope, fit.intercept);
    os << buf;
}

}  // namespace bismut
