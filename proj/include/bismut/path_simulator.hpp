#pragma once

// Exponential integrator for the truncated forward equation
//   dX = (A X + J B̄(t, X)) dt + σ(t) J dW,
// with the per-step stochastic convolution drawn jointly with the Brownian
// increment from their exact per-mode Gaussian law.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "bismut/numerics.hpp"
#include "bismut/parallel.hpp"
#include "bismut/spectral_core.hpp"

namespace bismut {

struct SimConfig {
    int steps = 64;
    std::int64_t M = 10000;
    std::uint64_t seed = 1;
    double s = 0.0;
    double t_end = 1.0;

    double dt() const { return (t_end - s) / steps; }
    double time(int k) const { return s + (t_end - s) * k / steps; }

    void validate(double horizon) const {
        require(steps >= 1, ErrorCode::InvalidParams, "steps must be >= 1");
        require(M >= 1, ErrorCode::InvalidParams, "M must be >= 1");
        require(s >= 0.0 && s < t_end && t_end <= horizon * (1 + 1e-12), ErrorCode::InvalidTime,
                "simulation window must satisfy 0 <= s < t_end <= T");
    }

    friend bool operator==(const SimConfig&, const SimConfig&) = default;
};

enum class DriftForm { Zero, Saturating, Clamp, Constant };

inline std::string to_string(DriftForm f) {
    switch (f) {
        case DriftForm::Zero: return "Zero";
        case DriftForm::Saturating: return "Saturating";
        case DriftForm::Clamp: return "Clamp";
        case DriftForm::Constant: return "Constant";
    }
    return "?";
}

/// Bounded Lipschitz drift B̄ : H -> U acting on the first-component mode coefficients.
///   Saturating  B̄_n(x) = c·tanh(x1_n)
///   Clamp       B̄_n(x) = c·clamp(x1_n, -1, 1)    (not differentiable)
///   Constant    B̄_n(x) = u0_n
struct DriftSpec {
    DriftForm form = DriftForm::Zero;
    double amplitude = 0.0;
    std::vector<double> constant;

    bool is_zero() const {
        if (form == DriftForm::Zero) return true;
        if (form == DriftForm::Constant) {
            return std::all_of(constant.begin(), constant.end(), [](double v) { return v == 0.0; });
        }
        return amplitude == 0.0;
    }
    bool differentiable() const { return form != DriftForm::Clamp; }

    /// L_B with respect to |·|_H on the state and |·|_U on the image.
    double lipschitz(const ModeBasis& basis) const {
        if (form == DriftForm::Zero || form == DriftForm::Constant) return 0.0;
        double min_w = 1.0;
        for (double w : basis.u_weight) min_w = std::min(min_w, w);
        return std::abs(amplitude) / min_w;
    }
    /// sup |B̄|_U.
    double bound(const ModeBasis& basis) const {
        switch (form) {
            case DriftForm::Zero: return 0.0;
            case DriftForm::Saturating:
            case DriftForm::Clamp: return std::abs(amplitude) * std::sqrt(static_cast<double>(basis.size()));
            case DriftForm::Constant: {
                double s = 0;
                for (double v : constant) s += v * v;
                return std::sqrt(s);
            }
        }
        return 0.0;
    }

    /// B̄(x) for x given as [c1 | c2].
    void evaluate(std::span<const double> x, std::span<double> out) const {
        const std::size_t n = out.size();
        switch (form) {
            case DriftForm::Zero: std::fill(out.begin(), out.end(), 0.0); return;
            case DriftForm::Saturating:
                for (std::size_t i = 0; i < n; ++i) out[i] = amplitude * std::tanh(x[i]);
                return;
            case DriftForm::Clamp:
                for (std::size_t i = 0; i < n; ++i) out[i] = amplitude * std::clamp(x[i], -1.0, 1.0);
                return;
            case DriftForm::Constant:
                for (std::size_t i = 0; i < n; ++i) out[i] = constant[i];
                return;
        }
    }

    /// Diagonal of ∂B̄_n/∂x1_n (the Jacobian has no other entries).
    void jacobian_diagonal(std::span<const double> x, std::span<double> out) const {
        require(differentiable(), ErrorCode::NonDifferentiableDrift, "drift " + to_string(form) + " is not differentiable");
        const std::size_t n = out.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (form == DriftForm::Saturating) {
                const double c = std::cosh(x[i]);
                out[i] = amplitude / (c * c);
            } else {
                out[i] = 0.0;
            }
        }
    }
};

/// Randomized check of the Lipschitz and boundedness claims of a drift.
inline void validate_drift(const ModeBasis& basis, const DriftSpec& drift, int samples = 256, std::uint64_t seed = 7) {
    const int n_modes = basis.size();
    if (drift.form == DriftForm::Constant) {
        require(static_cast<int>(drift.constant.size()) == n_modes, ErrorCode::InvalidParams,
                "constant drift needs N entries");
    }
    require(std::isfinite(drift.amplitude), ErrorCode::InvalidParams, "drift amplitude must be finite");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 2.0);
    std::vector<double> x(2 * n_modes), y(2 * n_modes), bx(n_modes), by(n_modes);
    const double lip = drift.lipschitz(basis), bound = drift.bound(basis);
    for (int i = 0; i < samples; ++i) {
        for (auto& v : x) v = normal(rng);
        for (auto& v : y) v = normal(rng);
        drift.evaluate(x, bx);
        drift.evaluate(y, by);
        double diff_u = 0, norm_u = 0, diff_h = 0;
        for (int n = 0; n < n_modes; ++n) {
            diff_u += (bx[n] - by[n]) * (bx[n] - by[n]);
            norm_u += bx[n] * bx[n];
            const double w1 = basis.u_weight[n], w2 = basis.v_weight[n];
            diff_h += w1 * w1 * (x[n] - y[n]) * (x[n] - y[n]) + w2 * w2 * (x[n_modes + n] - y[n_modes + n]) * (x[n_modes + n] - y[n_modes + n]);
        }
        require(std::sqrt(diff_u) <= lip * std::sqrt(diff_h) * (1 + 1e-12) + 1e-300, ErrorCode::InvalidParams,
                "drift violates its Lipschitz constant");
        require(std::sqrt(norm_u) <= bound * (1 + 1e-12), ErrorCode::InvalidParams, "drift violates its bound");
    }
}

enum class Measure { Reference, Drifted };

/// Eagerly stored paths. dW is [path][step][mode]; X is [path][time][c1 | c2].
struct PathBundle {
    int N = 0;
    int steps = 0;
    std::int64_t M = 0;
    std::uint64_t seed = 0;
    double s = 0.0;
    double t_end = 0.0;
    Measure measure = Measure::Reference;
    std::vector<double> dW;
    std::vector<double> X;

    double dt() const { return (t_end - s) / steps; }
    double time(int k) const { return s + (t_end - s) * k / steps; }

    std::span<const double> increments(std::int64_t p) const {
        const std::size_t len = static_cast<std::size_t>(steps) * N;
        return std::span<const double>(dW).subspan(static_cast<std::size_t>(p) * len, len);
    }
    std::span<const double> increment(std::int64_t p, int k) const {
        return increments(p).subspan(static_cast<std::size_t>(k) * N, static_cast<std::size_t>(N));
    }
    std::span<const double> path(std::int64_t p) const {
        const std::size_t len = static_cast<std::size_t>(steps + 1) * 2 * N;
        return std::span<const double>(X).subspan(static_cast<std::size_t>(p) * len, len);
    }
    std::span<const double> state(std::int64_t p, int k) const {
        return path(p).subspan(static_cast<std::size_t>(k) * 2 * N, 2 * static_cast<std::size_t>(N));
    }
    HVector state_vector(std::int64_t p, int k) const {
        const auto x = state(p, k);
        return HVector(std::vector<double>(x.begin(), x.begin() + N), std::vector<double>(x.begin() + N, x.end()));
    }
};

/// Per-mode one-step data for a fixed step length.
struct StepKernel {
    Mat2 propagator;                // e^{Δt A}
    Mat2 drift_integral;            // ∫_0^Δt e^{uA} du
    std::array<double, 6> chol{};   // lower factor of Cov(ΔW, conv1, conv2), row-major packed
};

/// One-step kernels for every mode. The covariance of (ΔW, ∫e^{(Δt-r)A}J dW_r) is
///   [[Δt, m^T], [m, C]],  m = ∫_0^Δt v,  C = ∫_0^Δt v v^T,  v(u) = e^{uA}(0,1).
inline std::vector<StepKernel> build_step_kernels(const ModeBasis& basis, double dt) {
    std::vector<StepKernel> kernels(static_cast<std::size_t>(basis.size()));
    for (int n = 0; n < basis.size(); ++n) {
        double rate = basis.kind() == ModelKind::Wave
                          ? std::sqrt(basis.mu[n])
                          : std::max(std::abs(basis.eig[n].lambda_plus), std::abs(basis.eig[n].lambda_minus));
        const int panels = resolving_panels(rate, dt, 64);
        struct Acc {
            double d00 = 0, d01 = 0, d10 = 0, d11 = 0, c11 = 0, c12 = 0, c22 = 0;
            Acc& operator+=(const Acc& o) {
                d00 += o.d00; d01 += o.d01; d10 += o.d10; d11 += o.d11;
                c11 += o.c11; c12 += o.c12; c22 += o.c22;
                return *this;
            }
            Acc& operator*=(double w) {
                d00 *= w; d01 *= w; d10 *= w; d11 *= w;
                c11 *= w; c12 *= w; c22 *= w;
                return *this;
            }
        };
        const Acc acc = simpson(
            [&](double u) {
                const Mat2 e = semigroup_block(basis, n, u);
                return Acc{e.a00, e.a01, e.a10, e.a11, e.a01 * e.a01, e.a01 * e.a11, e.a11 * e.a11};
            },
            0.0, dt, panels);
        StepKernel& k = kernels[n];
        k.propagator = semigroup_block(basis, n, dt);
        k.drift_integral = {acc.d00, acc.d01, acc.d10, acc.d11};
        const double cov[3][3] = {{dt, acc.d01, acc.d11}, {acc.d01, acc.c11, acc.c12}, {acc.d11, acc.c12, acc.c22}};
        double l[3][3] = {};
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j <= i; ++j) {
                double sum = cov[i][j];
                for (int q = 0; q < j; ++q) sum -= l[i][q] * l[j][q];
                if (i == j) {
                    // clamp round-off negatives; a vanishing pivot drops that direction
                    l[i][i] = sum > 1e-14 * cov[i][i] ? std::sqrt(sum) : 0.0;
                } else {
                    l[i][j] = l[j][j] > 0.0 ? sum / l[j][j] : 0.0;
                }
            }
        }
        k.chol = {l[0][0], l[1][0], l[1][1], l[2][0], l[2][1], l[2][2]};
    }
    return kernels;
}

/// Path generator bound to a basis and window; each path draws from its own stream.
class PathSimulator {
public:
    PathSimulator(const ModeBasis& basis, const SimConfig& cfg) : basis_(basis), cfg_(cfg) {
        cfg.validate(basis.params.T);
        kernels_ = build_step_kernels(basis_, cfg_.dt());
        sigma_mid_.resize(static_cast<std::size_t>(cfg_.steps));
        for (int k = 0; k < cfg_.steps; ++k) sigma_mid_[k] = basis_.params.sigma(cfg_.time(k) + 0.5 * cfg_.dt());
    }

    const ModeBasis& basis() const { return basis_; }
    const SimConfig& config() const { return cfg_; }
    const std::vector<StepKernel>& kernels() const { return kernels_; }
    /// σ used over step k (its value at the step midpoint).
    double step_sigma(int k) const { return sigma_mid_[k]; }

    /// Simulates path p. dw receives steps*N increments, x receives (steps+1)*2N states.
    void run_path(std::int64_t p, const HVector& x0, const DriftSpec* drift, std::span<double> dw,
                  std::span<double> x) const {
        const int n_modes = basis_.size();
        auto engine = path_engine(cfg_.seed, static_cast<std::uint64_t>(p));
        std::normal_distribution<double> normal;
        std::copy(x0.c1.begin(), x0.c1.end(), x.begin());
        std::copy(x0.c2.begin(), x0.c2.end(), x.begin() + n_modes);
        const bool with_drift = drift != nullptr && !drift->is_zero();
        std::vector<double> b(with_drift ? n_modes : 0);
        for (int k = 0; k < cfg_.steps; ++k) {
            const auto cur = x.subspan(static_cast<std::size_t>(k) * 2 * n_modes, 2 * static_cast<std::size_t>(n_modes));
            const auto next = x.subspan(static_cast<std::size_t>(k + 1) * 2 * n_modes, 2 * static_cast<std::size_t>(n_modes));
            if (with_drift) drift->evaluate(cur, b);
            const double sig = sigma_mid_[k];
            for (int n = 0; n < n_modes; ++n) {
                const double z0 = normal(engine), z1 = normal(engine), z2 = normal(engine);
                const StepKernel& ker = kernels_[n];
                const auto& l = ker.chol;
                const double w = l[0] * z0;
                const double conv1 = l[1] * z0 + l[2] * z1;
                const double conv2 = l[3] * z0 + l[4] * z1 + l[5] * z2;
                dw[static_cast<std::size_t>(k) * n_modes + n] = w;
                auto [y1, y2] = ker.propagator(cur[n], cur[n_modes + n]);
                y1 += sig * conv1;
                y2 += sig * conv2;
                if (with_drift) {
                    y1 += ker.drift_integral.a01 * b[n];
                    y2 += ker.drift_integral.a11 * b[n];
                }
                next[n] = y1;
                next[n_modes + n] = y2;
            }
        }
    }

    PathBundle simulate(const HVector& x0, const DriftSpec* drift) const {
        require(x0.size() == basis_.size(), ErrorCode::InvalidParams, "initial state length differs from N");
        PathBundle bundle;
        bundle.N = basis_.size();
        bundle.steps = cfg_.steps;
        bundle.M = cfg_.M;
        bundle.seed = cfg_.seed;
        bundle.s = cfg_.s;
        bundle.t_end = cfg_.t_end;
        bundle.measure = drift != nullptr && drift->form != DriftForm::Zero ? Measure::Drifted : Measure::Reference;
        const std::size_t dw_len = static_cast<std::size_t>(cfg_.steps) * bundle.N;
        const std::size_t x_len = static_cast<std::size_t>(cfg_.steps + 1) * 2 * bundle.N;
        bundle.dW.assign(dw_len * static_cast<std::size_t>(cfg_.M), 0.0);
        bundle.X.assign(x_len * static_cast<std::size_t>(cfg_.M), 0.0);
        for_each_chunk(cfg_.M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
            for (std::int64_t p = begin; p < end; ++p) {
                run_path(p, x0, drift, std::span<double>(bundle.dW).subspan(static_cast<std::size_t>(p) * dw_len, dw_len),
                         std::span<double>(bundle.X).subspan(static_cast<std::size_t>(p) * x_len, x_len));
            }
        });
        return bundle;
    }

private:
    ModeBasis basis_;
    SimConfig cfg_;
    std::vector<StepKernel> kernels_;
    std::vector<double> sigma_mid_;
};

/// Streams paths without storing them: body(acc, p, dw, x) sees each path's
/// increments and states once; per-chunk accumulators merge in chunk order.
template <class Acc, class Body>
Acc stream_paths(const PathSimulator& sim, const HVector& x0, const DriftSpec* drift, Body&& body) {
    const int n_modes = sim.basis().size();
    const int steps = sim.config().steps;
    const std::int64_t total = sim.config().M;
    const std::int64_t chunks = (total + kPathChunk - 1) / kPathChunk;
    std::vector<Acc> slots(static_cast<std::size_t>(chunks));
    for_each_chunk(total, [&](std::int64_t c, std::int64_t begin, std::int64_t end) {
        std::vector<double> dw(static_cast<std::size_t>(steps) * n_modes);
        std::vector<double> x(static_cast<std::size_t>(steps + 1) * 2 * n_modes);
        for (std::int64_t p = begin; p < end; ++p) {
            sim.run_path(p, x0, drift, dw, x);
            body(slots[static_cast<std::size_t>(c)], p, std::span<const double>(dw), std::span<const double>(x));
        }
    });
    Acc out{};
    for (const auto& s : slots) out.merge(s);
    return out;
}

inline PathBundle simulate_reference(const ModeBasis& basis, const SimConfig& cfg, const HVector& x0) {
    return PathSimulator(basis, cfg).simulate(x0, nullptr);
}

inline PathBundle simulate_drifted(const ModeBasis& basis, const SimConfig& cfg, const DriftSpec& drift,
                                   const HVector& x0) {
    validate_drift(basis, drift);
    return PathSimulator(basis, cfg).simulate(x0, &drift);
}

namespace detail {

struct GirsanovTerms {
    double stochastic = 0.0;  // Σ_k ⟨b_k, ΔW_k⟩
    double quadratic = 0.0;   // Σ_k |b_k|² Δt
};

// b_k = B̄(X_k)/σ_k with σ_k the step value of σ.
inline GirsanovTerms girsanov_terms(const ModeBasis& basis, const PathBundle& bundle, const DriftSpec& drift,
                                    std::int64_t p, std::vector<double>& scratch) {
    const int n_modes = bundle.N;
    scratch.resize(static_cast<std::size_t>(n_modes));
    const double dt = bundle.dt();
    GirsanovTerms out;
    for (int k = 0; k < bundle.steps; ++k) {
        drift.evaluate(bundle.state(p, k), scratch);
        const double inv_sigma = 1.0 / basis.params.sigma(bundle.time(k) + 0.5 * dt);
        const auto dw = bundle.increment(p, k);
        for (int n = 0; n < n_modes; ++n) {
            const double b = scratch[n] * inv_sigma;
            out.stochastic += b * dw[n];
            out.quadratic += b * b * dt;
        }
    }
    return out;
}

template <class Exponent>
std::vector<double> exponential_weights(const ModeBasis& basis, const PathBundle& bundle, const DriftSpec& drift,
                                        Exponent&& exponent) {
    std::vector<double> w(static_cast<std::size_t>(bundle.M), 1.0);
    if (drift.is_zero()) return w;
    for_each_chunk(bundle.M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
        std::vector<double> scratch;
        for (std::int64_t p = begin; p < end; ++p) {
            const double e = exponent(girsanov_terms(basis, bundle, drift, p, scratch));
            require(std::abs(e) <= 700.0, ErrorCode::Overflow, "Girsanov log-weight exceeds 700 in magnitude");
            w[static_cast<std::size_t>(p)] = std::exp(e);
        }
    });
    return w;
}

}  // namespace detail

/// exp(∫⟨σ⁻¹B̄(X), dW⟩ - ½∫|σ⁻¹B̄(X)|² dr) per path of a reference bundle: reweights
/// reference expectations into drifted-law expectations.
inline std::vector<double> girsanov_weight(const ModeBasis& basis, const PathBundle& bundle, const DriftSpec& drift) {
    require(bundle.measure == Measure::Reference, ErrorCode::InvalidParams, "girsanov_weight needs a reference bundle");
    return detail::exponential_weights(basis, bundle, drift, [](const detail::GirsanovTerms& g) {
        return g.stochastic - 0.5 * g.quadratic;
    });
}

/// Reciprocal direction on a drifted bundle: exp(-∫⟨σ⁻¹B̄(X), dW⟩ - ½∫|σ⁻¹B̄(X)|² dr)
/// reweights drifted paths into reference-law expectations.
inline std::vector<double> girsanov_density(const ModeBasis& basis, const PathBundle& bundle, const DriftSpec& drift) {
    return detail::exponential_weights(basis, bundle, drift, [](const detail::GirsanovTerms& g) {
        return -g.stochastic - 0.5 * g.quadratic;
    });
}

/// Per-path first-variation trajectories, laid out like PathBundle::X.
struct VariationBundle {
    int N = 0;
    int steps = 0;
    std::int64_t M = 0;
    std::vector<double> xi;

    std::span<const double> state(std::int64_t p, int k) const {
        const std::size_t len = static_cast<std::size_t>(steps + 1) * 2 * N;
        return std::span<const double>(xi).subspan(static_cast<std::size_t>(p) * len + static_cast<std::size_t>(k) * 2 * N,
                                                   2 * static_cast<std::size_t>(N));
    }
    HVector state_vector(std::int64_t p, int k) const {
        const auto x = state(p, k);
        return HVector(std::vector<double>(x.begin(), x.begin() + N), std::vector<double>(x.begin() + N, x.end()));
    }
};

/// Derivative of the discrete flow in direction h:
///   Ξ_{k+1} = e^{ΔtA} Ξ_k + (∫_0^Δt e^{uA}du) J ∇B̄(X_k) Ξ_k,  Ξ_0 = h.
inline VariationBundle first_variation(const ModeBasis& basis, const PathBundle& bundle, const DriftSpec& drift,
                                       const HVector& h) {
    require(drift.differentiable(), ErrorCode::NonDifferentiableDrift, "drift " + to_string(drift.form) + " is not differentiable");
    require(h.size() == bundle.N, ErrorCode::InvalidParams, "direction length differs from N");
    const int n_modes = bundle.N;
    VariationBundle out{n_modes, bundle.steps, bundle.M, {}};
    const std::size_t len = static_cast<std::size_t>(bundle.steps + 1) * 2 * n_modes;
    out.xi.assign(len * static_cast<std::size_t>(bundle.M), 0.0);
    const std::vector<StepKernel> kernels = build_step_kernels(basis, bundle.dt());
    const bool zero = drift.is_zero() || drift.form == DriftForm::Constant;
    std::vector<double> exact;
    if (zero) {
        exact.resize(len);
        for (int k = 0; k <= bundle.steps; ++k) {
            const HVector e = apply_semigroup(basis, bundle.time(k) - bundle.s, h);
            std::copy(e.c1.begin(), e.c1.end(), exact.begin() + static_cast<std::ptrdiff_t>(k) * 2 * n_modes);
            std::copy(e.c2.begin(), e.c2.end(), exact.begin() + static_cast<std::ptrdiff_t>(k) * 2 * n_modes + n_modes);
        }
    }
    for_each_chunk(bundle.M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
        std::vector<double> jac(static_cast<std::size_t>(n_modes));
        for (std::int64_t p = begin; p < end; ++p) {
            double* xi = out.xi.data() + static_cast<std::size_t>(p) * len;
            if (zero) {
                std::copy(exact.begin(), exact.end(), xi);
                continue;
            }
            std::copy(h.c1.begin(), h.c1.end(), xi);
            std::copy(h.c2.begin(), h.c2.end(), xi + n_modes);
            for (int k = 0; k < bundle.steps; ++k) {
                drift.jacobian_diagonal(bundle.state(p, k), jac);
                const double* cur = xi + static_cast<std::size_t>(k) * 2 * n_modes;
                double* next = xi + static_cast<std::size_t>(k + 1) * 2 * n_modes;
                for (int n = 0; n < n_modes; ++n) {
                    auto [y1, y2] = kernels[n].propagator(cur[n], cur[n_modes + n]);
                    const double g = jac[n] * cur[n];
                    y1 += kernels[n].drift_integral.a01 * g;
                    y2 += kernels[n].drift_integral.a11 * g;
                    next[n] = y1;
                    next[n_modes + n] = y2;
                }
            }
        }
    });
    return out;
}

/// Mean over paths of sup_k |X_k|_H^p.
inline Moments sup_norm_moment(const ModeBasis& basis, const PathBundle& bundle, double power) {
    return reduce_paths<Moments>(bundle.M, [&](Moments& acc, std::int64_t p) {
        double sup = 0.0;
        for (int k = 0; k <= bundle.steps; ++k) {
            const auto x = bundle.state(p, k);
            double sq = 0.0;
            for (int n = 0; n < bundle.N; ++n) {
                const double w1 = basis.u_weight[n], w2 = basis.v_weight[n];
                sq += w1 * w1 * x[n] * x[n] + w2 * w2 * x[bundle.N + n] * x[bundle.N + n];
            }
            sup = std::max(sup, std::sqrt(sq));
        }
        acc.add(std::pow(sup, power));
    });
}

/// Binary trajectory dump: header {N, steps, M, seed} as little-endian 64-bit
/// integers, then X as little-endian doubles, path-major.
inline void write_trajectories(std::ostream& os, const PathBundle& bundle) {
    static_assert(std::endian::native == std::endian::little, "trajectory dump assumes a little-endian host");
    const std::int64_t header[4] = {bundle.N, bundle.steps, bundle.M, static_cast<std::int64_t>(bundle.seed)};
    os.write(reinterpret_cast<const char*>(header), sizeof header);
    os.write(reinterpret_cast<const char*>(bundle.X.data()), static_cast<std::streamsize>(bundle.X.size() * sizeof(double)));
}

/// CSV of per-time sample mean and second moment of |X|_H.
inline void write_moments_csv(std::ostream& os, const ModeBasis& basis, const PathBundle& bundle) {
    os << "t,mean_norm,mean_norm_sq\n";
    char buf[128];
    for (int k = 0; k <= bundle.steps; ++k) {
        Moments m1, m2;
        for (std::int64_t p = 0; p < bundle.M; ++p) {
            const double nrm = norm_H(basis, bundle.state_vector(p, k));
            m1.add(nrm);
            m2.add(nrm * nrm);
        }
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", bundle.time(k), m1.mean, m2.mean);
        os << buf;
    }
}

}  // namespace bismut
