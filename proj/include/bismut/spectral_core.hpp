#pragma once

// Finite spectral truncation of the wave / damped-wave generators.
//
// Every operator in the model is diagonal in the eigenbasis {e_n} of Λ, so a
// state is stored as two length-N coefficient arrays and every operator acts
// mode by mode through a 2x2 block. Norms are weighted Euclidean norms whose
// weights encode the product space H:
//
//   Wave            H = U x V'            weights (1, μ_n^{-1/2})
//   Damped          H = U x U             weights (1, 1)
//   DampedSmoothed  H = V_ε x V_ε         weights (μ_n^{-ε}, μ_n^{-ε})
//
// Noise and controls live in U and are stored in U-orthonormal coordinates.
// In all three models J maps the n-th U coordinate to the H coefficient pair
// (0, 1) at mode n.

#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bismut/error.hpp"

namespace bismut {

using cplx = std::complex<double>;

enum class ModelKind { Wave, Damped, DampedSmoothed };

inline std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::Wave: return "Wave";
        case ModelKind::Damped: return "Damped";
        case ModelKind::DampedSmoothed: return "DampedSmoothed";
    }
    return "?";
}

inline bool is_damped(ModelKind kind) { return kind != ModelKind::Wave; }

/// Scalar diffusion intensity σ(t) = base·(1 + amplitude·sin(2π·frequency·t)).
struct SigmaProfile {
    double base = 1.0;
    double amplitude = 0.0;
    double frequency = 1.0;

    double operator()(double t) const {
        if (amplitude == 0.0) return base;
        return base * (1.0 + amplitude * std::sin(2.0 * std::numbers::pi * frequency * t));
    }
    double lower_bound() const { return base * (1.0 - std::abs(amplitude)); }
    double upper_bound() const { return base * (1.0 + std::abs(amplitude)); }

    friend bool operator==(const SigmaProfile&, const SigmaProfile&) = default;
};

struct ModelParams {
    ModelKind kind = ModelKind::Wave;
    int N = 8;
    double delta = 2.0;
    double rho = 1.0;
    double alpha = 0.75;
    double eps = 0.0;
    SigmaProfile sigma{};
    double T = 1.0;

    double mu(int n) const { return std::pow(static_cast<double>(n), delta); }

    /// Throws InvalidParams on out-of-range fields. Mode degeneracy is checked by build_basis.
    void validate() const {
        require(N >= 1, ErrorCode::InvalidParams, "N must be positive");
        require(std::isfinite(delta) && delta > 0.0, ErrorCode::InvalidParams, "delta must be > 0");
        require(std::isfinite(T) && T > 0.0, ErrorCode::InvalidParams, "T must be > 0");
        if (is_damped(kind)) {
            require(std::isfinite(rho) && rho > 0.0, ErrorCode::InvalidParams, "rho must be > 0");
            require(alpha > 0.0 && alpha < 1.0, ErrorCode::InvalidParams, "alpha must lie in (0,1)");
        }
        if (kind == ModelKind::DampedSmoothed) {
            require(eps >= 0.0 && eps < 0.5, ErrorCode::InvalidParams, "eps must lie in [0,1/2)");
        }
        require(std::isfinite(sigma.base) && sigma.base > 0.0, ErrorCode::InvalidParams,
                "sigma.base must be > 0");
        require(std::abs(sigma.amplitude) < 1.0, ErrorCode::InvalidParams,
                "|sigma.amplitude| must be < 1");
        const int samples = 4096;
        for (int i = 0; i <= samples; ++i) {
            const double v = sigma(T * i / samples);
            require(v >= sigma.lower_bound() * (1 - 1e-12) && v <= sigma.upper_bound() * (1 + 1e-12) &&
                        v > 0.0,
                    ErrorCode::InvalidParams, "sigma leaves its stated bounds");
        }
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Real 2x2 block acting on one mode's coefficient pair.
struct Mat2 {
    double a00 = 0, a01 = 0, a10 = 0, a11 = 0;

    std::array<double, 2> operator()(double x, double y) const {
        return {a00 * x + a01 * y, a10 * x + a11 * y};
    }
    friend Mat2 operator*(const Mat2& l, const Mat2& r) {
        return {l.a00 * r.a00 + l.a01 * r.a10, l.a00 * r.a01 + l.a01 * r.a11,
                l.a10 * r.a00 + l.a11 * r.a10, l.a10 * r.a01 + l.a11 * r.a11};
    }
    static Mat2 identity() { return {1, 0, 0, 1}; }
};

/// State in H: mode coefficients of the two components.
struct HVector {
    std::vector<double> c1;
    std::vector<double> c2;

    HVector() = default;
    explicit HVector(int n) : c1(static_cast<std::size_t>(n), 0.0), c2(static_cast<std::size_t>(n), 0.0) {}
    HVector(std::vector<double> first, std::vector<double> second)
        : c1(std::move(first)), c2(std::move(second)) {}

    int size() const { return static_cast<int>(c1.size()); }

    HVector& operator+=(const HVector& o) {
        for (std::size_t i = 0; i < c1.size(); ++i) {
            c1[i] += o.c1[i];
            c2[i] += o.c2[i];
        }
        return *this;
    }
    HVector& operator-=(const HVector& o) {
        for (std::size_t i = 0; i < c1.size(); ++i) {
            c1[i] -= o.c1[i];
            c2[i] -= o.c2[i];
        }
        return *this;
    }
    HVector& operator*=(double s) {
        for (std::size_t i = 0; i < c1.size(); ++i) {
            c1[i] *= s;
            c2[i] *= s;
        }
        return *this;
    }
    friend HVector operator+(HVector a, const HVector& b) { return a += b; }
    friend HVector operator-(HVector a, const HVector& b) { return a -= b; }
    friend HVector operator*(double s, HVector a) { return a *= s; }
    friend bool operator==(const HVector&, const HVector&) = default;
};

/// Eigen data of one damped mode. Columns Φ± have unit H-norm; `inverse` holds
/// the rows of [Φ+ | Φ-]^{-1}.
struct DampedEigen {
    cplx lambda_plus;
    cplx lambda_minus;
    std::array<cplx, 2> phi_plus;
    std::array<cplx, 2> phi_minus;
    std::array<cplx, 4> inverse;
    double condition = 1.0;
};

/// Truncated spectral description of Λ and of the generator A.
struct ModeBasis {
    ModelParams params;
    std::vector<double> mu;
    std::vector<double> u_weight;
    std::vector<double> v_weight;
    std::vector<Mat2> generator;
    std::vector<DampedEigen> eig;  // empty for Wave

    int size() const { return static_cast<int>(mu.size()); }
    ModelKind kind() const { return params.kind; }
};

namespace detail {

inline double weighted_norm2(const std::array<cplx, 2>& v, double w1, double w2) {
    return w1 * w1 * std::norm(v[0]) + w2 * w2 * std::norm(v[1]);
}

// (exp(z t) - 1) / z without cancellation for small |z t|.
inline cplx expm1_over(cplx z, double t) {
    const cplx zt = z * t;
    if (std::abs(zt) < 1e-3) {
        cplx term = t, sum = 0.0;
        for (int k = 1; k < 12; ++k) {
            sum += term;
            term *= zt / static_cast<double>(k + 1);
        }
        return sum;
    }
    return (std::exp(zt) - 1.0) / z;
}

}  // namespace detail

/// Roots of λ² + ρ μ^α λ + μ = 0, ordered (λ+, λ-) with λ+ the root of larger real part
/// (or positive imaginary part in the underdamped case).
inline std::pair<cplx, cplx> damped_eigenvalues(double mu, double rho, double alpha) {
    const double b = rho * std::pow(mu, alpha);
    const double disc = b * b - 4.0 * mu;
    if (disc < 0.0) {
        const double im = 0.5 * std::sqrt(-disc);
        return {cplx(-0.5 * b, im), cplx(-0.5 * b, -im)};
    }
    const double q = -0.5 * (b + std::sqrt(disc));  // larger-magnitude root, no cancellation
    return {cplx(mu / q, 0.0), cplx(q, 0.0)};
}

inline ModeBasis build_basis(const ModelParams& params) {
    params.validate();
    ModeBasis basis;
    basis.params = params;
    const int n_modes = params.N;
    basis.mu.resize(n_modes);
    basis.u_weight.resize(n_modes);
    basis.v_weight.resize(n_modes);
    basis.generator.resize(n_modes);
    for (int i = 0; i < n_modes; ++i) {
        const double mu = params.mu(i + 1);
        basis.mu[i] = mu;
        switch (params.kind) {
            case ModelKind::Wave:
                basis.u_weight[i] = 1.0;
                basis.v_weight[i] = 1.0 / std::sqrt(mu);
                basis.generator[i] = {0.0, 1.0, -mu, 0.0};
                break;
            case ModelKind::Damped:
            case ModelKind::DampedSmoothed: {
                const double w = params.kind == ModelKind::Damped ? 1.0 : std::pow(mu, -params.eps);
                basis.u_weight[i] = w;
                basis.v_weight[i] = w;
                const double root = std::sqrt(mu);
                basis.generator[i] = {0.0, root, -root, -params.rho * std::pow(mu, params.alpha)};
                break;
            }
        }
    }
    if (!is_damped(params.kind)) return basis;

    basis.eig.resize(n_modes);
    for (int i = 0; i < n_modes; ++i) {
        const double mu = basis.mu[i];
        const double lhs = 4.0 * std::pow(mu, 1.0 - 2.0 * params.alpha);
        const double rho2 = params.rho * params.rho;
        if (std::abs(lhs - rho2) <= 1e-10 * rho2) {
            throw DegenerateModeError(i + 1, "4 mu_n^(1-2 alpha) = rho^2 at mode " + std::to_string(i + 1));
        }
        DampedEigen& e = basis.eig[i];
        std::tie(e.lambda_plus, e.lambda_minus) = damped_eigenvalues(mu, params.rho, params.alpha);
        const double w = basis.u_weight[i];
        auto normalized = [&](cplx lambda) {
            std::array<cplx, 2> v{cplx(std::sqrt(mu), 0.0), lambda};
            const double nrm = std::sqrt(detail::weighted_norm2(v, w, w));
            return std::array<cplx, 2>{v[0] / nrm, v[1] / nrm};
        };
        e.phi_plus = normalized(e.lambda_plus);
        e.phi_minus = normalized(e.lambda_minus);
        const cplx det = e.phi_plus[0] * e.phi_minus[1] - e.phi_minus[0] * e.phi_plus[1];
        e.inverse = {e.phi_minus[1] / det, -e.phi_minus[0] / det, -e.phi_plus[1] / det, e.phi_plus[0] / det};
        double fro_v = 0, fro_inv = 0;
        for (const auto& z : {e.phi_plus[0], e.phi_plus[1], e.phi_minus[0], e.phi_minus[1]}) fro_v += std::norm(z);
        for (const auto& z : e.inverse) fro_inv += std::norm(z);
        e.condition = std::sqrt(fro_v * fro_inv);
    }
    return basis;
}

/// Per-mode block of e^{tA}.
inline Mat2 semigroup_block(const ModeBasis& basis, int mode, double t) {
    const std::size_t i = static_cast<std::size_t>(mode);
    if (basis.kind() == ModelKind::Wave) {
        const double omega = std::sqrt(basis.mu[i]);
        const double c = std::cos(omega * t), s = std::sin(omega * t);
        return {c, s / omega, -omega * s, c};
    }
    const DampedEigen& e = basis.eig[i];
    const cplx ep = std::exp(e.lambda_plus * t), em = std::exp(e.lambda_minus * t);
    auto entry = [&](int r, int c) {
        return (ep * e.phi_plus[r] * e.inverse[c] + em * e.phi_minus[r] * e.inverse[2 + c]).real();
    };
    return {entry(0, 0), entry(0, 1), entry(1, 0), entry(1, 1)};
}

inline std::vector<Mat2> semigroup_blocks(const ModeBasis& basis, double t) {
    require(t >= 0.0, ErrorCode::InvalidTime, "semigroup time must be >= 0");
    std::vector<Mat2> blocks(basis.mu.size());
    for (int n = 0; n < basis.size(); ++n) blocks[n] = semigroup_block(basis, n, t);
    return blocks;
}

inline HVector apply_blocks(std::span<const Mat2> blocks, const HVector& h) {
    HVector out(h.size());
    for (std::size_t n = 0; n < blocks.size(); ++n) {
        const auto [a, b] = blocks[n](h.c1[n], h.c2[n]);
        out.c1[n] = a;
        out.c2[n] = b;
    }
    return out;
}

inline HVector apply_semigroup(const ModeBasis& basis, double t, const HVector& h) {
    return apply_blocks(semigroup_blocks(basis, t), h);
}

inline HVector apply_generator(const ModeBasis& basis, const HVector& h) {
    return apply_blocks(basis.generator, h);
}

inline double inner_H(const ModeBasis& basis, const HVector& a, const HVector& b) {
    double sum = 0.0;
    for (int n = 0; n < basis.size(); ++n) {
        const double w1 = basis.u_weight[n], w2 = basis.v_weight[n];
        sum += w1 * w1 * a.c1[n] * b.c1[n] + w2 * w2 * a.c2[n] * b.c2[n];
    }
    return sum;
}

inline double norm_H(const ModeBasis& basis, const HVector& h) { return std::sqrt(inner_H(basis, h, h)); }

/// |h|_K with K = V x U (wave energy space): weights (μ_n^{1/2}, 1).
inline double norm_K(const ModeBasis& basis, const HVector& h) {
    double sum = 0.0;
    for (int n = 0; n < basis.size(); ++n) {
        sum += basis.mu[n] * h.c1[n] * h.c1[n] + h.c2[n] * h.c2[n];
    }
    return std::sqrt(sum);
}

/// J a for a in U-orthonormal coordinates.
inline HVector apply_J(const ModeBasis& basis, std::span<const double> a) {
    HVector h(basis.size());
    for (int n = 0; n < basis.size(); ++n) h.c2[n] = a[n];
    return h;
}

/// J_1 a = (0, a) with J = J_1 S, S = Λ^{-ε}; equals J for the unsmoothed models.
inline HVector apply_J1(const ModeBasis& basis, std::span<const double> a) {
    HVector h = apply_J(basis, a);
    if (basis.kind() == ModelKind::DampedSmoothed) {
        for (int n = 0; n < basis.size(); ++n) h.c2[n] *= std::pow(basis.mu[n], basis.params.eps);
    }
    return h;
}

/// Coefficients (h+_n, h-_n) with h_n = h+_n Φ+_n + h-_n Φ-_n, via the per-mode 2x2 solve.
inline std::vector<std::array<cplx, 2>> mode_project(const ModeBasis& basis, const HVector& h) {
    require(is_damped(basis.kind()), ErrorCode::InvalidParams, "mode_project needs a damped model");
    std::vector<std::array<cplx, 2>> out(basis.mu.size());
    for (int n = 0; n < basis.size(); ++n) {
        const DampedEigen& e = basis.eig[n];
        if (e.condition > 1e12) {
            fail(ErrorCode::SingularProjection, "eigenvector matrix condition exceeds 1e12 at mode " +
                                                    std::to_string(n + 1));
        }
        out[n] = {e.inverse[0] * h.c1[n] + e.inverse[1] * h.c2[n],
                  e.inverse[2] * h.c1[n] + e.inverse[3] * h.c2[n]};
    }
    return out;
}

/// Σ_n |e^{tA} J e_n|_H² over the U-orthonormal basis (σ ≡ 1).
inline double hs_norm_squared(const ModeBasis& basis, double t) {
    require(t > 0.0, ErrorCode::InvalidTime, "hs_norm_squared needs t > 0");
    double sum = 0.0;
    for (int n = 0; n < basis.size(); ++n) {
        const Mat2 b = semigroup_block(basis, n, t);
        const double w1 = basis.u_weight[n], w2 = basis.v_weight[n];
        sum += w1 * w1 * b.a01 * b.a01 + w2 * w2 * b.a11 * b.a11;
    }
    return sum;
}

/// ∫_0^t Σ_n |e^{rA} J e_n|_H² dr, the trace of the stochastic-convolution covariance (σ ≡ 1).
inline double hs_norm_integrated(const ModeBasis& basis, double t) {
    require(t >= 0.0, ErrorCode::InvalidTime, "hs_norm_integrated needs t >= 0");
    double sum = 0.0;
    for (int n = 0; n < basis.size(); ++n) {
        if (basis.kind() == ModelKind::Wave) {
            sum += t / basis.mu[n];
            continue;
        }
        const DampedEigen& e = basis.eig[n];
        const double w = basis.u_weight[n];
        // e^{rA}(0,1) = Σ_j e^{λ_j r} v_j
        const std::array<std::array<cplx, 2>, 2> v{
            std::array<cplx, 2>{e.phi_plus[0] * e.inverse[1], e.phi_plus[1] * e.inverse[1]},
            std::array<cplx, 2>{e.phi_minus[0] * e.inverse[3], e.phi_minus[1] * e.inverse[3]}};
        const std::array<cplx, 2> lam{e.lambda_plus, e.lambda_minus};
        cplx acc = 0.0;
        for (int j = 0; j < 2; ++j) {
            for (int k = 0; k < 2; ++k) {
                const cplx ip = w * w * (v[j][0] * std::conj(v[k][0]) + v[j][1] * std::conj(v[k][1]));
                acc += ip * detail::expm1_over(lam[j] + std::conj(lam[k]), t);
            }
        }
        sum += acc.real();
    }
    return sum;
}

/// Trace-class condition on the truncated family μ_n = n^δ.
inline bool check_trace_condition(const ModelParams& params) {
    switch (params.kind) {
        case ModelKind::Wave: return params.delta > 1.0;
        case ModelKind::Damped: return params.delta > 1.0 / params.alpha;
        case ModelKind::DampedSmoothed: return params.delta > 1.0 / (2.0 * params.eps + params.alpha);
    }
    return false;
}

/// Largest |λ| over the retained modes; sets resolution scales for quadrature.
inline double spectral_radius(const ModeBasis& basis) {
    double r = 0.0;
    for (int n = 0; n < basis.size(); ++n) {
        if (basis.kind() == ModelKind::Wave) {
            r = std::max(r, std::sqrt(basis.mu[n]));
        } else {
            r = std::max({r, std::abs(basis.eig[n].lambda_plus), std::abs(basis.eig[n].lambda_minus)});
        }
    }
    return r;
}

}  // namespace bismut
