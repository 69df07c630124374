#pragma once

// Least-squares Monte Carlo for the backward equation
//   Y_t = φ(X_T) + ∫_t^T [ψ(r, X_r, Y_r, Z_r) + Z_r σ(r)⁻¹ B̄(r, X_r)] dr - ∫_t^T Z_r dW_r
// on forward paths simulated without drift, plus the semilinear Bismut formula,
// the Z identification check and the Kolmogorov mild-solution residual.

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "bismut/bismut_estimator.hpp"
#include "bismut/control_builder.hpp"
#include "bismut/numerics.hpp"
#include "bismut/path_simulator.hpp"

namespace bismut {

enum class GeneratorForm { Zero, AffineY, LipschitzNonlinear };

inline std::string to_string(GeneratorForm g) {
    switch (g) {
        case GeneratorForm::Zero: return "Zero";
        case GeneratorForm::AffineY: return "AffineY";
        case GeneratorForm::LipschitzNonlinear: return "LipschitzNonlinear";
    }
    return "?";
}

/// ψ(t, x, y, z):
///   Zero                0
///   AffineY             λ y
///   LipschitzNonlinear  ly·sin(y) + lz·sqrt(1 + |z|²) + k0·cos(x1_1)
/// `lipschitz`, `growth` and `m` are the declared constants L_ψ, K_ψ and the growth
/// exponent; negative values mean "use the natural ones".
struct GeneratorSpec {
    GeneratorForm form = GeneratorForm::Zero;
    double lambda = 0.0;
    double ly = 0.0;
    double lz = 0.0;
    double k0 = 0.0;
    double lipschitz = -1.0;
    double growth = -1.0;
    double m = 0.0;

    double natural_lipschitz() const {
        switch (form) {
            case GeneratorForm::Zero: return 0.0;
            case GeneratorForm::AffineY: return std::abs(lambda);
            case GeneratorForm::LipschitzNonlinear: return std::max(std::abs(ly), std::abs(lz));
        }
        return 0.0;
    }
    double natural_growth() const {
        return form == GeneratorForm::LipschitzNonlinear ? std::abs(lz) + std::abs(k0) : 0.0;
    }
    double lipschitz_constant() const { return lipschitz >= 0.0 ? lipschitz : natural_lipschitz(); }
    double growth_constant() const { return growth >= 0.0 ? growth : natural_growth(); }

    double operator()(double, std::span<const double> x, double y, std::span<const double> z) const {
        switch (form) {
            case GeneratorForm::Zero: return 0.0;
            case GeneratorForm::AffineY: return lambda * y;
            case GeneratorForm::LipschitzNonlinear: {
                double zz = 0.0;
                for (double v : z) zz += v * v;
                return ly * std::sin(y) + lz * std::sqrt(1.0 + zz) + k0 * std::cos(x[0]);
            }
        }
        return 0.0;
    }
};

/// Terminal condition φ = scale·f + offset.
struct TerminalSpec {
    TestFunctional f;
    double scale = 1.0;
    double offset = 0.0;
    double growth = -1.0;  // declared K_φ; negative means "use the natural one"

    double operator()(std::span<const double> x) const { return scale * f(x) + offset; }
    double gaussian_mean(double mean, double var) const { return scale * f.gaussian_mean(mean, var) + offset; }
    double growth_constant() const {
        return growth >= 0.0 ? growth : std::abs(scale) * f.ck_norm() + std::abs(offset);
    }
};

/// Randomized check of the declared Lipschitz and growth constants of ψ.
inline void validate_generator(const GeneratorSpec& gen, int n_modes, int samples = 512, std::uint64_t seed = 11) {
    require(std::isfinite(gen.lambda) && std::isfinite(gen.ly) && std::isfinite(gen.lz) && std::isfinite(gen.k0),
            ErrorCode::InvalidParams, "generator parameters must be finite");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 3.0);
    std::vector<double> x(2 * static_cast<std::size_t>(n_modes)), z1(n_modes), z2(n_modes), zero(n_modes, 0.0);
    const double lip = gen.lipschitz_constant(), growth = gen.growth_constant();
    for (int i = 0; i < samples; ++i) {
        for (auto& v : x) v = g(rng);
        for (auto& v : z1) v = g(rng);
        for (auto& v : z2) v = g(rng);
        const double y1 = g(rng), y2 = g(rng);
        double dz = 0.0;
        for (int n = 0; n < n_modes; ++n) dz += (z1[n] - z2[n]) * (z1[n] - z2[n]);
        const double diff = std::abs(gen(0.0, x, y1, z1) - gen(0.0, x, y2, z2));
        require(diff <= lip * (std::abs(y1 - y2) + std::sqrt(dz)) * (1 + 1e-12) + 1e-14, ErrorCode::NonLipschitzGenerator,
                "generator violates its declared Lipschitz constant");
        double xx = 0.0;
        for (double v : x) xx += v * v;
        require(std::abs(gen(0.0, x, 0.0, zero)) <= growth * (1.0 + std::pow(std::sqrt(xx), gen.m)) * (1 + 1e-12) + 1e-14,
                ErrorCode::NonLipschitzGenerator, "generator violates its declared growth bound");
    }
}

/// Randomized check of |φ(x)| <= K_φ (1 + |x|_H^m).
inline void validate_terminal(const ModeBasis& basis, const TerminalSpec& term, int samples = 256, std::uint64_t seed = 13) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 3.0);
    const int n_modes = basis.size();
    std::vector<double> x(2 * static_cast<std::size_t>(n_modes));
    const double k = term.growth_constant();
    const int m = term.f.growth();
    for (int i = 0; i < samples; ++i) {
        for (auto& v : x) v = g(rng);
        HVector hx(std::vector<double>(x.begin(), x.begin() + n_modes), std::vector<double>(x.begin() + n_modes, x.end()));
        const double nx = norm_H(basis, hx);
        require(std::abs(term(x)) <= k * (1.0 + std::pow(nx, m)) * (1 + 1e-12) + 1e-14, ErrorCode::InvalidParams,
                "terminal condition violates its declared growth bound");
    }
}

/// Regression basis: monomials of degree <= `degree` (1 or 2) in the first `max_modes`
/// coefficients of both components, optionally the driftless conditional expectation
/// of φ at the current time as one more feature, all standardized.
struct BasisOptions {
    int max_modes = 4;
    int degree = 2;
    enum class Profile { Auto, On, Off } profile = Profile::Auto;
    double max_condition = 1e10;
};

/// Standardized feature map at one time slice.
struct FeatureMap {
    int modes = 0;  // per component
    int degree = 2;
    bool profile = false;
    std::vector<double> profile_coef;  // ⟨c, e^{(T-t)A} x⟩ = profile_coef · x
    double profile_var = 0.0;
    std::vector<double> lin_mean;   // coordinates are centred and scaled before products
    std::vector<double> lin_scale;
    std::vector<double> mean;
    std::vector<double> scale;
    std::vector<char> keep;  // raw features with non-degenerate spread

    int raw_size() const {
        const int lin = 2 * modes;
        return lin + (degree >= 2 ? lin * (lin + 1) / 2 : 0) + (profile ? 1 : 0);
    }

    void raw(std::span<const double> x, int n_modes, const TerminalSpec& term, std::span<double> out) const {
        int i = 0;
        for (int n = 0; n < modes; ++n) out[i++] = x[n];
        for (int n = 0; n < modes; ++n) out[i++] = x[n_modes + n];
        if (!lin_mean.empty()) {
            for (int q = 0; q < 2 * modes; ++q) out[q] = (out[q] - lin_mean[q]) / lin_scale[q];
        }
        if (degree >= 2) {
            const int lin = 2 * modes;
            for (int a = 0; a < lin; ++a)
                for (int b = a; b < lin; ++b) out[i++] = out[a] * out[b];
        }
        if (profile) {
            double m = 0.0;
            for (std::size_t q = 0; q < profile_coef.size(); ++q) m += profile_coef[q] * x[q];
            out[i++] = term.gaussian_mean(m, profile_var);
        }
    }

    /// [1, standardized kept features].
    int size() const {
        int d = 1;
        for (char k : keep) d += k ? 1 : 0;
        return d;
    }

    void features(std::span<const double> x, int n_modes, const TerminalSpec& term, std::span<double> raw_buf,
                  std::span<double> out) const {
        raw(x, n_modes, term, raw_buf);
        out[0] = 1.0;
        int j = 1;
        for (std::size_t i = 0; i < keep.size(); ++i) {
            if (keep[i]) out[j++] = (raw_buf[i] - mean[i]) / scale[i];
        }
    }
};

struct SliceDiagnostics {
    double t = 0.0;
    int features = 1;
    double condition = 1.0;
    double mean_y = 0.0;
    std::vector<double> mean_z;
};

/// LSMC solution on one set of reference paths.
struct BsdeSolution {
    ModeBasis basis;
    SimConfig cfg;
    DriftSpec drift;
    GeneratorSpec gen;
    std::shared_ptr<const TerminalSpec> term;
    std::shared_ptr<const PathBundle> bundle;

    std::vector<double> Y;  // [path][time], steps + 1 slices; the last is φ(X_T)
    std::vector<double> Z;  // [path][step][mode]
    double y0 = 0.0;        // Y_s = v(s, x)
    double y0_stderr = 0.0;
    std::vector<double> z0;  // Z at the initial time, per mode
    std::vector<double> z0_stderr;
    std::vector<double> multistep0;  // per-path multistep target at the initial time

    std::vector<FeatureMap> maps;                 // per step k >= 1
    std::vector<Eigen::VectorXd> y_coef;          // per step
    std::vector<Eigen::MatrixXd> z_coef;          // per step, features x modes
    std::vector<SliceDiagnostics> diagnostics;    // per time slice
    std::string basis_description;

    int steps() const { return cfg.steps; }
    int N() const { return basis.size(); }
    double y(std::int64_t p, int k) const { return Y[static_cast<std::size_t>(p) * (cfg.steps + 1) + k]; }
    std::span<const double> z(std::int64_t p, int k) const {
        return std::span<const double>(Z).subspan((static_cast<std::size_t>(p) * cfg.steps + k) * N(),
                                                   static_cast<std::size_t>(N()));
    }

    /// Fitted v(t_k, x); the terminal slice evaluates φ.
    double value_at(int k, std::span<const double> x) const {
        if (k == cfg.steps) return (*term)(x);
        if (k == 0) return y0;
        std::vector<double> raw(static_cast<std::size_t>(maps[k].raw_size())), f(static_cast<std::size_t>(maps[k].size()));
        maps[k].features(x, N(), *term, raw, f);
        return Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size())).dot(y_coef[k]);
    }

    /// Fitted Z(t_k, x) for k < steps.
    std::vector<double> z_at(int k, std::span<const double> x) const {
        if (k == 0) return z0;
        std::vector<double> raw(static_cast<std::size_t>(maps[k].raw_size())), f(static_cast<std::size_t>(maps[k].size()));
        maps[k].features(x, N(), *term, raw, f);
        const Eigen::Map<const Eigen::RowVectorXd> fr(f.data(), static_cast<Eigen::Index>(f.size()));
        const Eigen::RowVectorXd zr = fr * z_coef[k];
        return std::vector<double>(zr.data(), zr.data() + zr.size());
    }
};

namespace detail {

// Per-step conditional variance of ⟨c, X_T⟩ and the projection rows, for the
// driftless scheme on the path grid.
struct ProfileData {
    std::vector<std::vector<double>> coef;  // per time slice, length 2N
    std::vector<double> var;                // per time slice, Var(⟨c, X_T⟩ | X_k)
};

inline ProfileData profile_data(const PathSimulator& sim, const TestFunctional& f) {
    const ModeBasis& basis = sim.basis();
    const SimConfig& cfg = sim.config();
    const int n_modes = basis.size();
    const HVector& c = f.direction();
    ProfileData out;
    out.coef.resize(static_cast<std::size_t>(cfg.steps) + 1);
    out.var.assign(static_cast<std::size_t>(cfg.steps) + 1, 0.0);
    std::vector<double> step_var(static_cast<std::size_t>(cfg.steps), 0.0);
    for (int k = 0; k <= cfg.steps; ++k) {
        const double remaining = cfg.t_end - cfg.time(k);
        std::vector<double>& row = out.coef[k];
        row.assign(2 * static_cast<std::size_t>(n_modes), 0.0);
        for (int n = 0; n < n_modes; ++n) {
            const Mat2 e = semigroup_block(basis, n, std::max(remaining, 0.0));
            const double w1 = basis.u_weight[n] * basis.u_weight[n] * c.c1[n];
            const double w2 = basis.v_weight[n] * basis.v_weight[n] * c.c2[n];
            // ĉ^T E
            row[n] = w1 * e.a00 + w2 * e.a10;
            row[n_modes + n] = w1 * e.a01 + w2 * e.a11;
        }
    }
    for (int k = 0; k < cfg.steps; ++k) {
        const std::vector<double>& row = out.coef[k + 1];
        double v = 0.0;
        for (int n = 0; n < n_modes; ++n) {
            const auto& l = sim.kernels()[n].chol;
            // conv = [[l1, l2, 0], [l3, l4, l5]] z
            const double a = row[n], b = row[n_modes + n];
            const double g0 = a * l[1] + b * l[3], g1 = a * l[2] + b * l[4], g2 = b * l[5];
            v += g0 * g0 + g1 * g1 + g2 * g2;
        }
        const double sig = sim.step_sigma(k);
        step_var[k] = sig * sig * v;
    }
    for (int k = cfg.steps - 1; k >= 0; --k) out.var[k] = out.var[k + 1] + step_var[k];
    return out;
}

inline bool wants_profile(const BasisOptions& opt, const TestFunctional& f, int n_modes) {
    if (opt.profile == BasisOptions::Profile::On) return true;
    if (opt.profile == BasisOptions::Profile::Off) return false;
    const bool low_poly = f.form() == FunctionalForm::Linear || (f.form() == FunctionalForm::Quadratic && opt.degree >= 2) ||
                          (f.form() == FunctionalForm::PolyGrowth && f.growth() <= opt.degree);
    if (!low_poly) return true;
    // a polynomial profile is already spanned unless it reaches modes outside the basis
    const int used = std::min(n_modes, opt.max_modes);
    for (int n = used; n < n_modes; ++n) {
        if (f.direction().c1[n] != 0.0 || f.direction().c2[n] != 0.0) return true;
    }
    return false;
}

struct Gram {
    Eigen::MatrixXd g;
    void merge(const Gram& o) {
        if (o.g.size() == 0) return;
        if (g.size() == 0) {
            g = o.g;
        } else {
            g += o.g;
        }
    }
};

// Σ_p rows_p rows_p^T accumulated per chunk and merged in chunk order.
inline Eigen::MatrixXd chunked_gram(const Eigen::MatrixXd& rows) {
    const std::int64_t total = rows.rows();
    const std::int64_t chunks = (total + kPathChunk - 1) / kPathChunk;
    std::vector<Eigen::MatrixXd> slots(static_cast<std::size_t>(chunks));
    for_each_chunk(total, [&](std::int64_t c, std::int64_t begin, std::int64_t end) {
        const auto block = rows.middleRows(begin, end - begin);
        slots[static_cast<std::size_t>(c)] = block.transpose() * block;
    });
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(rows.cols(), rows.cols());
    for (const auto& s : slots) out += s;
    return out;
}

inline Eigen::MatrixXd chunked_cross(const Eigen::MatrixXd& rows, const Eigen::MatrixXd& targets) {
    const std::int64_t total = rows.rows();
    const std::int64_t chunks = (total + kPathChunk - 1) / kPathChunk;
    std::vector<Eigen::MatrixXd> slots(static_cast<std::size_t>(chunks));
    for_each_chunk(total, [&](std::int64_t c, std::int64_t begin, std::int64_t end) {
        slots[static_cast<std::size_t>(c)] = rows.middleRows(begin, end - begin).transpose() * targets.middleRows(begin, end - begin);
    });
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(rows.cols(), targets.cols());
    for (const auto& s : slots) out += s;
    return out;
}

}  // namespace detail

/// Backward LSMC on reference paths. The multistep target for Y at step k is
/// φ(X_T) + Σ_{j>=k} Δt F_j with F_j = ψ(t_j, X_j, Ŷ_{j+1}, Ẑ_j) + Ẑ_j σ⁻¹ B̄(X_j);
/// Z_k regresses (Ŷ_{k+1} - c(X_k)) ΔW_k / Δt where c is the regression of Ŷ_{k+1}
/// on X_k, a control variate with no effect on the conditional mean. The initial
/// slice, where X_s = x is deterministic, uses sample means.
inline BsdeSolution solve_lsmc(const ModeBasis& basis, const SimConfig& cfg, const DriftSpec& drift, const HVector& x0,
                               const GeneratorSpec& gen, const TerminalSpec& term, const BasisOptions& opt = {}) {
    require(check_trace_condition(basis.params), ErrorCode::InvalidParams, "trace condition fails for the model");
    require(opt.degree == 1 || opt.degree == 2, ErrorCode::InvalidParams, "regression degree must be 1 or 2");
    require(opt.max_modes >= 1, ErrorCode::InvalidParams, "regression needs at least one mode");
    validate_drift(basis, drift);
    validate_generator(gen, basis.size());
    validate_terminal(basis, term);

    const PathSimulator sim(basis, cfg);
    BsdeSolution sol;
    sol.basis = basis;
    sol.cfg = cfg;
    sol.drift = drift;
    sol.gen = gen;
    sol.term = std::make_shared<TerminalSpec>(term);
    sol.bundle = std::make_shared<PathBundle>(sim.simulate(x0, nullptr));
    const PathBundle& bundle = *sol.bundle;

    const int n_modes = basis.size();
    const int K = cfg.steps;
    const std::int64_t M = cfg.M;
    const double dt = cfg.dt();
    const std::size_t yw = static_cast<std::size_t>(K) + 1;
    sol.Y.assign(static_cast<std::size_t>(M) * yw, 0.0);
    sol.Z.assign(static_cast<std::size_t>(M) * K * n_modes, 0.0);
    sol.maps.resize(static_cast<std::size_t>(K));
    sol.y_coef.resize(static_cast<std::size_t>(K));
    sol.z_coef.resize(static_cast<std::size_t>(K));
    sol.diagnostics.resize(yw);

    const bool use_profile = detail::wants_profile(opt, term.f, n_modes);
    const detail::ProfileData prof = use_profile ? detail::profile_data(sim, term.f) : detail::ProfileData{};
    const int used_modes = std::min(n_modes, opt.max_modes);
    {
        char buf[160];
        std::snprintf(buf, sizeof buf, "monomials of degree <= %d in the first %d modes of both components%s", opt.degree,
                      used_modes, use_profile ? " + conditional-expectation profile of phi" : "");
        sol.basis_description = buf;
    }

    // multistep target, advanced backwards in place
    std::vector<double> target(static_cast<std::size_t>(M));
    for (std::int64_t p = 0; p < M; ++p) {
        const double v = term(bundle.state(p, K));
        target[p] = v;
        sol.Y[static_cast<std::size_t>(p) * yw + K] = v;
    }
    {
        SliceDiagnostics& d = sol.diagnostics[K];
        d.t = cfg.time(K);
        Moments m;
        for (double v : target) m.add(v);
        d.mean_y = m.mean;
        d.mean_z.assign(static_cast<std::size_t>(n_modes), 0.0);
    }

    auto sigma_inv = [&](int k) { return 1.0 / sim.step_sigma(k); };
    const bool with_drift = !drift.is_zero();

    // F_k per path given Ẑ_k (already stored)
    auto add_generator = [&](int k) {
        for_each_chunk(M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
            std::vector<double> b(static_cast<std::size_t>(n_modes));
            for (std::int64_t p = begin; p < end; ++p) {
                const auto x = bundle.state(p, k);
                const auto z = sol.z(p, k);
                double f = gen(cfg.time(k), x, sol.y(p, k + 1), z);
                if (with_drift) {
                    drift.evaluate(x, b);
                    double zb = 0.0;
                    for (int n = 0; n < n_modes; ++n) zb += z[n] * b[n];
                    f += zb * sigma_inv(k);
                }
                target[p] += dt * f;
            }
        });
    };

    for (int k = K - 1; k >= 1; --k) {
        FeatureMap& map = sol.maps[k];
        map.modes = used_modes;
        map.degree = opt.degree;
        map.profile = use_profile;
        if (use_profile) {
            map.profile_coef = prof.coef[k];
            map.profile_var = prof.var[k];
        }
        const int raw_n = map.raw_size();
        {
            const int lin = 2 * used_modes;
            std::vector<Moments> lm(static_cast<std::size_t>(lin));
            for (std::int64_t p = 0; p < M; ++p) {
                const auto x = bundle.state(p, k);
                for (int n = 0; n < used_modes; ++n) {
                    lm[n].add(x[n]);
                    lm[used_modes + n].add(x[n_modes + n]);
                }
            }
            map.lin_mean.resize(static_cast<std::size_t>(lin));
            map.lin_scale.resize(static_cast<std::size_t>(lin));
            for (int q = 0; q < lin; ++q) {
                const double sd = std::sqrt(lm[q].variance());
                map.lin_mean[q] = lm[q].mean;
                map.lin_scale[q] = sd > 0.0 ? sd : 1.0;
            }
        }
        // standardization
        Eigen::MatrixXd raw(M, raw_n);
        for_each_chunk(M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
            std::vector<double> r(static_cast<std::size_t>(raw_n));
            for (std::int64_t p = begin; p < end; ++p) {
                map.raw(bundle.state(p, k), n_modes, term, r);
                for (int i = 0; i < raw_n; ++i) raw(p, i) = r[i];
            }
        });
        map.mean.assign(static_cast<std::size_t>(raw_n), 0.0);
        map.scale.assign(static_cast<std::size_t>(raw_n), 1.0);
        map.keep.assign(static_cast<std::size_t>(raw_n), 1);
        for (int i = 0; i < raw_n; ++i) {
            Moments m;
            for (std::int64_t p = 0; p < M; ++p) m.add(raw(p, i));
            map.mean[i] = m.mean;
            const double sd = std::sqrt(m.variance());
            if (!(sd > 1e-12 * (1.0 + std::abs(m.mean)))) {
                map.keep[i] = 0;
            } else {
                map.scale[i] = sd;
            }
        }
        const int d = map.size();
        Eigen::MatrixXd F(M, d);
        for (std::int64_t p = 0; p < M; ++p) {
            F(p, 0) = 1.0;
            int j = 1;
            for (int i = 0; i < raw_n; ++i) {
                if (map.keep[i]) F(p, j++) = (raw(p, i) - map.mean[i]) / map.scale[i];
            }
        }
        raw.resize(0, 0);

        Eigen::MatrixXd gram = detail::chunked_gram(F) / static_cast<double>(M);
        // the profile feature is dropped on slices where the polynomials already span it
        if (map.profile && map.keep.back() && d > 2) {
            const Eigen::Index q = d - 1;
            const Eigen::VectorXd g = gram.col(q).head(q);
            const double schur = gram(q, q) - g.dot(gram.topLeftCorner(q, q).ldlt().solve(g));
            if (!(schur > 1e-9 * gram(q, q))) {
                map.keep.back() = 0;
                F.conservativeResize(Eigen::NoChange, q);
                gram.conservativeResize(q, q);
            }
        }
        const int dim = map.size();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
        const double lo = eig.eigenvalues().minCoeff(), hi = eig.eigenvalues().maxCoeff();
        const double cond = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
        if (!(cond <= opt.max_condition)) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "normal equations at step %d have condition number %.3g", k, cond);
            fail(ErrorCode::IllConditionedRegression, buf);
        }
        const Eigen::LDLT<Eigen::MatrixXd> solver(gram);

        // preliminary regression of Ŷ_{k+1}, then Z
        Eigen::MatrixXd next(M, 1);
        for (std::int64_t p = 0; p < M; ++p) next(p, 0) = sol.y(p, k + 1);
        const Eigen::VectorXd cv = solver.solve(detail::chunked_cross(F, next) / static_cast<double>(M));
        Eigen::MatrixXd zt(M, n_modes);
        for_each_chunk(M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
            for (std::int64_t p = begin; p < end; ++p) {
                const double resid = next(p, 0) - F.row(p).dot(cv);
                const auto dw = bundle.increment(p, k);
                for (int n = 0; n < n_modes; ++n) zt(p, n) = resid * dw[n] / dt;
            }
        });
        sol.z_coef[k] = solver.solve(detail::chunked_cross(F, zt) / static_cast<double>(M));
        zt.resize(0, 0);
        for_each_chunk(M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
            for (std::int64_t p = begin; p < end; ++p) {
                const Eigen::RowVectorXd zr = F.row(p) * sol.z_coef[k];
                double* z = sol.Z.data() + (static_cast<std::size_t>(p) * K + k) * n_modes;
                for (int n = 0; n < n_modes; ++n) z[n] = zr[n];
            }
        });

        add_generator(k);
        Eigen::MatrixXd tgt = Eigen::Map<const Eigen::VectorXd>(target.data(), M);
        sol.y_coef[k] = solver.solve(detail::chunked_cross(F, tgt) / static_cast<double>(M));
        Moments my;
        std::vector<Moments> mz(static_cast<std::size_t>(n_modes));
        for (std::int64_t p = 0; p < M; ++p) {
            const double v = F.row(p).dot(sol.y_coef[k]);
            sol.Y[static_cast<std::size_t>(p) * yw + k] = v;
            my.add(v);
            for (int n = 0; n < n_modes; ++n) mz[n].add(sol.z(p, k)[n]);
        }
        SliceDiagnostics& diag = sol.diagnostics[k];
        diag.t = cfg.time(k);
        diag.features = dim;
        diag.condition = cond;
        diag.mean_y = my.mean;
        diag.mean_z.resize(static_cast<std::size_t>(n_modes));
        for (int n = 0; n < n_modes; ++n) diag.mean_z[n] = mz[n].mean;
    }

    // initial slice: constant basis
    {
        Moments next;
        for (std::int64_t p = 0; p < M; ++p) next.add(sol.y(p, 1));
        std::vector<Moments> zm(static_cast<std::size_t>(n_modes));
        for (std::int64_t p = 0; p < M; ++p) {
            const auto dw = bundle.increment(p, 0);
            for (int n = 0; n < n_modes; ++n) zm[n].add((sol.y(p, 1) - next.mean) * dw[n] / dt);
        }
        sol.z0.resize(static_cast<std::size_t>(n_modes));
        sol.z0_stderr.resize(static_cast<std::size_t>(n_modes));
        for (int n = 0; n < n_modes; ++n) {
            sol.z0[n] = zm[n].mean;
            sol.z0_stderr[n] = zm[n].stderr_mean();
        }
        for (std::int64_t p = 0; p < M; ++p) {
            double* z = sol.Z.data() + static_cast<std::size_t>(p) * K * n_modes;
            for (int n = 0; n < n_modes; ++n) z[n] = sol.z0[n];
        }
        add_generator(0);
        Moments y;
        for (double v : target) y.add(v);
        sol.y0 = y.mean;
        sol.y0_stderr = y.stderr_mean();
        for (std::int64_t p = 0; p < M; ++p) sol.Y[static_cast<std::size_t>(p) * yw] = sol.y0;
        sol.multistep0 = target;
        SliceDiagnostics& diag = sol.diagnostics[0];
        diag.t = cfg.time(0);
        diag.features = 1;
        diag.condition = 1.0;
        diag.mean_y = sol.y0;
        diag.mean_z = sol.z0;
    }
    return sol;
}

/// Per-time CSV: t, meanY, meanZ per mode, regression condition number.
inline void write_solution_csv(std::ostream& os, const BsdeSolution& sol) {
    os << "t,mean_y";
    for (int n = 1; n <= sol.N(); ++n) os << ",mean_z" << n;
    os << ",condition\n";
    char buf[64];
    for (const auto& d : sol.diagnostics) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", d.t, d.mean_y);
        os << buf;
        for (double z : d.mean_z) {
            std::snprintf(buf, sizeof buf, ",%.17g", z);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, ",%.17g\n", d.condition);
        os << buf;
    }
}

/// Controls ũ_{h,s,r} for every grid node r = t_j, j = 1..steps.
struct ControlFamily {
    std::vector<Control> controls;
};

inline ControlFamily build_control_family(const ModeBasis& basis, ControlVariant variant, const HVector& h,
                                          const SimConfig& cfg) {
    ControlFamily fam;
    fam.controls.reserve(static_cast<std::size_t>(cfg.steps));
    for (int j = 1; j <= cfg.steps; ++j) fam.controls.push_back(build_control(basis, {variant, h, cfg.s, cfg.time(j)}, 2));
    return fam;
}

struct SemilinearReport {
    GradientReport report;
    double terminal_term = 0.0;
    double generator_term = 0.0;
    double drift_term = 0.0;
};

/// Three-term semilinear Bismut estimate of ⟨∇_x Y_s, h⟩ on the solution's paths:
///   E[(φ(X_T) - c) δ_T] + Σ_j Δt E[(ψ_j - c_j) δ_{t_j}] + Σ_j Δt E[(Ẑ_j σ⁻¹B̄_j - c'_j) δ_{t_j}]
/// with δ_r the Wiener integral of ũ_{h,s,r} and the c's sample means (E δ_r = 0).
/// The left-point node t_0 = s carries no weight, so its term is taken at t_1.
inline SemilinearReport semilinear_bismut(const ModeBasis& basis, const BsdeSolution& sol, const ControlFamily& fam,
                                          const HVector& h) {
    const SimConfig& cfg = sol.cfg;
    const int K = cfg.steps, n_modes = basis.size();
    require(static_cast<int>(fam.controls.size()) == K, ErrorCode::WindowMismatch, "control family size differs from steps");
    std::vector<std::vector<double>> mids;
    mids.reserve(static_cast<std::size_t>(K));
    for (int j = 1; j <= K; ++j) {
        const Control& c = fam.controls[j - 1];
        require(std::abs(c.s() - cfg.s) < 1e-12 && std::abs(c.t() - cfg.time(j)) < 1e-12, ErrorCode::WindowMismatch,
                "control family window does not match the grid");
        require(norm_H(basis, c.request().h - h) <= 1e-12 * (1.0 + norm_H(basis, h)), ErrorCode::InvalidParams,
                "control family was built for a different direction");
        mids.push_back(control_midpoints(c, cfg.s, cfg.t_end, K));
    }
    const PathBundle& bundle = *sol.bundle;
    const std::int64_t M = cfg.M;
    const double dt = cfg.dt();
    const bool with_drift = !sol.drift.is_zero();

    // per-path terms: terminal, generator part, drift part; weights δ_{t_j}
    std::vector<double> phi(static_cast<std::size_t>(M));
    std::vector<double> psi(static_cast<std::size_t>(M) * (K + 1), 0.0), bz(static_cast<std::size_t>(M) * (K + 1), 0.0);
    std::vector<double> delta(static_cast<std::size_t>(M) * (K + 1), 0.0);
    for_each_chunk(M, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
        std::vector<double> b(static_cast<std::size_t>(n_modes));
        for (std::int64_t p = begin; p < end; ++p) {
            phi[p] = sol.y(p, K);
            const auto dw = bundle.increments(p);
            for (int j = 1; j <= K; ++j) {
                delta[static_cast<std::size_t>(p) * (K + 1) + j] =
                    wiener_integral(std::span<const double>(mids[j - 1]).first(static_cast<std::size_t>(j) * n_modes),
                                    dw.first(static_cast<std::size_t>(j) * n_modes));
            }
            for (int j = 1; j < K; ++j) {
                const auto x = bundle.state(p, j);
                const auto z = sol.z(p, j);
                psi[static_cast<std::size_t>(p) * (K + 1) + j] = sol.gen(cfg.time(j), x, sol.y(p, j + 1), z);
                if (with_drift) {
                    sol.drift.evaluate(x, b);
                    double v = 0.0;
                    for (int n = 0; n < n_modes; ++n) v += z[n] * b[n];
                    bz[static_cast<std::size_t>(p) * (K + 1) + j] = v / basis.params.sigma(cfg.time(j) + 0.5 * dt);
                }
            }
        }
    });
    auto column_mean = [&](const std::vector<double>& v, int j) {
        double s = 0.0;
        for (std::int64_t p = 0; p < M; ++p) s += v[static_cast<std::size_t>(p) * (K + 1) + j];
        return s / static_cast<double>(M);
    };
    double phi_mean = 0.0;
    for (double v : phi) phi_mean += v;
    phi_mean /= static_cast<double>(M);
    std::vector<double> psi_mean(static_cast<std::size_t>(K + 1)), bz_mean(static_cast<std::size_t>(K + 1));
    for (int j = 1; j < K; ++j) {
        psi_mean[j] = column_mean(psi, j);
        bz_mean[j] = column_mean(bz, j);
    }
    Moments total, term_t, term_g, term_d;
    for (std::int64_t p = 0; p < M; ++p) {
        const std::size_t row = static_cast<std::size_t>(p) * (K + 1);
        const double tt = (phi[p] - phi_mean) * delta[row + K];
        double tg = 0.0, td = 0.0;
        for (int j = 0; j < K; ++j) {
            const int jj = std::max(j, 1);
            if (jj >= K) continue;
            tg += dt * (psi[row + jj] - psi_mean[jj]) * delta[row + jj];
            td += dt * (bz[row + jj] - bz_mean[jj]) * delta[row + jj];
        }
        term_t.add(tt);
        term_g.add(tg);
        term_d.add(td);
        total.add(tt + tg + td);
    }
    SemilinearReport out;
    out.report = {total.mean, total.stderr_mean(), M, "semilinear-bismut", 0.0, cfg.s, cfg.t_end};
    out.terminal_term = term_t.mean;
    out.generator_term = term_g.mean;
    out.drift_term = term_d.mean;
    out.report.bound = sol.term->growth_constant() * fam.controls.back().l2norm();
    return out;
}

/// Relative L² distance between the regression Z at the initial time and σ(s) times
/// the gradients along J e_n (one entry per retained mode).
inline double z_identification_check(const BsdeSolution& sol, std::span<const double> grad_along_j) {
    require(static_cast<int>(grad_along_j.size()) == sol.N(), ErrorCode::InvalidParams, "one gradient per mode expected");
    const double sig = sol.basis.params.sigma(sol.cfg.s);
    double num = 0.0, den = 0.0;
    for (int n = 0; n < sol.N(); ++n) {
        const double target = sig * grad_along_j[n];
        num += (sol.z0[n] - target) * (sol.z0[n] - target);
        den += target * target;
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num / den);
}

/// Closed-form Z at (s, x) for ψ = 0 and linear φ = ⟨c, ·⟩: Z_n = σ(s) ⟨c, e^{(T-s)A} J e_n⟩_H.
inline std::vector<double> linear_terminal_z(const ModeBasis& basis, const HVector& c, double s, double T) {
    std::vector<double> z(static_cast<std::size_t>(basis.size()));
    for (int n = 0; n < basis.size(); ++n) {
        const Mat2 e = semigroup_block(basis, n, T - s);
        z[n] = basis.params.sigma(s) * (basis.u_weight[n] * basis.u_weight[n] * c.c1[n] * e.a01 +
                                        basis.v_weight[n] * basis.v_weight[n] * c.c2[n] * e.a11);
    }
    return z;
}

/// Slope of log |⟨∇_x Y_s, h⟩| against log(T - s), h from the U-vector a, each point
/// from a fresh LSMC solve on (s, T) and the semilinear Bismut estimate.
inline ScalingFit y_gradient_scaling(const ModeBasis& basis, const SimConfig& base, const DriftSpec& drift,
                                     const HVector& x, const GeneratorSpec& gen, const TerminalSpec& term,
                                     ControlVariant variant, std::span<const double> a, std::span<const double> s_grid,
                                     const BasisOptions& opt = {}) {
    const HVector h = direction_from_u(basis, variant, a);
    ScalingFit fit;
    for (double s : s_grid) {
        SimConfig cfg = base;
        cfg.s = s;
        const BsdeSolution sol = solve_lsmc(basis, cfg, drift, x, gen, term, opt);
        const ControlFamily fam = build_control_family(basis, variant, h, cfg);
        const SemilinearReport r = semilinear_bismut(basis, sol, fam, h);
        fit.t.push_back(cfg.t_end - s);
        fit.norm.push_back(std::abs(r.report.estimate));
    }
    const LineFit line = fit_loglog(fit.t, fit.norm);
    fit.slope = line.slope;
    fit.intercept = line.intercept;
    return fit;
}

struct ProbePoint {
    double s = 0.0;
    HVector x;
};

struct ResidualRecord {
    double s = 0.0;
    double value = 0.0;     // v(s, x) from LSMC
    double residual = 0.0;  // v - P̂φ - ∫P̂[ψ + Z σ⁻¹B̄]
    double stderr = 0.0;
    double budget = 0.0;    // requested tolerance
};

/// R(s, x) = v(s, x) - P̂_{s,T}φ(x) - ∫_s^T P̂_{s,t}[ψ(t, ·, v, ∇v G) + ∇v G σ⁻¹ B̄](x) dt with v and
/// ∇v G taken from the fitted regressions and evaluated on fresh paths; the time integral
/// is the left-point sum on the path grid.
inline std::vector<ResidualRecord> kolmogorov_residual(const ModeBasis& basis, const SimConfig& base, const DriftSpec& drift,
                                                       const GeneratorSpec& gen, const TerminalSpec& term,
                                                       std::span<const ProbePoint> probes, double tolerance,
                                                       const BasisOptions& opt = {}) {
    require(tolerance > 0.0, ErrorCode::InvalidParams, "tolerance must be > 0");
    std::vector<ResidualRecord> out;
    for (const ProbePoint& probe : probes) {
        SimConfig cfg = base;
        cfg.s = probe.s;
        const BsdeSolution sol = solve_lsmc(basis, cfg, drift, probe.x, gen, term, opt);
        SimConfig fresh = cfg;
        fresh.seed = mix64(cfg.seed ^ 0x5bd1e995ULL);
        const PathSimulator sim(basis, fresh);
        const int K = cfg.steps, n_modes = basis.size();
        const double dt = cfg.dt();
        const bool with_drift = !drift.is_zero();
        const Moments m = stream_paths<Moments>(sim, probe.x, nullptr, [&](Moments& acc, std::int64_t, std::span<const double>,
                                                                           std::span<const double> xs) {
            auto state = [&](int k) { return xs.subspan(static_cast<std::size_t>(k) * 2 * n_modes, 2 * static_cast<std::size_t>(n_modes)); };
            double sum = term(state(K));
            std::vector<double> b(static_cast<std::size_t>(n_modes));
            for (int k = 0; k < K; ++k) {
                const std::vector<double> z = sol.z_at(k, state(k));
                double f = gen(cfg.time(k), state(k), sol.value_at(k + 1, state(k + 1)), z);
                if (with_drift) {
                    drift.evaluate(state(k), b);
                    double zb = 0.0;
                    for (int n = 0; n < n_modes; ++n) zb += z[n] * b[n];
                    f += zb / sim.step_sigma(k);
                }
                sum += dt * f;
            }
            acc.add(sum);
        });
        ResidualRecord r;
        r.s = probe.s;
        r.value = sol.y0;
        r.residual = sol.y0 - m.mean;
        r.stderr = std::hypot(sol.y0_stderr, m.stderr_mean());
        r.budget = tolerance;
        if (3.0 * r.stderr > tolerance) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "Monte Carlo error 3*%.3g exceeds the tolerance %.3g at s = %.6g", r.stderr,
                          tolerance, probe.s);
            fail(ErrorCode::BudgetExceeded, buf);
        }
        out.push_back(r);
    }
    return out;
}

inline void write_residual_records(std::ostream& os, std::span<const ResidualRecord> records) {
    char buf[200];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "s=%.17g value=%.17g residual=%.17g stderr=%.17g budget=%.17g\n", r.s, r.value,
                      r.residual, r.stderr, r.budget);
        os << buf;
    }
}

}  // namespace bismut
