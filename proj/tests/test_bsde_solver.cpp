#include <gtest/gtest.h>

#include <numbers>
#include <sstream>

#include "bismut/bsde_solver.hpp"
#include "oracles.hpp"

using namespace bismut;

namespace {

ModeBasis wave(int n, double sigma = 1.0) {
    ModelParams p;
    p.N = n;
    p.sigma.base = sigma;
    return build_basis(p);
}

ModeBasis damped(int n) {
    ModelParams p;
    p.kind = ModelKind::Damped;
    p.N = n;
    p.alpha = 0.75;
    p.rho = 1.1;
    return build_basis(p);
}

double combined(double a, double b) { return std::hypot(a, b); }

// Wave generator block built independently of the library.
oracle::M2 wave_block(double mu) { return {{{0.0, 1.0}, {-mu, 0.0}}}; }

// ĉ^T e^{τA} per mode, ĉ the H-weighted direction, wave model.
std::vector<std::array<double, 2>> wave_row(const ModeBasis& b, const HVector& c, double tau) {
    std::vector<std::array<double, 2>> out(static_cast<std::size_t>(b.size()));
    for (int n = 0; n < b.size(); ++n) {
        const oracle::M2 e = oracle::expm(wave_block(b.mu[n]), tau);
        const double w1 = c.c1[n], w2 = c.c2[n] / b.mu[n];
        out[n] = {w1 * e[0][0] + w2 * e[1][0], w1 * e[0][1] + w2 * e[1][1]};
    }
    return out;
}

// Var(⟨c, X_b⟩ | X_a) for the wave model with σ ≡ 1, by quadrature of the exact covariance.
double wave_conditional_variance(const ModeBasis& b, const HVector& c, double a, double bt, double T) {
    return oracle::gauss5(
        [&](double r) {
            double v = 0.0;
            const auto row = wave_row(b, c, T - r);
            for (const auto& q : row) v += q[1] * q[1];
            return v;
        },
        a, bt, 64);
}

double wave_mean_projection(const ModeBasis& b, const HVector& c, const HVector& x, double tau) {
    const auto row = wave_row(b, c, tau);
    double m = 0.0;
    for (int n = 0; n < b.size(); ++n) m += row[n][0] * x.c1[n] + row[n][1] * x.c2[n];
    return m;
}

// E g(m + sqrt(v) Z) by Gauss-Legendre on [-9, 9].
template <class G>
double gaussian_expectation(G&& g, double m, double v) {
    const double sd = std::sqrt(std::max(v, 0.0));
    if (sd == 0.0) return g(m);
    return oracle::gauss5([&](double z) { return g(m + sd * z) * std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi); },
                          -9.0, 9.0, 48);
}

TerminalSpec terminal(const ModeBasis& b, FunctionalForm form, HVector c, int K = 1) {
    return TerminalSpec{TestFunctional(b, form, std::move(c), K)};
}

}  // namespace

TEST(BsdeValidation, RejectsBadSpecs) {
    const ModeBasis b = wave(2);
    const HVector x0({0.3, 0.0}, {0.1, 0.0});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedSmooth, HVector({1.0, 0.0}, {0.0, 0.0}));
    GeneratorSpec gen;
    gen.form = GeneratorForm::LipschitzNonlinear;
    gen.ly = 0.5;
    gen.lipschitz = 0.1;
    try {
        solve_lsmc(b, {4, 256, 1, 0.0, 1.0}, DriftSpec{}, x0, gen, term);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonLipschitzGenerator);
    }
    gen.lipschitz = -1.0;
    BasisOptions opt;
    opt.max_condition = 1.0;
    try {
        solve_lsmc(b, {4, 256, 1, 0.0, 1.0}, DriftSpec{}, x0, gen, term, opt);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IllConditionedRegression);
    }
    ModelParams p;
    p.N = 2;
    p.delta = 0.8;
    const ModeBasis rough = build_basis(p);
    try {
        solve_lsmc(rough, {4, 256, 1, 0.0, 1.0}, DriftSpec{}, x0, GeneratorSpec{},
                   terminal(rough, FunctionalForm::BoundedSmooth, HVector({1.0, 0.0}, {0.0, 0.0})));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidParams);
    }
}

TEST(BsdeLsmc, TerminalSliceEqualsTerminalCondition) {
    const ModeBasis b = damped(3);
    const HVector x0({0.2, 0.1, 0.0}, {0.0, 0.3, 0.0});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedNonsmooth, HVector({1.0, 0.5, 0.2}, {0.3, 0.0, 0.1}));
    GeneratorSpec gen;
    gen.form = GeneratorForm::LipschitzNonlinear;
    gen.ly = 0.3;
    gen.lz = 0.2;
    gen.k0 = 0.1;
    const BsdeSolution sol = solve_lsmc(b, {8, 2000, 3, 0.0, 1.0}, DriftSpec{}, x0, gen, term);
    for (std::int64_t p = 0; p < sol.cfg.M; ++p) ASSERT_EQ(sol.y(p, 8), term(sol.bundle->state(p, 8)));
    EXPECT_NE(sol.basis_description.find("degree <= 2"), std::string::npos);
    std::ostringstream os;
    write_solution_csv(os, sol);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "t,mean_y,mean_z1,mean_z2,mean_z3,condition");
    for (int k = 1; k < 8; ++k) EXPECT_LT(sol.diagnostics[k].condition, 1e10);
}

TEST(BsdeLsmc, ZeroGeneratorIsConditionalExpectation) {
    const ModeBasis b = wave(2);
    const HVector x0({0.4, -0.2}, {0.3, 0.5});
    const HVector c({1.0, 0.5}, {0.6, 0.0});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedSmooth, c);
    const BsdeSolution sol = solve_lsmc(b, {16, 40000, 5, 0.0, 1.0}, DriftSpec{}, x0, GeneratorSpec{}, term);
    Moments plain;
    for (std::int64_t p = 0; p < sol.cfg.M; ++p) plain.add(term(sol.bundle->state(p, 16)));
    EXPECT_NEAR(sol.y0, plain.mean, 1e-12);
    // E cos(⟨c, X_T⟩) from the exact Gaussian law
    const double m = wave_mean_projection(b, c, x0, 1.0);
    const double v = wave_conditional_variance(b, c, 0.0, 1.0, 1.0);
    const double exact = std::exp(-0.5 * v) * std::cos(m);
    EXPECT_LE(std::abs(sol.y0 - exact), 3.0 * sol.y0_stderr);
}

TEST(BsdeLsmc, AffineGeneratorMatchesIntegratingFactor) {
    const double lambda = 0.5, T = 1.0;
    // scalar Picard iteration for c(t) = 1 + λ ∫_t^T c confirms the factor e^{λ(T-s)}
    const int grid = 2000;
    std::vector<double> cur(grid + 1, 1.0), next(grid + 1);
    for (int it = 0; it < 30; ++it) {
        double acc = 0.0;
        next[grid] = 1.0;
        for (int i = grid - 1; i >= 0; --i) {
            acc += 0.5 * (cur[i] + cur[i + 1]) * T / grid;
            next[i] = 1.0 + lambda * acc;
        }
        double diff = 0.0;
        for (int i = 0; i <= grid; ++i) diff = std::max(diff, std::abs(next[i] - cur[i]));
        cur.swap(next);
        if (diff < 1e-13) break;
    }
    EXPECT_NEAR(cur[0], std::exp(lambda * T), 1e-6);

    const ModeBasis b = damped(4);
    const HVector x0({0.5, 0.2, 0.0, 0.0}, {0.3, 0.0, 0.1, 0.0});
    const HVector c({1.0, 0.5, 0.0, 0.0}, {0.5, 0.2, 0.0, 0.0});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedSmooth, c);
    GeneratorSpec gen;
    gen.form = GeneratorForm::AffineY;
    gen.lambda = lambda;
    const SimConfig cfg{32, 30000, 7, 0.0, T};
    const BsdeSolution sol = solve_lsmc(b, cfg, DriftSpec{}, x0, gen, term);
    // E φ(X_T) by plain Monte Carlo on the same paths
    Moments plain;
    for (std::int64_t p = 0; p < cfg.M; ++p) plain.add(term(sol.bundle->state(p, cfg.steps)));
    const double exact = cur[0] * plain.mean;
    EXPECT_LE(std::abs(sol.y0 - exact) / std::abs(exact), 0.01);
}

TEST(BsdeLsmc, AgreesWithPicardOracle) {
    // ψ = 0.3 sin y, φ = cos⟨c, ·⟩ on two wave modes. Given X_k, the explicit scheme only
    // depends on the conditional mean of ⟨c, X_T⟩, so the Picard fixed point is computed
    // on a one-dimensional grid with Gaussian quadrature.
    const ModeBasis b = wave(2);
    const HVector x0({0.4, 0.1}, {0.2, -0.3});
    const HVector c({1.0, 0.4}, {0.5, 0.0});
    const int K = 8;
    const double T = 1.0, dt = T / K, ly = 0.3;
    std::vector<double> step_var(K);
    for (int k = 0; k < K; ++k) step_var[k] = wave_conditional_variance(b, c, k * dt, (k + 1) * dt, T);
    const double m0 = wave_mean_projection(b, c, x0, T);
    double total_var = 0.0;
    for (double v : step_var) total_var += v;
    const int G = 1601;
    const double lo = m0 - 10.0 * std::sqrt(total_var), hi = m0 + 10.0 * std::sqrt(total_var), hg = (hi - lo) / (G - 1);
    auto interp = [&](const std::vector<double>& u, double m) {
        const double q = std::clamp((m - lo) / hg, 0.0, G - 1.000001);
        const int i = static_cast<int>(q);
        return u[i] + (q - i) * (u[i + 1] - u[i]);
    };
    // Picard on slices: Y_k(m) = E[φ + Σ_{j>=k} Δt ψ(Y_{j+1}(m_{j+1})) | m_k = m]
    std::vector<std::vector<double>> Y(K + 1, std::vector<double>(G));
    for (int g = 0; g < G; ++g) Y[K][g] = std::cos(lo + g * hg);
    for (int k = 0; k < K; ++k) Y[k] = Y[K];
    for (int it = 0; it < 8; ++it) {
        std::vector<std::vector<double>> next = Y;
        double diff = 0.0;
        for (int k = K - 1; k >= 0; --k) {
            for (int g = 0; g < G; ++g) {
                const double m = lo + g * hg;
                double var = 0.0;
                for (int j = k; j < K; ++j) var += step_var[j];
                double val = std::exp(-0.5 * var) * std::cos(m);
                double v = 0.0;
                for (int j = k; j < K; ++j) {
                    v += step_var[j];
                    val += dt * gaussian_expectation([&](double mm) { return ly * std::sin(interp(Y[j + 1], mm)); }, m, v);
                }
                next[k][g] = val;
                diff = std::max(diff, std::abs(val - Y[k][g]));
            }
        }
        Y.swap(next);
        if (diff < 1e-8) break;
    }
    const double oracle_y0 = interp(Y[0], m0);

    GeneratorSpec gen;
    gen.form = GeneratorForm::LipschitzNonlinear;
    gen.ly = ly;
    const BsdeSolution sol = solve_lsmc(b, {K, 60000, 9, 0.0, T}, DriftSpec{}, x0, gen, terminal(b, FunctionalForm::BoundedSmooth, c));
    EXPECT_LE(std::abs(sol.y0 - oracle_y0), 3.0 * sol.y0_stderr) << sol.y0 << " vs " << oracle_y0;
}

TEST(BsdeLsmc, GrowthBoundHolds) {
    const ModeBasis b = wave(2);
    const HVector c({0.8, 0.3}, {0.4, 0.1});
    const TerminalSpec term = terminal(b, FunctionalForm::PolyGrowth, c, 2);
    GeneratorSpec gen;
    gen.form = GeneratorForm::LipschitzNonlinear;
    gen.ly = 0.2;
    gen.lz = 0.2;
    gen.k0 = 0.3;
    const HVector unit({0.6, 0.2}, {0.5, 0.4});
    std::vector<double> ratios;
    for (double scale : {0.0, 1.0, 4.0, 16.0}) {
        const HVector x = scale * unit;
        const BsdeSolution sol = solve_lsmc(b, {8, 4000, 2, 0.0, 1.0}, DriftSpec{}, x, gen, term);
        const double nx = norm_H(b, x);
        ratios.push_back(std::abs(sol.y0) / (1.0 + nx * nx));
    }
    const double fitted = *std::max_element(ratios.begin(), ratios.begin() + 2);
    for (double r : ratios) EXPECT_LE(r, 2.0 * fitted + 1.0);
}

TEST(BsdeLsmc, ComparisonIsMonotone) {
    const ModeBasis b = wave(2);
    const HVector x0({0.3, 0.0}, {0.1, 0.2});
    const HVector c({1.0, 0.0}, {0.5, 0.0});
    const SimConfig cfg{8, 5000, 4, 0.0, 1.0};
    const BsdeSolution low = solve_lsmc(b, cfg, DriftSpec{}, x0, GeneratorSpec{}, terminal(b, FunctionalForm::BoundedNonsmooth, c));
    TerminalSpec upper = terminal(b, FunctionalForm::BoundedSmooth, c);
    upper.scale = 0.5;
    upper.offset = 1.5;  // >= 1 >= clamp
    EXPECT_GE(solve_lsmc(b, cfg, DriftSpec{}, x0, GeneratorSpec{}, upper).y0, low.y0);
    TerminalSpec shifted = terminal(b, FunctionalForm::BoundedNonsmooth, c);
    shifted.offset = 0.01;
    EXPECT_GE(solve_lsmc(b, cfg, DriftSpec{}, x0, GeneratorSpec{}, shifted).y0, low.y0);
}

TEST(SemilinearBismut, ZeroGeneratorReducesToLinearBismut) {
    const ModeBasis b = damped(3);
    const HVector x0({0.2, 0.0, 0.1}, {0.1, 0.2, 0.0});
    const HVector c({1.0, 0.3, 0.0}, {0.4, 0.2, 0.1});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedSmooth, c);
    const std::vector<double> a{1.0, 0.5, 0.0};
    const HVector h = direction_from_u(b, ControlVariant::DampedJ, a);
    const SimConfig cfg{16, 40000, 12, 0.0, 1.0};
    const BsdeSolution sol = solve_lsmc(b, cfg, DriftSpec{}, x0, GeneratorSpec{}, term);
    const ControlFamily fam = build_control_family(b, ControlVariant::DampedJ, h, cfg);
    const SemilinearReport r = semilinear_bismut(b, sol, fam, h);
    EXPECT_EQ(r.generator_term, 0.0);
    EXPECT_EQ(r.drift_term, 0.0);
    const Control ctrl = build_control(b, {ControlVariant::DampedJ, h, 0.0, 1.0});
    const GradientReport lin = estimate_gradient_bismut(b, cfg, x0, term.f, ctrl, h);
    EXPECT_LE(std::abs(r.report.estimate - lin.estimate), 3.0 * combined(r.report.stderr, lin.stderr));
    // closed form for the smooth functional via the pathwise representation
    const GradientReport pw = estimate_gradient_pathwise(b, cfg, x0, term.f, h);
    EXPECT_LE(std::abs(r.report.estimate - pw.estimate), 3.0 * combined(r.report.stderr, pw.stderr));
}

TEST(SemilinearBismut, AffineGeneratorLinearTerminal) {
    const ModeBasis b = wave(2);
    const HVector x0({0.2, 0.1}, {0.0, 0.3});
    const HVector c({1.0, 0.5}, {0.8, 0.2});
    const double lambda = 0.5;
    GeneratorSpec gen;
    gen.form = GeneratorForm::AffineY;
    gen.lambda = lambda;
    const std::vector<double> a{1.0, 0.5};
    const HVector h = direction_from_u(b, ControlVariant::WaveJ, a);
    const SimConfig cfg{32, 40000, 21, 0.0, 1.0};
    const BsdeSolution sol = solve_lsmc(b, cfg, DriftSpec{}, x0, gen, terminal(b, FunctionalForm::Linear, c));
    const SemilinearReport r = semilinear_bismut(b, sol, build_control_family(b, ControlVariant::WaveJ, h, cfg), h);
    // ⟨c, e^{TA} h⟩ from the independent propagator
    const auto row = wave_row(b, c, 1.0);
    double ch = 0.0;
    for (int n = 0; n < 2; ++n) ch += row[n][0] * h.c1[n] + row[n][1] * h.c2[n];
    const double exact = std::exp(lambda) * ch;
    EXPECT_LE(std::abs(r.report.estimate - exact), 3.0 * r.report.stderr + 0.01 * std::abs(exact))
        << r.report.estimate << " vs " << exact << " +- " << r.report.stderr;
}

TEST(SemilinearBismut, MatchesFiniteDifferenceOfBsde) {
    const ModeBasis b = damped(2);
    const HVector x0({0.3, 0.1}, {0.2, 0.0});
    const HVector c({1.0, 0.5}, {0.6, 0.3});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedSmooth, c);
    GeneratorSpec gen;
    gen.form = GeneratorForm::LipschitzNonlinear;
    gen.ly = 0.4;
    gen.lz = 0.3;
    gen.k0 = 0.2;
    const std::vector<double> a{1.0, -0.5};
    const HVector h = direction_from_u(b, ControlVariant::DampedJ, a);
    const SimConfig cfg{16, 30000, 31, 0.0, 1.0};
    const BsdeSolution sol = solve_lsmc(b, cfg, DriftSpec{}, x0, gen, term);
    const SemilinearReport r = semilinear_bismut(b, sol, build_control_family(b, ControlVariant::DampedJ, h, cfg), h);
    const double eps = 0.05;
    const BsdeSolution up = solve_lsmc(b, cfg, DriftSpec{}, x0 + eps * h, gen, term);
    const BsdeSolution down = solve_lsmc(b, cfg, DriftSpec{}, x0 - eps * h, gen, term);
    Moments fd;
    for (std::int64_t p = 0; p < cfg.M; ++p) fd.add((up.multistep0[p] - down.multistep0[p]) / (2 * eps));
    const double tol = std::max(3.0 * combined(r.report.stderr, fd.stderr_mean()), 0.1 * std::abs(fd.mean));
    EXPECT_LE(std::abs(r.report.estimate - fd.mean), tol) << r.report.estimate << " vs " << fd.mean;
}

TEST(SemilinearBismut, RejectsMismatchedFamily) {
    const ModeBasis b = wave(2);
    const HVector x0({0.1, 0.0}, {0.0, 0.0});
    const HVector h = apply_J(b, std::vector<double>{1.0, 0.0});
    const SimConfig cfg{8, 512, 1, 0.0, 1.0};
    const BsdeSolution sol = solve_lsmc(b, cfg, DriftSpec{}, x0, GeneratorSpec{},
                                        terminal(b, FunctionalForm::BoundedSmooth, HVector({1.0, 0.0}, {0.0, 0.0})));
    const ControlFamily fam = build_control_family(b, ControlVariant::WaveJ, h, SimConfig{4, 512, 1, 0.0, 1.0});
    try {
        semilinear_bismut(b, sol, fam, h);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::WindowMismatch);
    }
}

TEST(ZIdentification, ClosedFormAndRegressionAgree) {
    const ModeBasis b = wave(4);
    const HVector x0({0.2, 0.1, 0.0, 0.0}, {0.1, 0.0, 0.2, 0.0});
    const HVector c({1.0, 0.5, 0.3, 0.2}, {0.7, 0.4, 0.2, 0.1});
    const SimConfig cfg{32, 60000, 41, 0.0, 1.0};
    const BsdeSolution sol = solve_lsmc(b, cfg, DriftSpec{}, x0, GeneratorSpec{}, terminal(b, FunctionalForm::Linear, c));
    // Z_n = σ ⟨c, e^{TA} J e_n⟩ from the independent propagator
    const auto row = wave_row(b, c, 1.0);
    std::vector<double> closed(4), grads(4);
    for (int n = 0; n < 4; ++n) closed[n] = row[n][1];
    const std::vector<double> lib = linear_terminal_z(b, c, 0.0, 1.0);
    for (int n = 0; n < 4; ++n) EXPECT_NEAR(lib[n], closed[n], 1e-10 * (1.0 + std::abs(closed[n])));
    double num = 0.0, den = 0.0;
    for (int n = 0; n < 4; ++n) {
        num += (sol.z0[n] - closed[n]) * (sol.z0[n] - closed[n]);
        den += closed[n] * closed[n];
    }
    EXPECT_LE(std::sqrt(num / den), 0.1);
    for (int n = 0; n < 4; ++n) {
        std::vector<double> e(4, 0.0);
        e[n] = 1.0;
        const HVector h = apply_J(b, e);
        grads[n] = semilinear_bismut(b, sol, build_control_family(b, ControlVariant::WaveJ, h, cfg), h).report.estimate;
    }
    EXPECT_LE(z_identification_check(sol, grads), 0.1);
}

TEST(ZIdentification, SigmaDoublingScalesZOnly) {
    const HVector c({1.0, 0.5, 0.3}, {0.7, 0.4, 0.2});
    const ModeBasis one = wave(3, 1.0), two = wave(3, 2.0);
    const std::vector<double> z1 = linear_terminal_z(one, c, 0.2, 1.0), z2 = linear_terminal_z(two, c, 0.2, 1.0);
    for (int n = 0; n < 3; ++n) EXPECT_NEAR(z2[n], 2.0 * z1[n], 1e-12 * std::abs(z1[n]));
    // gradient along J e_n is σ-free
    for (int n = 0; n < 3; ++n) {
        std::vector<double> e(3, 0.0);
        e[n] = 1.0;
        const double g1 = inner_H(one, c, apply_semigroup(one, 0.8, apply_J(one, e)));
        const double g2 = inner_H(two, c, apply_semigroup(two, 0.8, apply_J(two, e)));
        EXPECT_EQ(g1, g2);
    }
}

TEST(ZIdentification, ZeroDataGivesZero) {
    const ModeBasis b = wave(2);
    TerminalSpec term = terminal(b, FunctionalForm::Linear, HVector({1.0, 0.0}, {0.0, 0.0}));
    term.scale = 0.0;
    const SimConfig cfg{8, 2000, 3, 0.0, 1.0};
    const BsdeSolution sol = solve_lsmc(b, cfg, DriftSpec{}, HVector({0.5, 0.1}, {0.0, 0.2}), GeneratorSpec{}, term);
    for (double z : sol.z0) EXPECT_EQ(z, 0.0);
    EXPECT_EQ(sol.y0, 0.0);
    const std::vector<double> zero(2, 0.0);
    EXPECT_EQ(z_identification_check(sol, zero), 0.0);
}

TEST(KolmogorovResidual, ZeroAndAffineGenerators) {
    const ModeBasis b = wave(2);
    const HVector c({1.0, 0.4}, {0.5, 0.1});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedSmooth, c);
    const std::vector<ProbePoint> probes{{0.0, HVector({0.3, 0.0}, {0.1, 0.2})}, {0.5, HVector({-0.2, 0.1}, {0.0, 0.4})}};
    const SimConfig cfg{8, 20000, 51, 0.0, 1.0};
    for (GeneratorForm form : {GeneratorForm::Zero, GeneratorForm::AffineY}) {
        GeneratorSpec gen;
        gen.form = form;
        gen.lambda = 0.5;
        const auto recs = kolmogorov_residual(b, cfg, DriftSpec{}, gen, term, probes, 0.05);
        ASSERT_EQ(recs.size(), 2u);
        for (const auto& r : recs) EXPECT_LE(std::abs(r.residual), 3.0 * r.stderr) << to_string(form) << " s=" << r.s;
        std::ostringstream os;
        write_residual_records(os, recs);
        EXPECT_EQ(os.str().rfind("s=0 value=", 0), 0u);
    }
}

TEST(KolmogorovResidual, ErrorShrinksWithRefinement) {
    const ModeBasis b = wave(2);
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedNonsmooth, HVector({1.0, 0.4}, {0.5, 0.1}));
    GeneratorSpec gen;
    gen.form = GeneratorForm::LipschitzNonlinear;
    gen.ly = 0.3;
    gen.lz = 0.2;
    const std::vector<ProbePoint> probes{{0.0, HVector({0.3, 0.0}, {0.1, 0.2})}};
    const auto coarse = kolmogorov_residual(b, {4, 2000, 61, 0.0, 1.0}, DriftSpec{}, gen, term, probes, 1.0);
    const auto fine = kolmogorov_residual(b, {16, 32000, 61, 0.0, 1.0}, DriftSpec{}, gen, term, probes, 1.0);
    EXPECT_LT(std::abs(fine[0].residual) + 3.0 * fine[0].stderr, std::abs(coarse[0].residual) + 3.0 * coarse[0].stderr);
    try {
        kolmogorov_residual(b, {4, 500, 61, 0.0, 1.0}, DriftSpec{}, gen, term, probes, 1e-6);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BudgetExceeded);
    }
}

TEST(BsdeDrift, DriftTermAndReferenceMeasure) {
    const ModeBasis b = damped(2);
    const HVector x0({0.2, 0.1}, {0.1, 0.0});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedSmooth, HVector({1.0, 0.3}, {0.5, 0.2}));
    DriftSpec drift;
    drift.form = DriftForm::Saturating;
    drift.amplitude = 0.5;
    const SimConfig cfg{16, 20000, 71, 0.0, 1.0};
    const BsdeSolution sol = solve_lsmc(b, cfg, drift, x0, GeneratorSpec{}, term);
    // ψ = 0: Y_s = E f(X_T) under the drifted dynamics
    const PathSimulator sim(b, SimConfig{16, 20000, 72, 0.0, 1.0});
    const Moments ref = stream_paths<Moments>(sim, x0, &drift, [&](Moments& m, std::int64_t, std::span<const double>,
                                                                   std::span<const double> xs) { m.add(term(xs.subspan(16 * 2 * 2))); });
    EXPECT_LE(std::abs(sol.y0 - ref.mean), 3.0 * combined(sol.y0_stderr, ref.stderr_mean())) << sol.y0 << " vs " << ref.mean;
    const HVector h = apply_J(b, std::vector<double>{1.0, 0.0});
    const SemilinearReport r = semilinear_bismut(b, sol, build_control_family(b, ControlVariant::DampedJ, h, cfg), h);
    EXPECT_EQ(r.generator_term, 0.0);
    EXPECT_NE(r.drift_term, 0.0);
}

TEST(YGradientScaling, NonsmoothTerminalStaysWithinEnvelope) {
    const ModeBasis b = damped(2);
    const HVector x({0.3, 0.1}, {0.2, 0.0});
    const TerminalSpec term = terminal(b, FunctionalForm::BoundedNonsmooth, HVector({1.0, 0.3}, {0.6, 0.2}));
    GeneratorSpec gen;
    gen.form = GeneratorForm::LipschitzNonlinear;
    gen.ly = 0.3;
    gen.lz = 0.2;
    const std::vector<double> a{1.0, 0.0};
    const std::vector<double> s_grid{0.0, 0.7, 0.9, 0.97};
    const ScalingFit fit =
        y_gradient_scaling(b, {16, 8000, 81, 0.0, 1.0}, DriftSpec{}, x, gen, term, ControlVariant::DampedJ, a, s_grid);
    ASSERT_EQ(fit.t.size(), 4u);
    EXPECT_GE(fit.slope, -0.7);
}
