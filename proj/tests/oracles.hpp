#pragma once

// Independent reference computations used by the test suites. Nothing here
// calls into the library's numerical routines.

#include <array>
#include <cmath>
#include <complex>
#include <functional>

namespace oracle {

using M2 = std::array<std::array<double, 2>, 2>;

inline M2 mul(const M2& a, const M2& b) {
    M2 c{};
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
    return c;
}

/// exp(t·a) by scaling and squaring with a 20-term Taylor core.
inline M2 expm(const M2& a, double t) {
    double norm = 0;
    for (auto& r : a)
        for (double v : r) norm = std::max(norm, std::abs(v * t));
    int squarings = 0;
    while (norm > 0.125) {
        norm /= 2;
        ++squarings;
    }
    const double scale = t / std::pow(2.0, squarings);
    M2 x{{{a[0][0] * scale, a[0][1] * scale}, {a[1][0] * scale, a[1][1] * scale}}};
    M2 result{{{1, 0}, {0, 1}}}, term = result;
    for (int k = 1; k <= 20; ++k) {
        term = mul(term, x);
        for (auto& r : term)
            for (double& v : r) v /= k;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) result[i][j] += term[i][j];
    }
    for (int s = 0; s < squarings; ++s) result = mul(result, result);
    return result;
}

/// Roots of z² + b z + c by the textbook formula in complex arithmetic.
inline std::array<std::complex<double>, 2> quadratic_roots(double b, double c) {
    const std::complex<double> d = std::sqrt(std::complex<double>(b * b - 4 * c, 0.0));
    return {(-b + d) / 2.0, (-b - d) / 2.0};
}

/// Trapezoid rule on a fine grid, used as a quadrature cross-check.
inline double trapezoid(const std::function<double(double)>& f, double a, double b, int n) {
    const double h = (b - a) / n;
    double s = 0.5 * (f(a) + f(b));
    for (int i = 1; i < n; ++i) s += f(a + i * h);
    return s * h;
}

/// Gauss-Legendre 5-point rule on n sub-intervals.
inline double gauss5(const std::function<double(double)>& f, double a, double b, int n) {
    static const double x[5] = {0.0, -0.5384693101056831, 0.5384693101056831, -0.9061798459386640, 0.9061798459386640};
    static const double w[5] = {0.5688888888888889, 0.4786286704993665, 0.4786286704993665, 0.2369268850561891,
                                0.2369268850561891};
    const double h = (b - a) / n;
    double s = 0;
    for (int i = 0; i < n; ++i) {
        const double mid = a + (i + 0.5) * h;
        for (int q = 0; q < 5; ++q) s += w[q] * f(mid + 0.5 * h * x[q]);
    }
    return s * 0.5 * h;
}

}  // namespace oracle
