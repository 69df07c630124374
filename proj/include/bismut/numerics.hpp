#pragma once

// Quadrature, fitting and small statistics helpers shared by the modules.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "bismut/error.hpp"

namespace bismut {

/// Composite Simpson weights on `panels` uniform sub-intervals of length `step`.
inline double simpson_weight(int i, int panels, double step) {
    if (i == 0 || i == panels) return step / 3.0;
    return (i % 2 == 1 ? 4.0 : 2.0) * step / 3.0;
}

/// Composite Simpson rule of a scalar- or vector-valued integrand.
/// `f(x)` may return anything closed under += and scalar *.
template <class F>
auto simpson(F&& f, double a, double b, int panels) {
    require(panels >= 2 && panels % 2 == 0, ErrorCode::InvalidParams, "Simpson needs an even panel count");
    const double step = (b - a) / panels;
    auto acc = f(a);
    acc *= simpson_weight(0, panels, step);
    for (int i = 1; i <= panels; ++i) {
        auto v = f(a + i * step);
        v *= simpson_weight(i, panels, step);
        acc += v;
    }
    return acc;
}

/// Even panel count resolving oscillations/decay at rate `rate` over a window `length`.
inline int resolving_panels(double rate, double length, int minimum, int per_unit = 16) {
    const double want = std::ceil(per_unit * rate * length);
    int panels = static_cast<int>(std::min(want, 1.0e7));
    panels = std::max(panels, minimum);
    return panels + (panels % 2);
}

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
};

/// Ordinary least squares y ≈ intercept + slope·x.
inline LineFit fit_line(std::span<const double> x, std::span<const double> y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorCode::InvalidParams, "fit_line needs >= 2 points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    require(sxx > 0, ErrorCode::InvalidParams, "fit_line needs distinct abscissae");
    const double slope = sxy / sxx;
    return {slope, my - slope * mx};
}

/// Fit of log y against log x; returns (slope, log-constant).
inline LineFit fit_loglog(std::span<const double> x, std::span<const double> y) {
    std::vector<double> lx(x.size()), ly(y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        require(x[i] > 0 && y[i] > 0, ErrorCode::InvalidParams, "fit_loglog needs positive data");
        lx[i] = std::log(x[i]);
        ly[i] = std::log(y[i]);
    }
    return fit_line(lx, ly);
}

inline std::vector<double> logspace(double lo, double hi, int count) {
    require(lo > 0 && hi > lo && count >= 2, ErrorCode::InvalidParams, "logspace needs 0 < lo < hi, count >= 2");
    std::vector<double> out(static_cast<std::size_t>(count));
    const double a = std::log(lo), b = std::log(hi);
    for (int i = 0; i < count; ++i) out[i] = std::exp(a + (b - a) * i / (count - 1));
    return out;
}

/// Running mean / variance (Welford); merged in a fixed order for deterministic reductions.
struct Moments {
    double n = 0.0;
    double mean = 0.0;
    double m2 = 0.0;

    void add(double x) {
        n += 1.0;
        const double d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    void merge(const Moments& o) {
        if (o.n == 0) return;
        if (n == 0) {
            *this = o;
            return;
        }
        const double total = n + o.n;
        const double d = o.mean - mean;
        mean += d * o.n / total;
        m2 += o.m2 + d * d * n * o.n / total;
        n = total;
    }
    double variance() const { return n > 1 ? m2 / (n - 1) : 0.0; }
    double stderr_mean() const { return n > 0 ? std::sqrt(variance() / n) : 0.0; }
};

/// Sample covariance accumulator for two paired sequences.
struct CoMoments {
    double n = 0.0, mx = 0.0, my = 0.0, cxy = 0.0, cxx = 0.0, cyy = 0.0;

    void add(double x, double y) {
        n += 1.0;
        const double dx = x - mx;
        mx += dx / n;
        const double dy = y - my;
        my += dy / n;
        cxy += dx * (y - my);
        cxx += dx * (x - mx);
        cyy += dy * (y - my);
    }
    void merge(const CoMoments& o) {
        if (o.n == 0) return;
        if (n == 0) {
            *this = o;
            return;
        }
        const double total = n + o.n;
        const double dx = o.mx - mx, dy = o.my - my;
        cxy += o.cxy + dx * dy * n * o.n / total;
        cxx += o.cxx + dx * dx * n * o.n / total;
        cyy += o.cyy + dy * dy * n * o.n / total;
        mx += dx * o.n / total;
        my += dy * o.n / total;
        n = total;
    }
    /// Standard error of mean(x) - mean(y).
    double stderr_difference() const {
        if (n < 2) return 0.0;
        const double var = (cxx + cyy - 2.0 * cxy) / (n - 1);
        return std::sqrt(std::max(var, 0.0) / n);
    }
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846); }

}  // namespace bismut
