#pragma once

// Log-log least squares for convergence and cost exponents.

#include "mlsgd/record.hpp"

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace mlsgd::rates {

/// log2(y) ~ intercept + exponent * sign * log2(x)
struct RateFit {
    double exponent = 0.0;
    double intercept = 0.0;
    double residual = 0.0;  // sum of squared residuals in log2 space
    int n_points = 0;
};

/// Ordinary least squares of log2(ys) against sign * log2(xs). With
/// sign = -1 a quantity that decays like x^-a in x (or grows like h^-a in
/// the mesh width) reports exponent a. The slope is returned signed, so a
/// non-positive exponent means the data do not follow the expected trend.
inline RateFit fit_loglinear(std::span<const double> xs, std::span<const double> ys, int sign = 1) {
    if (xs.size() != ys.size()) throw std::invalid_argument("fit_loglinear: xs and ys differ in length");
    if (xs.size() < 2) throw std::invalid_argument("fit_loglinear: need at least two points");
    if (sign != 1 && sign != -1) throw std::invalid_argument("fit_loglinear: sign must be +1 or -1");
    const std::size_t n = xs.size();
    std::vector<double> X(n), Y(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(xs[i] > 0.0) || !(ys[i] > 0.0) || !std::isfinite(xs[i]) || !std::isfinite(ys[i]))
            throw std::invalid_argument("fit_loglinear: all values must be finite and positive");
        X[i] = sign * std::log2(xs[i]);
        Y[i] = std::log2(ys[i]);
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += X[i];
        my += Y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (X[i] - mx) * (X[i] - mx);
        sxy += (X[i] - mx) * (Y[i] - my);
    }
    if (sxx == 0.0) throw std::invalid_argument("fit_loglinear: degenerate abscissae (all equal)");
    RateFit fit;
    fit.exponent = sxy / sxx;
    fit.intercept = my - fit.exponent * mx;
    fit.n_points = static_cast<int>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double e = Y[i] - (fit.intercept + fit.exponent * X[i]);
        fit.residual += e * e;
    }
    return fit;
}

/// Convergence rate of the gradient norm in consumed resources: fits
/// ||g|| ~ c * cost^-delta over the records whose cumulative cost is at
/// least `burn_in_cost`.
inline RateFit estimate_delta(std::span<const IterationRecord> trajectory, double burn_in_cost) {
    std::vector<double> cost, grad;
    for (const auto& r : trajectory) {
        if (r.cumulative_cost < burn_in_cost) continue;
        if (!(r.grad_norm > 0.0) || !(r.cumulative_cost > 0.0)) continue;
        cost.push_back(r.cumulative_cost);
        grad.push_back(r.grad_norm);
    }
    if (cost.size() < 2) throw std::invalid_argument("estimate_delta: fewer than two records past the burn-in");
    return fit_loglinear(cost, grad, -1);
}

}  // namespace mlsgd::rates
