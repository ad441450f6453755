#pragma once

// Scalar special functions shared by the family catalog and the divergence
// oracles.

#include <cmath>
#include <numbers>

namespace frrr::special {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // log(sqrt(2*pi))

/// log(1 + e^x) without overflow.
inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// log of the standard normal density.
inline double log_normal_pdf(double x) { return -0.5 * x * x - kLogSqrt2Pi; }

/// log Phi(x), accurate in both tails.
inline double log_normal_cdf(double x) {
    if (x > -30.0) {
        return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
    }
    // Asymptotic Mills-ratio expansion; erfc underflows below about -37.
    const double z2 = 1.0 / (x * x);
    const double series = 1.0 - z2 + 3.0 * z2 * z2 - 15.0 * z2 * z2 * z2;
    return log_normal_pdf(x) - std::log(-x) + std::log(series);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// log(1 - e^x) for x < 0.
inline double log1mexp(double x) {
    return x > -std::numbers::ln2 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x));
}

}  // namespace frrr::special
