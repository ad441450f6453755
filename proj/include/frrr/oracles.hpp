#pragma once

// Brute-force reference values for the closed-form divergences.
//
// Everything here is written against the textbook parametrization of each
// response law (success probability, Poisson mean, gamma rate, ...), never
// against b(theta), so agreement with divergence.hpp is a real check.
// Count laws are summed up to a cut-off whose remaining mass is certified by a
// Chernoff bound. Continuous laws use a composite Gauss rule on a range that
// carries all but a negligible amount of mass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "frrr/model.hpp"
#include "frrr/special.hpp"
#include "frrr/types.hpp"

namespace frrr::bruteforce {

struct Options {
    double tail_mass = 1e-14;   // certified mass left out of count-law sums
    long max_support = 5'000'000;
};

/// Value with the certified mass neglected by truncation (0 for exact sums).
struct Certified {
    double value = 0.0;
    double neglected_mass = 0.0;
};

namespace detail {

/// log p(y) in the textbook parametrization of each law.
inline double log_pmf_pdf(const FamilySpec& f, double theta, double y) {
    const double a = f.dispersion();
    switch (f.law()) {
        case ResponseLaw::normal: {
            const double z = (y - theta) / std::sqrt(a);
            return -0.5 * z * z - 0.5 * std::log(a) - special::kLogSqrt2Pi;
        }
        case ResponseLaw::bernoulli: {
            // success probability p = e^theta / (1 + e^theta)
            const double t = y == 1.0 ? theta : -theta;
            return t >= 0.0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t));
        }
        case ResponseLaw::poisson: {
            const double lambda = std::exp(theta);
            return y * std::log(lambda) - lambda - std::lgamma(y + 1.0);
        }
        case ResponseLaw::gamma: {
            const double k = f.shape();
            const double rate = -k * theta;
            return k * std::log(rate) - std::lgamma(k) + (k - 1.0) * std::log(y) - rate * y;
        }
        case ResponseLaw::negative_binomial: {
            // number of successes before the k-th failure, success probability e^theta
            const double k = f.shape();
            const double ps = std::exp(theta);
            return std::lgamma(y + k) - std::lgamma(k) - std::lgamma(y + 1.0) + y * std::log(ps) +
                   k * std::log1p(-ps);
        }
    }
    return 0.0;
}

/// Chernoff bound on P(Y >= m).
inline double log_upper_tail(const FamilySpec& f, double theta, double m) {
    switch (f.law()) {
        case ResponseLaw::poisson: {
            const double lambda = std::exp(theta);
            if (m <= lambda) return 0.0;
            return -lambda + m - m * std::log(m / lambda);
        }
        case ResponseLaw::negative_binomial: {
            const double k = f.shape();
            const double ps = std::exp(theta);
            const double target = m / (m + k);  // p e^s at the optimizing s
            if (target <= ps) return 0.0;
            const double s = std::log(target / ps);
            return -s * m + k * (std::log1p(-ps) - std::log1p(-target));
        }
        default: return 0.0;
    }
}

/// Smallest cut-off M with P(Y > M) <= tol under every listed parameter.
inline long count_cutoff(const FamilySpec& f, const std::vector<double>& thetas, double tol,
                         long max_support) {
    const double log_tol = std::log(tol);
    long m = 1;
    for (;;) {
        bool ok = true;
        for (double t : thetas) {
            if (log_upper_tail(f, t, static_cast<double>(m + 1)) > log_tol) {
                ok = false;
                break;
            }
        }
        if (ok) return m;
        m = m < 64 ? m + 1 : m + m / 8;
        if (m > max_support) throw unsupported("count-law truncation exceeds the support limit");
    }
}

/// Breakpoints covering all but ~e^{-60} of the mass of each listed law.
/// Pieces are short relative to the local scale so a fixed Gauss rule on
/// each is accurate to rounding.
inline std::vector<double> continuous_breaks(const FamilySpec& f, const std::vector<double>& thetas) {
    std::vector<double> br;
    if (f.law() == ResponseLaw::normal) {
        const double s = std::sqrt(f.dispersion());
        const double lo = *std::min_element(thetas.begin(), thetas.end()) - 40.0 * s;
        const double hi = *std::max_element(thetas.begin(), thetas.end()) + 40.0 * s;
        const int pieces = static_cast<int>(std::ceil((hi - lo) / (0.5 * s)));
        for (int i = 0; i <= pieces; ++i) br.push_back(lo + (hi - lo) * i / pieces);
        return br;
    }
    // gamma: geometric grid from far below the smallest scale to far past
    // the heaviest right tail
    const double k = f.shape();
    double min_rate = std::numeric_limits<double>::infinity();
    double max_rate = 0.0;
    for (double t : thetas) {
        min_rate = std::min(min_rate, -k * t);
        max_rate = std::max(max_rate, -k * t);
    }
    const double hi = (k + 120.0 + 12.0 * std::sqrt(k)) / min_rate;
    br.push_back(0.0);
    for (double y = 1e-10 / max_rate; y < hi; y *= 1.15) br.push_back(y);
    br.push_back(hi);
    return br;
}

/// E over the product of generic weights: sum_y w(y) or the integral.
inline Certified integrate(const FamilySpec& f, const std::vector<double>& thetas,
                           const std::function<double(double)>& g, const Options& opt) {
    Certified out;
    switch (f.law()) {
        case ResponseLaw::bernoulli: out.value = g(0.0) + g(1.0); return out;
        case ResponseLaw::poisson:
        case ResponseLaw::negative_binomial: {
            const long m = count_cutoff(f, thetas, opt.tail_mass, opt.max_support);
            double s = 0.0;
            for (long y = 0; y <= m; ++y) s += g(static_cast<double>(y));
            out.value = s;
            for (double t : thetas) {
                out.neglected_mass =
                    std::max(out.neglected_mass,
                             std::exp(log_upper_tail(f, t, static_cast<double>(m + 1))));
            }
            return out;
        }
        case ResponseLaw::normal:
        case ResponseLaw::gamma: {
            const std::vector<double> br = continuous_breaks(f, thetas);
            double s = 0.0;
            for (std::size_t i = 0; i + 1 < br.size(); ++i) {
                if (i == 0 && f.law() == ResponseLaw::gamma && f.shape() < 1.0) {
                    // y^{k-1} singularity at 0: substitute u = y^k
                    const double k = f.shape();
                    auto h = [&](double u) {
                        return u <= 0.0 ? 0.0 : g(std::pow(u, 1.0 / k)) * std::pow(u, 1.0 / k - 1.0) / k;
                    };
                    s += boost::math::quadrature::gauss<double, 30>::integrate(h, 0.0, std::pow(br[1], k));
                } else {
                    s += boost::math::quadrature::gauss<double, 30>::integrate(g, br[i], br[i + 1]);
                }
            }
            out.value = s;
            return out;
        }
    }
    return out;
}

}  // namespace detail

/// KL(p_theta || p_zeta) = E_theta log(p_theta / p_zeta).
inline Certified kl(const FamilySpec& f, double theta, double zeta, const Options& opt = {}) {
    return detail::integrate(
        f, {theta, zeta},
        [&](double y) {
            const double lp = detail::log_pmf_pdf(f, theta, y);
            const double lr = detail::log_pmf_pdf(f, zeta, y);
            const double p = std::exp(lp);
            return p == 0.0 ? 0.0 : p * (lp - lr);
        },
        opt);
}

/// D_alpha = log(sum p^alpha r^{1-alpha}) / (alpha - 1).
inline Certified renyi(const FamilySpec& f, double theta, double zeta, double alpha,
                       const Options& opt = {}) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw invalid_parameter("renyi: alpha must lie in (0, 1)");
    Certified c = detail::integrate(
        f, {theta, zeta},
        [&](double y) {
            return std::exp(alpha * detail::log_pmf_pdf(f, theta, y) +
                            (1.0 - alpha) * detail::log_pmf_pdf(f, zeta, y));
        },
        opt);
    c.value = std::log(c.value) / (alpha - 1.0);
    return c;
}

/// E_theta[log^2(p_theta / p_zeta)].
inline Certified log_ratio_second_moment(const FamilySpec& f, double theta, double zeta,
                                         const Options& opt = {}) {
    return detail::integrate(
        f, {theta, zeta},
        [&](double y) {
            const double lp = detail::log_pmf_pdf(f, theta, y);
            const double d = lp - detail::log_pmf_pdf(f, zeta, y);
            const double p = std::exp(lp);
            return p == 0.0 ? 0.0 : p * d * d;
        },
        opt);
}

/// E_theta0[log(p_thetabar / p_zeta)].
inline Certified misspecified_log_ratio_mean(const FamilySpec& f, double theta0, double thetabar,
                                             double zeta, const Options& opt = {}) {
    return detail::integrate(
        f, {theta0, thetabar, zeta},
        [&](double y) {
            const double p = std::exp(detail::log_pmf_pdf(f, theta0, y));
            if (p == 0.0) return 0.0;
            return p * (detail::log_pmf_pdf(f, thetabar, y) - detail::log_pmf_pdf(f, zeta, y));
        },
        opt);
}

/// Total variation between the product laws P_Theta and P_Zeta by enumerating
/// the joint outcome space. Bernoulli products need nq <= 12; count laws are
/// truncated per cell and the truncation must be certified below `tail`.
/// Gaussian is handled in closed form for a single cell only.
inline Certified tv_bruteforce(const FamilySpec& f, const Matrix& Theta, const Matrix& Zeta,
                               double tail = 1e-10, long max_outcomes = 4'000'000) {
    require_same_shape(Theta, Zeta, "tv_bruteforce");
    const long cells = static_cast<long>(Theta.size());
    Certified out;
    if (cells == 0) return out;

    if (f.law() == ResponseLaw::normal) {
        if (cells != 1) throw unsupported("tv_bruteforce: gaussian only for a single cell");
        const double gap = std::abs(Theta(0, 0) - Zeta(0, 0));
        out.value = 2.0 * special::normal_cdf(gap / (2.0 * std::sqrt(f.dispersion()))) - 1.0;
        return out;
    }
    if (f.law() == ResponseLaw::gamma) throw unsupported("tv_bruteforce: gamma is not enumerable");
    if (f.law() == ResponseLaw::bernoulli && cells > 12) {
        throw unsupported("tv_bruteforce: Bernoulli products need nq <= 12");
    }

    // Per-cell probability tables for both laws.
    const double per_cell_tail = tail / (2.0 * static_cast<double>(cells));
    std::vector<std::vector<double>> P(cells), R(cells);
    double outcomes = 1.0;
    for (long c = 0; c < cells; ++c) {
        const double t = Theta.reshaped()(c);
        const double z = Zeta.reshaped()(c);
        long m = 1;
        if (f.law() != ResponseLaw::bernoulli) {
            m = detail::count_cutoff(f, {t, z}, per_cell_tail, max_outcomes);
            out.neglected_mass += std::exp(detail::log_upper_tail(f, t, static_cast<double>(m + 1))) +
                                  std::exp(detail::log_upper_tail(f, z, static_cast<double>(m + 1)));
        }
        outcomes *= static_cast<double>(m + 1);
        if (outcomes > static_cast<double>(max_outcomes)) {
            throw unsupported("tv_bruteforce: joint outcome space too large");
        }
        for (long y = 0; y <= m; ++y) {
            P[c].push_back(std::exp(detail::log_pmf_pdf(f, t, static_cast<double>(y))));
            R[c].push_back(std::exp(detail::log_pmf_pdf(f, z, static_cast<double>(y))));
        }
    }
    if (out.neglected_mass >= tail) {
        throw unsupported("tv_bruteforce: truncation certificate above tolerance");
    }

    // Odometer over the joint outcomes.
    std::vector<std::size_t> idx(cells, 0);
    double sum = 0.0;
    for (;;) {
        double pp = 1.0;
        double rr = 1.0;
        for (long c = 0; c < cells; ++c) {
            pp *= P[c][idx[c]];
            rr *= R[c][idx[c]];
        }
        sum += std::abs(pp - rr);
        long c = 0;
        while (c < cells && ++idx[c] == P[c].size()) idx[c++] = 0;
        if (c == cells) break;
    }
    out.value = 0.5 * sum;
    return out;
}

}  // namespace frrr::bruteforce
