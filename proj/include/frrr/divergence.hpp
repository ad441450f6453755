#pragma once

// Divergences between product laws P_Theta = prod_ij p_{theta_ij}.
//
// Theorem-facing quantities use the per-entry-averaged convention
// (1/nq) sum_ij D(p_theta_ij, p_zeta_ij); totals are reported next to them.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "frrr/model.hpp"
#include "frrr/types.hpp"

namespace frrr {

// --- per-entry closed forms -------------------------------------------------

/// KL(p_theta || p_zeta) = [b'(theta)(theta - zeta) - b(theta) + b(zeta)] / a.
inline double kl_per_entry(const FamilySpec& f, double theta, double zeta) {
    if (theta == zeta) return 0.0;
    if (f.law() == ResponseLaw::normal) return (theta - zeta) * (theta - zeta) / (2.0 * f.dispersion());
    const double v =
        (b_prime(f, theta) * (theta - zeta) - b_value(f, theta) + b_value(f, zeta)) / f.dispersion();
    return std::max(v, 0.0);
}

/// D_alpha(p_theta, p_zeta) = [alpha b(theta) + (1-alpha) b(zeta)
///                             - b(alpha theta + (1-alpha) zeta)] / (a (1-alpha)).
inline double renyi_per_entry(const FamilySpec& f, double theta, double zeta, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw invalid_parameter("renyi: alpha must lie in (0, 1)");
    if (theta == zeta) return 0.0;
    if (f.law() == ResponseLaw::normal) return alpha * (theta - zeta) * (theta - zeta) / (2.0 * f.dispersion());
    const double mix = alpha * theta + (1.0 - alpha) * zeta;
    const double v = (alpha * b_value(f, theta) + (1.0 - alpha) * b_value(f, zeta) - b_value(f, mix)) /
                     (f.dispersion() * (1.0 - alpha));
    return std::max(v, 0.0);
}

/// E_theta[log^2(p_theta / p_zeta)(Y)] using E Y^2 = b'(theta)^2 + a b''(theta):
///   = [a b''(theta) d^2 + (b'(theta) d - b(theta) + b(zeta))^2] / a^2,  d = theta - zeta.
inline double log_ratio_second_moment(const FamilySpec& f, double theta, double zeta) {
    const double a = f.dispersion();
    const double d = theta - zeta;
    const double m = f.law() == ResponseLaw::normal ? 0.5 * d * d
                                                    : b_prime(f, theta) * d - b_value(f, theta) + b_value(f, zeta);
    return (a * b_second(f, theta) * d * d + m * m) / (a * a);
}

/// E_{theta0}[log(p_thetabar / p_zeta)(Y)]
///   = [b'(theta0)(thetabar - zeta) - b(thetabar) + b(zeta)] / a.
inline double misspecified_log_ratio_mean(const FamilySpec& f, double theta0, double thetabar,
                                          double zeta) {
    return (b_prime(f, theta0) * (thetabar - zeta) - b_value(f, thetabar) + b_value(f, zeta)) /
           f.dispersion();
}

/// c_alpha = 2(alpha+1)/(1-alpha) on [0.5, 1), 2(alpha+1)/alpha on (0, 0.5).
inline double c_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw invalid_parameter("c_alpha: alpha must lie in (0, 1)");
    return alpha >= 0.5 ? 2.0 * (alpha + 1.0) / (1.0 - alpha) : 2.0 * (alpha + 1.0) / alpha;
}

// --- product-measure report ---------------------------------------------------

namespace detail {

template <class Fn>
double sum_cells(const Matrix& Theta, const Matrix& Zeta, Fn&& fn) {
    require_same_shape(Theta, Zeta, "divergence");
    double s = 0.0;
    for (Eigen::Index j = 0; j < Theta.cols(); ++j) {
        for (Eigen::Index i = 0; i < Theta.rows(); ++i) s += fn(Theta(i, j), Zeta(i, j));
    }
    return s;
}

inline double hellinger_from_half_renyi(double d_half) { return 2.0 * (1.0 - std::exp(-0.5 * d_half)); }

}  // namespace detail

inline double kl_total(const FamilySpec& f, const Matrix& Theta, const Matrix& Zeta) {
    return detail::sum_cells(Theta, Zeta, [&](double t, double z) { return kl_per_entry(f, t, z); });
}

inline double renyi_total(const FamilySpec& f, const Matrix& Theta, const Matrix& Zeta, double alpha) {
    return detail::sum_cells(Theta, Zeta,
                             [&](double t, double z) { return renyi_per_entry(f, t, z, alpha); });
}

inline double kl_avg(const FamilySpec& f, const Matrix& Theta, const Matrix& Zeta) {
    return Theta.size() == 0 ? 0.0 : kl_total(f, Theta, Zeta) / static_cast<double>(Theta.size());
}

inline double renyi_avg(const FamilySpec& f, const Matrix& Theta, const Matrix& Zeta, double alpha) {
    return Theta.size() == 0 ? 0.0
                             : renyi_total(f, Theta, Zeta, alpha) / static_cast<double>(Theta.size());
}

/// All divergences between P_Theta and P_Zeta in both normalizations.
struct DivergenceReport {
    long cells = 0;  // nq
    double kl_avg = 0.0;
    double kl_total = 0.0;
    std::vector<double> alphas;  // ascending
    std::vector<double> renyi_avg;
    std::vector<double> renyi_total;
    double hellinger_sq = 0.0;      // 2(1 - exp(-D_{1/2,total}/2))
    double hellinger_sq_avg = 0.0;  // same map applied to the averaged D_{1/2}
    double tv_lower = 0.0;          // H^2/2 <= d_TV
    double tv_upper = 0.0;          // d_TV <= H sqrt(1 - H^2/4)
    double tv_lower_avg = 0.0;
    double tv_upper_avg = 0.0;

    double renyi_avg_at(double alpha) const {
        for (std::size_t k = 0; k < alphas.size(); ++k) {
            if (alphas[k] == alpha) return renyi_avg[k];
        }
        throw invalid_parameter("alpha not present in the report");
    }
};

namespace detail {

inline void tv_bounds_from_hellinger(double h2, double& lower, double& upper) {
    lower = 0.5 * h2;
    upper = std::min(1.0, std::sqrt(h2) * std::sqrt(std::max(0.0, 1.0 - 0.25 * h2)));
}

}  // namespace detail

inline DivergenceReport divergence_report(const FamilySpec& f, const Matrix& Theta,
                                          const Matrix& Zeta, std::vector<double> alphas) {
    require_same_shape(Theta, Zeta, "divergence_report");
    for (double t : Theta.reshaped()) {
        if (!f.in_natural_domain(t)) throw invalid_parameter("divergence_report: Theta outside domain");
    }
    for (double z : Zeta.reshaped()) {
        if (!f.in_natural_domain(z)) throw invalid_parameter("divergence_report: Zeta outside domain");
    }
    std::sort(alphas.begin(), alphas.end());
    alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());

    DivergenceReport r;
    r.cells = static_cast<long>(Theta.size());
    const double nq = r.cells > 0 ? static_cast<double>(r.cells) : 1.0;
    r.kl_total = kl_total(f, Theta, Zeta);
    r.kl_avg = r.kl_total / nq;
    r.alphas = alphas;
    for (double a : alphas) {
        const double tot = renyi_total(f, Theta, Zeta, a);
        r.renyi_total.push_back(tot);
        r.renyi_avg.push_back(tot / nq);
    }
    const double half_total = renyi_total(f, Theta, Zeta, 0.5);
    r.hellinger_sq = detail::hellinger_from_half_renyi(half_total);
    r.hellinger_sq_avg = detail::hellinger_from_half_renyi(half_total / nq);
    detail::tv_bounds_from_hellinger(r.hellinger_sq, r.tv_lower, r.tv_upper);
    detail::tv_bounds_from_hellinger(r.hellinger_sq_avg, r.tv_lower_avg, r.tv_upper_avg);
    return r;
}

/// CSV with columns metric,alpha,per_entry_avg,total,normalization.
inline void write_report_csv(std::ostream& os, const DivergenceReport& r) {
    char buf[256];
    const std::string norm = "per_entry_avg=total/" + std::to_string(r.cells);
    os << "metric,alpha,per_entry_avg,total,normalization\n";
    auto row = [&](const char* metric, double alpha, double avg, double tot) {
        if (std::isnan(alpha)) {
            std::snprintf(buf, sizeof buf, "%s,,%.17g,%.17g,", metric, avg, tot);
        } else {
            std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,", metric, alpha, avg, tot);
        }
        os << buf << norm << '\n';
    };
    const double nan = std::numeric_limits<double>::quiet_NaN();
    row("kl", nan, r.kl_avg, r.kl_total);
    for (std::size_t k = 0; k < r.alphas.size(); ++k) {
        row("renyi", r.alphas[k], r.renyi_avg[k], r.renyi_total[k]);
    }
    row("hellinger_sq", nan, r.hellinger_sq_avg, r.hellinger_sq);
    row("tv_lower", nan, r.tv_lower_avg, r.tv_lower);
    row("tv_upper", nan, r.tv_upper_avg, r.tv_upper);
}

// --- lemma right-hand sides ---------------------------------------------------

/// Right-hand sides of the divergence lemmas for parameter matrices Theta, Zeta
/// (both n x q), per-entry-averaged.
struct LemmaBounds {
    double kl_upper = 0.0;           // C_U/(2a) (1/nq) ||Zeta - Theta||_F^2
    double renyi_lower = 0.0;        // C_L/(2a) (1/nq) ||Theta - Zeta||_F^2
    double second_moment_upper = 0.0;  // C_U/(a nq) ||.||^2 + C_U^2/(4 a^2 nq) ||.||^4
    std::optional<double> misspec_upper;  // 2 U_1/(a sqrt(nq)) ||Zeta - Theta||_F; Theta plays thetabar

    /// Corrected Renyi lower bound alpha C_L/(2a) (1/nq) ||Theta - Zeta||^2
    /// implied by C_L-strong convexity of b on Theta.
    double renyi_lower_scaled(double alpha) const { return alpha * renyi_lower; }

    double misspec() const {
        if (!misspec_upper) throw unbounded_bound("misspecified-KL bound needs a finite U_1");
        return *misspec_upper;
    }
};

inline LemmaBounds lemma_bounds(const FamilySpec& f, const FamilyBounds& bounds, const Matrix& Theta,
                                const Matrix& Zeta) {
    require_same_shape(Theta, Zeta, "lemma_bounds");
    const double a = f.dispersion();
    const double nq = std::max<double>(1.0, static_cast<double>(Theta.size()));
    const double gap2 = (Zeta - Theta).squaredNorm();
    LemmaBounds out;
    auto scaled = [](double c, double g) { return g == 0.0 ? 0.0 : c * g; };
    out.kl_upper = scaled(bounds.c_upper / (2.0 * a * nq), gap2);
    out.renyi_lower = scaled(bounds.c_lower / (2.0 * a * nq), gap2);
    out.second_moment_upper = scaled(bounds.c_upper / (a * nq), gap2) +
                              scaled(bounds.c_upper * bounds.c_upper / (4.0 * a * a * nq), gap2 * gap2);
    if (bounds.has_finite_u1()) {
        out.misspec_upper = scaled(2.0 * bounds.u1 / (a * std::sqrt(nq)), std::sqrt(gap2));
    }
    return out;
}

// --- rates ----------------------------------------------------------------------

struct RateInputs {
    double n = 0, p = 0, q = 0, r = 0, a = 1;
    double c_upper = 0, u1 = 0;
    double x_frob = 0, b_frob = 0;
};

/// Contraction rates with their inputs.
struct RateFormulas {
    RateInputs inputs;
    double epsilon_n_thm1 = 0.0;
    double epsilon_n_thm3 = 0.0;
    double epsilon_prime_n = 0.0;
    double r_n = 0.0;
};

/// r (q+p+2) log(1 + ratio), with 0 log(1 + 0/0) read as 0.
inline double rank_log_term(double r, double p, double q, double ratio) {
    if (r == 0.0) return 0.0;
    return r * (q + p + 2.0) * std::log1p(ratio);
}

inline RateFormulas rate_formulas(double n, double p, double q, double r, double a,
                                  const FamilyBounds& bounds, double x_frob, double b_frob) {
    if (n <= 0 || p <= 0 || q <= 0 || r < 0 || a <= 0 || x_frob < 0 || b_frob < 0) {
        throw invalid_parameter("rate_formulas: negative or zero inputs");
    }
    RateFormulas out;
    out.inputs = {n, p, q, r, a, bounds.c_upper, bounds.u1, x_frob, b_frob};
    const double cu = bounds.c_upper;
    const double nq = n * q;
    const double xb = x_frob * b_frob;
    const double sqpq = std::sqrt(q * p);
    auto prod = [](double c, double v) { return v == 0.0 ? 0.0 : c * v; };

    const double t1 = r == 0.0 ? 0.0 : rank_log_term(r, p, q, xb * sqpq / std::sqrt(4.0 * a * r));
    out.epsilon_n_thm1 = prod(2.0 * cu, t1) / nq;

    const double t3 = r == 0.0 ? 0.0 : rank_log_term(r, p, q, xb * sqpq / std::sqrt(2.0 * a * r));
    out.epsilon_n_thm3 = std::max(cu * cu / (4.0 * nq), prod(2.0 * cu, t3) / nq);

    const double tp = r == 0.0 ? 0.0 : rank_log_term(r, p, q, xb * sqpq / std::sqrt(2.0 * r));
    out.epsilon_prime_n = std::max({cu / (a * n), cu * cu / (4.0 * a * a * n), 2.0 * tp / n});

    const double tr =
        r == 0.0 ? 0.0
                 : rank_log_term(r, p, q, xb * 2.0 * std::sqrt(nq) * sqpq / (a * std::sqrt(2.0 * r)));
    out.r_n = prod(2.0 * bounds.u1, tr) / nq;
    return out;
}

}  // namespace frrr
