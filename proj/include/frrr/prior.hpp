#pragma once

// Spectral scaled Student prior on p x q coefficient matrices:
//   pi(B) ∝ det(tau^2 I_p + B B^T)^{-(p+q+2)/2}
//         = prod_j (tau^2 + s_j(B)^2)^{-(p+q+2)/2}.
// The normalizing constant is never needed and never computed.

#include <cmath>
#include <random>
#include <string>
#include <string_view>

#include <Eigen/Cholesky>

#include "frrr/types.hpp"

namespace frrr {

/// Which formula produced tau.
enum class TauPreset { theorem1, theorem3, misspecified, manual };

inline std::string_view to_string(TauPreset p) {
    switch (p) {
        case TauPreset::theorem1: return "theorem1";
        case TauPreset::theorem3: return "theorem3";
        case TauPreset::misspecified: return "misspecified";
        case TauPreset::manual: return "manual";
    }
    return "manual";
}

inline TauPreset tau_preset_from_string(std::string_view s) {
    for (auto p : {TauPreset::theorem1, TauPreset::theorem3, TauPreset::misspecified,
                   TauPreset::manual}) {
        if (to_string(p) == s) return p;
    }
    throw invalid_parameter("unknown tau preset '" + std::string(s) + "'");
}

struct PriorConfig {
    double tau = 1.0;
    TauPreset preset = TauPreset::manual;
    Eigen::Index p = 1;
    Eigen::Index q = 1;

    double exponent() const { return 0.5 * static_cast<double>(p + q + 2); }
};

/// tau prescribed by each rate theorem:
///   theorem1:     tau^2 = 2a / (q p ||X||_F^2)
///   theorem3:     tau^2 = a / (q p ||X||_F^2)
///   misspecified: tau = a / (2 sqrt(nq) sqrt(pq) ||X||_F)
inline double tau_preset(TauPreset preset, double n, double p, double q, double a, double x_frob) {
    if (!(n > 0) || !(p > 0) || !(q > 0) || !(a > 0)) {
        throw invalid_parameter("tau_preset: n, p, q, a must be positive");
    }
    if (!(x_frob > 0) || !std::isfinite(x_frob)) {
        throw invalid_parameter("tau_preset: ||X||_F must be positive");
    }
    switch (preset) {
        case TauPreset::theorem1: return std::sqrt(2.0 * a / (q * p * x_frob * x_frob));
        case TauPreset::theorem3: return std::sqrt(a / (q * p * x_frob * x_frob));
        case TauPreset::misspecified:
            return a / (2.0 * std::sqrt(n * q) * std::sqrt(p * q) * x_frob);
        case TauPreset::manual: break;
    }
    throw invalid_parameter("tau_preset: manual preset has no formula");
}

inline PriorConfig make_prior(TauPreset preset, const Matrix& X, Eigen::Index q, double a,
                              double tau_manual = 0.0) {
    PriorConfig cfg;
    cfg.preset = preset;
    cfg.p = X.cols();
    cfg.q = q;
    if (preset == TauPreset::manual) {
        if (!(tau_manual > 0.0) || !std::isfinite(tau_manual)) {
            throw invalid_parameter("manual tau must be positive");
        }
        cfg.tau = tau_manual;
    } else {
        cfg.tau = tau_preset(preset, static_cast<double>(X.rows()), static_cast<double>(cfg.p),
                             static_cast<double>(q), a, X.norm());
    }
    return cfg;
}

namespace detail {

inline void check_prior_args(const Matrix& B, const PriorConfig& cfg) {
    if (!(cfg.tau > 0.0)) throw invalid_parameter("prior: tau must be positive");
    if (B.rows() != cfg.p || B.cols() != cfg.q) throw shape_error("prior: B is not p x q");
    if (!B.allFinite()) throw invalid_parameter("prior: non-finite entries in B");
}

}  // namespace detail

/// log pi(B) up to an additive constant. Factors whichever Gram matrix is
/// smaller, using det(tau^2 I_p + BB^T) = tau^{2(p-q)} det(tau^2 I_q + B^T B).
inline double log_prior(const Matrix& B, const PriorConfig& cfg) {
    detail::check_prior_args(B, cfg);
    const double tau2 = cfg.tau * cfg.tau;
    double logdet = 0.0;
    if (cfg.p <= cfg.q) {
        Matrix G = B * B.transpose();
        G.diagonal().array() += tau2;
        Eigen::LLT<Matrix> llt(G);
        logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    } else {
        Matrix G = B.transpose() * B;
        G.diagonal().array() += tau2;
        Eigen::LLT<Matrix> llt(G);
        logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum() +
                 static_cast<double>(cfg.p - cfg.q) * std::log(tau2);
    }
    return -cfg.exponent() * logdet;
}

/// grad log pi(B) = -(p+q+2) (tau^2 I_p + BB^T)^{-1} B
///                = -(p+q+2) B (tau^2 I_q + B^T B)^{-1}.
inline Matrix grad_log_prior(const Matrix& B, const PriorConfig& cfg) {
    detail::check_prior_args(B, cfg);
    const double tau2 = cfg.tau * cfg.tau;
    const double c = -2.0 * cfg.exponent();
    if (cfg.p <= cfg.q) {
        Matrix G = B * B.transpose();
        G.diagonal().array() += tau2;
        return c * Eigen::LLT<Matrix>(G).solve(B);
    }
    Matrix G = B.transpose() * B;
    G.diagonal().array() += tau2;
    return c * Eigen::LLT<Matrix>(G).solve(B.transpose()).transpose();
}

/// Exact draw from the prior. The density is a matrix-variate t with 3 degrees
/// of freedom: Sigma ~ InvWishart(p + 2, tau^2 I_p), B | Sigma ~ MN(0, Sigma, I_q).
/// With the Bartlett factor A (W = A A^T ~ Wishart(p + 2, I_p)) this is
/// B = tau A^{-T} Z, Z iid standard normal.
template <class URBG>
Matrix sample_prior(const PriorConfig& cfg, URBG& rng) {
    const Eigen::Index p = cfg.p;
    const double dof = static_cast<double>(p + 2);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix A = Matrix::Zero(p, p);
    for (Eigen::Index i = 0; i < p; ++i) {
        std::chi_squared_distribution<double> chi2(dof - static_cast<double>(i));
        A(i, i) = std::sqrt(chi2(rng));
        for (Eigen::Index j = 0; j < i; ++j) A(i, j) = normal(rng);
    }
    Matrix Z(p, cfg.q);
    for (Eigen::Index j = 0; j < cfg.q; ++j) {
        for (Eigen::Index i = 0; i < p; ++i) Z(i, j) = normal(rng);
    }
    // A^{-T} Z: solve A^T X = Z with A^T upper triangular.
    Matrix out = A.transpose().triangularView<Eigen::Upper>().solve(Z);
    return cfg.tau * out;
}

struct MomentEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    long draws = 0;
};

/// Monte Carlo estimate of E ||B||_F^2 under the prior (bounded above by
/// q p tau^2). The second moment of ||B||_F^2 is infinite, so the reported
/// standard error is the plug-in value and understates the true spread.
template <class URBG>
MomentEstimate prior_second_moment_check(const PriorConfig& cfg, long draws, URBG& rng) {
    if (draws < 1000) throw invalid_parameter("prior_second_moment_check: need >= 1000 draws");
    if (!(cfg.tau > 0.0)) throw invalid_parameter("prior: tau must be positive");
    double sum = 0.0;
    double sum_sq = 0.0;
    for (long t = 0; t < draws; ++t) {
        const double v = sample_prior(cfg, rng).squaredNorm();
        if (!std::isfinite(v)) throw numerical_failure("prior sampler produced a non-finite draw");
        sum += v;
        sum_sq += v * v;
    }
    MomentEstimate est;
    est.draws = draws;
    est.mean = sum / static_cast<double>(draws);
    const double var = std::max(0.0, sum_sq / static_cast<double>(draws) - est.mean * est.mean);
    est.std_error = std::sqrt(var / static_cast<double>(draws));
    return est;
}

}  // namespace frrr
