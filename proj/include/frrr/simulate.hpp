#pragma once

// Synthetic low-rank truths, fixed designs and response generation.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/SVD>

#include "frrr/model.hpp"
#include "frrr/types.hpp"

namespace frrr {

struct SyntheticTruth {
    Matrix B0;
    int rank = 0;
    double scale = 1.0;
    double eta_min = 0.0;
    double eta_max = 0.0;
    long theta_clip_events = 0;

    double frob() const { return B0.norm(); }
};

namespace detail {

inline Matrix gaussian_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix m(r, c);
    // column-major fill order is part of the reproducibility contract
    for (Eigen::Index j = 0; j < c; ++j) {
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = n01(rng);
    }
    return m;
}

}  // namespace detail

/// B0 = scale U V^T with U (p x r), V (q x r) iid N(0,1), redrawn until the
/// r-th singular value is clearly nonzero.
inline SyntheticTruth make_low_rank_truth(Eigen::Index p, Eigen::Index q, int r, double scale, Rng& rng) {
    if (p < 1 || q < 1) throw invalid_parameter("make_low_rank_truth: p, q must be positive");
    if (r < 0 || r > std::min(p, q)) throw invalid_parameter("make_low_rank_truth: need 0 <= r <= min(p, q)");
    if (!(scale > 0.0) || !std::isfinite(scale)) throw invalid_parameter("make_low_rank_truth: scale must be positive");
    SyntheticTruth t;
    t.rank = r;
    t.scale = scale;
    if (r == 0) {
        t.B0 = Matrix::Zero(p, q);
        return t;
    }
    for (int attempt = 0; attempt < 100; ++attempt) {
        const Matrix U = detail::gaussian_matrix(p, r, rng);
        const Matrix V = detail::gaussian_matrix(q, r, rng);
        Matrix B = U * V.transpose();
        const Vector s = Eigen::JacobiSVD<Matrix>(B).singularValues();
        if (s(r - 1) > 1e-6 * s(0)) {
            t.B0 = scale * B;
            return t;
        }
    }
    throw numerical_failure("make_low_rank_truth: could not draw a full-rank factor pair");
}

enum class DesignMode { iid_normal, column_normalized };

inline std::string_view to_string(DesignMode m) {
    return m == DesignMode::iid_normal ? "iid_normal" : "column_normalized";
}

inline DesignMode design_mode_from_string(std::string_view s) {
    if (s == "iid_normal") return DesignMode::iid_normal;
    if (s == "column_normalized") return DesignMode::column_normalized;
    throw invalid_parameter("unknown design mode '" + std::string(s) + "'");
}

/// n x p design: iid N(0,1) entries, optionally rescaled so every column has
/// Euclidean norm sqrt(n).
inline Matrix make_design(Eigen::Index n, Eigen::Index p, DesignMode mode, Rng& rng) {
    if (n < 1 || p < 1) throw invalid_parameter("make_design: n, p must be positive");
    Matrix X = detail::gaussian_matrix(n, p, rng);
    if (mode == DesignMode::column_normalized) {
        const double target = std::sqrt(static_cast<double>(n));
        for (Eigen::Index j = 0; j < p; ++j) {
            const double norm = X.col(j).norm();
            if (norm == 0.0) throw numerical_failure("make_design: zero column");
            X.col(j) *= target / norm;
        }
    }
    return X;
}

/// Multiplier c such that the `coverage` quantile of |(X (c B))_ij| equals
/// `bound`. Returns 1 for a zero predictor.
inline double calibrate_scale(const Matrix& X, const Matrix& B, double bound = 3.0, double coverage = 0.99) {
    if (!(bound > 0.0) || !(coverage > 0.0 && coverage <= 1.0)) {
        throw invalid_parameter("calibrate_scale: need bound > 0 and coverage in (0, 1]");
    }
    const Matrix eta = linear_predictor(X, B);
    std::vector<double> a(static_cast<std::size_t>(eta.size()));
    for (Eigen::Index k = 0; k < eta.size(); ++k) a[static_cast<std::size_t>(k)] = std::abs(eta.reshaped()(k));
    if (a.empty()) return 1.0;
    const auto idx = static_cast<std::size_t>(std::ceil(coverage * static_cast<double>(a.size()))) - 1;
    std::nth_element(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(idx), a.end());
    const double qv = a[idx];
    return qv > 0.0 ? bound / qv : 1.0;
}

/// Low-rank truth whose linear predictors on X satisfy |eta| <= eta_bound in
/// a `coverage` fraction of cells.
inline SyntheticTruth make_calibrated_truth(const Matrix& X, Eigen::Index q, int r, Rng& rng,
                                            double eta_bound = 3.0, double coverage = 0.99) {
    SyntheticTruth t = make_low_rank_truth(X.cols(), q, r, 1.0, rng);
    if (r == 0) return t;
    const double c = calibrate_scale(X, t.B0, eta_bound, coverage);
    t.B0 *= c;
    t.scale = c;
    return t;
}

/// Y_ij ~ p_theta_ij with theta_ij = theta_from_eta(x_i^T B0_j). Records the
/// realized eta range and the number of cells where clipping changed theta.
inline Dataset generate_dataset(const Matrix& X, SyntheticTruth& truth, const FamilySpec& family, Rng& rng) {
    const Matrix eta = linear_predictor(X, truth.B0);
    Dataset d{X, Matrix(eta.rows(), eta.cols()), family};
    truth.theta_clip_events = 0;
    truth.eta_min = eta.size() ? eta.minCoeff() : 0.0;
    truth.eta_max = eta.size() ? eta.maxCoeff() : 0.0;
    for (Eigen::Index j = 0; j < eta.cols(); ++j) {
        for (Eigen::Index i = 0; i < eta.rows(); ++i) {
            const double raw = theta_unclipped(family, eta(i, j));
            const double th = clip_theta(family, raw);
            if (th != raw) ++truth.theta_clip_events;
            d.Y(i, j) = sample_response(family, th, rng);
        }
    }
    return d;
}

/// Natural parameters theta(X B), clipped to Theta.
inline Matrix natural_parameters(const FamilySpec& f, const Matrix& X, const Matrix& B) {
    Matrix eta = linear_predictor(X, B);
    for (auto& v : eta.reshaped()) v = theta_from_eta(f, v);
    return eta;
}

/// kappa = min_{B != 0} ||X B||_F / (sqrt(n) ||B||_F) = s_min(X) / sqrt(n); 0 if n < p.
inline double compute_kappa(const Matrix& X) {
    if (X.rows() < X.cols() || X.size() == 0) return 0.0;
    const Vector s = Eigen::JacobiSVD<Matrix>(X).singularValues();
    return s(s.size() - 1) / std::sqrt(static_cast<double>(X.rows()));
}

/// ||X (B_hat - B0)||_F^2 / (n q).
inline double prediction_error(const Matrix& X, const Matrix& B_hat, const Matrix& B0) {
    require_same_shape(B_hat, B0, "prediction_error");
    if (X.cols() != B0.rows()) throw shape_error("prediction_error: X.cols() != B.rows()");
    const double nq = static_cast<double>(X.rows() * B0.cols());
    if (nq == 0.0) return 0.0;
    return (X * (B_hat - B0)).squaredNorm() / nq;
}

}  // namespace frrr
