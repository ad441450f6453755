#pragma once

// Natural exponential families with canonical and non-canonical links.
//
// Every response y_ij has density exp{(y theta - b(theta))/a + c(y, a)}, and the
// link fixes theta through (h o b')(theta) = x_i^T beta_j. The catalog covers
// gaussian, logistic, probit, poisson-log, gamma-log and negative-binomial-log.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <string_view>

#include <boost/math/special_functions/erf.hpp>

#include "frrr/special.hpp"
#include "frrr/types.hpp"

namespace frrr {

enum class FamilyId { gaussian, bernoulli_logit, bernoulli_probit, poisson_log, gamma_log, negbin_log };

inline constexpr std::array<FamilyId, 6> kAllFamilies = {
    FamilyId::gaussian,    FamilyId::bernoulli_logit, FamilyId::bernoulli_probit,
    FamilyId::poisson_log, FamilyId::gamma_log,       FamilyId::negbin_log};

inline std::string_view to_string(FamilyId id) {
    switch (id) {
        case FamilyId::gaussian: return "gaussian";
        case FamilyId::bernoulli_logit: return "bernoulli_logit";
        case FamilyId::bernoulli_probit: return "bernoulli_probit";
        case FamilyId::poisson_log: return "poisson_log";
        case FamilyId::gamma_log: return "gamma_log";
        case FamilyId::negbin_log: return "negbin_log";
    }
    return "unknown";
}

inline FamilyId family_from_string(std::string_view name) {
    for (FamilyId id : kAllFamilies) {
        if (to_string(id) == name) return id;
    }
    throw invalid_parameter("unknown family '" + std::string(name) + "'");
}

/// The response law behind a family, ignoring the link. Two families with the
/// same base share b(.) and hence every divergence formula.
enum class ResponseLaw { normal, bernoulli, poisson, gamma, negative_binomial };

inline ResponseLaw response_law(FamilyId id) {
    switch (id) {
        case FamilyId::gaussian: return ResponseLaw::normal;
        case FamilyId::bernoulli_logit:
        case FamilyId::bernoulli_probit: return ResponseLaw::bernoulli;
        case FamilyId::poisson_log: return ResponseLaw::poisson;
        case FamilyId::gamma_log: return ResponseLaw::gamma;
        case FamilyId::negbin_log: return ResponseLaw::negative_binomial;
    }
    return ResponseLaw::normal;
}

inline bool is_discrete(FamilyId id) {
    const auto law = response_law(id);
    return law == ResponseLaw::bernoulli || law == ResponseLaw::poisson ||
           law == ResponseLaw::negative_binomial;
}

/// User-facing knobs of a family. Unset dispersion takes the family default.
struct FamilyOptions {
    std::optional<double> dispersion;
    double shape = 1.0;  // gamma shape / negative-binomial failures k
    double theta_lo = -std::numeric_limits<double>::infinity();
    double theta_hi = std::numeric_limits<double>::infinity();
    double clip_margin = 1e-3;
};

/// One exponential family plus link, with its admissible parameter interval
/// Theta already intersected with the natural domain. Immutable.
class FamilySpec {
public:
    explicit FamilySpec(FamilyId id, FamilyOptions opts = {}) : id_(id), opts_(opts) {
        if (!(opts_.shape > 0.0) || !std::isfinite(opts_.shape)) {
            throw invalid_parameter("family shape k must be positive and finite");
        }
        if (!(opts_.clip_margin > 0.0)) {
            throw invalid_parameter("clip_margin must be positive");
        }
        const auto law = response_law(id_);
        const double natural_a = law == ResponseLaw::gamma ? 1.0 / opts_.shape : 1.0;
        if (law == ResponseLaw::normal) {
            dispersion_ = opts_.dispersion.value_or(1.0);
            if (!(dispersion_ > 0.0) || !std::isfinite(dispersion_)) {
                throw invalid_parameter("dispersion a must be positive and finite");
            }
        } else {
            dispersion_ = opts_.dispersion.value_or(natural_a);
            if (std::abs(dispersion_ - natural_a) > 1e-12 * natural_a) {
                throw invalid_parameter(std::string(to_string(id_)) +
                                        ": dispersion is fixed by the family (a = " +
                                        std::to_string(natural_a) + ")");
            }
            dispersion_ = natural_a;
        }

        lo_ = opts_.theta_lo;
        hi_ = opts_.theta_hi;
        if (law == ResponseLaw::gamma || law == ResponseLaw::negative_binomial) {
            hi_ = std::min(hi_, -opts_.clip_margin);
        }
        if (std::isnan(lo_) || std::isnan(hi_) || !(lo_ <= hi_)) {
            throw invalid_parameter("empty parameter interval Theta");
        }
    }

    FamilyId id() const { return id_; }
    ResponseLaw law() const { return response_law(id_); }
    double dispersion() const { return dispersion_; }
    double shape() const { return opts_.shape; }
    double clip_margin() const { return opts_.clip_margin; }
    const FamilyOptions& options() const { return opts_; }

    /// Effective Theta = configured interval intersected with the natural domain.
    double theta_lo() const { return lo_; }
    double theta_hi() const { return hi_; }

    bool canonical() const {
        return id_ == FamilyId::gaussian || id_ == FamilyId::bernoulli_logit ||
               id_ == FamilyId::poisson_log;
    }

    bool in_natural_domain(double theta) const {
        if (!std::isfinite(theta)) return false;
        const auto law = response_law(id_);
        if (law == ResponseLaw::gamma || law == ResponseLaw::negative_binomial) {
            return theta < 0.0;
        }
        return true;
    }

    bool in_theta(double theta) const { return theta >= lo_ && theta <= hi_; }

private:
    FamilyId id_;
    FamilyOptions opts_;
    double dispersion_ = 1.0;
    double lo_ = 0.0;
    double hi_ = 0.0;
};

namespace detail {

inline void require_domain(const FamilySpec& f, double theta) {
    if (!f.in_natural_domain(theta)) {
        throw invalid_parameter(std::string(to_string(f.id())) + ": theta = " +
                                std::to_string(theta) + " outside the natural domain");
    }
}

}  // namespace detail

// --- log-partition and derivatives ------------------------------------------

inline double b_value(const FamilySpec& f, double theta) {
    detail::require_domain(f, theta);
    switch (f.law()) {
        case ResponseLaw::normal: return 0.5 * theta * theta;
        case ResponseLaw::bernoulli: return special::softplus(theta);
        case ResponseLaw::poisson: return std::exp(theta);
        case ResponseLaw::gamma: return -std::log(-theta);
        case ResponseLaw::negative_binomial: return -f.shape() * special::log1mexp(theta);
    }
    return 0.0;
}

inline double b_prime(const FamilySpec& f, double theta) {
    detail::require_domain(f, theta);
    switch (f.law()) {
        case ResponseLaw::normal: return theta;
        case ResponseLaw::bernoulli: return special::sigmoid(theta);
        case ResponseLaw::poisson: return std::exp(theta);
        case ResponseLaw::gamma: return -1.0 / theta;
        case ResponseLaw::negative_binomial: return f.shape() / std::expm1(-theta);
    }
    return 0.0;
}

inline double b_second(const FamilySpec& f, double theta) {
    detail::require_domain(f, theta);
    switch (f.law()) {
        case ResponseLaw::normal: return 1.0;
        case ResponseLaw::bernoulli: return special::sigmoid(theta) * special::sigmoid(-theta);
        case ResponseLaw::poisson: return std::exp(theta);
        case ResponseLaw::gamma: return 1.0 / (theta * theta);
        case ResponseLaw::negative_binomial: {
            // k e^t / (1 - e^t)^2 = k / (e^{-t} (1 - e^t)^2), with 1 - e^t = -expm1(t)
            const double d = std::expm1(theta);
            return f.shape() * std::exp(theta) / (d * d);
        }
    }
    return 0.0;
}

// --- link ---------------------------------------------------------------------

/// Solution of (h o b')(theta) = eta before clipping to Theta.
inline double theta_unclipped(const FamilySpec& f, double eta) {
    switch (f.id()) {
        case FamilyId::gaussian:
        case FamilyId::bernoulli_logit:
        case FamilyId::poisson_log: return eta;
        case FamilyId::bernoulli_probit:
            // logit(Phi(eta)) as a difference of logs; stable for large |eta|.
            return special::log_normal_cdf(eta) - special::log_normal_cdf(-eta);
        case FamilyId::gamma_log: return -std::exp(-eta);
        case FamilyId::negbin_log: {
            // log(m / (1 + m)) with m = e^eta / k
            const double log_m = eta - std::log(f.shape());
            return -special::softplus(-log_m);
        }
    }
    return eta;
}

inline double clip_theta(const FamilySpec& f, double theta) {
    return std::clamp(theta, f.theta_lo(), f.theta_hi());
}

/// Natural parameter for linear predictor eta, clipped to Theta.
inline double theta_from_eta(const FamilySpec& f, double eta) {
    return clip_theta(f, theta_unclipped(f, eta));
}

/// (h o b')(theta): the linear predictor that produces theta. Inverse of
/// theta_unclipped.
inline double eta_from_theta(const FamilySpec& f, double theta) {
    detail::require_domain(f, theta);
    switch (f.id()) {
        case FamilyId::gaussian:
        case FamilyId::bernoulli_logit:
        case FamilyId::poisson_log: return theta;
        case FamilyId::bernoulli_probit: {
            // Phi^{-1}(sigmoid(theta)) via the complementary error function.
            using boost::math::erfc_inv;
            if (theta < 0.0) return -std::numbers::sqrt2 * erfc_inv(2.0 * special::sigmoid(theta));
            return std::numbers::sqrt2 * erfc_inv(2.0 * special::sigmoid(-theta));
        }
        case FamilyId::gamma_log: return -std::log(-theta);
        case FamilyId::negbin_log:
            return std::log(f.shape()) + theta - special::log1mexp(theta);
    }
    return theta;
}

/// d theta / d eta of the unclipped link; strictly positive.
inline double dtheta_deta(const FamilySpec& f, double eta) {
    switch (f.id()) {
        case FamilyId::gaussian:
        case FamilyId::bernoulli_logit:
        case FamilyId::poisson_log: return 1.0;
        case FamilyId::bernoulli_probit: {
            // phi(eta) / (Phi(eta) (1 - Phi(eta))) = phi/Phi(eta) + phi/Phi(-eta)
            const double lp = special::log_normal_pdf(eta);
            return std::exp(lp - special::log_normal_cdf(eta)) +
                   std::exp(lp - special::log_normal_cdf(-eta));
        }
        case FamilyId::gamma_log: return std::exp(-eta);
        case FamilyId::negbin_log: return 1.0 / (1.0 + std::exp(eta) / f.shape());
    }
    return 1.0;
}

/// theta(eta) together with the derivative of the clipped map (zero where
/// clipping is active).
struct LinkEval {
    double theta;
    double dtheta;
    bool clipped;
};

inline LinkEval link_eval(const FamilySpec& f, double eta) {
    const double raw = theta_unclipped(f, eta);
    if (raw < f.theta_lo()) return {f.theta_lo(), 0.0, true};
    if (raw > f.theta_hi()) return {f.theta_hi(), 0.0, true};
    return {raw, dtheta_deta(f, eta), false};
}

// --- bounds -------------------------------------------------------------------

/// inf/sup of b'' and sup |b'| over Theta. Infinite values mark bounds that do
/// not exist on the configured interval.
struct FamilyBounds {
    double c_lower = 0.0;  // C_L
    double c_upper = 0.0;  // C_U
    double u1 = 0.0;       // U_1

    bool has_finite_upper() const { return std::isfinite(c_upper); }
    bool has_positive_lower() const { return c_lower > 0.0; }
    bool has_finite_u1() const { return std::isfinite(u1); }

    double require_c_upper() const {
        if (!has_finite_upper()) throw unbounded_bound("C_U is infinite on Theta");
        return c_upper;
    }
    double require_c_lower() const {
        if (!has_positive_lower()) throw unbounded_bound("C_L is zero on Theta");
        return c_lower;
    }
    double require_u1() const {
        if (!has_finite_u1()) throw unbounded_bound("U_1 is infinite on Theta; bound Theta");
        return u1;
    }
};

inline FamilyBounds family_bounds(const FamilySpec& f) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    const double lo = f.theta_lo();
    const double hi = f.theta_hi();
    FamilyBounds out;
    switch (f.law()) {
        case ResponseLaw::normal:
            out.c_lower = out.c_upper = 1.0;
            out.u1 = std::max(std::abs(lo), std::abs(hi));
            break;
        case ResponseLaw::bernoulli: {
            // b'' is unimodal with its peak at 0 and tends to 0 at +-inf.
            auto b2 = [](double t) {
                return std::isinf(t) ? 0.0 : special::sigmoid(t) * special::sigmoid(-t);
            };
            out.c_upper = b2(std::clamp(0.0, lo, hi));
            out.c_lower = std::min(b2(lo), b2(hi));
            out.u1 = std::isinf(hi) ? 1.0 : special::sigmoid(hi);
            break;
        }
        case ResponseLaw::poisson:
            out.c_lower = std::exp(lo);
            out.c_upper = std::exp(hi);
            out.u1 = out.c_upper;
            break;
        case ResponseLaw::gamma:
            // b'' = 1/theta^2 increases on (-inf, 0); hi <= -clip_margin < 0.
            out.c_lower = std::isinf(lo) ? 0.0 : b_second(f, lo);
            out.c_upper = b_second(f, hi);
            out.u1 = b_prime(f, hi);
            break;
        case ResponseLaw::negative_binomial:
            out.c_lower = std::isinf(lo) ? 0.0 : b_second(f, lo);
            out.c_upper = b_second(f, hi);
            out.u1 = b_prime(f, hi);
            break;
    }
    if (std::isnan(out.c_upper)) out.c_upper = inf;
    return out;
}

// --- responses ----------------------------------------------------------------

inline bool in_support(const FamilySpec& f, double y) {
    if (!std::isfinite(y)) return false;
    switch (f.law()) {
        case ResponseLaw::normal: return true;
        case ResponseLaw::bernoulli: return y == 0.0 || y == 1.0;
        case ResponseLaw::poisson:
        case ResponseLaw::negative_binomial: return y >= 0.0 && y == std::floor(y);
        case ResponseLaw::gamma: return y > 0.0;
    }
    return false;
}

/// c(y, a) of the density; only needed for full log-densities.
inline double log_base_measure(const FamilySpec& f, double y) {
    const double a = f.dispersion();
    switch (f.law()) {
        case ResponseLaw::normal:
            return -0.5 * y * y / a - 0.5 * std::log(2.0 * std::numbers::pi * a);
        case ResponseLaw::bernoulli: return 0.0;
        case ResponseLaw::poisson: return -std::lgamma(y + 1.0);
        case ResponseLaw::gamma: {
            const double k = f.shape();
            return (k - 1.0) * std::log(y) + k * std::log(k) - std::lgamma(k);
        }
        case ResponseLaw::negative_binomial: {
            const double k = f.shape();
            return std::lgamma(y + k) - std::lgamma(k) - std::lgamma(y + 1.0);
        }
    }
    return 0.0;
}

/// Full log-density log p_theta(y).
inline double log_density(const FamilySpec& f, double y, double theta) {
    if (!in_support(f, y)) throw data_error("response outside the family support");
    return (y * theta - b_value(f, theta)) / f.dispersion() + log_base_measure(f, y);
}

/// One draw from the family at natural parameter theta.
template <class URBG>
double sample_response(const FamilySpec& f, double theta, URBG& rng) {
    if (!f.in_theta(theta) || !f.in_natural_domain(theta)) {
        throw invalid_parameter("sample_response: theta outside Theta");
    }
    switch (f.law()) {
        case ResponseLaw::normal: {
            std::normal_distribution<double> d(theta, std::sqrt(f.dispersion()));
            return d(rng);
        }
        case ResponseLaw::bernoulli: {
            std::bernoulli_distribution d(special::sigmoid(theta));
            return d(rng) ? 1.0 : 0.0;
        }
        case ResponseLaw::poisson: {
            std::poisson_distribution<long long> d(std::exp(theta));
            return static_cast<double>(d(rng));
        }
        case ResponseLaw::gamma: {
            const double k = f.shape();
            std::gamma_distribution<double> d(k, 1.0 / (-k * theta));
            return d(rng);
        }
        case ResponseLaw::negative_binomial: {
            // Gamma-Poisson mixture; valid for non-integer k.
            const double odds = 1.0 / std::expm1(-theta);  // e^t / (1 - e^t)
            std::gamma_distribution<double> g(f.shape(), odds);
            const double lambda = g(rng);
            if (lambda <= 0.0) return 0.0;
            std::poisson_distribution<long long> d(lambda);
            return static_cast<double>(d(rng));
        }
    }
    return 0.0;
}

// --- data ---------------------------------------------------------------------

/// eta = X B.
inline Matrix linear_predictor(const Matrix& X, const Matrix& B) {
    if (X.cols() != B.rows()) throw shape_error("linear_predictor: X.cols() != B.rows()");
    return X * B;
}

/// Design X (n x p), responses Y (n x q) and the family they follow.
struct Dataset {
    Matrix X;
    Matrix Y;
    FamilySpec family;

    Eigen::Index n() const { return X.rows(); }
    Eigen::Index p() const { return X.cols(); }
    Eigen::Index q() const { return Y.cols(); }

    /// Throws shape_error / data_error on inconsistent dimensions or responses
    /// outside the family support.
    void validate() const {
        if (X.rows() != Y.rows()) throw shape_error("dataset: X and Y row counts differ");
        if (!X.allFinite()) throw data_error("dataset: non-finite design entry");
        for (Eigen::Index j = 0; j < Y.cols(); ++j) {
            for (Eigen::Index i = 0; i < Y.rows(); ++i) {
                if (!in_support(family, Y(i, j))) {
                    throw data_error("dataset: Y(" + std::to_string(i) + "," + std::to_string(j) +
                                     ") = " + std::to_string(Y(i, j)) + " outside the " +
                                     std::string(to_string(family.id())) + " support");
                }
            }
        }
    }
};

}  // namespace frrr
