#pragma once

// Verification harness: lemma sweeps, rate studies for the well-specified
// theorems, and the misspecification study around the KL minimizer.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include "frrr/divergence.hpp"
#include "frrr/model.hpp"
#include "frrr/oracles.hpp"
#include "frrr/posterior.hpp"
#include "frrr/prior.hpp"
#include "frrr/simulate.hpp"
#include "frrr/types.hpp"

namespace frrr {

// --- small utilities ------------------------------------------------------------

/// Worker count: `requested` if positive, else FRRR_THREADS if set, else the
/// hardware concurrency.
inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("FRRR_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers. Results must be
/// written to per-index slots; the first exception by index is rethrown.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int t = std::max(1, std::min<int>(threads, static_cast<int>(count)));
    if (t == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < t; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

struct MeanSe {
    double mean = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
    long count = 0;
};

inline MeanSe mean_se(const std::vector<double>& v) {
    MeanSe out;
    out.count = static_cast<long>(v.size());
    if (v.empty()) return out;
    double s = 0.0;
    for (double x : v) s += x;
    out.mean = s / static_cast<double>(v.size());
    if (v.size() < 2) {
        out.se = 0.0;
        return out;
    }
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.se = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    return out;
}

/// Least-squares line y = intercept + slope x with a two-sided t interval for
/// the slope.
struct SlopeFit {
    double slope = std::numeric_limits<double>::quiet_NaN();
    double intercept = std::numeric_limits<double>::quiet_NaN();
    double se = std::numeric_limits<double>::quiet_NaN();
    double ci_low = std::numeric_limits<double>::quiet_NaN();
    double ci_high = std::numeric_limits<double>::quiet_NaN();
    long points = 0;
};

inline SlopeFit fit_slope(const std::vector<double>& x, const std::vector<double>& y, double level = 0.95) {
    if (x.size() != y.size()) throw invalid_parameter("fit_slope: size mismatch");
    SlopeFit f;
    f.points = static_cast<long>(x.size());
    if (x.size() < 2) return f;
    const double k = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= k;
    my /= k;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0.0) throw invalid_parameter("fit_slope: x values are all equal");
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    if (x.size() > 2) {
        double rss = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double e = y[i] - f.intercept - f.slope * x[i];
            rss += e * e;
        }
        f.se = std::sqrt(rss / (k - 2.0) / sxx);
        const boost::math::students_t dist(k - 2.0);
        const double t = boost::math::quantile(boost::math::complement(dist, (1.0 - level) / 2.0));
        f.ci_low = f.slope - t * f.se;
        f.ci_high = f.slope + t * f.se;
    }
    return f;
}

// --- lemma sweep ----------------------------------------------------------------

/// Family with a bounded Theta on which every lemma constant is finite; used
/// by the sweeps and the CLI default.
inline FamilySpec bounded_family(FamilyId id) {
    FamilyOptions o;
    switch (response_law(id)) {
        case ResponseLaw::normal:
            o.theta_lo = -3.0;
            o.theta_hi = 3.0;
            break;
        case ResponseLaw::bernoulli:
        case ResponseLaw::poisson:
            o.theta_lo = -2.0;
            o.theta_hi = 2.0;
            break;
        case ResponseLaw::gamma:
            o.shape = 2.0;
            o.dispersion = 0.5;
            o.theta_lo = -3.0;
            o.theta_hi = -0.25;
            break;
        case ResponseLaw::negative_binomial:
            o.shape = 2.0;
            o.theta_lo = -3.0;
            o.theta_hi = -0.1;
            break;
    }
    return FamilySpec(id, o);
}

struct VerifyOptions {
    std::vector<double> alphas{0.25, 0.5, 0.75};
    int max_rows = 4;        // n drawn uniformly from 1..max_rows
    int max_cols = 3;        // q drawn uniformly from 1..max_cols
    int zero_gap_every = 50;  // every k-th trial uses Zeta = Theta
    double overshoot = 0.1;   // entries drawn on Theta widened by this fraction, then clipped
    double rel_tol = 1e-12;   // rounding allowance relative to max(|exact|, |bound|)
    int oracle_every = 100;   // brute-force cross-check of the second moment every k-th trial
    bool keep_rows = true;
};

struct BoundCheck {
    long trial = 0;
    std::string lemma;
    double alpha = std::numeric_limits<double>::quiet_NaN();
    double exact = 0.0;
    double bound = 0.0;
    bool satisfied = true;
};

struct LemmaSummary {
    std::string lemma;
    double alpha = std::numeric_limits<double>::quiet_NaN();
    bool diagnostic = false;  // not one of the four stated lemmas
    long checks = 0;
    long violations = 0;
    double max_ratio = 0.0;  // max exact / bound over trials with bound > 0
    double min_ratio = std::numeric_limits<double>::infinity();
    double worst_excess = 0.0;  // max (exact - bound) for upper bounds, (bound - exact) for lower

    double satisfied_fraction() const {
        return checks == 0 ? 1.0 : static_cast<double>(checks - violations) / static_cast<double>(checks);
    }
};

struct BoundReport {
    FamilyId family = FamilyId::gaussian;
    double theta_lo = 0.0;
    double theta_hi = 0.0;
    FamilyBounds bounds;
    long trials = 0;
    double rel_tol = 0.0;
    std::vector<BoundCheck> rows;
    std::vector<LemmaSummary> summary;
    long oracle_checks = 0;
    double oracle_max_abs_diff = 0.0;  // closed-form vs brute-force second moment

    const LemmaSummary& find(const std::string& lemma, double alpha = std::numeric_limits<double>::quiet_NaN()) const {
        for (const auto& s : summary) {
            if (s.lemma == lemma && ((std::isnan(alpha) && std::isnan(s.alpha)) || s.alpha == alpha)) return s;
        }
        throw invalid_parameter("no summary for lemma " + lemma);
    }

    /// Violations among the four stated lemmas.
    long stated_violations() const {
        long v = 0;
        for (const auto& s : summary) v += s.diagnostic ? 0 : s.violations;
        return v;
    }

    /// satisfied fraction pooled over the stated lemmas
    double satisfied_fraction() const {
        long c = 0;
        long v = 0;
        for (const auto& s : summary) {
            if (s.diagnostic) continue;
            c += s.checks;
            v += s.violations;
        }
        return c == 0 ? 1.0 : static_cast<double>(c - v) / static_cast<double>(c);
    }
};

namespace detail {

template <class URBG>
Matrix random_theta(const FamilySpec& f, Eigen::Index n, Eigen::Index q, double overshoot, URBG& rng) {
    const double lo = f.theta_lo();
    const double hi = f.theta_hi();
    const double w = hi - lo;
    std::uniform_real_distribution<double> u(lo - overshoot * w, hi + overshoot * w);
    Matrix m(n, q);
    for (Eigen::Index j = 0; j < q; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) m(i, j) = std::clamp(u(rng), lo, hi);
    }
    return m;
}

}  // namespace detail

/// Checks the KL upper, Renyi lower, second-moment and misspecified-KL
/// inequalities on `trials` random parameter matrices drawn on the family's
/// Theta, using closed-form divergences (cross-checked against brute force on
/// a subset). Also records the alpha-scaled Renyi lower bound as a diagnostic.
template <class URBG>
BoundReport verify_divergence_bounds(const FamilySpec& f, long trials, URBG& rng, const VerifyOptions& opt = {}) {
    if (trials < 0) throw invalid_parameter("verify_divergence_bounds: trials must be nonnegative");
    if (!std::isfinite(f.theta_lo()) || !std::isfinite(f.theta_hi())) {
        throw unbounded_bound("verify_divergence_bounds: Theta must be bounded");
    }
    BoundReport rep;
    rep.family = f.id();
    rep.theta_lo = f.theta_lo();
    rep.theta_hi = f.theta_hi();
    rep.bounds = family_bounds(f);
    rep.bounds.require_c_upper();
    rep.bounds.require_c_lower();
    rep.bounds.require_u1();
    rep.trials = trials;
    rep.rel_tol = opt.rel_tol;

    std::map<std::pair<std::string, double>, std::size_t> index;
    auto summary_for = [&](const std::string& lemma, double alpha, bool diagnostic) -> LemmaSummary& {
        const auto key = std::make_pair(lemma, std::isnan(alpha) ? -1.0 : alpha);
        auto it = index.find(key);
        if (it == index.end()) {
            LemmaSummary s;
            s.lemma = lemma;
            s.alpha = alpha;
            s.diagnostic = diagnostic;
            rep.summary.push_back(s);
            it = index.emplace(key, rep.summary.size() - 1).first;
        }
        return rep.summary[it->second];
    };
    const double nan = std::numeric_limits<double>::quiet_NaN();
    // upper: exact <= bound; lower: exact >= bound
    auto record = [&](long trial, const std::string& lemma, double alpha, double exact, double bound, bool upper,
                      bool diagnostic) {
        const double slack = opt.rel_tol * std::max({std::abs(exact), std::abs(bound), 1e-300});
        const double excess = upper ? exact - bound : bound - exact;
        const bool ok = excess <= slack;
        LemmaSummary& s = summary_for(lemma, alpha, diagnostic);
        ++s.checks;
        s.violations += ok ? 0 : 1;
        s.worst_excess = std::max(s.worst_excess, excess);
        if (bound > 0.0) {
            s.max_ratio = std::max(s.max_ratio, exact / bound);
            s.min_ratio = std::min(s.min_ratio, exact / bound);
        }
        if (opt.keep_rows) rep.rows.push_back({trial, lemma, alpha, exact, bound, ok});
    };

    std::uniform_int_distribution<int> rows_d(1, std::max(1, opt.max_rows));
    std::uniform_int_distribution<int> cols_d(1, std::max(1, opt.max_cols));
    for (long t = 0; t < trials; ++t) {
        const Eigen::Index n = rows_d(rng);
        const Eigen::Index q = cols_d(rng);
        const Matrix Theta = detail::random_theta(f, n, q, opt.overshoot, rng);
        const bool zero_gap = opt.zero_gap_every > 0 && t % opt.zero_gap_every == 0;
        const Matrix Zeta = zero_gap ? Theta : detail::random_theta(f, n, q, opt.overshoot, rng);
        const Matrix Theta0 = detail::random_theta(f, n, q, opt.overshoot, rng);
        const double nq = static_cast<double>(n * q);
        const LemmaBounds lb = lemma_bounds(f, rep.bounds, Theta, Zeta);

        record(t, "kl_upper", nan, kl_avg(f, Theta, Zeta), lb.kl_upper, true, false);
        for (double a : opt.alphas) {
            const double d = renyi_avg(f, Theta, Zeta, a);
            record(t, "renyi_lower", a, d, lb.renyi_lower, false, false);
            record(t, "renyi_lower_alpha_scaled", a, d, lb.renyi_lower_scaled(a), false, true);
        }

        double m2 = 0.0;
        double mis = 0.0;
        for (Eigen::Index j = 0; j < q; ++j) {
            for (Eigen::Index i = 0; i < n; ++i) {
                m2 += log_ratio_second_moment(f, Theta(i, j), Zeta(i, j));
                mis += misspecified_log_ratio_mean(f, Theta0(i, j), Theta(i, j), Zeta(i, j));
            }
        }
        m2 /= nq;
        mis /= nq;
        record(t, "second_moment", nan, m2, lb.second_moment_upper, true, false);
        record(t, "misspecified_kl", nan, mis, lb.misspec(), true, false);

        if (opt.oracle_every > 0 && t % opt.oracle_every == 1) {
            double bf = 0.0;
            for (Eigen::Index j = 0; j < q; ++j) {
                for (Eigen::Index i = 0; i < n; ++i) {
                    bf += bruteforce::log_ratio_second_moment(f, Theta(i, j), Zeta(i, j)).value;
                }
            }
            bf /= nq;
            ++rep.oracle_checks;
            rep.oracle_max_abs_diff = std::max(rep.oracle_max_abs_diff, std::abs(bf - m2) / std::max(1.0, std::abs(m2)));
        }
    }
    return rep;
}

// --- rate study -------------------------------------------------------------------

struct RateStudyConfig {
    FamilyId family = FamilyId::gaussian;
    FamilyOptions family_options;
    std::vector<long> n_grid{100, 200, 400, 800, 1600};
    long p = 8;
    long q = 6;
    std::vector<int> ranks{2};  // the first rank runs on the whole n grid
    long rank_sweep_n = 0;      // other ranks run only at this n; 0 crosses all ranks with all n
    double alpha = 0.5;
    int replications = 20;
    TauPreset tau_preset = TauPreset::theorem1;
    DesignMode design = DesignMode::iid_normal;
    double eta_bound = 3.0;
    double coverage = 0.99;
    long n_steps = 20000;
    long burn_in = 4000;
    long thin = 10;
    bool precondition = true;
    int divergence_samples = 200;  // retained samples used for divergence averages
    std::uint64_t seed = 2024;
    int threads = 0;

    void validate() const {
        if (n_grid.empty() || ranks.empty()) throw invalid_parameter("rate study: empty grid");
        for (long n : n_grid) {
            if (n < 1) throw invalid_parameter("rate study: n must be positive");
        }
        for (int r : ranks) {
            if (r < 0 || r > std::min(p, q)) throw invalid_parameter("rate study: rank out of range");
        }
        if (p < 1 || q < 1) throw invalid_parameter("rate study: p, q must be positive");
        if (replications < 1) throw invalid_parameter("rate study: replications must be positive");
        if (divergence_samples < 1) throw invalid_parameter("rate study: divergence_samples must be positive");
        if (tau_preset == TauPreset::manual) throw invalid_parameter("rate study: tau preset must be a theorem preset");
        FractionalConfig c;
        c.alpha = alpha;
        c.n_steps = n_steps;
        c.burn_in = burn_in;
        c.thin = thin;
        c.validate();
        if ((n_steps - burn_in) / thin < 1) throw invalid_parameter("rate study: no retained samples");
        if (rank_sweep_n > 0 && std::find(n_grid.begin(), n_grid.end(), rank_sweep_n) == n_grid.end()) {
            throw invalid_parameter("rate study: rank_sweep_n must be on the n grid");
        }
    }
};

/// One replication: generate Y, sample, summarize.
struct RateRep {
    long n = 0;
    int rank = 0;
    int rep = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double pred_err_hat = 0.0;   // ||X(B_hat - B0)||^2 / nq
    double est_err_hat = 0.0;    // ||B_hat - B0||^2
    double pred_err_post = 0.0;  // posterior average of ||X(B - B0)||^2 / nq
    double est_err_post = 0.0;   // posterior average of ||B - B0||^2
    double renyi_post = 0.0;     // posterior average of D_alpha(P_B, P_B0), per entry
    double hellinger_post = 0.0;  // posterior average of averaged H^2
    double tv2_upper_post = 0.0;  // posterior average of (TV upper bound from H^2)^2
    double acceptance = 0.0;
    double step_size = 0.0;
    int effective_rank = 0;
    long theta_clip_events = 0;
};

struct RateCell {
    long n = 0;
    long p = 0;
    long q = 0;
    int rank = 0;
    double alpha = 0.0;
    double tau = 0.0;
    double kappa = 0.0;
    double x_frob = 0.0;
    double b0_frob = 0.0;
    int replications = 0;
    int failed = 0;
    bool aborted = false;
    std::string diagnostic;

    MeanSe pred_err_hat, est_err_hat, pred_err_post, est_err_post, renyi_post, hellinger_post, tv2_upper_post,
        acceptance;

    RateFormulas rates;
    // right-hand sides with the stated constants
    double thm1_bound = 0.0;   // (1+a)/(1-a) eps1 on E int D_alpha
    double prop1_bound = 0.0;  // 2a(1+a)/(C_L(1-a)) eps1 on E int ||X(B-B0)||^2/nq
    double cor1_hellinger_bound = 0.0;  // c_alpha eps1
    double cor1_tv2_bound = 0.0;        // 2(1+a)/(a(1-a)) eps1
    double thm3_bound = 0.0;   // 2(1+a)/(1-a) eps3
    double prop2_bound = 0.0;  // 4a(1+a)/(C_L(1-a)) eps3
    double cor4_bound = 0.0;   // 4a(1+a)/(kappa^2 C_L(1-a)) eps'
    double prob_floor = 0.0;   // 1 - 2/(n eps3)
    bool thm3_vacuous = true;

    bool thm1_satisfied = false;
    bool prop1_satisfied = false;      // posterior-averaged error
    bool prop1_hat_satisfied = false;  // error of the posterior mean
    bool bound_satisfied = false;      // mean pred_err_hat <= prop1_bound
    bool prop1_near_miss = false;      // violated by at most 10%
    double thm3_frequency = 0.0;
    double prop2_frequency = 0.0;
    double cor4_frequency = 0.0;
    bool thm3_satisfied = false;
    bool prop2_satisfied = false;
    bool cor4_satisfied = false;
};

struct RateStudyResult {
    RateStudyConfig config;
    std::vector<RateCell> cells;
    std::vector<RateRep> reps;
    SlopeFit slope_hat;   // log mean pred_err_hat vs log n, primary rank
    SlopeFit slope_post;  // same for the posterior-averaged error
    bool n_monotone = false;  // nonincreasing up to 2 SE along n at the primary rank
    bool r_monotone = false;  // nondecreasing up to 2 SE along ranks at rank_sweep_n
    bool r_monotone_checked = false;

    const RateCell* find(long n, int r) const {
        for (const auto& c : cells) {
            if (c.n == n && c.rank == r) return &c;
        }
        return nullptr;
    }
};

namespace detail {

inline std::vector<std::pair<long, int>> rate_cells(const RateStudyConfig& cfg) {
    std::vector<std::pair<long, int>> cells;
    for (std::size_t k = 0; k < cfg.ranks.size(); ++k) {
        for (long n : cfg.n_grid) {
            if (k > 0 && cfg.rank_sweep_n > 0 && n != cfg.rank_sweep_n) continue;
            cells.emplace_back(n, cfg.ranks[k]);
        }
    }
    return cells;
}

/// Fills the theorem right-hand sides of a cell from its rates.
inline void fill_rate_bounds(RateCell& c, const FamilySpec& f, const FamilyBounds& fb) {
    const double a = f.dispersion();
    const double al = c.alpha;
    const double cl = fb.c_lower;
    const double e1 = c.rates.epsilon_n_thm1;
    const double e3 = c.rates.epsilon_n_thm3;
    const double ep = c.rates.epsilon_prime_n;
    c.thm1_bound = (1 + al) / (1 - al) * e1;
    c.prop1_bound = 2 * a * (1 + al) / (cl * (1 - al)) * e1;
    c.cor1_hellinger_bound = c_alpha(al) * e1;
    c.cor1_tv2_bound = 2 * (1 + al) / (al * (1 - al)) * e1;
    c.thm3_bound = 2 * (1 + al) / (1 - al) * e3;
    c.prop2_bound = 4 * a * (1 + al) / (cl * (1 - al)) * e3;
    c.cor4_bound = c.kappa > 0 ? 4 * a * (1 + al) / (c.kappa * c.kappa * cl * (1 - al)) * ep
                               : std::numeric_limits<double>::infinity();
    const double tail = e3 > 0 ? 2.0 / (static_cast<double>(c.n) * e3) : std::numeric_limits<double>::infinity();
    c.prob_floor = 1.0 - tail;
    c.thm3_vacuous = !(tail < 1.0);
}

}  // namespace detail

/// Posterior summaries shared by the studies: chain averages over all retained
/// samples for the matrix errors, and over an evenly spaced subsample for the
/// divergences. `theta_truth` is the truth's natural-parameter matrix.
struct PosteriorSummary {
    Matrix B_hat;
    double pred_err_post = 0.0;
    double est_err_post = 0.0;
    double renyi_post = 0.0;
    double hellinger_post = 0.0;
    double tv2_upper_post = 0.0;
    double theta_sq_post = 0.0;  // posterior average of ||theta(XB) - theta0||^2 / nq
};

inline PosteriorSummary summarize_posterior(const Chain& chain, const Dataset& data, const Matrix& B0,
                                            const Matrix& theta_truth, double alpha, int divergence_samples) {
    if (chain.empty()) throw invalid_parameter("summarize_posterior: empty chain");
    PosteriorSummary s;
    s.B_hat = posterior_mean(chain);
    const double k = static_cast<double>(chain.size());
    const bool have_b0 = B0.size() > 0;
    for (const auto& B : chain.samples) {
        if (have_b0) {
            s.pred_err_post += prediction_error(data.X, B, B0);
            s.est_err_post += (B - B0).squaredNorm();
        }
    }
    s.pred_err_post /= k;
    s.est_err_post /= k;

    const std::size_t m = std::min<std::size_t>(chain.size(), static_cast<std::size_t>(divergence_samples));
    const double nq = static_cast<double>(theta_truth.size());
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t idx = m == 1 ? chain.size() - 1 : i * (chain.size() - 1) / (m - 1);
        const Matrix theta = natural_parameters(data.family, data.X, chain.samples[idx]);
        const double d = renyi_avg(data.family, theta, theta_truth, alpha);
        const double h2 = 2.0 * (1.0 - std::exp(-0.5 * renyi_avg(data.family, theta, theta_truth, 0.5)));
        double lo = 0, hi = 0;
        detail::tv_bounds_from_hellinger(h2, lo, hi);
        s.renyi_post += d;
        s.hellinger_post += h2;
        s.tv2_upper_post += hi * hi;
        s.theta_sq_post += nq > 0 ? (theta - theta_truth).squaredNorm() / nq : 0.0;
    }
    const double md = static_cast<double>(m);
    s.renyi_post /= md;
    s.hellinger_post /= md;
    s.tv2_upper_post /= md;
    s.theta_sq_post /= md;
    return s;
}

/// Sampler settings used by the studies. With `precondition`, the chain starts
/// at a posterior mode and uses the clamped inverse Hessian there.
inline FractionalConfig study_sampler_config(const Dataset& data, const PriorConfig& prior, double alpha, long n_steps,
                                             long burn_in, long thin, std::uint64_t seed, bool precondition) {
    FractionalConfig c;
    c.alpha = alpha;
    c.n_steps = n_steps;
    c.burn_in = burn_in;
    c.thin = thin;
    c.seed = seed;
    if (precondition) {
        PreconditionedStart st = preconditioned_start(data, prior, alpha);
        c.init = std::move(st.init);
        c.preconditioner = std::move(st.preconditioner);
    }
    return c;
}

/// Replicated generate -> sample -> summarize over the (n, rank) grid. One
/// truth per rank (calibrated on a design with max(n) rows, so B0 does not
/// change with n); one design per n shared by all ranks; Y redrawn per
/// replication. A failing replication aborts its cell, not the study.
inline RateStudyResult run_rate_study(const RateStudyConfig& cfg) {
    cfg.validate();
    const FamilySpec f(cfg.family, cfg.family_options);
    const FamilyBounds fb = family_bounds(f);
    fb.require_c_upper();
    fb.require_c_lower();
    RateStudyResult res;
    res.config = cfg;

    const long n_max = *std::max_element(cfg.n_grid.begin(), cfg.n_grid.end());
    std::map<int, Matrix> truths;
    {
        Rng rng = make_rng(cfg.seed, 1);
        const Matrix Xref = make_design(n_max, cfg.p, cfg.design, rng);
        for (int r : cfg.ranks) {
            Rng tr = make_rng(cfg.seed, 100 + static_cast<std::uint64_t>(r));
            truths[r] = make_calibrated_truth(Xref, cfg.q, r, tr, cfg.eta_bound, cfg.coverage).B0;
        }
    }
    std::map<long, Matrix> designs;
    for (long n : cfg.n_grid) {
        Rng rng = make_rng(cfg.seed, 1000 + static_cast<std::uint64_t>(n));
        designs[n] = make_design(n, cfg.p, cfg.design, rng);
    }

    const auto cells = detail::rate_cells(cfg);
    const std::size_t R = static_cast<std::size_t>(cfg.replications);
    res.reps.resize(cells.size() * R);
    parallel_for(res.reps.size(), resolve_threads(cfg.threads), [&](std::size_t k) {
        const auto [n, r] = cells[k / R];
        RateRep& out = res.reps[k];
        out.n = n;
        out.rank = r;
        out.rep = static_cast<int>(k % R);
        out.seed = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(n) * 64 + static_cast<std::uint64_t>(r)),
                               static_cast<std::uint64_t>(out.rep));
        try {
            const Matrix& X = designs.at(n);
            SyntheticTruth truth;
            truth.B0 = truths.at(r);
            truth.rank = r;
            Rng rng(out.seed);
            const Dataset data = generate_dataset(X, truth, f, rng);
            out.theta_clip_events = truth.theta_clip_events;
            const PriorConfig prior = make_prior(cfg.tau_preset, X, cfg.q, f.dispersion());
            const FractionalConfig sc = study_sampler_config(data, prior, cfg.alpha, cfg.n_steps, cfg.burn_in, cfg.thin,
                                                             derive_seed(out.seed, 7), cfg.precondition);
            const Chain chain = run_sampler(data, prior, sc);
            const Matrix theta0 = natural_parameters(f, X, truth.B0);
            const PosteriorSummary s =
                summarize_posterior(chain, data, truth.B0, theta0, cfg.alpha, cfg.divergence_samples);
            out.pred_err_hat = prediction_error(X, s.B_hat, truth.B0);
            out.est_err_hat = (s.B_hat - truth.B0).squaredNorm();
            out.pred_err_post = s.pred_err_post;
            out.est_err_post = s.est_err_post;
            out.renyi_post = s.renyi_post;
            out.hellinger_post = s.hellinger_post;
            out.tv2_upper_post = s.tv2_upper_post;
            out.acceptance = chain.acceptance_rate;
            out.step_size = chain.step_size;
            out.effective_rank = s.B_hat.isZero(0.0) ? 0 : effective_rank(s.B_hat, 1e-3);
            out.ok = true;
        } catch (const std::exception& e) {
            out.ok = false;
            out.error = e.what();
        }
    });

    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        const auto [n, r] = cells[ci];
        RateCell c;
        c.n = n;
        c.p = cfg.p;
        c.q = cfg.q;
        c.rank = r;
        c.alpha = cfg.alpha;
        const Matrix& X = designs.at(n);
        const Matrix& B0 = truths.at(r);
        c.tau = make_prior(cfg.tau_preset, X, cfg.q, f.dispersion()).tau;
        c.kappa = compute_kappa(X);
        c.x_frob = X.norm();
        c.b0_frob = B0.norm();
        c.rates = rate_formulas(static_cast<double>(n), static_cast<double>(cfg.p), static_cast<double>(cfg.q),
                                static_cast<double>(r), f.dispersion(), fb, c.x_frob, c.b0_frob);
        detail::fill_rate_bounds(c, f, fb);

        std::vector<double> ph, eh, pp, ep, rd, hp, tv, acc;
        long in_thm3 = 0, in_prop2 = 0, in_cor4 = 0;
        for (std::size_t k = ci * R; k < (ci + 1) * R; ++k) {
            const RateRep& rr = res.reps[k];
            ++c.replications;
            if (!rr.ok) {
                ++c.failed;
                if (c.diagnostic.empty()) c.diagnostic = "replication " + std::to_string(rr.rep) + ": " + rr.error;
                continue;
            }
            ph.push_back(rr.pred_err_hat);
            eh.push_back(rr.est_err_hat);
            pp.push_back(rr.pred_err_post);
            ep.push_back(rr.est_err_post);
            rd.push_back(rr.renyi_post);
            hp.push_back(rr.hellinger_post);
            tv.push_back(rr.tv2_upper_post);
            acc.push_back(rr.acceptance);
            in_thm3 += rr.renyi_post <= c.thm3_bound ? 1 : 0;
            in_prop2 += rr.pred_err_post <= c.prop2_bound ? 1 : 0;
            in_cor4 += rr.est_err_post <= c.cor4_bound ? 1 : 0;
        }
        c.aborted = c.failed > 0;
        c.pred_err_hat = mean_se(ph);
        c.est_err_hat = mean_se(eh);
        c.pred_err_post = mean_se(pp);
        c.est_err_post = mean_se(ep);
        c.renyi_post = mean_se(rd);
        c.hellinger_post = mean_se(hp);
        c.tv2_upper_post = mean_se(tv);
        c.acceptance = mean_se(acc);
        if (!c.aborted) {
            const double ok = static_cast<double>(ph.size());
            c.thm1_satisfied = c.renyi_post.mean <= c.thm1_bound;
            c.prop1_satisfied = c.pred_err_post.mean <= c.prop1_bound;
            c.prop1_hat_satisfied = c.pred_err_hat.mean <= c.prop1_bound;
            c.bound_satisfied = c.prop1_hat_satisfied;
            c.prop1_near_miss = !c.prop1_satisfied && c.pred_err_post.mean <= 1.1 * c.prop1_bound;
            c.thm3_frequency = static_cast<double>(in_thm3) / ok;
            c.prop2_frequency = static_cast<double>(in_prop2) / ok;
            c.cor4_frequency = static_cast<double>(in_cor4) / ok;
            c.thm3_satisfied = c.thm3_vacuous || c.thm3_frequency >= c.prob_floor;
            c.prop2_satisfied = c.thm3_vacuous || c.prop2_frequency >= c.prob_floor;
            c.cor4_satisfied = c.thm3_vacuous || c.cor4_frequency >= c.prob_floor;
        }
        res.cells.push_back(c);
    }

    // slope and monotonicity along n at the primary rank
    const int r0 = cfg.ranks.front();
    std::vector<double> lx, ly, lyp;
    std::vector<const RateCell*> along_n;
    for (long n : cfg.n_grid) {
        const RateCell* c = res.find(n, r0);
        if (!c || c->aborted || !(c->pred_err_hat.mean > 0)) continue;
        along_n.push_back(c);
        lx.push_back(std::log(static_cast<double>(n)));
        ly.push_back(std::log(c->pred_err_hat.mean));
        lyp.push_back(std::log(c->pred_err_post.mean));
    }
    if (lx.size() >= 2) {
        res.slope_hat = fit_slope(lx, ly);
        res.slope_post = fit_slope(lx, lyp);
    }
    std::sort(along_n.begin(), along_n.end(), [](const RateCell* a, const RateCell* b) { return a->n < b->n; });
    res.n_monotone = along_n.size() == cfg.n_grid.size();
    for (std::size_t i = 1; i < along_n.size(); ++i) {
        const auto& a = along_n[i - 1]->pred_err_hat;
        const auto& b = along_n[i]->pred_err_hat;
        if (b.mean > a.mean + 2.0 * std::hypot(a.se, b.se)) res.n_monotone = false;
    }
    if (cfg.ranks.size() > 1) {
        const long nr = cfg.rank_sweep_n > 0 ? cfg.rank_sweep_n : cfg.n_grid.front();
        std::vector<int> rs = cfg.ranks;
        std::sort(rs.begin(), rs.end());
        res.r_monotone_checked = true;
        res.r_monotone = true;
        for (std::size_t i = 1; i < rs.size(); ++i) {
            const RateCell* a = res.find(nr, rs[i - 1]);
            const RateCell* b = res.find(nr, rs[i]);
            if (!a || !b || a->aborted || b->aborted) {
                res.r_monotone = false;
                continue;
            }
            if (b->pred_err_hat.mean < a->pred_err_hat.mean - 2.0 * std::hypot(a->pred_err_hat.se, b->pred_err_hat.se)) {
                res.r_monotone = false;
            }
        }
    }
    return res;
}

// --- Hellinger / total-variation consequences --------------------------------------

struct HellingerRow {
    long n = 0;
    int rank = 0;
    double alpha = 0.0;
    double c_alpha = 0.0;
    double hellinger_mean = 0.0;
    double hellinger_bound = 0.0;  // c_alpha eps1 (expectation form)
    bool hellinger_ok = false;
    double tv2_mean = 0.0;         // from the TV upper bound, so conservative
    double tv2_bound = 0.0;        // 2(1+a)/(a(1-a)) eps1
    bool tv2_ok = false;
    // probability forms with eps3
    double hellinger_bound3 = 0.0;
    double tv2_bound3 = 0.0;
    double hellinger_frequency = 0.0;
    double tv2_frequency = 0.0;
    double prob_floor = 0.0;
    bool vacuous = true;
    bool hellinger_prob_ok = false;
    bool tv2_prob_ok = false;
};

/// Posterior-averaged H^2 and TV^2 against the expectation bounds (eps from
/// the consistency theorem) and the probability bounds (eps from the
/// concentration theorem), per cell of a rate study.
inline std::vector<HellingerRow> hellinger_consistency_check(const RateStudyResult& study) {
    std::vector<HellingerRow> out;
    const std::size_t R = static_cast<std::size_t>(study.config.replications);
    for (std::size_t ci = 0; ci < study.cells.size(); ++ci) {
        const RateCell& c = study.cells[ci];
        HellingerRow h;
        h.n = c.n;
        h.rank = c.rank;
        h.alpha = c.alpha;
        h.c_alpha = c_alpha(c.alpha);
        h.hellinger_mean = c.hellinger_post.mean;
        h.tv2_mean = c.tv2_upper_post.mean;
        h.hellinger_bound = c.cor1_hellinger_bound;
        h.tv2_bound = c.cor1_tv2_bound;
        const double e3 = c.rates.epsilon_n_thm3;
        h.hellinger_bound3 = h.c_alpha * e3;
        h.tv2_bound3 = 2 * (1 + c.alpha) / (c.alpha * (1 - c.alpha)) * e3;
        h.prob_floor = c.prob_floor;
        h.vacuous = c.thm3_vacuous;
        long ok = 0, hin = 0, tin = 0;
        for (std::size_t k = ci * R; k < (ci + 1) * R && k < study.reps.size(); ++k) {
            const RateRep& rr = study.reps[k];
            if (!rr.ok) continue;
            ++ok;
            hin += rr.hellinger_post <= h.hellinger_bound3 ? 1 : 0;
            tin += rr.tv2_upper_post <= h.tv2_bound3 ? 1 : 0;
        }
        if (ok > 0 && !c.aborted) {
            h.hellinger_ok = h.hellinger_mean <= h.hellinger_bound;
            h.tv2_ok = h.tv2_mean <= h.tv2_bound;
            h.hellinger_frequency = static_cast<double>(hin) / static_cast<double>(ok);
            h.tv2_frequency = static_cast<double>(tin) / static_cast<double>(ok);
            h.hellinger_prob_ok = h.vacuous || h.hellinger_frequency >= h.prob_floor;
            h.tv2_prob_ok = h.vacuous || h.tv2_frequency >= h.prob_floor;
        }
        out.push_back(h);
    }
    return out;
}

// --- KL minimizer -----------------------------------------------------------------

struct KlFitOptions {
    int rank = -1;  // < 0: unconstrained
    int max_iter = 500;
    double grad_tol = 1e-9;  // on the per-entry-averaged objective
    int restarts = 10;
    std::uint64_t seed = 7;
    double agreement_tol = 1e-4;
};

struct KlFitStart {
    std::string label;  // "truth" or "random_k"
    double objective = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    double distance_to_best = 0.0;
};

struct KlFit {
    Matrix B;  // B bar
    double objective = 0.0;  // (1/nq) sum KL(P_truth_ij || P_fit_ij)
    double grad_norm = 0.0;  // Riemannian gradient norm for the rank-constrained fit
    int iterations = 0;
    bool converged = false;
    int rank = -1;
    std::vector<KlFitStart> starts;
    double max_start_distance = 0.0;
    bool agreement = false;  // every converged start within agreement_tol of B bar
    bool certificate = false;  // B bar's objective <= every start's objective
    std::vector<double> trace;  // objective path of the winning start
};

namespace detail {

/// Cross-family per-entry KL needs both families to share the response law and
/// dispersion; then KL = [b'(t0)(t0 - t) - b(t0) + b(t)]/a in natural parameters.
inline void require_comparable(const FamilySpec& truth, const FamilySpec& fit) {
    if (truth.law() != fit.law() || std::abs(truth.dispersion() - fit.dispersion()) > 1e-12 ||
        truth.shape() != fit.shape()) {
        throw unsupported("fit_kl_minimizer: families must share the response law and dispersion");
    }
}

struct KlObjective {
    const FamilySpec& fit;
    const Matrix& X;
    Matrix theta0;  // n x q truth natural parameters
    double nq;

    double value(const Matrix& B) const {
        const Matrix eta = X * B;
        double s = 0.0;
        for (Eigen::Index j = 0; j < eta.cols(); ++j) {
            for (Eigen::Index i = 0; i < eta.rows(); ++i) {
                s += kl_per_entry(fit, theta0(i, j), theta_from_eta(fit, eta(i, j)));
            }
        }
        return s / nq;
    }

    /// gradient wrt eta and Fisher weights (b''(theta) theta'(eta)^2 / a)
    void eta_terms(const Matrix& B, Matrix& G, Matrix& W) const {
        const Matrix eta = X * B;
        G.resize(eta.rows(), eta.cols());
        W.resize(eta.rows(), eta.cols());
        const double a = fit.dispersion();
        for (Eigen::Index j = 0; j < eta.cols(); ++j) {
            for (Eigen::Index i = 0; i < eta.rows(); ++i) {
                const LinkEval le = link_eval(fit, eta(i, j));
                const double d = le.clipped ? 0.0 : le.dtheta;
                G(i, j) = (b_prime(fit, le.theta) - b_prime(fit, theta0(i, j))) * d / (a * nq);
                W(i, j) = b_second(fit, le.theta) * d * d / (a * nq);
            }
        }
    }

    Matrix grad(const Matrix& B) const {
        Matrix G, W;
        eta_terms(B, G, W);
        return X.transpose() * G;
    }
};

/// Projection of a gradient on the tangent space of the rank-r manifold at B.
inline Matrix tangent_projection(const Matrix& B, const Matrix& G, int r) {
    Eigen::JacobiSVD<Matrix> svd(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Matrix U = svd.matrixU().leftCols(r);
    const Matrix V = svd.matrixV().leftCols(r);
    const Matrix UtG = U.transpose() * G;
    return U * UtG + G * V * V.transpose() - U * (UtG * V) * V.transpose();
}

inline Matrix truncate_rank(const Matrix& B, int r) {
    if (r >= std::min(B.rows(), B.cols())) return B;
    if (r == 0) return Matrix::Zero(B.rows(), B.cols());
    Eigen::JacobiSVD<Matrix> svd(B, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal() *
           svd.matrixV().leftCols(r).transpose();
}

struct KlRun {
    Matrix B;
    double objective = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> trace;  // objective at the start and after every accepted step
};

/// Full-rank fit: columns decouple; Fisher-scoring steps with Armijo
/// backtracking, so the objective never increases.
inline KlRun kl_fit_full(const KlObjective& obj, Matrix B, const KlFitOptions& opt) {
    KlRun run;
    double f = obj.value(B);
    run.trace.push_back(f);
    Matrix G, W;
    for (run.iterations = 0; run.iterations < opt.max_iter; ++run.iterations) {
        obj.eta_terms(B, G, W);
        const Matrix grad = obj.X.transpose() * G;
        run.grad_norm = grad.norm();
        if (run.grad_norm < opt.grad_tol) {
            run.converged = true;
            break;
        }
        Matrix dir(B.rows(), B.cols());
        for (Eigen::Index j = 0; j < B.cols(); ++j) {
            Matrix H = obj.X.transpose() * W.col(j).asDiagonal() * obj.X;
            H.diagonal().array() += 1e-12 * std::max(1.0, H.diagonal().maxCoeff());
            dir.col(j) = -H.ldlt().solve(grad.col(j));
        }
        double slope = grad.reshaped().dot(dir.reshaped());
        if (!(slope < 0.0)) {
            dir = -grad;
            slope = -grad.squaredNorm();
        }
        double t = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
            const Matrix cand = B + t * dir;
            const double fc = obj.value(cand);
            if (fc <= f + 1e-4 * t * slope) {
                B = cand;
                f = fc;
                run.trace.push_back(f);
                moved = true;
                break;
            }
        }
        if (!moved) break;
    }
    run.grad_norm = obj.grad(B).norm();
    run.converged = run.grad_norm < opt.grad_tol || run.converged;
    run.B = std::move(B);
    run.objective = f;
    return run;
}

/// Rank-r fit on the factors of B = L R^T. Each step is a joint Newton-type
/// step in (L, R): Fisher weights for the eta curvature plus the exact term
/// from the bilinear parametrization, with |eigenvalues| so the direction
/// always descends, then an Armijo search and an SVD rebalance.
inline KlRun kl_fit_rank(const KlObjective& obj, const Matrix& start, int r, const KlFitOptions& opt) {
    KlRun run;
    const Eigen::Index p = start.rows();
    const Eigen::Index q = start.cols();
    if (r == 0) {
        run.B = Matrix::Zero(p, q);
        run.objective = obj.value(run.B);
        run.converged = true;
        return run;
    }
    Eigen::JacobiSVD<Matrix> svd(start, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector sr = svd.singularValues().head(r).cwiseSqrt();
    Matrix L = svd.matrixU().leftCols(r) * sr.asDiagonal();
    Matrix Rf = svd.matrixV().leftCols(r) * sr.asDiagonal();
    // a start with vanishing singular values would freeze the factors
    for (int k = 0; k < r; ++k) {
        if (sr(k) < 1e-8) {
            L.col(k).setConstant(1e-3);
            Rf.col(k).setConstant(1e-3);
            L(k % p, k) += 1e-2;
            Rf(k % q, k) += 1e-2;
        }
    }
    const Matrix& X = obj.X;
    const Eigen::Index nl = p * r;
    const Eigen::Index dim = (p + q) * r;
    double f = obj.value(L * Rf.transpose());
    run.trace.push_back(f);
    Matrix G, W;
    for (run.iterations = 0; run.iterations < opt.max_iter; ++run.iterations) {
        const Matrix B = L * Rf.transpose();
        obj.eta_terms(B, G, W);
        const Matrix grad = X.transpose() * G;  // p x q
        run.grad_norm = tangent_projection(B, grad, r).norm();
        if (run.grad_norm < opt.grad_tol) {
            run.converged = true;
            break;
        }
        const Matrix Z = X * L;  // n x r
        Vector g(dim);
        g.head(nl) = (grad * Rf).reshaped();
        g.tail(q * r) = (G.transpose() * Z).reshaped();  // q x r, column-major

        // L index (k, a) -> a * p + k; R index (j, b) -> nl + b * q + j
        Matrix H = Matrix::Zero(dim, dim);
        for (Eigen::Index j = 0; j < q; ++j) {
            const Matrix XtW = X.transpose() * W.col(j).asDiagonal();
            const Matrix XtWX = XtW * X;
            const Matrix XtWZ = XtW * Z;  // p x r
            const Matrix ZtWZ = Z.transpose() * W.col(j).asDiagonal() * Z;
            for (int a = 0; a < r; ++a) {
                for (int b = 0; b < r; ++b) {
                    H.block(a * p, b * p, p, p) += Rf(j, a) * Rf(j, b) * XtWX;
                    H(nl + a * q + j, nl + b * q + j) += ZtWZ(a, b);
                    // cross block: d eta_ij/dL_ka = x_ik R_ja, d eta_ij/dR_jb = Z_ib
                    H.block(a * p, nl + b * q + j, p, 1) += Rf(j, a) * XtWZ.col(b);
                }
                // second derivative of eta wrt (L_ka, R_ja) is x_ik
                H.block(a * p, nl + a * q + j, p, 1) += grad.col(j);
            }
        }
        H = H.selfadjointView<Eigen::Upper>();
        Eigen::SelfAdjointEigenSolver<Matrix> es(H);
        const double top = es.eigenvalues().cwiseAbs().maxCoeff();
        const Vector lam = es.eigenvalues().cwiseAbs().cwiseMax(std::max(top, 1e-300) * 1e-10);
        Vector dir = -es.eigenvectors() * (es.eigenvectors().transpose() * g).cwiseQuotient(lam);
        double slope = g.dot(dir);
        if (!(slope < 0.0)) {
            dir = -g;
            slope = -g.squaredNorm();
        }
        double t = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
            const Matrix Lc = L + t * dir.head(nl).reshaped(p, r);
            const Matrix Rc = Rf + t * dir.tail(q * r).reshaped(q, r);
            const double fc = obj.value(Lc * Rc.transpose());
            if (fc <= f + 1e-4 * t * slope) {
                L = Lc;
                Rf = Rc;
                f = fc;
                run.trace.push_back(f);
                moved = true;
                break;
            }
        }
        if (!moved) break;
        // rebalance the factors
        Eigen::JacobiSVD<Matrix> s2(L * Rf.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Vector sq = s2.singularValues().head(r).cwiseSqrt();
        L = s2.matrixU().leftCols(r) * sq.asDiagonal();
        Rf = s2.matrixV().leftCols(r) * sq.asDiagonal();
    }
    run.B = L * Rf.transpose();
    run.objective = obj.value(run.B);
    run.grad_norm = tangent_projection(run.B, obj.grad(run.B), r).norm();
    run.converged = run.converged || run.grad_norm < opt.grad_tol;
    return run;
}

}  // namespace detail

/// B bar = argmin_B (1/nq) sum_ij KL(P^truth_{theta0_ij} || P^fit_{theta(x_i^T B_j)}),
/// optionally over rank <= r. Starts at B0 (rank-truncated) and at
/// opt.restarts random matrices; returns the best run with a multi-start
/// certificate. Throws numerical_failure when no start converges.
inline KlFit fit_kl_minimizer(const FamilySpec& truth_family, const Matrix& B0, const FamilySpec& fitted_family,
                              const Matrix& X, const KlFitOptions& opt = {}) {
    detail::require_comparable(truth_family, fitted_family);
    if (X.cols() != B0.rows()) throw shape_error("fit_kl_minimizer: X.cols() != B0.rows()");
    const int full = static_cast<int>(std::min(B0.rows(), B0.cols()));
    if (opt.rank > full) throw invalid_parameter("fit_kl_minimizer: rank exceeds min(p, q)");
    const bool constrained = opt.rank >= 0 && opt.rank < full;
    detail::KlObjective obj{fitted_family, X, natural_parameters(truth_family, X, B0),
                            std::max(1.0, static_cast<double>(X.rows() * B0.cols()))};

    auto run_from = [&](const Matrix& start) {
        return constrained ? detail::kl_fit_rank(obj, start, opt.rank, opt) : detail::kl_fit_full(obj, start, opt);
    };
    std::vector<detail::KlRun> runs;
    std::vector<std::string> labels;
    runs.push_back(run_from(constrained ? detail::truncate_rank(B0, opt.rank) : B0));
    labels.emplace_back("truth");
    Rng rng = make_rng(opt.seed, 0);
    const double scale = B0.size() > 0 && B0.norm() > 0 ? B0.norm() / std::sqrt(static_cast<double>(B0.size())) : 1.0;
    for (int k = 0; k < opt.restarts; ++k) {
        const Matrix start = scale * detail::gaussian_matrix(B0.rows(), B0.cols(), rng);
        runs.push_back(run_from(start));
        labels.push_back("random_" + std::to_string(k + 1));
    }
    std::size_t best = 0;
    for (std::size_t k = 1; k < runs.size(); ++k) {
        if (runs[k].converged && (!runs[best].converged || runs[k].objective < runs[best].objective)) best = k;
    }
    if (!runs[best].converged) {
        throw numerical_failure("fit_kl_minimizer: no start converged (gradient norm " +
                                std::to_string(runs[best].grad_norm) + ")");
    }
    KlFit out;
    out.B = runs[best].B;
    out.objective = runs[best].objective;
    out.grad_norm = runs[best].grad_norm;
    out.iterations = runs[best].iterations;
    out.trace = runs[best].trace;
    out.converged = true;
    out.rank = constrained ? opt.rank : full;
    out.agreement = true;
    out.certificate = true;
    for (std::size_t k = 0; k < runs.size(); ++k) {
        KlFitStart s;
        s.label = labels[k];
        s.objective = runs[k].objective;
        s.grad_norm = runs[k].grad_norm;
        s.iterations = runs[k].iterations;
        s.converged = runs[k].converged;
        s.distance_to_best = (runs[k].B - out.B).norm();
        if (s.converged) {
            out.max_start_distance = std::max(out.max_start_distance, s.distance_to_best);
            if (s.distance_to_best > opt.agreement_tol) out.agreement = false;
        }
        if (s.objective < out.objective) out.certificate = false;
        out.starts.push_back(s);
    }
    return out;
}

// --- misspecification study ----------------------------------------------------------

struct MisspecStudyConfig {
    FamilyId true_family = FamilyId::bernoulli_probit;
    FamilyId fitted_family = FamilyId::bernoulli_logit;
    FamilyOptions true_options;
    FamilyOptions fitted_options = [] {
        FamilyOptions o;
        o.theta_lo = -6.0;
        o.theta_hi = 6.0;
        return o;
    }();
    std::vector<long> n_grid{100, 400, 1600};
    long p = 6;
    long q = 4;
    int rank = 2;
    double alpha = 0.5;
    int replications = 10;
    DesignMode design = DesignMode::iid_normal;
    double eta_bound = 2.0;
    double coverage = 0.99;
    long n_steps = 20000;
    long burn_in = 4000;
    long thin = 10;
    bool precondition = true;
    int divergence_samples = 200;
    int restarts = 10;
    std::uint64_t seed = 4242;
    int threads = 0;

    void validate() const {
        if (n_grid.empty()) throw invalid_parameter("misspec study: empty n grid");
        for (long n : n_grid) {
            if (n < 1) throw invalid_parameter("misspec study: n must be positive");
        }
        if (p < 1 || q < 1 || rank < 0 || rank > std::min(p, q)) {
            throw invalid_parameter("misspec study: bad dimensions or rank");
        }
        if (replications < 1) throw invalid_parameter("misspec study: replications must be positive");
        FractionalConfig c;
        c.alpha = alpha;
        c.n_steps = n_steps;
        c.burn_in = burn_in;
        c.thin = thin;
        c.validate();
        if ((n_steps - burn_in) / thin < 1) throw invalid_parameter("misspec study: no retained samples");
    }
};

/// Right-hand side candidate of the oracle inequalities at one rank.
struct OracleCandidate {
    int rank = 0;
    double kl = 0.0;              // (1/nq) KL(P_B0, P_Bbar_r)
    double theta_sq = 0.0;        // (1/nq) ||theta_fit(X Bbar_r) - theta0||^2
    double b_frob = 0.0;
    double r_n = 0.0;
    double thm2_rhs = 0.0;        // a/(1-a) KL + (1+a)/(1-a) r_n
    double cor2_rhs = 0.0;        // C_U/C_L a/(1-a) theta_sq + 2a(1+a)/(C_L(1-a)) r_n
    bool converged = false;
};

struct MisspecRep {
    long n = 0;
    int rep = 0;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double renyi_post = 0.0;     // posterior average of D_alpha(P_B, P_B0), per entry
    double theta_sq_post = 0.0;  // posterior average of (1/nq)||theta_fit(XB) - theta0||^2
    double theta_sq_hat = 0.0;   // same at B_hat
    double acceptance = 0.0;
    double step_size = 0.0;
    int effective_rank = 0;
    bool thm2_ok = false;
    bool cor2_ok = false;
};

struct MisspecCell {
    long n = 0;
    double tau = 0.0;
    double x_frob = 0.0;
    KlFit bbar;                  // unconstrained minimizer on this design
    double kl_floor = 0.0;       // (1/nq) KL(P_B0, P_Bbar)
    double renyi_floor = 0.0;    // (1/nq) D_alpha(P_Bbar, P_B0)
    std::vector<OracleCandidate> candidates;  // ranks 0..min(p, q)
    double thm2_rhs_literal = 0.0;  // Bbar unconstrained, its rank in r_n
    double thm2_rhs = 0.0;          // minimum over the candidates
    double cor2_rhs = 0.0;          // minimum over the candidates
    MeanSe renyi_post, theta_sq_post, theta_sq_hat, acceptance;
    double acceptance_min = 0.0;
    double acceptance_max = 0.0;
    int replications = 0;
    int failed = 0;
    bool aborted = false;
    std::string diagnostic;
    double thm2_fraction = 0.0;
    double cor2_fraction = 0.0;
};

struct MisspecStudyResult {
    MisspecStudyConfig config;
    FamilyId true_family = FamilyId::bernoulli_probit;
    FamilyId fitted_family = FamilyId::bernoulli_logit;
    Matrix B0;
    std::vector<MisspecCell> cells;
    std::vector<MisspecRep> reps;
    // KL minimizer checks on the largest design
    double max_grad_norm = 0.0;
    double max_start_distance = 0.0;
    bool solver_ok = false;
    // plateau: the posterior D_alpha stays above the floor and the excess shrinks
    bool above_floor = false;
    bool excess_shrinks = false;
    bool plateau = false;
};

namespace detail {

inline OracleCandidate oracle_candidate(const FamilySpec& truth_f, const FamilySpec& fit_f, const FamilyBounds& fb,
                                        const Matrix& X, const Matrix& B0, const KlFit& fit, double alpha) {
    OracleCandidate c;
    c.rank = fit.rank;
    c.kl = fit.objective;
    c.converged = fit.converged;
    c.b_frob = fit.B.norm();
    const Matrix th0 = natural_parameters(truth_f, X, B0);
    const Matrix th = natural_parameters(fit_f, X, fit.B);
    const double nq = static_cast<double>(th0.size());
    c.theta_sq = (th - th0).squaredNorm() / nq;
    const int r_eff = fit.B.isZero(0.0) ? 0 : std::min(fit.rank, effective_rank(fit.B, 1e-9));
    c.r_n = rate_formulas(static_cast<double>(X.rows()), static_cast<double>(B0.rows()),
                          static_cast<double>(B0.cols()), static_cast<double>(r_eff), fit_f.dispersion(), fb,
                          X.norm(), c.b_frob)
                .r_n;
    const double a = fit_f.dispersion();
    c.thm2_rhs = alpha / (1 - alpha) * c.kl + (1 + alpha) / (1 - alpha) * c.r_n;
    c.cor2_rhs = fb.c_upper / fb.c_lower * alpha / (1 - alpha) * c.theta_sq +
                 2 * a * (1 + alpha) / (fb.c_lower * (1 - alpha)) * c.r_n;
    return c;
}

}  // namespace detail

/// Probit-truth / logit-fit study (or any pair sharing a response law). For
/// each n: the KL minimizer on that design, oracle right-hand sides at the
/// rank-r KL minimizers for every r, and R replications of the fractional
/// posterior with the misspecified-model tau. Divergences and the Corollary-2
/// squared error are evaluated on natural parameters since the two links
/// place B0 and B on different linear-predictor scales.
inline MisspecStudyResult run_misspec_study(const MisspecStudyConfig& cfg) {
    cfg.validate();
    const FamilySpec truth_f(cfg.true_family, cfg.true_options);
    const FamilySpec fit_f(cfg.fitted_family, cfg.fitted_options);
    detail::require_comparable(truth_f, fit_f);
    const FamilyBounds fb = family_bounds(fit_f);
    fb.require_u1();
    fb.require_c_upper();
    fb.require_c_lower();

    MisspecStudyResult res;
    res.config = cfg;
    res.true_family = cfg.true_family;
    res.fitted_family = cfg.fitted_family;
    const long n_max = *std::max_element(cfg.n_grid.begin(), cfg.n_grid.end());
    {
        Rng rng = make_rng(cfg.seed, 1);
        const Matrix Xref = make_design(n_max, cfg.p, cfg.design, rng);
        Rng tr = make_rng(cfg.seed, 2);
        res.B0 = make_calibrated_truth(Xref, cfg.q, cfg.rank, tr, cfg.eta_bound, cfg.coverage).B0;
    }
    std::vector<Matrix> designs;
    for (long n : cfg.n_grid) {
        Rng rng = make_rng(cfg.seed, 1000 + static_cast<std::uint64_t>(n));
        designs.push_back(make_design(n, cfg.p, cfg.design, rng));
    }

    const int full = static_cast<int>(std::min(cfg.p, cfg.q));
    const int threads = resolve_threads(cfg.threads);
    res.cells.resize(cfg.n_grid.size());
    // KL minimizers on every design: slot `full + 1` is unconstrained, slot r has rank <= r
    const std::size_t slots = static_cast<std::size_t>(full + 2);
    for (auto& c : res.cells) c.candidates.resize(static_cast<std::size_t>(full + 1));
    parallel_for(cfg.n_grid.size() * slots, threads, [&](std::size_t k) {
        const std::size_t ci = k / slots;
        const int slot = static_cast<int>(k % slots);
        KlFitOptions o;
        o.restarts = cfg.restarts;
        o.seed = derive_seed(cfg.seed, 50 + k);
        MisspecCell& c = res.cells[ci];
        if (slot == full + 1) {
            c.bbar = fit_kl_minimizer(truth_f, res.B0, fit_f, designs[ci], o);
            return;
        }
        o.rank = slot;
        const KlFit fit = fit_kl_minimizer(truth_f, res.B0, fit_f, designs[ci], o);
        c.candidates[static_cast<std::size_t>(slot)] =
            detail::oracle_candidate(truth_f, fit_f, fb, designs[ci], res.B0, fit, cfg.alpha);
    });

    for (std::size_t ci = 0; ci < res.cells.size(); ++ci) {
        MisspecCell& c = res.cells[ci];
        const Matrix& X = designs[ci];
        c.n = cfg.n_grid[ci];
        c.x_frob = X.norm();
        c.tau = make_prior(TauPreset::misspecified, X, cfg.q, fit_f.dispersion()).tau;
        c.kl_floor = c.bbar.objective;
        const Matrix th0 = natural_parameters(truth_f, X, res.B0);
        const Matrix thb = natural_parameters(fit_f, X, c.bbar.B);
        c.renyi_floor = renyi_avg(fit_f, thb, th0, cfg.alpha);
        const OracleCandidate lit = detail::oracle_candidate(truth_f, fit_f, fb, X, res.B0, c.bbar, cfg.alpha);
        c.thm2_rhs_literal = lit.thm2_rhs;
        c.thm2_rhs = lit.thm2_rhs;
        c.cor2_rhs = lit.cor2_rhs;
        for (const auto& cand : c.candidates) {
            c.thm2_rhs = std::min(c.thm2_rhs, cand.thm2_rhs);
            c.cor2_rhs = std::min(c.cor2_rhs, cand.cor2_rhs);
        }
    }
    // solver diagnostics on the largest design
    {
        const auto it = std::max_element(cfg.n_grid.begin(), cfg.n_grid.end());
        const MisspecCell& c = res.cells[static_cast<std::size_t>(it - cfg.n_grid.begin())];
        res.max_grad_norm = c.bbar.grad_norm;
        res.max_start_distance = c.bbar.max_start_distance;
        res.solver_ok = c.bbar.converged && c.bbar.grad_norm < 1e-6 && c.bbar.agreement && c.bbar.certificate;
    }

    const std::size_t R = static_cast<std::size_t>(cfg.replications);
    res.reps.resize(res.cells.size() * R);
    parallel_for(res.reps.size(), threads, [&](std::size_t k) {
        const std::size_t ci = k / R;
        MisspecRep& out = res.reps[k];
        const MisspecCell& c = res.cells[ci];
        out.n = c.n;
        out.rep = static_cast<int>(k % R);
        out.seed = derive_seed(derive_seed(cfg.seed, 9000 + static_cast<std::uint64_t>(c.n)),
                               static_cast<std::uint64_t>(out.rep));
        try {
            const Matrix& X = designs[ci];
            SyntheticTruth truth;
            truth.B0 = res.B0;
            truth.rank = cfg.rank;
            Rng rng(out.seed);
            const Dataset generated = generate_dataset(X, truth, truth_f, rng);
            const Dataset data{X, generated.Y, fit_f};
            const PriorConfig prior = make_prior(TauPreset::misspecified, X, cfg.q, fit_f.dispersion());
            const FractionalConfig sc = study_sampler_config(data, prior, cfg.alpha, cfg.n_steps, cfg.burn_in, cfg.thin,
                                                             derive_seed(out.seed, 7), cfg.precondition);
            const Chain chain = run_sampler(data, prior, sc);
            const Matrix th0 = natural_parameters(truth_f, X, res.B0);
            const PosteriorSummary s = summarize_posterior(chain, data, Matrix(), th0, cfg.alpha, cfg.divergence_samples);
            out.renyi_post = s.renyi_post;
            out.theta_sq_post = s.theta_sq_post;
            out.theta_sq_hat = (natural_parameters(fit_f, X, s.B_hat) - th0).squaredNorm() / static_cast<double>(th0.size());
            out.acceptance = chain.acceptance_rate;
            out.step_size = chain.step_size;
            out.effective_rank = s.B_hat.isZero(0.0) ? 0 : effective_rank(s.B_hat, 1e-3);
            out.thm2_ok = out.renyi_post <= c.thm2_rhs;
            out.cor2_ok = out.theta_sq_post <= c.cor2_rhs;
            out.ok = true;
        } catch (const std::exception& e) {
            out.ok = false;
            out.error = e.what();
        }
    });

    for (std::size_t ci = 0; ci < res.cells.size(); ++ci) {
        MisspecCell& c = res.cells[ci];
        std::vector<double> rd, ts, th, acc;
        long t2 = 0, c2 = 0;
        for (std::size_t k = ci * R; k < (ci + 1) * R; ++k) {
            const MisspecRep& rr = res.reps[k];
            ++c.replications;
            if (!rr.ok) {
                ++c.failed;
                if (c.diagnostic.empty()) c.diagnostic = "replication " + std::to_string(rr.rep) + ": " + rr.error;
                continue;
            }
            rd.push_back(rr.renyi_post);
            ts.push_back(rr.theta_sq_post);
            th.push_back(rr.theta_sq_hat);
            acc.push_back(rr.acceptance);
            t2 += rr.thm2_ok ? 1 : 0;
            c2 += rr.cor2_ok ? 1 : 0;
        }
        c.aborted = c.failed > 0;
        c.renyi_post = mean_se(rd);
        c.theta_sq_post = mean_se(ts);
        c.theta_sq_hat = mean_se(th);
        c.acceptance = mean_se(acc);
        if (!acc.empty()) {
            c.acceptance_min = *std::min_element(acc.begin(), acc.end());
            c.acceptance_max = *std::max_element(acc.begin(), acc.end());
        }
        // failed replications count against the bound
        c.thm2_fraction = static_cast<double>(t2) / static_cast<double>(c.replications);
        c.cor2_fraction = static_cast<double>(c2) / static_cast<double>(c.replications);
    }

    std::vector<const MisspecCell*> order;
    for (const auto& c : res.cells) order.push_back(&c);
    std::sort(order.begin(), order.end(), [](const MisspecCell* a, const MisspecCell* b) { return a->n < b->n; });
    res.above_floor = true;
    for (const MisspecCell* c : order) {
        if (c->renyi_post.count == 0 || c->renyi_post.mean + 2.0 * c->renyi_post.se < c->renyi_floor) {
            res.above_floor = false;
        }
    }
    if (order.size() >= 2 && order.front()->renyi_post.count > 0 && order.back()->renyi_post.count > 0) {
        const double first = order.front()->renyi_post.mean - order.front()->renyi_floor;
        const double last = order.back()->renyi_post.mean - order.back()->renyi_floor;
        res.excess_shrinks = last < first;
    }
    res.plateau = res.above_floor && res.excess_shrinks && order.back()->renyi_floor > 0.0;
    return res;
}

}  // namespace frrr
