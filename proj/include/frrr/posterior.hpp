#pragma once

// alpha-fractional posterior  pi_{n,alpha}(B) ∝ L_n(B)^alpha pi(B),
// Langevin samplers targeting it, and the posterior-mean estimator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <limits>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "frrr/model.hpp"
#include "frrr/prior.hpp"
#include "frrr/types.hpp"

namespace frrr {

// --- likelihood -----------------------------------------------------------------

/// Value and score of the log-likelihood (without the sum of c(y, a)).
struct LikelihoodEval {
    double value = 0.0;
    Matrix grad;  // p x q; empty when not requested
};

namespace detail {

inline void check_conformance(const Dataset& data, const Matrix& B) {
    if (data.X.rows() != data.Y.rows()) throw shape_error("dataset: X and Y row counts differ");
    if (B.rows() != data.X.cols() || B.cols() != data.Y.cols()) {
        throw shape_error("B must be p x q for the dataset");
    }
}

/// Unchecked evaluation. S_ij = (y_ij - b'(theta_ij)) dtheta/deta, gradient X^T S / a.
inline LikelihoodEval likelihood_eval(const Dataset& data, const Matrix& B, bool want_grad) {
    const FamilySpec& f = data.family;
    const Matrix eta = data.X * B;
    const Eigen::Index n = eta.rows();
    const Eigen::Index q = eta.cols();
    LikelihoodEval out;
    Matrix S;
    if (want_grad) S.resize(n, q);
    double total = 0.0;
    for (Eigen::Index j = 0; j < q; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double y = data.Y(i, j);
            if (f.canonical() && !std::isfinite(f.theta_lo()) && !std::isfinite(f.theta_hi())) {
                const double t = eta(i, j);
                total += y * t - b_value(f, t);
                if (want_grad) S(i, j) = y - b_prime(f, t);
                continue;
            }
            const LinkEval le = link_eval(f, eta(i, j));
            total += y * le.theta - b_value(f, le.theta);
            if (want_grad) S(i, j) = le.clipped ? 0.0 : (y - b_prime(f, le.theta)) * le.dtheta;
        }
    }
    const double a = f.dispersion();
    out.value = total / a;
    if (want_grad) out.grad = data.X.transpose() * S / a;
    return out;
}

}  // namespace detail

/// sum_ij [y_ij theta_ij - b(theta_ij)] / a with theta_ij = theta(x_i^T beta_j).
inline double log_likelihood(const Dataset& data, const Matrix& B) {
    detail::check_conformance(data, B);
    data.validate();
    if (data.n() == 0) return 0.0;
    return detail::likelihood_eval(data, B, false).value;
}

inline Matrix grad_log_likelihood(const Dataset& data, const Matrix& B) {
    detail::check_conformance(data, B);
    data.validate();
    if (data.n() == 0) return Matrix::Zero(B.rows(), B.cols());
    return detail::likelihood_eval(data, B, true).grad;
}

// --- fractional posterior -----------------------------------------------------

namespace detail {

inline void check_alpha(double alpha, bool allow_one) {
    const bool ok = alpha > 0.0 && (alpha < 1.0 || (allow_one && alpha == 1.0));
    if (!ok) throw invalid_parameter("alpha must lie in (0, 1)");
}

}  // namespace detail

/// alpha * log L_n(B) + log pi(B). alpha = 1 (the ordinary posterior) is only
/// accepted with allow_full_posterior, for diagnostics.
inline double log_fractional_posterior(const Dataset& data, const Matrix& B,
                                       const PriorConfig& prior, double alpha,
                                       bool allow_full_posterior = false) {
    detail::check_alpha(alpha, allow_full_posterior);
    return alpha * log_likelihood(data, B) + log_prior(B, prior);
}

inline Matrix grad_log_fractional_posterior(const Dataset& data, const Matrix& B,
                                            const PriorConfig& prior, double alpha,
                                            bool allow_full_posterior = false) {
    detail::check_alpha(alpha, allow_full_posterior);
    return alpha * grad_log_likelihood(data, B) + grad_log_prior(B, prior);
}

// --- sampler ------------------------------------------------------------------

enum class Algorithm { ula, mala };

inline std::string_view to_string(Algorithm a) { return a == Algorithm::ula ? "ula" : "mala"; }

inline Algorithm algorithm_from_string(std::string_view s) {
    if (s == "ula") return Algorithm::ula;
    if (s == "mala") return Algorithm::mala;
    throw invalid_parameter("unknown sampler algorithm '" + std::string(s) + "'");
}

struct FractionalConfig {
    double alpha = 0.5;
    double step_size = 0.0;  // <= 0 selects default_step_size()
    long n_steps = 10000;
    long burn_in = 2000;
    long thin = 10;
    std::uint64_t seed = 1;
    Algorithm algorithm = Algorithm::mala;
    Matrix init;              // empty: start at zero (the prior mode)
    Matrix preconditioner;    // pq x pq SPD acting on vec(B); empty: identity
    bool tune = true;         // MALA step-size adaptation during burn-in
    long tune_window = 50;
    double log_post_floor = -1e15;

    void validate() const {
        detail::check_alpha(alpha, false);
        if (n_steps < 1) throw invalid_parameter("n_steps must be positive");
        if (burn_in < 0 || burn_in > n_steps) throw invalid_parameter("need 0 <= burn_in <= n_steps");
        if (thin < 1) throw invalid_parameter("thin must be positive");
        if (tune_window < 1) throw invalid_parameter("tune_window must be positive");
        if (!std::isfinite(step_size)) throw invalid_parameter("step_size must be finite");
        if (preconditioner.size() > 0 &&
            (preconditioner.rows() != preconditioner.cols() || !preconditioner.allFinite())) {
            throw invalid_parameter("preconditioner must be a finite square matrix");
        }
    }
};

/// Retained draws of one sampler run. samples/log_post/accepted/steps share
/// one index.
struct Chain {
    std::vector<Matrix> samples;
    std::vector<double> log_post;
    std::vector<bool> accepted;
    std::vector<long> steps;
    FractionalConfig config;
    double step_size = 0.0;        // step size in force after burn-in
    double acceptance_rate = 1.0;  // over post-burn-in steps; 1 for ULA
    std::uint64_t dataset_digest = 0;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

/// FNV-1a over the family, dimensions and raw matrix bytes.
inline std::uint64_t dataset_digest(const Dataset& data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t len) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    const auto id = static_cast<int>(data.family.id());
    const double params[] = {data.family.dispersion(), data.family.shape(), data.family.theta_lo(),
                             data.family.theta_hi()};
    const std::int64_t dims[] = {data.X.rows(), data.X.cols(), data.Y.rows(), data.Y.cols()};
    feed(&id, sizeof id);
    feed(params, sizeof params);
    feed(dims, sizeof dims);
    feed(data.X.data(), sizeof(double) * static_cast<std::size_t>(data.X.size()));
    feed(data.Y.data(), sizeof(double) * static_cast<std::size_t>(data.Y.size()));
    return h;
}

/// gamma = 0.5 / (alpha C_U ||X||_F^2 / a + (p+q+2) / tau^2). Families whose C_U
/// is infinite on Theta use b'' at theta(0) times 10 instead.
inline double default_step_size(const Dataset& data, const PriorConfig& prior, double alpha) {
    const FamilyBounds bounds = family_bounds(data.family);
    double cu = bounds.c_upper;
    if (!std::isfinite(cu)) cu = 10.0 * b_second(data.family, theta_from_eta(data.family, 0.0));
    const double x2 = data.X.squaredNorm();
    const double smooth = alpha * cu * x2 / data.family.dispersion() +
                          2.0 * prior.exponent() / (prior.tau * prior.tau);
    return 0.5 / smooth;
}

namespace detail {

struct TargetEval {
    double value;
    Matrix grad;
};

inline TargetEval eval_target(const Dataset& data, const PriorConfig& prior, double alpha,
                              const Matrix& B) {
    LikelihoodEval ll = likelihood_eval(data, B, true);
    const double lp = log_prior(B, prior);
    TargetEval out{alpha * ll.value + lp, alpha * ll.grad + grad_log_prior(B, prior)};
    return out;
}

}  // namespace detail

/// Unadjusted (ULA) or Metropolis-adjusted (MALA) Langevin sampler for the
/// fractional posterior. Proposal: B' = B + gamma grad U(B) + sqrt(2 gamma) xi,
/// or with a preconditioner M: B' = B + gamma M grad U(B) + sqrt(2 gamma) M^{1/2} xi
/// in vec coordinates. Without a step size, a preconditioned run starts at 0.5.
/// Deterministic for a given rng state. Throws numerical_failure when the
/// current state's log-posterior becomes non-finite or drops below the floor.
template <class URBG>
Chain run_sampler(const Dataset& data, const PriorConfig& prior, const FractionalConfig& cfg,
                  URBG& rng) {
    cfg.validate();
    data.validate();
    const Eigen::Index p = data.p();
    const Eigen::Index q = data.q();
    if (prior.p != p || prior.q != q) throw shape_error("prior dimensions differ from the dataset");

    Matrix B = Matrix::Zero(p, q);
    if (cfg.init.size() > 0) {
        if (cfg.init.rows() != p || cfg.init.cols() != q) throw shape_error("init must be p x q");
        if (!cfg.init.allFinite()) throw invalid_parameter("init has non-finite entries");
        B = cfg.init;
    }

    const bool precond = cfg.preconditioner.size() > 0;
    Eigen::LLT<Matrix> chol;
    if (precond) {
        if (cfg.preconditioner.rows() != p * q) throw shape_error("preconditioner must be pq x pq");
        chol.compute(cfg.preconditioner);
        if (chol.info() != Eigen::Success) throw invalid_parameter("preconditioner is not positive definite");
    }
    const Matrix& M = cfg.preconditioner;
    auto drift = [&](const Matrix& g) -> Matrix {
        if (!precond) return g;
        return (M * g.reshaped()).reshaped(p, q);
    };
    // squared norm of a displacement in the metric M^{-1}
    auto metric_norm2 = [&](const Matrix& d) -> double {
        if (!precond) return d.squaredNorm();
        return chol.matrixL().solve(d.reshaped()).squaredNorm();
    };

    double gamma = cfg.step_size > 0.0 ? cfg.step_size
                   : precond          ? 0.5
                                      : default_step_size(data, prior, cfg.alpha);
    const bool adjust = cfg.algorithm == Algorithm::mala;

    Chain chain;
    chain.config = cfg;
    chain.dataset_digest = dataset_digest(data);
    const long retained = (cfg.n_steps - cfg.burn_in) / cfg.thin;
    chain.samples.reserve(static_cast<std::size_t>(retained));

    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    detail::TargetEval cur = detail::eval_target(data, prior, cfg.alpha, B);
    auto guard = [&](double v, long step) {
        if (!std::isfinite(v) || v < cfg.log_post_floor) {
            throw numerical_failure("sampler diverged at step " + std::to_string(step) +
                                    ": log-posterior = " + std::to_string(v) +
                                    " (step size " + std::to_string(gamma) + ")");
        }
    };
    guard(cur.value, 0);

    Matrix noise(p, q);
    long window_accepts = 0;
    long window_count = 0;
    long kept_accepts = 0;
    long kept_count = 0;

    for (long step = 1; step <= cfg.n_steps; ++step) {
        for (Eigen::Index j = 0; j < q; ++j) {
            for (Eigen::Index i = 0; i < p; ++i) noise(i, j) = normal(rng);
        }
        if (precond) noise = (chol.matrixL() * noise.reshaped()).reshaped(p, q);
        const Matrix forward_mean = B + gamma * drift(cur.grad);
        Matrix proposal = forward_mean + std::sqrt(2.0 * gamma) * noise;
        bool accept = true;
        detail::TargetEval prop{};
        if (adjust) {
            if (!proposal.allFinite()) {
                accept = false;
            } else {
                prop = detail::eval_target(data, prior, cfg.alpha, proposal);
                if (!std::isfinite(prop.value) || !prop.grad.allFinite()) {
                    accept = false;
                } else {
                    const Matrix backward_mean = proposal + gamma * drift(prop.grad);
                    const double log_q_forward = -metric_norm2(proposal - forward_mean) / (4.0 * gamma);
                    const double log_q_backward = -metric_norm2(B - backward_mean) / (4.0 * gamma);
                    const double log_ratio = prop.value - cur.value + log_q_backward - log_q_forward;
                    accept = log_ratio >= 0.0 || std::log(unif(rng)) < log_ratio;
                }
            }
        } else {
            prop = detail::eval_target(data, prior, cfg.alpha, proposal);
        }
        if (accept) {
            B = std::move(proposal);
            cur = std::move(prop);
            guard(cur.value, step);
        }

        if (step <= cfg.burn_in) {
            if (adjust && cfg.tune) {
                window_accepts += accept ? 1 : 0;
                if (++window_count == cfg.tune_window) {
                    const double rate = static_cast<double>(window_accepts) / window_count;
                    if (rate < 0.25) {
                        gamma *= 0.5;
                    } else if (rate > 0.75) {
                        gamma *= 2.0;
                    } else {
                        gamma *= std::exp(rate - 0.5);
                    }
                    window_accepts = window_count = 0;
                }
            }
            continue;
        }
        ++kept_count;
        kept_accepts += accept ? 1 : 0;
        if ((step - cfg.burn_in) % cfg.thin == 0) {
            chain.samples.push_back(B);
            chain.log_post.push_back(cur.value);
            chain.accepted.push_back(accept);
            chain.steps.push_back(step);
        }
    }
    chain.step_size = gamma;
    chain.acceptance_rate =
        adjust ? (kept_count > 0 ? static_cast<double>(kept_accepts) / kept_count : 0.0) : 1.0;
    return chain;
}

/// Runs with an rng seeded from cfg.seed.
inline Chain run_sampler(const Dataset& data, const PriorConfig& prior, const FractionalConfig& cfg) {
    Rng rng(cfg.seed);
    return run_sampler(data, prior, cfg, rng);
}

/// Independent chains on shared read-only inputs; chain i is seeded from
/// (cfg.seed, i). Results do not depend on the thread count.
inline std::vector<Chain> run_chains(const Dataset& data, const PriorConfig& prior,
                                     const FractionalConfig& cfg, int n_chains, int threads) {
    std::vector<Chain> chains(static_cast<std::size_t>(n_chains));
    std::vector<std::exception_ptr> errors(chains.size());
    auto work = [&](int i) {
        try {
            FractionalConfig c = cfg;
            c.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
            chains[static_cast<std::size_t>(i)] = run_sampler(data, prior, c);
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    };
    threads = std::max(1, std::min(threads, n_chains));
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (int i = t; i < n_chains; i += threads) work(i);
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return chains;
}

// --- mode and curvature -------------------------------------------------------

/// Hessian of the log fractional posterior in vec(B) coordinates, by central
/// differences of the analytic gradient, symmetrized. The step is
/// min(1e-4, 1e-3 tau) so the prior's curvature near zero is resolved.
inline Matrix hessian_log_fractional_posterior(const Dataset& data, const Matrix& B,
                                               const PriorConfig& prior, double alpha) {
    detail::check_alpha(alpha, true);
    detail::check_conformance(data, B);
    const Eigen::Index d = B.size();
    const double h = std::min(1e-4, 1e-3 * prior.tau);
    Matrix H(d, d);
    Matrix Bp = B;
    for (Eigen::Index k = 0; k < d; ++k) {
        const double orig = Bp.reshaped()(k);
        Bp.reshaped()(k) = orig + h;
        const Matrix gp = detail::eval_target(data, prior, alpha, Bp).grad;
        Bp.reshaped()(k) = orig - h;
        const Matrix gm = detail::eval_target(data, prior, alpha, Bp).grad;
        Bp.reshaped()(k) = orig;
        H.col(k) = (gp - gm).reshaped() / (2.0 * h);
    }
    return 0.5 * (H + H.transpose());
}

/// M = V diag(1 / max(|lambda|, floor)) V^T for the eigen-decomposition of
/// -H, floor = floor_ratio * max |lambda|. Negative-curvature directions are
/// treated by their absolute curvature.
inline Matrix hessian_preconditioner(const Matrix& H, double floor_ratio = 1e-8) {
    if (H.rows() != H.cols() || H.size() == 0) throw shape_error("hessian_preconditioner: need a square matrix");
    if (!H.allFinite()) throw numerical_failure("hessian_preconditioner: non-finite Hessian");
    Eigen::SelfAdjointEigenSolver<Matrix> es(-H);
    Vector lam = es.eigenvalues().cwiseAbs();
    const double top = lam.maxCoeff();
    if (!(top > 0.0)) throw numerical_failure("hessian_preconditioner: zero Hessian");
    lam = lam.cwiseMax(floor_ratio * top);
    return es.eigenvectors() * lam.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
}

struct ModeResult {
    Matrix B;
    double log_post = 0.0;
    double grad_norm = 0.0;
    double newton_decrement = 0.0;  // g^T M g / 2 at the last Newton step
    int iterations = 0;
    bool converged = false;
};

/// Local maximizer of the log fractional posterior by Newton steps on the
/// absolute-eigenvalue Hessian with backtracking, started at `init`.
/// Converged means the Newton decrement fell below decrement_tol. The search
/// also stops, unconverged, after `patience` steps that each gain less than
/// 1e-10 (1 + |log-posterior|); near rank-deficient points the target has
/// quartic valleys where Newton creeps.
inline ModeResult find_posterior_mode(const Dataset& data, const PriorConfig& prior, double alpha,
                                      const Matrix& init, int max_iter = 100,
                                      double decrement_tol = 1e-10, int patience = 5) {
    detail::check_alpha(alpha, true);
    detail::check_conformance(data, init);
    ModeResult r;
    r.B = init;
    detail::TargetEval cur = detail::eval_target(data, prior, alpha, r.B);
    if (!std::isfinite(cur.value)) throw numerical_failure("find_posterior_mode: non-finite start");
    int slow = 0;
    for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
        const Matrix M =
            hessian_preconditioner(hessian_log_fractional_posterior(data, r.B, prior, alpha), 1e-12);
        const Matrix dir = (M * cur.grad.reshaped()).reshaped(r.B.rows(), r.B.cols());
        const double slope = cur.grad.reshaped().dot(dir.reshaped());
        r.newton_decrement = 0.5 * slope;
        if (r.newton_decrement <= decrement_tol) {
            r.converged = true;
            break;
        }
        double t = 1.0;
        bool moved = false;
        for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
            const Matrix cand = r.B + t * dir;
            detail::TargetEval e = detail::eval_target(data, prior, alpha, cand);
            if (std::isfinite(e.value) && e.value >= cur.value + 1e-4 * t * slope) {
                const double gain = e.value - cur.value;
                slow = gain < 1e-10 * (1.0 + std::abs(cur.value)) ? slow + 1 : 0;
                r.B = cand;
                cur = std::move(e);
                moved = true;
                break;
            }
        }
        if (!moved || slow >= patience) break;
    }
    r.log_post = cur.value;
    r.grad_norm = cur.grad.norm();
    return r;
}

/// Starting point and preconditioner for studies where plain Langevin steps
/// are too stiff: the posterior mode and the clamped inverse Hessian there.
struct PreconditionedStart {
    Matrix init;
    Matrix preconditioner;
    ModeResult mode;
};

/// Without `from`, the search starts at the mode of a tau = 1 version of the
/// same prior (a mild ridge-like fit started at zero), which keeps separable
/// Bernoulli data finite.
inline PreconditionedStart preconditioned_start(const Dataset& data, const PriorConfig& prior, double alpha,
                                                const Matrix& from = Matrix()) {
    Matrix start = from;
    if (start.size() == 0) {
        PriorConfig mild = prior;
        mild.tau = 1.0;
        mild.preset = TauPreset::manual;
        start = find_posterior_mode(data, mild, alpha, Matrix::Zero(data.p(), data.q())).B;
    }
    PreconditionedStart out;
    out.mode = find_posterior_mode(data, prior, alpha, start);
    out.init = out.mode.B;
    out.preconditioner =
        hessian_preconditioner(hessian_log_fractional_posterior(data, out.init, prior, alpha), 1e-8);
    return out;
}

// --- estimators ---------------------------------------------------------------

/// Entrywise average of the retained samples.
inline Matrix posterior_mean(const Chain& chain) {
    if (chain.empty()) throw invalid_parameter("posterior_mean: empty chain");
    Matrix sum = Matrix::Zero(chain.samples.front().rows(), chain.samples.front().cols());
    for (const auto& s : chain.samples) sum += s;
    return sum / static_cast<double>(chain.size());
}

/// Number of singular values above threshold_ratio * s_1(B).
inline int effective_rank(const Matrix& B, double threshold_ratio) {
    if (!(threshold_ratio > 0.0 && threshold_ratio < 1.0)) {
        throw invalid_parameter("effective_rank: threshold_ratio must lie in (0, 1)");
    }
    if (B.size() == 0) return 0;
    const Vector s = Eigen::JacobiSVD<Matrix>(B).singularValues();
    if (s.size() == 0 || s(0) <= 0.0) return 0;
    int r = 0;
    for (Eigen::Index i = 0; i < s.size(); ++i) r += s(i) > threshold_ratio * s(0) ? 1 : 0;
    return r;
}

}  // namespace frrr
