#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "frrr/divergence.hpp"
#include "frrr/oracles.hpp"

using namespace frrr;

namespace {

FamilySpec with_theta(FamilyId id, double lo, double hi, double shape = 1.0) {
    FamilyOptions o;
    o.theta_lo = lo;
    o.theta_hi = hi;
    o.shape = shape;
    return FamilySpec(id, o);
}

std::vector<FamilySpec> test_families() {
    return {with_theta(FamilyId::gaussian, -5, 5),
            with_theta(FamilyId::bernoulli_logit, -4, 4),
            with_theta(FamilyId::bernoulli_probit, -4, 4),
            with_theta(FamilyId::poisson_log, -2, 2),
            with_theta(FamilyId::gamma_log, -5, -0.2, 2.0),
            with_theta(FamilyId::negbin_log, -3, -0.1, 3.0)};
}

double draw(const FamilySpec& f, std::mt19937_64& rng) {
    return std::uniform_real_distribution<double>(f.theta_lo(), f.theta_hi())(rng);
}

Matrix draw(const FamilySpec& f, int n, int q, std::mt19937_64& rng) {
    Matrix m(n, q);
    for (auto& v : m.reshaped()) v = draw(f, rng);
    return m;
}

}  // namespace

TEST(PerEntry, Examples) {
    const FamilySpec g(FamilyId::gaussian);
    const FamilySpec l(FamilyId::bernoulli_logit);
    EXPECT_EQ(kl_per_entry(l, 0.3, 0.3), 0.0);
    EXPECT_NEAR(kl_per_entry(g, 1, 3), 2.0, 1e-15);
    EXPECT_NEAR(kl_per_entry(l, 0, 1), 0.12011450695827758, 1e-15);
    EXPECT_NEAR(renyi_per_entry(g, 0, 2, 0.5), 1.0, 1e-15);
    EXPECT_NEAR(renyi_per_entry(l, 0, 1, 0.5), 0.058254899717954826, 1e-15);
    EXPECT_EQ(renyi_per_entry(l, 0.7, 0.7, 0.3), 0.0);
    EXPECT_THROW(renyi_per_entry(l, 0, 1, 1.0), invalid_parameter);
    EXPECT_THROW(kl_per_entry(with_theta(FamilyId::gamma_log, -5, -1), 0.5, -1), invalid_parameter);
}

TEST(PerEntry, RenyiApproachesKl) {
    std::mt19937_64 rng(1);
    for (const auto& f : test_families()) {
        for (int t = 0; t < 50; ++t) {
            const double th = draw(f, rng), ze = draw(f, rng);
            const double kl = kl_per_entry(f, th, ze);
            // the gap is about (1 - alpha) Var(log ratio) / 2
            const double slack = 1e-3 * log_ratio_second_moment(f, th, ze) + 1e-12;
            EXPECT_NEAR(renyi_per_entry(f, th, ze, 0.999), kl, slack);
            EXPECT_LE(kl - renyi_per_entry(f, th, ze, 0.9999), 0.1 * slack + 1e-12);
        }
    }
}

TEST(PerEntry, NonnegativeAndZeroOnlyAtEquality) {
    std::mt19937_64 rng(2);
    for (const auto& f : test_families()) {
        for (int t = 0; t < 10000; ++t) {
            const double th = draw(f, rng), ze = draw(f, rng);
            EXPECT_GE(kl_per_entry(f, th, ze), 0.0);
            EXPECT_GE(renyi_per_entry(f, th, ze, 0.5), 0.0);
            if (std::abs(th - ze) > 1e-3) {
                EXPECT_GT(kl_per_entry(f, th, ze), 0.0);
                EXPECT_GT(renyi_per_entry(f, th, ze, 0.5), 0.0);
            }
            EXPECT_EQ(kl_per_entry(f, th, th), 0.0);
            EXPECT_EQ(renyi_per_entry(f, th, th, 0.25), 0.0);
        }
    }
}

TEST(PerEntry, MonotoneInAlpha) {
    std::mt19937_64 rng(3);
    for (const auto& f : test_families()) {
        for (int t = 0; t < 1000; ++t) {
            const double th = draw(f, rng), ze = draw(f, rng);
            double prev = 0.0;
            for (int k = 1; k <= 9; ++k) {
                const double d = renyi_per_entry(f, th, ze, k / 10.0);
                EXPECT_GE(d, prev * (1 - 1e-12) - 1e-15);
                prev = d;
            }
        }
    }
}

TEST(Oracles, BernoulliEnumerationValues) {
    const FamilySpec l(FamilyId::bernoulli_logit);
    EXPECT_NEAR(bruteforce::kl(l, 0, 1).value, 0.12011450695827758, 1e-15);
    EXPECT_NEAR(bruteforce::renyi(l, 0, 1, 0.5).value, 0.058254899717954826, 1e-15);
    const Matrix T = Matrix::Zero(1, 1), Z = Matrix::Ones(1, 1);
    EXPECT_NEAR(bruteforce::tv_bruteforce(l, T, Z).value, 0.2310585786300049, 1e-15);
    EXPECT_EQ(bruteforce::tv_bruteforce(l, Z, Z).value, 0.0);
}

TEST(Oracles, ClosedFormsMatchSummationAndQuadrature) {
    std::mt19937_64 rng(4);
    for (const auto& f : test_families()) {
        const bool discrete = is_discrete(f.id());
        const double tol = discrete ? 1e-8 : 1e-6;
        for (int t = 0; t < 200; ++t) {
            const double th = draw(f, rng), ze = draw(f, rng);
            const auto kl = bruteforce::kl(f, th, ze);
            EXPECT_NEAR(kl_per_entry(f, th, ze), kl.value, tol) << to_string(f.id());
            EXPECT_LT(kl.neglected_mass, 1e-10);
            for (double a : {0.25, 0.5, 0.75}) {
                EXPECT_NEAR(renyi_per_entry(f, th, ze, a), bruteforce::renyi(f, th, ze, a).value, tol)
                    << to_string(f.id()) << " alpha=" << a;
            }
            const double m2 = log_ratio_second_moment(f, th, ze);
            EXPECT_NEAR(m2, bruteforce::log_ratio_second_moment(f, th, ze).value,
                        tol * std::max(1.0, m2))
                << to_string(f.id());
            const double t0 = draw(f, rng);
            EXPECT_NEAR(misspecified_log_ratio_mean(f, t0, th, ze),
                        bruteforce::misspecified_log_ratio_mean(f, t0, th, ze).value, tol)
                << to_string(f.id());
        }
    }
}

TEST(Oracles, TvSupportRules) {
    const FamilySpec g(FamilyId::gaussian);
    EXPECT_NEAR(bruteforce::tv_bruteforce(g, Matrix::Zero(1, 1), Matrix::Constant(1, 1, 2.0)).value,
                2 * special::normal_cdf(1.0) - 1, 1e-15);
    EXPECT_THROW(bruteforce::tv_bruteforce(g, Matrix::Zero(2, 1), Matrix::Zero(2, 1)), unsupported);
    const FamilySpec l(FamilyId::bernoulli_logit);
    EXPECT_THROW(bruteforce::tv_bruteforce(l, Matrix::Zero(13, 1), Matrix::Zero(13, 1)), unsupported);
    EXPECT_THROW(bruteforce::tv_bruteforce(with_theta(FamilyId::gamma_log, -3, -1), Matrix::Constant(1, 1, -2),
                                           Matrix::Constant(1, 1, -2)),
                 unsupported);
    // Poisson product, 2 cells: truncation certificate below 1e-10.
    const FamilySpec p(FamilyId::poisson_log);
    Matrix T(2, 1), Z(2, 1);
    T << 0.2, -0.5;
    Z << 0.6, 0.1;
    const auto tv = bruteforce::tv_bruteforce(p, T, Z);
    EXPECT_LT(tv.neglected_mass, 1e-10);
    EXPECT_GT(tv.value, 0.0);
    EXPECT_LT(tv.value, 1.0);
}

TEST(Relations, TvAndHellingerAgainstRenyiOnBernoulliProducts) {
    std::mt19937_64 rng(5);
    for (auto id : {FamilyId::bernoulli_logit, FamilyId::bernoulli_probit}) {
        const FamilySpec f = with_theta(id, -4, 4);
        for (int t = 0; t < 200; ++t) {
            const int n = 1 + t % 4;
            const int q = 1 + (t / 4) % 3;
            const Matrix T = draw(f, n, q, rng), Z = draw(f, n, q, rng);
            const double tv = bruteforce::tv_bruteforce(f, T, Z).value;
            const DivergenceReport r = divergence_report(f, T, Z, {0.25, 0.5, 0.75});
            for (std::size_t k = 0; k < r.alphas.size(); ++k) {
                EXPECT_LE(0.5 * r.alphas[k] * tv * tv, r.renyi_total[k] * (1 + 1e-12));
            }
            EXPECT_LE(r.hellinger_sq, r.renyi_total[1] * (1 + 1e-12));
            EXPECT_LE(r.tv_lower, tv + 1e-12);
            EXPECT_GE(r.tv_upper, tv - 1e-12);
        }
    }
}

TEST(Report, Examples) {
    const FamilySpec l(FamilyId::bernoulli_logit);
    const DivergenceReport r = divergence_report(l, Matrix::Zero(1, 1), Matrix::Ones(1, 1), {0.5});
    EXPECT_NEAR(r.hellinger_sq, 0.057414669071099045, 1e-15);

    const FamilySpec g(FamilyId::gaussian);
    Matrix T = Matrix::Zero(2, 2), Z(2, 2);
    Z << 2, 0, 0, 2;  // ||T - Z||_F^2 = 8
    const DivergenceReport rg = divergence_report(g, T, Z, {0.5});
    EXPECT_NEAR(rg.kl_total, 4.0, 1e-14);
    EXPECT_NEAR(rg.kl_avg, 1.0, 1e-14);

    const DivergenceReport zero = divergence_report(g, Z, Z, {0.25, 0.75});
    EXPECT_EQ(zero.kl_total, 0.0);
    EXPECT_EQ(zero.hellinger_sq, 0.0);
    EXPECT_EQ(zero.tv_upper, 0.0);
    for (double v : zero.renyi_total) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(divergence_report(g, T, Matrix::Zero(3, 2), {0.5}), shape_error);
}

TEST(Report, InvariantsOnRandomInstances) {
    std::mt19937_64 rng(6);
    for (const auto& f : test_families()) {
        const Matrix T = draw(f, 5, 3, rng), Z = draw(f, 5, 3, rng);
        const DivergenceReport r = divergence_report(f, T, Z, {0.75, 0.25, 0.5, 0.5});
        ASSERT_EQ(r.alphas.size(), 3u);
        for (std::size_t k = 0; k < 3; ++k) {
            EXPECT_NEAR(r.renyi_avg[k] * 15, r.renyi_total[k], 1e-12 * r.renyi_total[k]);
            if (k > 0) {
                EXPECT_GE(r.renyi_total[k], r.renyi_total[k - 1]);
            }
        }
        EXPECT_NEAR(r.kl_avg * 15, r.kl_total, 1e-12 * r.kl_total);
        EXPECT_GE(r.hellinger_sq, 0.0);
        EXPECT_LE(r.tv_lower, r.tv_upper);
    }
}

TEST(Report, CsvLayout) {
    const FamilySpec l(FamilyId::bernoulli_logit);
    const DivergenceReport r = divergence_report(l, Matrix::Zero(2, 1), Matrix::Ones(2, 1), {0.5});
    std::ostringstream os;
    write_report_csv(os, r);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "metric,alpha,per_entry_avg,total,normalization");
    std::getline(is, line);
    EXPECT_EQ(line.rfind("kl,,0.12011450695827", 0), 0u) << line;
    EXPECT_NE(line.find("per_entry_avg=total/2"), std::string::npos);
}

TEST(LemmaBoundsTest, Examples) {
    const FamilySpec g(FamilyId::gaussian);
    const Matrix T = Matrix::Zero(1, 1), Z = Matrix::Constant(1, 1, 2.0);
    const LemmaBounds bg = lemma_bounds(g, family_bounds(g), T, Z);
    EXPECT_DOUBLE_EQ(bg.kl_upper, 2.0);
    EXPECT_DOUBLE_EQ(bg.renyi_lower, 2.0);
    EXPECT_DOUBLE_EQ(kl_per_entry(g, 0, 2), bg.kl_upper);
    EXPECT_FALSE(bg.misspec_upper.has_value());
    EXPECT_THROW(bg.misspec(), unbounded_bound);

    const FamilySpec l(FamilyId::bernoulli_logit);
    const LemmaBounds bl = lemma_bounds(l, family_bounds(l), T, Matrix::Ones(1, 1));
    EXPECT_DOUBLE_EQ(bl.kl_upper, 0.125);
    EXPECT_GE(bl.kl_upper, kl_per_entry(l, 0, 1));

    const LemmaBounds z = lemma_bounds(l, family_bounds(l), T, T);
    EXPECT_EQ(z.kl_upper, 0.0);
    EXPECT_EQ(z.renyi_lower, 0.0);
    EXPECT_EQ(z.second_moment_upper, 0.0);
    EXPECT_EQ(z.misspec(), 0.0);
}

TEST(Rates, Examples) {
    FamilyBounds b{1.0, 1.0, 1.0};
    const RateFormulas r = rate_formulas(100, 2, 2, 1, 1, b, 10, 1);
    EXPECT_NEAR(r.epsilon_n_thm1, 0.14387371636790225, 1e-15);  // 12 log(11) / (n q)
    const RateFormulas r2 = rate_formulas(200, 2, 2, 1, 1, b, 10, 1);
    EXPECT_NEAR(r2.epsilon_n_thm1 * 2, r.epsilon_n_thm1, 1e-16);
    const RateFormulas r0 = rate_formulas(100, 2, 2, 0, 1, b, 10, 0);
    EXPECT_EQ(r0.epsilon_n_thm1, 0.0);
    EXPECT_EQ(r0.r_n, 0.0);
    EXPECT_DOUBLE_EQ(r0.epsilon_n_thm3, 1.0 / (4 * 200));
    EXPECT_DOUBLE_EQ(r0.epsilon_prime_n, 1.0 / 100);
    EXPECT_THROW(rate_formulas(100, 2, 2, -1, 1, b, 10, 1), invalid_parameter);
    EXPECT_GE(r.epsilon_n_thm3, 0.0);
    EXPECT_GE(r.r_n, 0.0);
}

TEST(Rates, CAlpha) {
    EXPECT_DOUBLE_EQ(c_alpha(0.5), 6.0);
    EXPECT_DOUBLE_EQ(c_alpha(0.25), 10.0);
    EXPECT_DOUBLE_EQ(c_alpha(0.75), 14.0);
    EXPECT_THROW(c_alpha(0.0), invalid_parameter);
    EXPECT_THROW(c_alpha(1.0), invalid_parameter);
}
