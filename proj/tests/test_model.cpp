#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "frrr/model.hpp"

using namespace frrr;

namespace {

FamilySpec bounded(FamilyId id) {
    FamilyOptions o;
    switch (id) {
        case FamilyId::gaussian: o.theta_lo = -8; o.theta_hi = 8; break;
        case FamilyId::bernoulli_logit:
        case FamilyId::bernoulli_probit: o.theta_lo = -6; o.theta_hi = 6; break;
        case FamilyId::poisson_log: o.theta_lo = -3; o.theta_hi = 3; break;
        case FamilyId::gamma_log: o.shape = 2.0; o.theta_lo = -20; break;
        case FamilyId::negbin_log: o.shape = 3.0; o.theta_lo = -8; break;
    }
    return FamilySpec(id, o);
}

FamilySpec negbin(double k) {
    FamilyOptions o;
    o.shape = k;
    return FamilySpec(FamilyId::negbin_log, o);
}

}  // namespace

TEST(Link, CanonicalIdentity) {
    EXPECT_EQ(theta_from_eta(FamilySpec(FamilyId::bernoulli_logit), 0.7), 0.7);
    EXPECT_EQ(dtheta_deta(FamilySpec(FamilyId::poisson_log), 1.3), 1.0);
}

TEST(Link, ClosedFormValues) {
    EXPECT_NEAR(theta_from_eta(FamilySpec(FamilyId::bernoulli_probit), 0.0), 0.0, 1e-15);
    EXPECT_NEAR(theta_from_eta(FamilySpec(FamilyId::gamma_log), 0.0), -1.0, 1e-15);
    EXPECT_NEAR(theta_from_eta(negbin(3.0), std::log(3.0)), std::log(0.5), 1e-14);
    EXPECT_NEAR(dtheta_deta(FamilySpec(FamilyId::bernoulli_probit), 0.0), 1.5957691216057308, 1e-12);
    EXPECT_NEAR(dtheta_deta(FamilySpec(FamilyId::gamma_log), 0.0), 1.0, 1e-15);
}

TEST(Link, ProbitStableInTails) {
    const FamilySpec f(FamilyId::bernoulli_probit);
    for (double eta : {-30.0, -8.0, 8.0, 30.0}) {
        const double t = theta_from_eta(f, eta);
        EXPECT_TRUE(std::isfinite(t));
        EXPECT_EQ(std::signbit(t), std::signbit(eta));
    }
    // roughly eta^2/2 growth in the tail
    EXPECT_NEAR(theta_from_eta(f, 10.0) / 50.0, 1.0, 0.1);
}

TEST(Link, RoundTripAndFiniteDifferences) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    for (auto id : kAllFamilies) {
        const FamilySpec f = bounded(id);
        for (int t = 0; t < 1000; ++t) {
            const double eta = u(rng);
            const double raw = theta_unclipped(f, eta);
            if (f.in_theta(raw)) {
                EXPECT_NEAR(eta_from_theta(f, theta_from_eta(f, eta)), eta, 1e-8) << to_string(id);
            }
            const double h = 1e-5;
            const double fd = (theta_unclipped(f, eta + h) - theta_unclipped(f, eta - h)) / (2 * h);
            EXPECT_NEAR(dtheta_deta(f, eta) / fd, 1.0, 1e-5) << to_string(id) << " eta=" << eta;
        }
    }
}

TEST(Link, Monotone) {
    for (auto id : kAllFamilies) {
        const FamilySpec f = bounded(id);
        double prev = -std::numeric_limits<double>::infinity();
        for (double eta = -10; eta <= 10; eta += 0.01) {
            const double t = theta_from_eta(f, eta);
            EXPECT_GE(t, prev);
            EXPECT_TRUE(f.in_theta(t));
            prev = t;
        }
    }
}

TEST(LogPartition, Values) {
    const FamilySpec g(FamilyId::gaussian);
    EXPECT_DOUBLE_EQ(b_value(g, 2), 2);
    EXPECT_DOUBLE_EQ(b_prime(g, 2), 2);
    EXPECT_DOUBLE_EQ(b_second(g, 2), 1);
    const FamilySpec l(FamilyId::bernoulli_logit);
    EXPECT_NEAR(b_value(l, 0), std::log(2.0), 1e-15);
    EXPECT_DOUBLE_EQ(b_prime(l, 0), 0.5);
    EXPECT_DOUBLE_EQ(b_second(l, 0), 0.25);
    const FamilySpec p(FamilyId::poisson_log);
    EXPECT_DOUBLE_EQ(b_value(p, 0), 1);
    EXPECT_DOUBLE_EQ(b_prime(p, 0), 1);
    EXPECT_DOUBLE_EQ(b_second(p, 0), 1);
}

TEST(LogPartition, DomainViolation) {
    FamilyOptions o;
    o.shape = 2;
    const FamilySpec g(FamilyId::gamma_log, o);
    EXPECT_THROW(b_value(g, 0.0), invalid_parameter);
    EXPECT_THROW(b_prime(g, 0.5), invalid_parameter);
    EXPECT_THROW(b_second(negbin(2), 0.1), invalid_parameter);
}

TEST(LogPartition, DerivativesMatchDifferences) {
    std::mt19937_64 rng(3);
    for (auto id : kAllFamilies) {
        const FamilySpec f = bounded(id);
        std::uniform_real_distribution<double> u(f.theta_lo(), f.theta_hi());
        for (int t = 0; t < 200; ++t) {
            const double th = u(rng);
            const double h = 1e-5 * std::max(1.0, std::abs(th));
            if (!f.in_natural_domain(th + h) || !f.in_natural_domain(th - h)) continue;
            const double d1 = (b_value(f, th + h) - b_value(f, th - h)) / (2 * h);
            const double d2 = (b_prime(f, th + h) - b_prime(f, th - h)) / (2 * h);
            EXPECT_NEAR(b_prime(f, th), d1, 1e-6 * std::max(1.0, std::abs(d1))) << to_string(id);
            EXPECT_NEAR(b_second(f, th), d2, 1e-6 * std::max(1.0, std::abs(d2))) << to_string(id);
            EXPECT_GE(b_second(f, th), 0.0);
        }
    }
}

TEST(Bounds, CatalogValues) {
    const FamilyBounds g = family_bounds(FamilySpec(FamilyId::gaussian));
    EXPECT_EQ(g.c_lower, 1.0);
    EXPECT_EQ(g.c_upper, 1.0);
    EXPECT_FALSE(g.has_finite_u1());
    EXPECT_THROW(g.require_u1(), unbounded_bound);

    FamilyOptions o;
    o.theta_lo = -2;
    o.theta_hi = 2;
    const FamilyBounds l = family_bounds(FamilySpec(FamilyId::bernoulli_logit, o));
    EXPECT_DOUBLE_EQ(l.c_upper, 0.25);
    EXPECT_NEAR(l.c_lower, 0.10499358540350655, 1e-15);
    EXPECT_NEAR(l.u1, 0.8807970779778823, 1e-15);

    o.theta_lo = -1;
    o.theta_hi = 1;
    const FamilyBounds p = family_bounds(FamilySpec(FamilyId::poisson_log, o));
    EXPECT_NEAR(p.c_lower, std::exp(-1.0), 1e-15);
    EXPECT_NEAR(p.c_upper, std::exp(1.0), 1e-15);
}

TEST(Bounds, GridCheck) {
    for (auto id : kAllFamilies) {
        const FamilySpec f = bounded(id);
        const FamilyBounds fb = family_bounds(f);
        const double lo = f.theta_lo();
        const double hi = f.theta_hi();
        for (int i = 0; i <= 20000; ++i) {
            const double t = lo + (hi - lo) * i / 20000.0;
            const double b2 = b_second(f, t);
            EXPECT_LE(fb.c_lower, b2 * (1 + 1e-12)) << to_string(id);
            EXPECT_GE(fb.c_upper * (1 + 1e-12), b2) << to_string(id);
            EXPECT_GE(fb.u1 * (1 + 1e-12), std::abs(b_prime(f, t))) << to_string(id);
        }
    }
}

TEST(Family, ClipMarginKeepsUpperEndAwayFromZero) {
    FamilyOptions o;
    o.shape = 2;
    const FamilySpec g(FamilyId::gamma_log, o);
    EXPECT_DOUBLE_EQ(g.theta_hi(), -1e-3);
    EXPECT_DOUBLE_EQ(g.dispersion(), 0.5);
    EXPECT_TRUE(std::isfinite(family_bounds(g).c_upper));
    EXPECT_FALSE(std::isfinite(g.theta_lo()));
    EXPECT_DOUBLE_EQ(theta_from_eta(g, 50.0), -1e-3);
}

TEST(Family, RejectsBadConfigurations) {
    FamilyOptions o;
    o.theta_lo = 2;
    o.theta_hi = 1;
    EXPECT_THROW(FamilySpec(FamilyId::gaussian, o), invalid_parameter);
    FamilyOptions k;
    k.shape = -1;
    EXPECT_THROW(FamilySpec(FamilyId::negbin_log, k), invalid_parameter);
    FamilyOptions a;
    a.dispersion = 2.0;
    EXPECT_THROW(FamilySpec(FamilyId::poisson_log, a), invalid_parameter);
    a.dispersion = -1.0;
    EXPECT_THROW(FamilySpec(FamilyId::gaussian, a), invalid_parameter);
    EXPECT_THROW(family_from_string("cauchy"), invalid_parameter);
    for (auto id : kAllFamilies) EXPECT_EQ(family_from_string(to_string(id)), id);
}

TEST(Sampling, MomentsMatchFamily) {
    std::mt19937_64 rng(11);
    const int draws = 100000;
    for (auto id : kAllFamilies) {
        const FamilySpec f = bounded(id);
        const double theta = std::clamp(id == FamilyId::gamma_log    ? -0.7
                                        : id == FamilyId::negbin_log ? std::log(0.5)
                                                                     : 0.4,
                                        f.theta_lo(), f.theta_hi());
        double s = 0, s2 = 0;
        for (int i = 0; i < draws; ++i) {
            const double y = sample_response(f, theta, rng);
            ASSERT_TRUE(in_support(f, y));
            s += y;
            s2 += y * y;
        }
        const double mean = s / draws;
        const double var = s2 / draws - mean * mean;
        const double v = f.dispersion() * b_second(f, theta);
        EXPECT_NEAR(mean, b_prime(f, theta), 5 * std::sqrt(v / draws)) << to_string(id);
        // variance of the sample variance is bounded by the fourth moment; use a loose 5% band
        EXPECT_NEAR(var / v, 1.0, 0.05) << to_string(id);
    }
}

TEST(Sampling, CatalogExamples) {
    std::mt19937_64 rng(5);
    const int draws = 100000;
    FamilyOptions o;
    o.dispersion = 1.0;
    const FamilySpec g(FamilyId::gaussian, o);
    double s = 0;
    for (int i = 0; i < draws; ++i) s += sample_response(g, 3.0, rng);
    EXPECT_NEAR(s / draws, 3.0, 0.02);

    const FamilySpec l(FamilyId::bernoulli_logit);
    s = 0;
    for (int i = 0; i < draws; ++i) s += sample_response(l, 0.0, rng);
    EXPECT_NEAR(s / draws, 0.5, 0.01);

    const FamilySpec nb = negbin(2.0);
    s = 0;
    for (int i = 0; i < draws; ++i) s += sample_response(nb, std::log(0.5), rng);
    EXPECT_NEAR(s / draws, 2.0, 0.05);
}

TEST(Sampling, RejectsThetaOutsideTheta) {
    std::mt19937_64 rng(1);
    FamilyOptions o;
    o.theta_lo = -1;
    o.theta_hi = 1;
    EXPECT_THROW(sample_response(FamilySpec(FamilyId::poisson_log, o), 2.0, rng), invalid_parameter);
}

TEST(Density, NormalizesAndMatchesStandardForms) {
    // Poisson pmf sums to one and equals e^-l l^y / y!
    const FamilySpec p(FamilyId::poisson_log);
    double s = 0;
    for (int y = 0; y < 200; ++y) s += std::exp(log_density(p, y, std::log(3.0)));
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_NEAR(log_density(p, 2, std::log(3.0)), std::log(std::exp(-3.0) * 9 / 2), 1e-12);
    // gamma shape 2 rate 2 at y = 1: 4 y e^{-2y}
    FamilyOptions o;
    o.shape = 2;
    const FamilySpec g(FamilyId::gamma_log, o);
    EXPECT_NEAR(log_density(g, 1.0, -1.0), std::log(4 * std::exp(-2.0)), 1e-12);
    EXPECT_THROW(log_density(p, 1.5, 0.0), data_error);
}

TEST(LinearPredictor, MatchesNaive) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    Matrix X(3, 2), B(2, 2);
    for (auto& v : X.reshaped()) v = n01(rng);
    for (auto& v : B.reshaped()) v = n01(rng);
    const Matrix eta = linear_predictor(X, B);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 2; ++j) {
            double s = 0;
            for (int k = 0; k < 2; ++k) s += X(i, k) * B(k, j);
            EXPECT_NEAR(eta(i, j), s, 1e-12);
        }
    }
    EXPECT_TRUE(linear_predictor(Matrix::Zero(3, 2), B).isZero());
    EXPECT_THROW(linear_predictor(X, Matrix::Zero(3, 2)), shape_error);
}

TEST(DatasetTest, Validation) {
    Dataset d{Matrix::Ones(2, 1), Matrix::Constant(2, 1, 0.5), FamilySpec(FamilyId::bernoulli_logit)};
    EXPECT_THROW(d.validate(), data_error);
    d.Y << 0, 1;
    EXPECT_NO_THROW(d.validate());
    d.Y = Matrix::Zero(3, 1);
    EXPECT_THROW(d.validate(), shape_error);
}
