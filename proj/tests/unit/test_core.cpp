#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "pacbus/core.hpp"

using namespace pacbus;

TEST_CASE("rng streams are deterministic and disjoint") {
    Rng a(RngStream{42, 1, 7});
    Rng b(RngStream{42, 1, 7});
    Rng c(RngStream{42, 1, 8});
    bool same = true, differ = false;
    for (int i = 0; i < 64; ++i) {
        const double xa = a.uniform01();
        same = same && (xa == b.uniform01());
        differ = differ || (xa != c.uniform01());
    }
    CHECK(same);
    CHECK(differ);
}

TEST_CASE("sample_posterior zero-variance limit returns the mean") {
    PosteriorParams psi = make_posterior({0.0, 0.0}, {-700.0, -700.0});
    Rng rng(RngStream{1, 2, 3});
    const PosteriorSample s = sample_posterior(psi, rng);
    CHECK(std::abs(s.theta.values[0]) < 1e-100);
    CHECK(std::abs(s.theta.values[1]) < 1e-100);
}

TEST_CASE("sample_posterior reparameterization arithmetic") {
    // theta = mu + exp(logvar/2) * eps with the recorded eps; unit variance
    // makes the relation theta = mu + eps exact.
    PosteriorParams psi = make_posterior({1.0, 2.0}, {0.0, 0.0});
    Rng rng(RngStream{9, 0, 0});
    const PosteriorSample s = sample_posterior(psi, rng);
    CHECK(s.theta.values[0] == 1.0 + s.eps[0]);
    CHECK(s.theta.values[1] == 2.0 + s.eps[1]);
}

TEST_CASE("sample_posterior Monte-Carlo moments") {
    // mu = 0.3, variance 4; 1e6 draws must match within the stated tolerance.
    PosteriorParams psi = make_posterior({0.3}, {std::log(4.0)});
    Rng rng(RngStream{123, 5, 0});
    const std::size_t n = 1000000;
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = sample_posterior(psi, rng).theta.values[0];
        sum += x;
        sum2 += x * x;
    }
    const double mean = sum / n;
    const double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean - 0.3) < 0.01);
    CHECK(std::abs(var - 4.0) < 0.05);
}

TEST_CASE("kl_diag_gaussian identity and quadratic term") {
    PosteriorParams q = make_posterior({1.0, 0.0}, {0.0, 0.0});
    PosteriorParams p = make_posterior({0.0, 0.0}, {0.0, 0.0});
    CHECK(kl_diag_gaussian(q, q) == 0.0);
    CHECK(kl_diag_gaussian(q, p) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("kl_diag_gaussian dimension and finiteness errors") {
    PosteriorParams q = make_posterior({0.0}, {0.0});
    PosteriorParams p = make_posterior({0.0, 0.0}, {0.0, 0.0});
    CHECK_THROWS_AS(kl_diag_gaussian(q, p), std::invalid_argument);
    PosteriorParams bad;
    bad.mean = {std::nan("")};
    bad.log_variance = {0.0};
    CHECK_THROWS_AS(kl_diag_gaussian(bad, q), std::invalid_argument);
}

TEST_CASE("kl_diag_gaussian matches the Monte-Carlo estimate") {
    // E_q[ln q/p] estimated from 1e6 reparameterized draws; 2% relative.
    Rng setup(RngStream{77, 0, 0});
    for (int rep = 0; rep < 3; ++rep) {
        const std::size_t d = 5;
        std::vector<double> mq(d), lq(d), mp(d), lp(d);
        for (std::size_t i = 0; i < d; ++i) {
            mq[i] = setup.normal();
            mp[i] = setup.normal();
            lq[i] = 0.5 * setup.normal();
            lp[i] = 0.5 * setup.normal();
        }
        PosteriorParams q = make_posterior(mq, lq);
        PosteriorParams p = make_posterior(mp, lp);
        const double closed = kl_diag_gaussian(q, p);
        Rng rng(RngStream{78, static_cast<std::uint64_t>(rep), 0});
        double acc = 0.0;
        const std::size_t n = 1000000;
        for (std::size_t s = 0; s < n; ++s) {
            const PosteriorSample draw = sample_posterior(q, rng);
            double term = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double x = draw.theta.values[i];
                const double dq = x - q.mean[i];
                const double dp = x - p.mean[i];
                term += 0.5 * (lp[i] - lq[i]) + 0.5 * dp * dp * std::exp(-lp[i]) -
                        0.5 * dq * dq * std::exp(-lq[i]);
            }
            acc += term;
        }
        const double mc = acc / static_cast<double>(n);
        CHECK(std::abs(mc - closed) <= 0.02 * std::max(1.0, std::abs(closed)));
    }
}

TEST_CASE("kl_diag_gaussian grows with the mean gap") {
    PosteriorParams p = make_posterior({0.0, 0.0}, {0.3, -0.2});
    double prev = -1.0;
    for (double gap = 0.0; gap < 3.0; gap += 0.5) {
        PosteriorParams q = make_posterior({gap, -gap}, {0.1, 0.4});
        const double kl = kl_diag_gaussian(q, p);
        CHECK(kl >= prev);
        prev = kl;
    }
}

TEST_CASE("project_to_ball basics") {
    ParamVector inside;
    inside.values = {0.3, 0.4};
    const ParamVector same = project_to_ball(inside, 1.0);
    CHECK(same.values == inside.values);

    ParamVector far;
    far.values = {3.0, 4.0};
    const ParamVector proj = project_to_ball(far, 1.0);
    CHECK(proj.values[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(proj.values[1] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(l2_norm(proj.values) <= 1.0 + 1e-15);

    CHECK_THROWS_AS(project_to_ball(far, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(project_to_ball(far, -1.0), std::invalid_argument);
}

TEST_CASE("projection is idempotent and non-expansive") {
    Rng rng(RngStream{5, 5, 5});
    for (int rep = 0; rep < 100; ++rep) {
        const double radius = 0.5 + rng.uniform01() * 2.0;
        ParamVector a, b;
        for (int i = 0; i < 6; ++i) {
            a.values.push_back(3.0 * rng.normal());
            b.values.push_back(3.0 * rng.normal());
        }
        const ParamVector pa = project_to_ball(a, radius);
        const ParamVector paa = project_to_ball(pa, radius);
        for (std::size_t i = 0; i < pa.values.size(); ++i) {
            CHECK(paa.values[i] == doctest::Approx(pa.values[i]).epsilon(1e-15));
        }
        const ParamVector pb = project_to_ball(b, radius);
        std::vector<double> d1(6), d2(6);
        for (int i = 0; i < 6; ++i) {
            d1[i] = a.values[i] - b.values[i];
            d2[i] = pa.values[i] - pb.values[i];
        }
        CHECK(l2_norm(d2) <= l2_norm(d1) + 1e-12);
    }
}
