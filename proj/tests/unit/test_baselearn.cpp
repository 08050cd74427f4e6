#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "pacbus/baselearn.hpp"

using namespace pacbus;

namespace {

StabilityBudget gd_budget(const ModelSpec& spec, std::size_t steps, double alpha, std::size_t m,
                          std::size_t n = 0) {
    StabilityBudget b;
    b.algorithm = BaseAlgorithm::ProjectedGd;
    b.steps = steps;
    b.schedule = StepSchedule::Fixed;
    b.step_size = alpha;
    b.train_size = m;
    b.validation_size = n;
    b.convex = true;
    b.constants = stability_constants_ball(spec, loss_scaling(spec.class_count(), spec.output_radius));
    return b;
}

struct TaskData {
    std::vector<std::vector<double>> z;
    std::vector<std::size_t> y;
};

TaskData random_task(const ModelSpec& spec, std::size_t m, Rng& rng) {
    TaskData t;
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> z(spec.input_dim());
        for (double& v : z) v = rng.normal();
        const double n = l2_norm(z);
        const double target =
            spec.input_radius * std::pow(rng.uniform01(), 1.0 / static_cast<double>(z.size()));
        for (double& v : z) v *= target / n;
        t.z.push_back(std::move(z));
        t.y.push_back(rng.below(spec.class_count()));
    }
    return t;
}

ParamVector random_admissible(const ModelSpec& spec, Rng& rng) {
    ParamVector theta;
    theta.layout = spec.layout();
    theta.values.resize(spec.param_count());
    for (double& v : theta.values) v = rng.normal();
    project_to_ball_inplace(theta.values, spec.projection_radius());
    return theta;
}

}  // namespace

TEST_CASE("adapt is a no-op for T = 0 and alpha = 0") {
    const ModelSpec spec = linear_softmax_spec(2, 2);
    Rng rng(RngStream{21, 0, 0});
    const ParamVector theta = random_admissible(spec, rng);
    const TaskData task = random_task(spec, 6, rng);

    Rng order1(RngStream{21, 1, 0});
    const AdaptResult r0 = adapt(spec, theta, task.z, task.y, gd_budget(spec, 0, 0.1, 6), order1);
    CHECK(r0.theta.values == theta.values);
    CHECK(r0.steps_taken == 0);

    Rng order2(RngStream{21, 1, 0});
    StabilityBudget zb = gd_budget(spec, 5, 0.0, 6);
    const AdaptResult rz = adapt(spec, theta, task.z, task.y, zb, order2);
    CHECK(rz.theta.values == theta.values);
    CHECK(rz.steps_taken == 5);
}

TEST_CASE("adapt descends on separable two-point tasks") {
    const ModelSpec spec = linear_softmax_spec(2, 2);
    const StabilityBudget budget = gd_budget(spec, 10, 0.5, 2);
    REQUIRE(budget.step_size <= 2.0 / budget.constants.smoothness);
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(RngStream{22, seed, 0});
        TaskData task;
        std::vector<double> dir = {rng.normal(), rng.normal()};
        const double n = l2_norm(dir);
        task.z.push_back({dir[0] / n * 0.8, dir[1] / n * 0.8});
        task.z.push_back({-dir[0] / n * 0.8, -dir[1] / n * 0.8});
        task.y = {0, 1};
        const ParamVector theta = random_admissible(spec, rng);
        double before = 0.0;
        for (std::size_t j = 0; j < 2; ++j) {
            before += scaled_ce_loss_raw(spec, theta, task.z[j], task.y[j]);
        }
        Rng order(RngStream{22, seed, 1});
        const AdaptResult res = adapt(spec, theta, task.z, task.y, budget, order);
        if (res.final_train_loss < before / 2.0) ++improved;
    }
    CHECK(improved == 100);
}

TEST_CASE("adapt is deterministic and respects the projection ball") {
    const ModelSpec spec = linear_softmax_spec(3, 2, 1.0, 1.0);
    Rng rng(RngStream{23, 0, 0});
    const TaskData task = random_task(spec, 8, rng);
    const ParamVector theta = random_admissible(spec, rng);
    for (const BaseAlgorithm alg : {BaseAlgorithm::ProjectedGd, BaseAlgorithm::ProjectedSgd}) {
        StabilityBudget budget = gd_budget(spec, 12, 1.0, 8);
        budget.algorithm = alg;
        Rng o1(RngStream{23, 5, 0});
        Rng o2(RngStream{23, 5, 0});
        const AdaptResult a = adapt(spec, theta, task.z, task.y, budget, o1);
        const AdaptResult b = adapt(spec, theta, task.z, task.y, budget, o2);
        CHECK(a.theta.values == b.theta.values);
        CHECK(l2_norm(a.theta.values) <= spec.projection_radius() * (1.0 + 1e-12));
    }
}

TEST_CASE("empirical uniform stability holds with zero violations (GD)") {
    // 200 random (theta, S, S^i, probe) draws: the evaluated loss difference
    // never exceeds beta computed from the budget's certified constants.
    const ModelSpec spec = linear_softmax_spec(2, 2, 1.0, 1.0);
    const std::size_t m = 10;
    const StabilityBudget budget = gd_budget(spec, 5, 0.5, m);
    const double beta = budget_beta(budget);
    int violations = 0;
    for (std::uint64_t rep = 0; rep < 200; ++rep) {
        Rng rng(RngStream{24, rep, 0});
        TaskData task = random_task(spec, m + 2, rng);
        const std::vector<double> probe_z = task.z[m];
        const std::size_t probe_y = task.y[m];
        TaskData s;
        s.z.assign(task.z.begin(), task.z.begin() + m);
        s.y.assign(task.y.begin(), task.y.begin() + m);
        TaskData si = s;
        const std::size_t idx = rng.below(m);
        si.z[idx] = task.z[m + 1];
        si.y[idx] = task.y[m + 1];
        const ParamVector theta = random_admissible(spec, rng);
        Rng o1(RngStream{24, rep, 1});
        Rng o2(RngStream{24, rep, 1});
        const AdaptResult ra = adapt(spec, theta, s.z, s.y, budget, o1);
        const AdaptResult rb = adapt(spec, theta, si.z, si.y, budget, o2);
        const double diff = std::abs(scaled_ce_loss(spec, ra.theta, probe_z, probe_y) -
                                     scaled_ce_loss(spec, rb.theta, probe_z, probe_y));
        if (diff > beta) ++violations;
    }
    CHECK(violations == 0);
}

TEST_CASE("beta_convex arithmetic and monotonicity") {
    CHECK(beta_convex(0.5, 4, 1.0, 10) == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(beta_convex(0.5, 0, 1.0, 10) == 0.0);
    // doubling m halves beta; doubling T doubles beta
    for (int i = 1; i <= 20; ++i) {
        const double c = 0.1 * i;
        const double b = beta_convex(c, 4, 0.3, 8);
        CHECK(beta_convex(c, 4, 0.3, 16) == doctest::Approx(b / 2.0).epsilon(1e-12));
        CHECK(beta_convex(c, 8, 0.3, 8) == doctest::Approx(2.0 * b).epsilon(1e-12));
    }
    CHECK_THROWS_AS(beta_convex(0.0, 4, 1.0, 10), std::invalid_argument);
    CHECK_THROWS_AS(beta_convex(0.5, 4, 1.0, 0), std::invalid_argument);
}

TEST_CASE("beta_nonconvex follows the displayed expression") {
    // c_L = 0.5, c_S = 0.5, c = 1, T = 10, m = 11:
    // (1 + 1/(c_S c))/(m-1) * (2 c_L^2 c)^(1/(c_S c + 1)) * T^(c_S c/(c_S c+1))
    // = 0.3 * 0.5^(2/3) * 10^(1/3)
    const double expected = 0.40716264248923597;
    CHECK(beta_nonconvex(0.5, 0.5, 1.0, 10, 11) == doctest::Approx(expected).epsilon(1e-12));

    // monotone in T
    double prev = 0.0;
    for (std::size_t t = 1; t <= 16; ++t) {
        const double b = beta_nonconvex(0.4, 0.7, 0.5, t, 9);
        CHECK(b > prev);
        prev = b;
    }
    // vanishes as m grows
    CHECK(beta_nonconvex(0.4, 0.7, 0.5, 8, 1000000) < 1e-5);
    CHECK_THROWS_AS(beta_nonconvex(0.4, 0.7, 0.5, 8, 1), std::invalid_argument);
}

TEST_CASE("beta_effective discount") {
    const double beta = 0.2;
    CHECK(beta_effective(beta, 10, 0) == beta);  // bitwise: Eq-8 path degenerates
    CHECK(beta_effective(beta, 10, 250) == doctest::Approx(0.0076923076923076927).epsilon(1e-15));
    CHECK(beta_effective(beta, 10, 100000000) < 1e-7);
}

TEST_CASE("budget validation names the violated constraint") {
    const ModelSpec spec = linear_softmax_spec(2, 2);
    StabilityBudget b = gd_budget(spec, 4, 0.1, 10);
    b.step_size = 2.0 / b.constants.smoothness + 1.0;
    CHECK_THROWS_WITH_AS(validate_budget(b), doctest::Contains("alpha <= 2/c_S"),
                         std::invalid_argument);

    StabilityBudget sched = gd_budget(spec, 4, 0.1, 10);
    sched.schedule = StepSchedule::COverT;
    sched.algorithm = BaseAlgorithm::ProjectedGd;
    CHECK_THROWS_WITH_AS(validate_budget(sched), doctest::Contains("requires SGD"),
                         std::invalid_argument);
    sched.algorithm = BaseAlgorithm::ProjectedSgd;
    sched.train_size = 1;
    CHECK_THROWS_AS(validate_budget(sched), std::invalid_argument);
}

TEST_CASE("one beta formula serves GD and SGD in the convex regime") {
    const ModelSpec spec = linear_softmax_spec(2, 2);
    StabilityBudget gd = gd_budget(spec, 6, 0.4, 12);
    StabilityBudget sgd = gd;
    sgd.algorithm = BaseAlgorithm::ProjectedSgd;
    CHECK(budget_beta(gd) == budget_beta(sgd));
}
