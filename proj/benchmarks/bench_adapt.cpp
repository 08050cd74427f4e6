#include <benchmark/benchmark.h>

#include "pacbus/baselearn.hpp"

using namespace pacbus;

namespace {

struct Fixture {
    ModelSpec spec = mlp_elu_spec({2, 16, 16, 2}, 1.0, 1.0);
    StabilityBudget budget;
    ParamVector theta;
    std::vector<std::vector<double>> zs;
    std::vector<std::size_t> ys;

    Fixture() {
        budget.algorithm = BaseAlgorithm::ProjectedSgd;
        budget.steps = 1;
        budget.schedule = StepSchedule::COverT;
        budget.step_size = 0.05;
        budget.train_size = 10;
        budget.convex = false;
        budget.constants = stability_constants_ball(spec, loss_scaling(2, 1.0));
        Rng rng(RngStream{8, 0, 0});
        theta.values.resize(spec.param_count());
        for (double& v : theta.values) v = 0.1 * rng.normal();
        project_to_ball_inplace(theta.values, spec.projection_radius());
        for (int i = 0; i < 10; ++i) {
            std::vector<double> z = {rng.normal(), rng.normal()};
            const double n = l2_norm(z);
            for (double& v : z) v *= 0.7 / n;
            zs.push_back(z);
            ys.push_back(rng.below(2));
        }
    }
};

}  // namespace

static void BM_AdaptOneStep(benchmark::State& state) {
    Fixture f;
    for (auto _ : state) {
        Rng order(RngStream{8, 1, 0});
        benchmark::DoNotOptimize(adapt(f.spec, f.theta, f.zs, f.ys, f.budget, order));
    }
}
BENCHMARK(BM_AdaptOneStep);

static void BM_LossGrad(benchmark::State& state) {
    Fixture f;
    for (auto _ : state) {
        benchmark::DoNotOptimize(loss_grad(f.spec, f.theta, f.zs[0], f.ys[0]));
    }
}
BENCHMARK(BM_LossGrad);
