#include <benchmark/benchmark.h>

#include "pacbus/bounds.hpp"

using namespace pacbus;

static void BM_CertifySmall(benchmark::State& state) {
    const ModelSpec spec = mlp_elu_spec({2, 8, 2}, 1.0, 1.0);
    StabilityBudget budget;
    budget.algorithm = BaseAlgorithm::ProjectedSgd;
    budget.steps = 1;
    budget.schedule = StepSchedule::COverT;
    budget.step_size = 0.05;
    budget.train_size = 6;
    budget.validation_size = 4;
    budget.convex = false;
    budget.constants = stability_constants_ball(spec, loss_scaling(2, 1.0));
    const TaskPool pool = gen_circle_tasks(16, 6, 4, PoolRole::MetaTrain, 9);
    const PosteriorParams psi =
        make_posterior_scalar_var(std::vector<double>(spec.param_count(), 0.05), 0.05);
    CertifyOptions opts;
    opts.sample_count = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) {
        benchmark::DoNotOptimize(certify(psi, psi, pool.tasks, spec, budget, opts, RngStream{9, 1, 0}));
    }
}
BENCHMARK(BM_CertifySmall)->Arg(8)->Arg(64);
