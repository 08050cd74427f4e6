#include <benchmark/benchmark.h>

#include "pacbus/bounds.hpp"

using namespace pacbus;

static void BM_KlInverse(benchmark::State& state) {
    Rng rng(RngStream{7, 0, 0});
    for (auto _ : state) {
        const double p = rng.uniform01();
        const double c = rng.uniform01();
        benchmark::DoNotOptimize(kl_inverse(p, c));
    }
}
BENCHMARK(BM_KlInverse);

static void BM_PacBayesRegularizer(benchmark::State& state) {
    Rng rng(RngStream{7, 1, 0});
    for (auto _ : state) {
        benchmark::DoNotOptimize(pac_bayes_regularizer(rng.uniform01() * 4.0, 500, 0.005));
    }
}
BENCHMARK(BM_PacBayesRegularizer);

BENCHMARK_MAIN();
