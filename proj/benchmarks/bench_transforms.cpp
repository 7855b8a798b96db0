#include <benchmark/benchmark.h>

#include "klab/featmap.hpp"
#include "klab/spectral.hpp"
#include "klab/wht.hpp"

namespace {

using namespace klab;

void BM_Fwht(benchmark::State& state) {
    const std::size_t n = static_cast<std::size_t>(state.range(0));
    Rng rng(3);
    DenseArray x = DenseArray::randn({n}, rng);
    for (auto _ : state) {
        fwht(x.data(), n);
        benchmark::DoNotOptimize(x.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_Fwht)->RangeMultiplier(4)->Range(64, 4096)->Complexity(benchmark::oNLogN);

void BM_FastFoodApply(benchmark::State& state) {
    const std::size_t d = 64;
    const std::size_t m = static_cast<std::size_t>(state.range(0));
    FastFoodParams p = FastFoodParams::init(d, m, 11);
    Rng rng(5);
    DenseArray x = DenseArray::randn({d}, rng);
    for (auto _ : state) {
        DenseArray y = fastfood_matrix_apply(p, x);
        benchmark::DoNotOptimize(y.data());
    }
}
BENCHMARK(BM_FastFoodApply)->Arg(64)->Arg(256)->Arg(1024);

void BM_GmmSample(benchmark::State& state) {
    Rng rng(9);
    GmmParams p = GmmParams::init(2, 16, rng);
    std::uint64_t seed = 0;
    for (auto _ : state) {
        FrequencyMatrix fm = gmm_sample(p, static_cast<std::size_t>(state.range(0)), ++seed);
        benchmark::DoNotOptimize(fm.rows.data());
    }
}
BENCHMARK(BM_GmmSample)->Arg(64)->Arg(256);

void BM_RksMap(benchmark::State& state) {
    const std::size_t d = 64;
    const std::size_t m = static_cast<std::size_t>(state.range(0));
    Rng rng(7);
    FrequencyMatrix omega;
    omega.rows = DenseArray::randn({m, d}, rng);
    DenseArray x = DenseArray::randn({d}, rng);
    DenseArray out({2 * m});
    for (auto _ : state) {
        rks_map_into(x.data(), d, omega, out.data());
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(BM_RksMap)->Arg(64)->Arg(256)->Arg(1024);

}  // namespace
