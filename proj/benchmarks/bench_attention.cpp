#include <benchmark/benchmark.h>

#include "klab/attention.hpp"
#include "klab/spectral.hpp"

namespace {

using namespace klab;

struct Fixture {
    DenseArray Q, K, V, out;
    FrequencyMatrix omega;
    FeatureMapSpec spec;

    Fixture(std::size_t L, FeatureKind kind, std::size_t d = 64, std::size_t m = 64) {
        Rng rng(42);
        Q = DenseArray::randn({L, d}, rng, 0.5);
        K = DenseArray::randn({L, d}, rng, 0.5);
        V = DenseArray::randn({L, d}, rng, 1.0);
        out = DenseArray({L, d});
        omega.rows = DenseArray::randn({m, d}, rng);
        spec.kind = kind;
        spec.samples = m;
    }
};

void BM_LinearAttentionRks(benchmark::State& state) {
    Fixture f(static_cast<std::size_t>(state.range(0)), FeatureKind::Rks);
    for (auto _ : state) {
        linear_kernel_attention_into(f.Q, f.K, f.V, f.spec, f.omega, f.out);
        benchmark::DoNotOptimize(f.out.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_LinearAttentionRks)->RangeMultiplier(2)->Range(256, 4096)->Complexity();

void BM_LinearAttentionPrf(benchmark::State& state) {
    Fixture f(static_cast<std::size_t>(state.range(0)), FeatureKind::Prf);
    for (auto _ : state) {
        linear_kernel_attention_into(f.Q, f.K, f.V, f.spec, f.omega, f.out);
        benchmark::DoNotOptimize(f.out.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_LinearAttentionPrf)->RangeMultiplier(2)->Range(256, 4096)->Complexity();

void BM_SoftmaxAttention(benchmark::State& state) {
    Fixture f(static_cast<std::size_t>(state.range(0)), FeatureKind::Rks);
    for (auto _ : state) {
        softmax_attention_into(f.Q, f.K, f.V, f.out);
        benchmark::DoNotOptimize(f.out.data());
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_SoftmaxAttention)->RangeMultiplier(2)->Range(256, 2048)->Complexity();

void BM_CausalLinearAttention(benchmark::State& state) {
    Fixture f(static_cast<std::size_t>(state.range(0)), FeatureKind::Prf);
    for (auto _ : state) {
        causal_linear_attention_into(f.Q, f.K, f.V, f.spec, f.omega, f.out);
        benchmark::DoNotOptimize(f.out.data());
    }
}
BENCHMARK(BM_CausalLinearAttention)->Arg(512)->Arg(2048);

}  // namespace
