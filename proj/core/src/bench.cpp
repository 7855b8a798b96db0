#include "klab/bench.hpp"

#include <algorithm>
#include <chrono>
#include <new>

#include "klab/attention.hpp"
#include "klab/model.hpp"

namespace klab {

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<BenchResult> run_scaling_bench(const BenchSpec& spec) {
    std::vector<BenchResult> out;
    for (const std::string& vname : spec.variants) {
        const VariantSpec variant = VariantSpec::parse(vname);
        FeatureMapSpec fspec;
        fspec.kind = variant.featmap;
        fspec.samples = spec.samples;

        // One frequency draw per variant, reused across lengths (fixed M, d_q).
        FrequencyMatrix omega;
        if (!variant.softmax_baseline) {
            SpectralParams params;
            switch (variant.sampler) {
                case SamplerKind::Gmm: {
                    Rng rng(derive_seed(spec.seed, 0x61ull));
                    params = GmmParams::init(2, spec.d_qk, rng, 0.3);
                    break;
                }
                case SamplerKind::FastFood:
                    params = FastFoodParams::init(spec.d_qk, spec.samples,
                                                  derive_seed(spec.seed, 0x62ull));
                    break;
                case SamplerKind::Generative:
                    params = GeneratorParams::init(spec.d_qk, derive_seed(spec.seed, 0x63ull));
                    break;
            }
            omega = draw_frequencies(params, spec.samples, derive_seed(spec.seed, 0x64ull));
        }

        for (std::size_t L : spec.lengths) {
            BenchResult r;
            r.variant = vname;
            r.length = L;
            r.trials = spec.trials;
            try {
                Rng rng(derive_seed(spec.seed, L, 0x65ull));
                const DenseArray Q = DenseArray::randn({L, spec.d_qk}, rng, 0.5);
                const DenseArray K = DenseArray::randn({L, spec.d_qk}, rng, 0.5);
                const DenseArray V = DenseArray::randn({L, spec.d_v}, rng, 1.0);
                DenseArray result({L, spec.d_v});

                auto evaluate = [&] {
                    for (std::size_t h = 0; h < spec.heads; ++h) {
                        if (variant.softmax_baseline) softmax_attention_into(Q, K, V, result);
                        else linear_kernel_attention_into(Q, K, V, fspec, omega, result);
                    }
                };
                evaluate();  // warmup

                std::vector<double> times;
                for (std::size_t t = 0; t < spec.trials; ++t) {
                    const auto t0 = std::chrono::steady_clock::now();
                    evaluate();
                    times.push_back(std::chrono::duration<double>(
                                        std::chrono::steady_clock::now() - t0)
                                        .count());
                }
                r.seconds_per_eval = median(std::move(times));

                AllocCounter::enable();
                evaluate();
                r.aux_peak_bytes = AllocCounter::peak_bytes();
                AllocCounter::disable();
            } catch (const std::bad_alloc&) {
                AllocCounter::disable();
                r.failed = true;
                r.error = "out of memory";
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

}  // namespace klab
