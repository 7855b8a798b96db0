#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace klab {

struct BenchSpec {
    std::vector<std::string> variants = {"softmax",      "gmm-rks",        "gmm-prf",
                                         "fastfood-rks", "fastfood-prf",   "generative-rks",
                                         "generative-prf"};
    std::vector<std::size_t> lengths = {256, 512, 1024, 2048, 4096};
    std::size_t trials = 5;
    std::size_t d_qk = 64;
    std::size_t d_v = 64;
    std::size_t samples = 64;  // M, fixed across lengths
    std::size_t heads = 1;
    std::uint64_t seed = 7;
};

struct BenchResult {
    std::string variant;
    std::size_t length = 0;
    double seconds_per_eval = 0;   // median over trials
    std::size_t aux_peak_bytes = 0;  // instrumented scratch high-water mark
    std::size_t trials = 0;
    bool failed = false;
    std::string error;
};

// Wall time and instrumented auxiliary allocation of one attention
// evaluation per (variant, length). Out-of-memory at a length is recorded as
// a failure row and the sweep continues.
std::vector<BenchResult> run_scaling_bench(const BenchSpec& spec);

}  // namespace klab
