#pragma once

#include <cstdint>
#include <vector>

#include "klab/array.hpp"

namespace klab {

// Parameters of the synthetic sparsity task: sequences of (score, relevance)
// pairs whose label is the relevance-weighted score sum, kept within
// [-4, 4] by construction.
struct SparsitySpec {
    double relevance_p = 0.5;       // Bernoulli parameter for a_i
    std::size_t seq_len = 50;       // L
    std::size_t count = 20000;      // N
    double train_fraction = 0.8;
    std::uint64_t seed = 1;

    void validate() const;
};

struct SyntheticExample {
    std::vector<std::int8_t> score;      // v_i in {-1, +1}
    std::vector<std::uint8_t> relevance; // a_i in {0, 1}
    int label = 0;                       // sum v_i a_i, in [-4, 4]
};

int sparsity_label(const std::vector<std::int8_t>& score,
                   const std::vector<std::uint8_t>& relevance);

struct SparsityDataset {
    SparsitySpec spec;
    std::vector<SyntheticExample> train;
    std::vector<SyntheticExample> validation;
};

// Relevance flips are fair Bernoulli(p); score flips are fair except at a
// relevant position that would push the running sum past +-4, where the sign
// restoring the bound is forced. Class balance comes from generating three
// times the target and sampling the most uniform label histogram the pools
// allow. Deterministic per seed.
SparsityDataset generate_sparsity_dataset(const SparsitySpec& spec);

// Many-hot batch encoding (batch, L, 3): channels are (v == +1, v == -1, a).
DenseArray encode_batch(const std::vector<SyntheticExample>& examples, std::size_t begin,
                        std::size_t end);
// Class ids 0..8 for labels -4..4.
std::vector<int> encode_labels(const std::vector<SyntheticExample>& examples, std::size_t begin,
                               std::size_t end);

}  // namespace klab
