#include "klab/dataset.hpp"

#include <algorithm>
#include <array>

#include "klab/rng.hpp"

namespace klab {

void SparsitySpec::validate() const {
    if (relevance_p < 0.0 || relevance_p > 1.0)
        throw ContractError("SparsitySpec: relevance probability must be in [0, 1]");
    if (seq_len < 1) throw ContractError("SparsitySpec: sequence length must be positive");
    if (count < 1) throw ContractError("SparsitySpec: instance count must be positive");
    if (train_fraction <= 0.0 || train_fraction >= 1.0)
        throw ContractError("SparsitySpec: train fraction must be in (0, 1)");
}

int sparsity_label(const std::vector<std::int8_t>& score,
                   const std::vector<std::uint8_t>& relevance) {
    if (score.size() != relevance.size())
        throw DimensionError("sparsity_label: score/relevance lengths differ");
    int s = 0;
    for (std::size_t i = 0; i < score.size(); ++i)
        if (relevance[i]) s += score[i];
    return s;
}

namespace {

SyntheticExample draw_example(const SparsitySpec& spec, Rng& rng) {
    SyntheticExample ex;
    ex.score.resize(spec.seq_len);
    ex.relevance.resize(spec.seq_len);
    int prefix = 0;
    for (std::size_t i = 0; i < spec.seq_len; ++i) {
        const bool rel = rng.bernoulli(spec.relevance_p);
        ex.relevance[i] = rel ? 1 : 0;
        int v = rng.bernoulli(0.5) ? 1 : -1;
        if (rel && std::abs(prefix + v) > 4) v = -v;  // force the corrective sign
        ex.score[i] = static_cast<std::int8_t>(v);
        if (rel) prefix += v;
    }
    ex.label = prefix;
    return ex;
}

}  // namespace

SparsityDataset generate_sparsity_dataset(const SparsitySpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, 0xDA7Aull));

    // Overgenerate, then sample per class toward the most uniform label
    // histogram the pools allow (waterfilling).
    const std::size_t pool_target = 3 * spec.count;
    std::array<std::vector<SyntheticExample>, 9> pools;
    for (std::size_t i = 0; i < pool_target; ++i) {
        SyntheticExample ex = draw_example(spec, rng);
        pools[ex.label + 4].push_back(std::move(ex));
    }

    std::array<std::size_t, 9> take{};
    std::size_t remaining = spec.count;
    std::array<bool, 9> capped{};
    while (remaining > 0) {
        std::size_t open = 0;
        for (int c = 0; c < 9; ++c)
            if (!capped[c] && take[c] < pools[c].size()) ++open;
        if (open == 0) break;  // cannot happen: total pool >= count
        const std::size_t share = std::max<std::size_t>(1, remaining / open);
        for (int c = 0; c < 9 && remaining > 0; ++c) {
            if (capped[c]) continue;
            const std::size_t room = pools[c].size() - take[c];
            const std::size_t add = std::min({share, room, remaining});
            take[c] += add;
            remaining -= add;
            if (take[c] == pools[c].size()) capped[c] = true;
        }
    }

    std::vector<SyntheticExample> all;
    all.reserve(spec.count);
    for (int c = 0; c < 9; ++c)
        for (std::size_t i = 0; i < take[c]; ++i) all.push_back(std::move(pools[c][i]));

    // Deterministic shuffle, then split.
    Rng shuffle_rng(derive_seed(spec.seed, 0x5117ull));
    for (std::size_t i = all.size(); i > 1; --i)
        std::swap(all[i - 1], all[shuffle_rng.below(i)]);

    SparsityDataset ds;
    ds.spec = spec;
    const std::size_t n_train =
        static_cast<std::size_t>(spec.train_fraction * static_cast<double>(all.size()));
    ds.train.assign(all.begin(), all.begin() + n_train);
    ds.validation.assign(all.begin() + n_train, all.end());
    return ds;
}

DenseArray encode_batch(const std::vector<SyntheticExample>& examples, std::size_t begin,
                        std::size_t end) {
    if (begin >= end || end > examples.size())
        throw ContractError("encode_batch: bad range");
    const std::size_t n = end - begin;
    const std::size_t L = examples[begin].score.size();
    DenseArray out({n, L, 3});
    for (std::size_t b = 0; b < n; ++b) {
        const SyntheticExample& ex = examples[begin + b];
        for (std::size_t i = 0; i < L; ++i) {
            double* cell = out.data() + (b * L + i) * 3;
            cell[0] = ex.score[i] == 1 ? 1.0 : 0.0;
            cell[1] = ex.score[i] == -1 ? 1.0 : 0.0;
            cell[2] = ex.relevance[i] ? 1.0 : 0.0;
        }
    }
    return out;
}

std::vector<int> encode_labels(const std::vector<SyntheticExample>& examples, std::size_t begin,
                               std::size_t end) {
    std::vector<int> out;
    out.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) out.push_back(examples[i].label + 4);
    return out;
}

}  // namespace klab
