#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "klab/array.hpp"
#include "klab/attention.hpp"
#include "klab/autodiff.hpp"
#include "klab/checkpoint.hpp"
#include "klab/featmap.hpp"
#include "klab/spectral.hpp"

namespace klab {

// Named learnable array plus its optimizer moments. The tape node is
// refreshed on every forward pass.
struct Parameter {
    std::string name;
    DenseArray value;
    DenseArray moment1, moment2;
    Var node;

    explicit Parameter(std::string n, DenseArray v) : name(std::move(n)), value(std::move(v)) {}
};

class ParamStore {
public:
    Parameter* add(std::string name, DenseArray value);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    std::vector<Parameter*> all();
    std::size_t total_elements() const;

private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double weight_decay = 0.1;
};

// One decoupled-weight-decay Adam update with bias correction; `t` counts
// completed steps starting at 1. Non-finite gradients abort with a
// diagnostic.
void adamw_step(Parameter& p, const DenseArray& grad, const AdamWConfig& cfg, std::uint64_t t);

// ---- encoder ---------------------------------------------------------------------

// Which attention the encoder runs.
struct VariantSpec {
    bool softmax_baseline = false;
    SamplerKind sampler = SamplerKind::Gmm;
    FeatureKind featmap = FeatureKind::Rks;

    std::string name() const;
    static VariantSpec parse(const std::string& name);
    static std::vector<VariantSpec> all_kernelized();
};

enum class PositionalEncoding { Learnable, Sinusoidal };
enum class Pooling { Position0, Cls };

struct EncoderConfig {
    std::size_t layers = 3;
    std::size_t d_model = 64;
    std::size_t d_ff = 64;
    std::size_t heads = 4;
    std::size_t d_qk = 16;
    std::size_t d_v = 16;
    std::size_t input_dim = 3;   // many-hot width of each position
    std::size_t max_len = 64;    // position table size (covers the CLS slot)
    std::size_t num_classes = 9;
    std::size_t classifier_hidden = 64;
    VariantSpec variant;
    FeatureMapSpec featmap{FeatureKind::Rks, 64, 1e-6, 30.0, false};
    std::size_t gmm_components = 2;
    FastFoodLearnable ff_learnable = FastFoodLearnable::sgb();
    bool generator_scaled_output = true;
    PositionalEncoding positional = PositionalEncoding::Learnable;
    Pooling pooling = Pooling::Position0;
    double dropout = 0.0;
    std::uint64_t resample_interval = 100;

    void validate() const;
};

// Small pre-norm transformer encoder over many-hot input sequences with a
// two-layer classifier head. All randomness (init, sampling, dropout) flows
// from explicit seeds.
class Encoder {
public:
    Encoder(EncoderConfig cfg, std::uint64_t init_seed, std::uint64_t sampling_seed);

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }

    // Redraws sampler noise for every layer/head due at `step`
    // (step % resample_interval == 0, plus the very first call).
    void maybe_resample(std::uint64_t step);
    // Redraws all noise unconditionally with the given stream id; used by the
    // repeated-run protocols.
    void resample_all(std::uint64_t stream);

    // Builds the forward graph; input is (batch, L, input_dim). Returns
    // logits (batch, num_classes).
    Var forward(Tape& tape, const DenseArray& input, bool train, Rng& dropout_rng);
    Var loss(Tape& tape, const DenseArray& input, const std::vector<int>& labels, bool train,
             Rng& dropout_rng);

    // Value-level argmax predictions (no dropout).
    std::vector<int> predict(const DenseArray& input);

    // Frequencies currently in effect for (layer, head), value level.
    FrequencyMatrix current_frequencies(std::size_t layer, std::size_t head);

    // GMM scale factors (layer, head, component) for eigenvalue reports.
    std::vector<std::pair<std::string, const DenseArray*>> gmm_scale_factors() const;

    std::uint64_t near_zero_denominator_count() const { return near_zero_count_; }

    void fill_checkpoint(Checkpoint& ck) const;
    void restore(const Checkpoint& ck);

    // Rebuilds an encoder from a checkpoint produced by fill_checkpoint.
    static Encoder from_checkpoint(const Checkpoint& ck);

private:
    struct HeadNoise {
        std::vector<DenseArray> noise;  // GMM: per component; generative: single
        std::uint64_t drawn_at = 0;
        bool primed = false;
    };

    void init_params(std::uint64_t seed);
    void redraw_head(std::size_t layer, std::size_t slot, std::uint64_t seed_stream,
                     std::uint64_t step);
    Var frequencies_var(Tape& tape, std::size_t layer, std::size_t slot);
    Var project_rows(Tape& tape, const Var& x, std::size_t layer, std::size_t head);

    EncoderConfig cfg_;
    ParamStore params_;
    std::uint64_t sampling_seed_;
    std::uint64_t near_zero_count_ = 0;

    // Non-learnable sampler pieces (FastFood fixed diagonals/permutations).
    struct FfFixed {
        DenseArray s, g, b;  // populated only when the matching flag is off
        std::vector<std::size_t> perm;
    };
    // noise_[layer][slot]; slot = head for gmm/fastfood, single slot for the
    // shared generative sampler.
    std::vector<std::vector<HeadNoise>> noise_;
    std::vector<std::vector<FfFixed>> ff_fixed_;
    std::size_t sampler_slots_per_layer() const;
};

}  // namespace klab
