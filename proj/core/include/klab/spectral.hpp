#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "klab/array.hpp"
#include "klab/autodiff.hpp"
#include "klab/rng.hpp"

namespace klab {

enum class SamplerKind { Gmm, FastFood, Generative };

std::string to_string(SamplerKind k);

// M sampled spectral frequencies, one per row, of dimension d_q.
struct FrequencyMatrix {
    DenseArray rows;  // (M, d_q)
    SamplerKind sampler = SamplerKind::Gmm;
    std::uint64_t drawn_at_step = 0;

    std::size_t count() const { return rows.rows(); }
    std::size_t dim() const { return rows.cols(); }
};

// ---- Gaussian-mixture sampler ----------------------------------------------
// Frequencies are drawn by reparameterization: omega = S_c * n + mu_c with
// n standard normal, so the mixture mean vectors and scale factors stay
// learnable. Component weights are uniform. The covariance of component c is
// S_c * S_c^T.
struct GmmParams {
    std::size_t components = 1;
    std::size_t dim = 1;
    std::vector<DenseArray> means;   // per component, (dim)
    std::vector<DenseArray> scales;  // per component, (dim, dim)

    static GmmParams init(std::size_t components, std::size_t dim, Rng& rng,
                          double mean_std = 0.1);
};

// Rows per component when M frequencies are split across C components: the
// first (M mod C) components receive one extra row.
std::vector<std::size_t> gmm_component_counts(std::size_t components, std::size_t M);

// Fresh standard-normal noise for one draw, one block per component.
std::vector<DenseArray> gmm_noise(const GmmParams& p, std::size_t M, std::uint64_t seed);

FrequencyMatrix gmm_sample(const GmmParams& p, std::size_t M, std::uint64_t seed);

struct GmmVars {
    std::vector<Var> means;
    std::vector<Var> scales;
};
// Tape subgraph producing the (M, dim) frequency matrix from fixed noise.
Var gmm_frequencies(Tape& tape, const GmmVars& vars, const std::vector<DenseArray>& noise);

// ---- FastFood sampler -------------------------------------------------------
// The frequency matrix is the structured product (1 / (sigma sqrt(d))) *
// S H G P H B applied blockwise, with H the unnormalized Walsh-Hadamard
// matrix. Each block yields d frequencies; M must be a multiple of d.
struct FastFoodBlock {
    DenseArray s_diag;  // (d) scaling, learnable per the ablation flag
    DenseArray g_diag;  // (d) Gaussian entries
    DenseArray b_diag;  // (d) +-1 entries
    std::vector<std::size_t> perm;
};

// Which diagonals participate in training.
struct FastFoodLearnable {
    bool s = true;
    bool g = true;
    bool b = true;

    static FastFoodLearnable none() { return {false, false, false}; }
    static FastFoodLearnable s_only() { return {true, false, false}; }
    static FastFoodLearnable sgb() { return {true, true, true}; }
};

struct FastFoodParams {
    std::size_t dim_input = 1;   // d_q before padding
    std::size_t dim_padded = 1;  // next power of two
    double sigma = 1.0;
    FastFoodLearnable learnable = FastFoodLearnable::sgb();
    std::vector<FastFoodBlock> blocks;

    std::size_t sample_count() const { return blocks.size() * dim_padded; }

    // Row-norm-corrected initialization: s entries are set to
    // E[chi(d)] / |g|_2 so row lengths match those of a Gaussian matrix.
    static FastFoodParams init(std::size_t dim_input, std::size_t M, std::uint64_t seed,
                               FastFoodLearnable learnable = FastFoodLearnable::sgb(),
                               double sigma = 1.0);
};

std::size_t next_pow2(std::size_t n);
double chi_mean(std::size_t dof);

// V * x through two fast Walsh-Hadamard transforms per block, O(M log d).
// Accepts x of the input dimension (zero-padded internally) or already padded.
DenseArray fastfood_matrix_apply(const FastFoodParams& p, const DenseArray& x);

// Explicit dense V, built from the dense Hadamard matrix without the fast
// transform; serves as the independent oracle and the materialized Omega.
DenseArray fastfood_dense_matrix(const FastFoodParams& p);

FrequencyMatrix fastfood_frequency_matrix(const FastFoodParams& p, std::uint64_t step = 0);

struct FastFoodBlockVars {
    Var s, g, b;
    const FastFoodBlock* block = nullptr;
};
struct FastFoodVars {
    std::size_t dim_input = 1;
    std::size_t dim_padded = 1;
    double sigma = 1.0;
    std::vector<FastFoodBlockVars> blocks;
};
// Rows of X (R, d_q) mapped to (R, M): row r becomes (V x_r)^T.
Var fastfood_project_rows(const Var& X, const FastFoodVars& vars);

// ---- deep generative sampler --------------------------------------------------
// omega = g(n) with n standard normal. g is four affine layers with
// batch normalization and LeakyReLU at constant width d_q, then one affine
// layer with tanh. The tanh output is multiplied by exp(log_out_scale)
// (initialized to log 3) so frequencies are not capped to (-1, 1); setting
// scaled_output = false reverts to the plain tanh range.
struct GeneratorParams {
    struct Layer {
        DenseArray weight;   // (d, d)
        DenseArray bias;     // (d)
        DenseArray bn_gain;  // (d)
        DenseArray bn_bias;  // (d)
    };
    std::size_t dim = 1;
    std::vector<Layer> hidden;  // 4 layers
    DenseArray w_out, b_out;
    DenseArray log_out_scale;  // scalar
    bool scaled_output = true;
    double leaky_slope = 0.01;

    static GeneratorParams init(std::size_t dim, std::uint64_t seed, bool scaled_output = true);
};

DenseArray generator_noise(const GeneratorParams& p, std::size_t M, std::uint64_t seed);

FrequencyMatrix generator_sample(const GeneratorParams& p, std::size_t M, std::uint64_t seed);

struct GeneratorLayerVars {
    Var weight, bias, bn_gain, bn_bias;
};
struct GeneratorVars {
    std::vector<GeneratorLayerVars> hidden;
    Var w_out, b_out, log_out_scale;
    bool scaled_output = true;
    double leaky_slope = 0.01;
};
Var generator_frequencies(Tape& tape, const GeneratorVars& vars, const DenseArray& noise);

// ---- tagged parameter variant and resampling policy ---------------------------

using SpectralParams = std::variant<GmmParams, FastFoodParams, GeneratorParams>;

SamplerKind kind_of(const SpectralParams& p);

// One value-level draw from any sampler.
FrequencyMatrix draw_frequencies(const SpectralParams& p, std::size_t M, std::uint64_t seed,
                                 std::uint64_t step = 0);

// Owns the noise window between resamples. A new draw happens iff
// step % interval == 0 (and on first use); otherwise the previous frequency
// matrix is returned unchanged. FastFood has no per-draw noise, so a
// "resample" only refreshes provenance.
class SamplerState {
public:
    SamplerState(SpectralParams params, std::size_t M, std::uint64_t interval,
                 std::uint64_t root_seed);

    const FrequencyMatrix& maybe_resample(std::uint64_t step);
    const FrequencyMatrix& current() const { return current_; }

    SpectralParams& params() { return params_; }
    const SpectralParams& params() const { return params_; }
    const std::vector<DenseArray>& noise() const { return noise_; }
    std::size_t sample_count() const { return samples_; }
    std::uint64_t interval() const { return interval_; }
    std::uint64_t root_seed() const { return seed_; }

    // Recomputes the value-level matrix from live parameters and the current
    // noise window (after an optimizer step mutated the parameters).
    void refresh();

private:
    void redraw(std::uint64_t step);

    SpectralParams params_;
    std::size_t samples_;
    std::uint64_t interval_;
    std::uint64_t seed_;
    std::vector<DenseArray> noise_;
    FrequencyMatrix current_;
    bool primed_ = false;
};

}  // namespace klab
