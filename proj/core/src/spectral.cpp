#include "klab/spectral.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "klab/wht.hpp"

namespace klab {

std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::Gmm: return "gmm";
        case SamplerKind::FastFood: return "fastfood";
        case SamplerKind::Generative: return "generative";
    }
    return "?";
}

// ---- GMM ---------------------------------------------------------------------

GmmParams GmmParams::init(std::size_t components, std::size_t dim, Rng& rng, double mean_std) {
    if (components < 1) throw ContractError("GmmParams: need at least one component");
    GmmParams p;
    p.components = components;
    p.dim = dim;
    for (std::size_t c = 0; c < components; ++c) {
        p.means.push_back(DenseArray::randn({dim}, rng, mean_std));
        DenseArray s({dim, dim});
        for (std::size_t i = 0; i < dim; ++i) s.at2(i, i) = 1.0;
        p.scales.push_back(std::move(s));
    }
    return p;
}

std::vector<std::size_t> gmm_component_counts(std::size_t components, std::size_t M) {
    std::vector<std::size_t> counts(components, M / components);
    for (std::size_t c = 0; c < M % components; ++c) ++counts[c];
    return counts;
}

std::vector<DenseArray> gmm_noise(const GmmParams& p, std::size_t M, std::uint64_t seed) {
    if (p.components > M)
        throw ContractError("gmm_noise: more mixture components than samples");
    Rng rng(seed);
    std::vector<DenseArray> noise;
    for (std::size_t count : gmm_component_counts(p.components, M))
        noise.push_back(DenseArray::randn({count, p.dim}, rng));
    return noise;
}

Var gmm_frequencies(Tape& tape, const GmmVars& vars, const std::vector<DenseArray>& noise) {
    if (vars.means.size() != noise.size() || vars.scales.size() != noise.size())
        throw ContractError("gmm_frequencies: component count mismatch");
    std::vector<Var> parts;
    for (std::size_t c = 0; c < noise.size(); ++c) {
        Var n = tape.constant(noise[c]);
        // omega = n S^T + mu, one frequency per noise row.
        Var r = matmul(n, vars.scales[c], false, true);
        parts.push_back(add_rowvec(r, vars.means[c]));
    }
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

FrequencyMatrix gmm_sample(const GmmParams& p, std::size_t M, std::uint64_t seed) {
    auto noise = gmm_noise(p, M, seed);
    Tape tape;
    GmmVars vars;
    for (std::size_t c = 0; c < p.components; ++c) {
        vars.means.push_back(tape.constant(p.means[c]));
        vars.scales.push_back(tape.constant(p.scales[c]));
    }
    Var omega = gmm_frequencies(tape, vars, noise);
    FrequencyMatrix fm;
    fm.rows = omega.value();
    fm.sampler = SamplerKind::Gmm;
    return fm;
}

// ---- FastFood -----------------------------------------------------------------

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

double chi_mean(std::size_t dof) {
    const double d = static_cast<double>(dof);
    return std::sqrt(2.0) * std::exp(std::lgamma(0.5 * (d + 1.0)) - std::lgamma(0.5 * d));
}

FastFoodParams FastFoodParams::init(std::size_t dim_input, std::size_t M, std::uint64_t seed,
                                    FastFoodLearnable learnable, double sigma) {
    if (dim_input == 0) throw ContractError("FastFoodParams: zero input dimension");
    FastFoodParams p;
    p.dim_input = dim_input;
    p.dim_padded = next_pow2(dim_input);
    p.sigma = sigma;
    p.learnable = learnable;
    const std::size_t d = p.dim_padded;
    if (M == 0 || M % d != 0)
        throw ContractError("FastFoodParams: sample count must be a positive multiple of the "
                            "padded dimension (" +
                            std::to_string(d) + ")");
    Rng rng(seed);
    for (std::size_t blk = 0; blk < M / d; ++blk) {
        FastFoodBlock b;
        b.g_diag = DenseArray::randn({d}, rng);
        b.b_diag = DenseArray({d});
        for (std::size_t i = 0; i < d; ++i) b.b_diag[i] = rng.bernoulli(0.5) ? 1.0 : -1.0;
        b.perm.resize(d);
        std::iota(b.perm.begin(), b.perm.end(), std::size_t{0});
        for (std::size_t i = d; i > 1; --i)
            std::swap(b.perm[i - 1], b.perm[rng.below(i)]);
        double gnorm = 0;
        for (std::size_t i = 0; i < d; ++i) gnorm += b.g_diag[i] * b.g_diag[i];
        gnorm = std::sqrt(gnorm);
        const double s = chi_mean(d) / (gnorm > 0 ? gnorm : 1.0);
        b.s_diag = DenseArray::full({d}, s);
        p.blocks.push_back(std::move(b));
    }
    return p;
}

namespace {

DenseArray pad_vector(const DenseArray& x, std::size_t d) {
    DenseArray out({d});
    std::copy_n(x.data(), x.size(), out.data());
    return out;
}

}  // namespace

DenseArray fastfood_matrix_apply(const FastFoodParams& p, const DenseArray& x) {
    if (x.rank() != 1) throw DimensionError("fastfood_matrix_apply: x must be a vector");
    const std::size_t d = p.dim_padded;
    DenseArray xp;
    if (x.size() == d) xp = x;
    else if (x.size() == p.dim_input) xp = pad_vector(x, d);
    else throw DimensionError("fastfood_matrix_apply: dimension mismatch");

    const double pref = 1.0 / (p.sigma * std::sqrt(static_cast<double>(d)));
    DenseArray out({p.sample_count()});
    DenseArray buf({d});
    for (std::size_t blk = 0; blk < p.blocks.size(); ++blk) {
        const FastFoodBlock& b = p.blocks[blk];
        for (std::size_t i = 0; i < d; ++i) buf[i] = b.b_diag[i] * xp[i];
        fwht(buf.data(), d);
        DenseArray tmp({d});
        for (std::size_t i = 0; i < d; ++i) tmp[i] = buf[b.perm[i]];
        for (std::size_t i = 0; i < d; ++i) tmp[i] *= b.g_diag[i];
        fwht(tmp.data(), d);
        for (std::size_t i = 0; i < d; ++i) out[blk * d + i] = pref * b.s_diag[i] * tmp[i];
    }
    return out;
}

DenseArray fastfood_dense_matrix(const FastFoodParams& p) {
    const std::size_t d = p.dim_padded;
    // Dense Hadamard by parity of popcount(i & j); independent of the fast
    // transform on purpose.
    DenseArray H({d, d});
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j)
            H.at2(i, j) = (std::popcount(i & j) & 1u) ? -1.0 : 1.0;

    const double pref = 1.0 / (p.sigma * std::sqrt(static_cast<double>(d)));
    DenseArray V({p.sample_count(), d});
    DenseArray row({d});
    for (std::size_t blk = 0; blk < p.blocks.size(); ++blk) {
        const FastFoodBlock& b = p.blocks[blk];
        // Row i of V_blk = pref * s_i * sum_k H[i,k] g_k H[perm[k], :] B.
        for (std::size_t i = 0; i < d; ++i) {
            for (std::size_t j = 0; j < d; ++j) row[j] = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double hik_g = H.at2(i, k) * b.g_diag[k];
                const std::size_t pk = b.perm[k];
                for (std::size_t j = 0; j < d; ++j) row[j] += hik_g * H.at2(pk, j);
            }
            for (std::size_t j = 0; j < d; ++j)
                V.at2(blk * d + i, j) = pref * b.s_diag[i] * row[j] * b.b_diag[j];
        }
    }
    return V;
}

FrequencyMatrix fastfood_frequency_matrix(const FastFoodParams& p, std::uint64_t step) {
    FrequencyMatrix fm;
    fm.rows = fastfood_dense_matrix(p);
    fm.sampler = SamplerKind::FastFood;
    fm.drawn_at_step = step;
    return fm;
}

Var fastfood_project_rows(const Var& X, const FastFoodVars& vars) {
    const std::size_t d = vars.dim_padded;
    if (X.value().rank() != 2 || X.value().cols() != vars.dim_input)
        throw DimensionError("fastfood_project_rows: input columns must equal d_q");
    const double pref = 1.0 / (vars.sigma * std::sqrt(static_cast<double>(d)));
    Var Xp = pad_cols(X, d);
    std::vector<Var> parts;
    for (const FastFoodBlockVars& b : vars.blocks) {
        Var h = diag_scale_cols(Xp, b.b);
        h = hadamard_cols(h);
        h = permute_cols(h, b.block->perm);
        h = diag_scale_cols(h, b.g);
        h = hadamard_cols(h);
        h = diag_scale_cols(h, b.s);
        parts.push_back(scale(h, pref));
    }
    return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

// ---- generator -----------------------------------------------------------------

GeneratorParams GeneratorParams::init(std::size_t dim, std::uint64_t seed, bool scaled_output) {
    GeneratorParams p;
    p.dim = dim;
    p.scaled_output = scaled_output;
    Rng rng(seed);
    const double w_std = std::sqrt(2.0 / static_cast<double>(dim));
    for (int i = 0; i < 4; ++i) {
        GeneratorParams::Layer layer;
        layer.weight = DenseArray::randn({dim, dim}, rng, w_std);
        layer.bias = DenseArray({dim});
        layer.bn_gain = DenseArray::full({dim}, 1.0);
        layer.bn_bias = DenseArray({dim});
        p.hidden.push_back(std::move(layer));
    }
    p.w_out = DenseArray::randn({dim, dim}, rng, std::sqrt(1.0 / static_cast<double>(dim)));
    p.b_out = DenseArray({dim});
    p.log_out_scale = DenseArray::scalar(std::log(3.0));
    return p;
}

DenseArray generator_noise(const GeneratorParams& p, std::size_t M, std::uint64_t seed) {
    if (M < 2)
        throw ContractError("generator_noise: batch normalization statistics need M >= 2");
    Rng rng(seed);
    return DenseArray::randn({M, p.dim}, rng);
}

Var generator_frequencies(Tape& tape, const GeneratorVars& vars, const DenseArray& noise) {
    Var h = tape.constant(noise);
    for (const GeneratorLayerVars& layer : vars.hidden) {
        Var z = add_rowvec(matmul(h, layer.weight), layer.bias);
        z = batchnorm_cols(z, layer.bn_gain, layer.bn_bias);
        h = leaky_relu(z, vars.leaky_slope);
    }
    Var out = tanh(add_rowvec(matmul(h, vars.w_out), vars.b_out));
    if (vars.scaled_output) out = mul(out, exp(vars.log_out_scale));
    return out;
}

FrequencyMatrix generator_sample(const GeneratorParams& p, std::size_t M, std::uint64_t seed) {
    DenseArray noise = generator_noise(p, M, seed);
    Tape tape;
    GeneratorVars vars;
    for (const auto& layer : p.hidden)
        vars.hidden.push_back({tape.constant(layer.weight), tape.constant(layer.bias),
                               tape.constant(layer.bn_gain), tape.constant(layer.bn_bias)});
    vars.w_out = tape.constant(p.w_out);
    vars.b_out = tape.constant(p.b_out);
    vars.log_out_scale = tape.constant(p.log_out_scale);
    vars.scaled_output = p.scaled_output;
    vars.leaky_slope = p.leaky_slope;
    Var omega = generator_frequencies(tape, vars, noise);
    FrequencyMatrix fm;
    fm.rows = omega.value();
    fm.sampler = SamplerKind::Generative;
    return fm;
}

// ---- variant + resampling --------------------------------------------------------

SamplerKind kind_of(const SpectralParams& p) {
    if (std::holds_alternative<GmmParams>(p)) return SamplerKind::Gmm;
    if (std::holds_alternative<FastFoodParams>(p)) return SamplerKind::FastFood;
    return SamplerKind::Generative;
}

FrequencyMatrix draw_frequencies(const SpectralParams& p, std::size_t M, std::uint64_t seed,
                                 std::uint64_t step) {
    FrequencyMatrix fm;
    if (const auto* g = std::get_if<GmmParams>(&p)) fm = gmm_sample(*g, M, seed);
    else if (const auto* f = std::get_if<FastFoodParams>(&p)) fm = fastfood_frequency_matrix(*f);
    else fm = generator_sample(std::get<GeneratorParams>(p), M, seed);
    fm.drawn_at_step = step;
    return fm;
}

SamplerState::SamplerState(SpectralParams params, std::size_t M, std::uint64_t interval,
                           std::uint64_t root_seed)
    : params_(std::move(params)), samples_(M), interval_(interval ? interval : 1),
      seed_(root_seed) {
    if (const auto* f = std::get_if<FastFoodParams>(&params_)) {
        if (f->sample_count() != M)
            throw ContractError("SamplerState: FastFood block count disagrees with M");
    }
}

void SamplerState::redraw(std::uint64_t step) {
    const std::uint64_t draw_seed = derive_seed(seed_, 0xF5EEDull, step);
    noise_.clear();
    if (const auto* g = std::get_if<GmmParams>(&params_)) {
        noise_ = gmm_noise(*g, samples_, draw_seed);
    } else if (std::get_if<GeneratorParams>(&params_)) {
        noise_.push_back(
            generator_noise(std::get<GeneratorParams>(params_), samples_, draw_seed));
    }
    // FastFood draws no fresh noise: its randomness is fixed at initialization.
    current_ = FrequencyMatrix{};
    current_.drawn_at_step = step;
    primed_ = true;
    refresh();
    current_.drawn_at_step = step;
}

void SamplerState::refresh() {
    if (!primed_) return;
    const std::uint64_t step = current_.drawn_at_step;
    if (const auto* g = std::get_if<GmmParams>(&params_)) {
        Tape tape;
        GmmVars vars;
        for (std::size_t c = 0; c < g->components; ++c) {
            vars.means.push_back(tape.constant(g->means[c]));
            vars.scales.push_back(tape.constant(g->scales[c]));
        }
        current_.rows = gmm_frequencies(tape, vars, noise_).value();
        current_.sampler = SamplerKind::Gmm;
    } else if (const auto* f = std::get_if<FastFoodParams>(&params_)) {
        current_ = fastfood_frequency_matrix(*f, step);
    } else {
        const auto& gen = std::get<GeneratorParams>(params_);
        Tape tape;
        GeneratorVars vars;
        for (const auto& layer : gen.hidden)
            vars.hidden.push_back({tape.constant(layer.weight), tape.constant(layer.bias),
                                   tape.constant(layer.bn_gain), tape.constant(layer.bn_bias)});
        vars.w_out = tape.constant(gen.w_out);
        vars.b_out = tape.constant(gen.b_out);
        vars.log_out_scale = tape.constant(gen.log_out_scale);
        vars.scaled_output = gen.scaled_output;
        vars.leaky_slope = gen.leaky_slope;
        current_.rows = generator_frequencies(tape, vars, noise_[0]).value();
        current_.sampler = SamplerKind::Generative;
    }
    current_.drawn_at_step = step;
}

const FrequencyMatrix& SamplerState::maybe_resample(std::uint64_t step) {
    if (!primed_) {
        redraw(step);
    } else if (step % interval_ == 0 && step != current_.drawn_at_step) {
        redraw(step);
    }
    return current_;
}

}  // namespace klab
