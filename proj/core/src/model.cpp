#include "klab/model.hpp"

#include <algorithm>
#include <cmath>

namespace klab {

// ---- parameter store -------------------------------------------------------------

Parameter* ParamStore::add(std::string name, DenseArray value) {
    if (find(name)) throw ContractError("ParamStore: duplicate parameter " + name);
    params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(value)));
    return params_.back().get();
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

std::vector<Parameter*> ParamStore::all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

std::size_t ParamStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

void adamw_step(Parameter& p, const DenseArray& grad, const AdamWConfig& cfg, std::uint64_t t) {
    if (!grad.same_shape(p.value))
        throw DimensionError("adamw_step: gradient shape disagrees with parameter " + p.name);
    if (!grad.all_finite())
        throw DataError("adamw_step: non-finite gradient for " + p.name + "; training aborted");
    if (p.moment1.size() != p.value.size()) {
        p.moment1 = DenseArray(p.value.shape());
        p.moment2 = DenseArray(p.value.shape());
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = grad[i];
        p.moment1[i] = cfg.beta1 * p.moment1[i] + (1.0 - cfg.beta1) * g;
        p.moment2[i] = cfg.beta2 * p.moment2[i] + (1.0 - cfg.beta2) * g * g;
        const double mhat = p.moment1[i] / bc1;
        const double vhat = p.moment2[i] / bc2;
        p.value[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value[i]);
    }
}

// ---- variant names -----------------------------------------------------------------

std::string VariantSpec::name() const {
    if (softmax_baseline) return "softmax";
    return to_string(sampler) + "-" + to_string(featmap);
}

VariantSpec VariantSpec::parse(const std::string& name) {
    VariantSpec v;
    if (name == "softmax") {
        v.softmax_baseline = true;
        return v;
    }
    const auto dash = name.find('-');
    if (dash == std::string::npos)
        throw ContractError("unknown attention variant: " + name);
    const std::string s = name.substr(0, dash);
    const std::string f = name.substr(dash + 1);
    if (s == "gmm") v.sampler = SamplerKind::Gmm;
    else if (s == "fastfood") v.sampler = SamplerKind::FastFood;
    else if (s == "generative") v.sampler = SamplerKind::Generative;
    else throw ContractError("unknown sampler in variant: " + name);
    if (f == "rks") v.featmap = FeatureKind::Rks;
    else if (f == "prf") v.featmap = FeatureKind::Prf;
    else throw ContractError("unknown feature map in variant: " + name);
    return v;
}

std::vector<VariantSpec> VariantSpec::all_kernelized() {
    std::vector<VariantSpec> out;
    for (SamplerKind s : {SamplerKind::Gmm, SamplerKind::FastFood, SamplerKind::Generative})
        for (FeatureKind f : {FeatureKind::Rks, FeatureKind::Prf}) {
            VariantSpec v;
            v.sampler = s;
            v.featmap = f;
            out.push_back(v);
        }
    return out;
}

void EncoderConfig::validate() const {
    if (layers < 1 || heads < 1 || d_model < 1 || d_qk < 1 || d_v < 1)
        throw ContractError("EncoderConfig: all dimensions must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ContractError("EncoderConfig: dropout not in [0,1)");
    if (num_classes < 2) throw ContractError("EncoderConfig: need at least 2 classes");
    if (!variant.softmax_baseline) featmap.validate();
}

// ---- encoder ------------------------------------------------------------------------

namespace {

DenseArray sinusoidal_table(std::size_t max_len, std::size_t d_model) {
    DenseArray t({max_len, d_model});
    for (std::size_t pos = 0; pos < max_len; ++pos)
        for (std::size_t i = 0; i < d_model; ++i) {
            const double angle =
                static_cast<double>(pos) /
                std::pow(10000.0, 2.0 * static_cast<double>(i / 2) / static_cast<double>(d_model));
            t.at2(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return t;
}

DenseArray xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    return DenseArray::randn({fan_in, fan_out}, rng, std);
}

}  // namespace

std::size_t Encoder::sampler_slots_per_layer() const {
    if (cfg_.variant.softmax_baseline) return 0;
    return cfg_.variant.sampler == SamplerKind::Generative ? 1 : cfg_.heads;
}

Encoder::Encoder(EncoderConfig cfg, std::uint64_t init_seed, std::uint64_t sampling_seed)
    : cfg_(std::move(cfg)), sampling_seed_(sampling_seed) {
    cfg_.validate();
    init_params(init_seed);
}

void Encoder::init_params(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = cfg_.d_model;

    params_.add("embed.weight", xavier(cfg_.input_dim, d, rng));
    if (cfg_.positional == PositionalEncoding::Learnable)
        params_.add("pos.table", DenseArray::randn({cfg_.max_len, d}, rng, 0.02));
    if (cfg_.pooling == Pooling::Cls)
        params_.add("cls.token", DenseArray::randn({1, d}, rng, 0.02));

    noise_.assign(cfg_.layers, {});
    ff_fixed_.assign(cfg_.layers, {});
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::string lp = "layer" + std::to_string(l) + ".";
        params_.add(lp + "ln1.gain", DenseArray::full({d}, 1.0));
        params_.add(lp + "ln1.bias", DenseArray({d}));
        params_.add(lp + "ln2.gain", DenseArray::full({d}, 1.0));
        params_.add(lp + "ln2.bias", DenseArray({d}));

        params_.add(lp + "attn.wq", xavier(d, cfg_.heads * cfg_.d_qk, rng));
        params_.add(lp + "attn.bq", DenseArray({cfg_.heads * cfg_.d_qk}));
        params_.add(lp + "attn.wk", xavier(d, cfg_.heads * cfg_.d_qk, rng));
        params_.add(lp + "attn.bk", DenseArray({cfg_.heads * cfg_.d_qk}));
        params_.add(lp + "attn.wv", xavier(d, cfg_.heads * cfg_.d_v, rng));
        params_.add(lp + "attn.bv", DenseArray({cfg_.heads * cfg_.d_v}));
        params_.add(lp + "attn.wo", xavier(cfg_.heads * cfg_.d_v, d, rng));
        params_.add(lp + "attn.bo", DenseArray({d}));

        params_.add(lp + "ffn.w1", xavier(d, cfg_.d_ff, rng));
        params_.add(lp + "ffn.b1", DenseArray({cfg_.d_ff}));
        params_.add(lp + "ffn.w2", xavier(cfg_.d_ff, d, rng));
        params_.add(lp + "ffn.b2", DenseArray({d}));

        noise_[l].assign(sampler_slots_per_layer(), HeadNoise{});
        if (!cfg_.variant.softmax_baseline) {
            switch (cfg_.variant.sampler) {
                case SamplerKind::Gmm:
                    for (std::size_t h = 0; h < cfg_.heads; ++h) {
                        const std::string hp = lp + "head" + std::to_string(h) + ".gmm.";
                        for (std::size_t c = 0; c < cfg_.gmm_components; ++c) {
                            params_.add(hp + "mean" + std::to_string(c),
                                        DenseArray::randn({cfg_.d_qk}, rng, 0.1));
                            DenseArray s({cfg_.d_qk, cfg_.d_qk});
                            for (std::size_t i = 0; i < cfg_.d_qk; ++i) s.at2(i, i) = 1.0;
                            params_.add(hp + "scale" + std::to_string(c), std::move(s));
                        }
                    }
                    break;
                case SamplerKind::FastFood: {
                    ff_fixed_[l].resize(cfg_.heads);
                    for (std::size_t h = 0; h < cfg_.heads; ++h) {
                        FastFoodParams ffp = FastFoodParams::init(
                            cfg_.d_qk, cfg_.featmap.samples,
                            derive_seed(seed, 0xFFull, l * 1024 + h), cfg_.ff_learnable);
                        // Stitch blocks into single diagonals; the projector
                        // slices per block.
                        const std::size_t dpad = ffp.dim_padded;
                        const std::size_t nb = ffp.blocks.size();
                        DenseArray s({nb * dpad}), g({nb * dpad}), b({nb * dpad});
                        std::vector<std::size_t> perm(nb * dpad);
                        for (std::size_t blk = 0; blk < nb; ++blk)
                            for (std::size_t i = 0; i < dpad; ++i) {
                                s[blk * dpad + i] = ffp.blocks[blk].s_diag[i];
                                g[blk * dpad + i] = ffp.blocks[blk].g_diag[i];
                                b[blk * dpad + i] = ffp.blocks[blk].b_diag[i];
                                perm[blk * dpad + i] = ffp.blocks[blk].perm[i];
                            }
                        const std::string hp = lp + "head" + std::to_string(h) + ".ff.";
                        if (cfg_.ff_learnable.s) params_.add(hp + "s", s);
                        else ff_fixed_[l][h].s = s;
                        if (cfg_.ff_learnable.g) params_.add(hp + "g", g);
                        else ff_fixed_[l][h].g = g;
                        if (cfg_.ff_learnable.b) params_.add(hp + "b", b);
                        else ff_fixed_[l][h].b = b;
                        ff_fixed_[l][h].perm = std::move(perm);
                    }
                    break;
                }
                case SamplerKind::Generative: {
                    GeneratorParams gp = GeneratorParams::init(
                        cfg_.d_qk, derive_seed(seed, 0x6E6ull, l), cfg_.generator_scaled_output);
                    const std::string gpfx = lp + "gen.";
                    for (std::size_t j = 0; j < gp.hidden.size(); ++j) {
                        const std::string jp = gpfx + std::to_string(j) + ".";
                        params_.add(jp + "weight", gp.hidden[j].weight);
                        params_.add(jp + "bias", gp.hidden[j].bias);
                        params_.add(jp + "bn_gain", gp.hidden[j].bn_gain);
                        params_.add(jp + "bn_bias", gp.hidden[j].bn_bias);
                    }
                    params_.add(gpfx + "w_out", gp.w_out);
                    params_.add(gpfx + "b_out", gp.b_out);
                    params_.add(gpfx + "log_scale", gp.log_out_scale);
                    break;
                }
            }
        }
    }

    params_.add("final_ln.gain", DenseArray::full({d}, 1.0));
    params_.add("final_ln.bias", DenseArray({d}));
    params_.add("classifier.hidden.weight", xavier(d, cfg_.classifier_hidden, rng));
    params_.add("classifier.hidden.bias", DenseArray({cfg_.classifier_hidden}));
    params_.add("classifier.out.weight", xavier(cfg_.classifier_hidden, cfg_.num_classes, rng));
    params_.add("classifier.out.bias", DenseArray({cfg_.num_classes}));
}

// ---- sampling ------------------------------------------------------------------------

void Encoder::redraw_head(std::size_t layer, std::size_t slot, std::uint64_t seed_stream,
                          std::uint64_t step) {
    HeadNoise& hn = noise_[layer][slot];
    hn.noise.clear();
    const std::uint64_t seed = derive_seed(sampling_seed_, seed_stream, layer * 256 + slot);
    if (cfg_.variant.sampler == SamplerKind::Gmm) {
        Rng rng(seed);
        for (std::size_t count :
             gmm_component_counts(cfg_.gmm_components, cfg_.featmap.samples))
            hn.noise.push_back(DenseArray::randn({count, cfg_.d_qk}, rng));
    } else if (cfg_.variant.sampler == SamplerKind::Generative) {
        Rng rng(seed);
        hn.noise.push_back(DenseArray::randn({cfg_.featmap.samples, cfg_.d_qk}, rng));
    }
    // FastFood: randomness is fixed at initialization; only provenance moves.
    hn.drawn_at = step;
    hn.primed = true;
}

void Encoder::maybe_resample(std::uint64_t step) {
    if (cfg_.variant.softmax_baseline) return;
    for (std::size_t l = 0; l < cfg_.layers; ++l)
        for (std::size_t s = 0; s < noise_[l].size(); ++s) {
            HeadNoise& hn = noise_[l][s];
            if (!hn.primed || (step % cfg_.resample_interval == 0 && hn.drawn_at != step))
                redraw_head(l, s, step, step);
        }
}

void Encoder::resample_all(std::uint64_t stream) {
    if (cfg_.variant.softmax_baseline) return;
    for (std::size_t l = 0; l < cfg_.layers; ++l)
        for (std::size_t s = 0; s < noise_[l].size(); ++s)
            redraw_head(l, s, derive_seed(0xA11D4A11ull, stream), stream);
}

Var Encoder::frequencies_var(Tape& tape, std::size_t layer, std::size_t slot) {
    const std::string lp = "layer" + std::to_string(layer) + ".";
    const HeadNoise& hn = noise_[layer][slot];
    if (!hn.primed) throw ContractError("Encoder: sampler not primed; call maybe_resample first");
    if (cfg_.variant.sampler == SamplerKind::Gmm) {
        const std::string hp = lp + "head" + std::to_string(slot) + ".gmm.";
        GmmVars vars;
        for (std::size_t c = 0; c < cfg_.gmm_components; ++c) {
            vars.means.push_back(params_.find(hp + "mean" + std::to_string(c))->node);
            vars.scales.push_back(params_.find(hp + "scale" + std::to_string(c))->node);
        }
        return gmm_frequencies(tape, vars, hn.noise);
    }
    // Shared generative sampler (slot 0).
    const std::string gp = lp + "gen.";
    GeneratorVars vars;
    for (std::size_t j = 0; j < 4; ++j) {
        const std::string jp = gp + std::to_string(j) + ".";
        vars.hidden.push_back({params_.find(jp + "weight")->node, params_.find(jp + "bias")->node,
                               params_.find(jp + "bn_gain")->node,
                               params_.find(jp + "bn_bias")->node});
    }
    vars.w_out = params_.find(gp + "w_out")->node;
    vars.b_out = params_.find(gp + "b_out")->node;
    vars.log_out_scale = params_.find(gp + "log_scale")->node;
    vars.scaled_output = cfg_.generator_scaled_output;
    return generator_frequencies(tape, vars, hn.noise[0]);
}

Var Encoder::project_rows(Tape& tape, const Var& x, std::size_t layer, std::size_t head) {
    // FastFood path: apply the structured projector to the rows directly.
    const std::string hp =
        "layer" + std::to_string(layer) + ".head" + std::to_string(head) + ".ff.";
    const FfFixed& fixed = ff_fixed_[layer][head];
    const std::size_t dpad = next_pow2(cfg_.d_qk);
    const std::size_t nblocks = cfg_.featmap.samples / dpad;
    FastFoodVars vars;
    vars.dim_input = cfg_.d_qk;
    vars.dim_padded = dpad;
    vars.sigma = 1.0;
    auto diag = [&](const char* tag, const DenseArray& fallback, bool learnable) {
        if (learnable) return params_.find(hp + tag)->node;
        return tape.constant(fallback);
    };
    Var s_all = diag("s", fixed.s, cfg_.ff_learnable.s);
    Var g_all = diag("g", fixed.g, cfg_.ff_learnable.g);
    Var b_all = diag("b", fixed.b, cfg_.ff_learnable.b);

    // Pad once, then per-block transform on the padded rows.
    const double pref = 1.0 / std::sqrt(static_cast<double>(dpad));
    Var xp = pad_cols(x, dpad);
    std::vector<Var> parts;
    for (std::size_t blk = 0; blk < nblocks; ++blk) {
        auto blockslice = [&](const Var& v) {
            return reshape(
                slice_cols(reshape(v, {1, nblocks * dpad}), blk * dpad, (blk + 1) * dpad),
                {dpad});
        };
        std::vector<std::size_t> perm(fixed.perm.begin() + blk * dpad,
                                      fixed.perm.begin() + (blk + 1) * dpad);
        Var h = diag_scale_cols(xp, blockslice(b_all));
        h = hadamard_cols(h);
        h = permute_cols(h, std::move(perm));
        h = diag_scale_cols(h, blockslice(g_all));
        h = hadamard_cols(h);
        h = diag_scale_cols(h, blockslice(s_all));
        parts.push_back(scale(h, pref));
    }
    return parts.size() == 1 ? parts[0] : concat_cols(parts);
}

// ---- forward ---------------------------------------------------------------------------

Var Encoder::forward(Tape& tape, const DenseArray& input, bool train, Rng& dropout_rng) {
    if (input.rank() != 3 || input.extent(2) != cfg_.input_dim)
        throw DimensionError("Encoder::forward: input must be (batch, L, input_dim)");
    const std::size_t batch = input.extent(0);
    const std::size_t seq = input.extent(1);
    const bool cls = cfg_.pooling == Pooling::Cls;
    const std::size_t eff = seq + (cls ? 1 : 0);
    if (eff > cfg_.max_len)
        throw DimensionError("Encoder::forward: sequence length " + std::to_string(eff) +
                             " exceeds configured maximum " + std::to_string(cfg_.max_len));

    for (Parameter* p : params_.all()) p->node = tape.leaf(p->value);
    if (!cfg_.variant.softmax_baseline) {
        for (std::size_t l = 0; l < cfg_.layers; ++l)
            for (std::size_t s = 0; s < noise_[l].size(); ++s)
                if (!noise_[l][s].primed) redraw_head(l, s, 0, 0);
    }

    DenseArray flat({batch * seq, cfg_.input_dim});
    std::copy_n(input.data(), input.size(), flat.data());
    Var h = matmul(tape.constant(std::move(flat)), params_.find("embed.weight")->node);

    if (cls) {
        Var table = concat_rows({params_.find("cls.token")->node, h});
        std::vector<std::size_t> ids(batch * eff);
        for (std::size_t b = 0; b < batch; ++b) {
            ids[b * eff] = 0;
            for (std::size_t l = 0; l < seq; ++l) ids[b * eff + 1 + l] = 1 + b * seq + l;
        }
        h = gather_rows(table, std::move(ids));
    }

    std::vector<std::size_t> pos_ids(batch * eff);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t l = 0; l < eff; ++l) pos_ids[b * eff + l] = l;
    Var pos_table = cfg_.positional == PositionalEncoding::Learnable
                        ? params_.find("pos.table")->node
                        : tape.constant(sinusoidal_table(cfg_.max_len, cfg_.d_model));
    h = add(h, gather_rows(pos_table, std::move(pos_ids)));
    if (train && cfg_.dropout > 0) h = dropout(h, cfg_.dropout, dropout_rng);

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::string lp = "layer" + std::to_string(l) + ".";
        Var a = layernorm(h, params_.find(lp + "ln1.gain")->node,
                          params_.find(lp + "ln1.bias")->node);
        Var q = add_rowvec(matmul(a, params_.find(lp + "attn.wq")->node),
                           params_.find(lp + "attn.bq")->node);
        Var k = add_rowvec(matmul(a, params_.find(lp + "attn.wk")->node),
                           params_.find(lp + "attn.bk")->node);
        Var v = add_rowvec(matmul(a, params_.find(lp + "attn.wv")->node),
                           params_.find(lp + "attn.bv")->node);

        // Shared generative frequencies are built once per layer.
        Var omega_shared;
        if (!cfg_.variant.softmax_baseline &&
            cfg_.variant.sampler == SamplerKind::Generative)
            omega_shared = frequencies_var(tape, l, 0);

        std::vector<Var> head_outputs;
        for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
            Var qh = slice_cols(q, hd * cfg_.d_qk, (hd + 1) * cfg_.d_qk);
            Var kh = slice_cols(k, hd * cfg_.d_qk, (hd + 1) * cfg_.d_qk);
            Var vh = slice_cols(v, hd * cfg_.d_v, (hd + 1) * cfg_.d_v);
            if (cfg_.variant.softmax_baseline) {
                head_outputs.push_back(softmax_attention_rows(qh, kh, vh, batch, eff));
                continue;
            }
            Var proj_q, proj_k;
            if (cfg_.variant.sampler == SamplerKind::FastFood) {
                proj_q = project_rows(tape, qh, l, hd);
                proj_k = project_rows(tape, kh, l, hd);
            } else {
                Var omega = cfg_.variant.sampler == SamplerKind::Generative
                                ? omega_shared
                                : frequencies_var(tape, l, hd);
                proj_q = matmul(qh, omega, false, /*trans_b=*/true);
                proj_k = matmul(kh, omega, false, /*trans_b=*/true);
            }
            Var phi_q = feature_rows(qh, proj_q, cfg_.featmap);
            Var phi_k = feature_rows(kh, proj_k, cfg_.featmap);
            head_outputs.push_back(linear_attention_rows(phi_q, phi_k, vh, batch, eff,
                                                         cfg_.featmap.epsilon,
                                                         &near_zero_count_));
        }
        Var attn = head_outputs.size() == 1 ? head_outputs[0] : concat_cols(head_outputs);
        attn = add_rowvec(matmul(attn, params_.find(lp + "attn.wo")->node),
                          params_.find(lp + "attn.bo")->node);
        if (train && cfg_.dropout > 0) attn = dropout(attn, cfg_.dropout, dropout_rng);
        h = add(h, attn);

        Var f = layernorm(h, params_.find(lp + "ln2.gain")->node,
                          params_.find(lp + "ln2.bias")->node);
        f = add_rowvec(matmul(f, params_.find(lp + "ffn.w1")->node),
                       params_.find(lp + "ffn.b1")->node);
        f = gelu(f);
        f = add_rowvec(matmul(f, params_.find(lp + "ffn.w2")->node),
                       params_.find(lp + "ffn.b2")->node);
        if (train && cfg_.dropout > 0) f = dropout(f, cfg_.dropout, dropout_rng);
        h = add(h, f);
    }

    h = layernorm(h, params_.find("final_ln.gain")->node, params_.find("final_ln.bias")->node);

    std::vector<std::size_t> pool_ids(batch);
    for (std::size_t b = 0; b < batch; ++b) pool_ids[b] = b * eff;  // position 0 (CLS slot)
    Var pooled = gather_rows(h, std::move(pool_ids));

    Var z = add_rowvec(matmul(pooled, params_.find("classifier.hidden.weight")->node),
                       params_.find("classifier.hidden.bias")->node);
    z = tanh(z);
    return add_rowvec(matmul(z, params_.find("classifier.out.weight")->node),
                      params_.find("classifier.out.bias")->node);
}

Var Encoder::loss(Tape& tape, const DenseArray& input, const std::vector<int>& labels,
                  bool train, Rng& dropout_rng) {
    Var logits = forward(tape, input, train, dropout_rng);
    return softmax_cross_entropy(logits, labels);
}

std::vector<int> Encoder::predict(const DenseArray& input) {
    Tape tape;
    Rng unused(0);
    Var logits = forward(tape, input, /*train=*/false, unused);
    const DenseArray& L = logits.value();
    std::vector<int> out(L.rows());
    for (std::size_t i = 0; i < L.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < L.cols(); ++j)
            if (L.at2(i, j) > L.at2(i, best)) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

FrequencyMatrix Encoder::current_frequencies(std::size_t layer, std::size_t head) {
    if (cfg_.variant.softmax_baseline)
        throw ContractError("current_frequencies: softmax baseline has no frequencies");
    const std::size_t slot = cfg_.variant.sampler == SamplerKind::Generative ? 0 : head;
    if (!noise_[layer][slot].primed && cfg_.variant.sampler != SamplerKind::FastFood)
        redraw_head(layer, slot, 0, 0);
    if (cfg_.variant.sampler == SamplerKind::FastFood) {
        // Reconstruct blockwise params and materialize the dense matrix.
        const FfFixed& fixed = ff_fixed_[layer][head];
        const std::string hp =
            "layer" + std::to_string(layer) + ".head" + std::to_string(head) + ".ff.";
        const std::size_t dpad = next_pow2(cfg_.d_qk);
        FastFoodParams p;
        p.dim_input = cfg_.d_qk;
        p.dim_padded = dpad;
        p.sigma = 1.0;
        p.learnable = cfg_.ff_learnable;
        const DenseArray& s = cfg_.ff_learnable.s ? params_.find(hp + "s")->value : fixed.s;
        const DenseArray& g = cfg_.ff_learnable.g ? params_.find(hp + "g")->value : fixed.g;
        const DenseArray& b = cfg_.ff_learnable.b ? params_.find(hp + "b")->value : fixed.b;
        const std::size_t nblocks = s.size() / dpad;
        for (std::size_t blk = 0; blk < nblocks; ++blk) {
            FastFoodBlock block;
            block.s_diag = DenseArray({dpad});
            block.g_diag = DenseArray({dpad});
            block.b_diag = DenseArray({dpad});
            block.perm.assign(fixed.perm.begin() + blk * dpad,
                              fixed.perm.begin() + (blk + 1) * dpad);
            for (std::size_t i = 0; i < dpad; ++i) {
                block.s_diag[i] = s[blk * dpad + i];
                block.g_diag[i] = g[blk * dpad + i];
                block.b_diag[i] = b[blk * dpad + i];
            }
            p.blocks.push_back(std::move(block));
        }
        return fastfood_frequency_matrix(p, noise_[layer][head].drawn_at);
    }
    Tape tape;
    for (Parameter* pp : params_.all()) pp->node = tape.constant(pp->value);
    Var omega = frequencies_var(tape, layer, slot);
    FrequencyMatrix fm;
    fm.rows = omega.value();
    fm.sampler = cfg_.variant.sampler;
    fm.drawn_at_step = noise_[layer][slot].drawn_at;
    return fm;
}

std::vector<std::pair<std::string, const DenseArray*>> Encoder::gmm_scale_factors() const {
    std::vector<std::pair<std::string, const DenseArray*>> out;
    if (cfg_.variant.softmax_baseline || cfg_.variant.sampler != SamplerKind::Gmm) return out;
    for (std::size_t l = 0; l < cfg_.layers; ++l)
        for (std::size_t h = 0; h < cfg_.heads; ++h)
            for (std::size_t c = 0; c < cfg_.gmm_components; ++c) {
                const std::string name = "layer" + std::to_string(l) + ".head" +
                                         std::to_string(h) + ".gmm.scale" + std::to_string(c);
                if (const Parameter* p = params_.find(name)) out.emplace_back(name, &p->value);
            }
    return out;
}

// ---- checkpointing -----------------------------------------------------------------------

void Encoder::fill_checkpoint(Checkpoint& ck) const {
    ck.scalars["cfg.layers"] = static_cast<double>(cfg_.layers);
    ck.scalars["cfg.d_model"] = static_cast<double>(cfg_.d_model);
    ck.scalars["cfg.d_ff"] = static_cast<double>(cfg_.d_ff);
    ck.scalars["cfg.heads"] = static_cast<double>(cfg_.heads);
    ck.scalars["cfg.d_qk"] = static_cast<double>(cfg_.d_qk);
    ck.scalars["cfg.d_v"] = static_cast<double>(cfg_.d_v);
    ck.scalars["cfg.input_dim"] = static_cast<double>(cfg_.input_dim);
    ck.scalars["cfg.max_len"] = static_cast<double>(cfg_.max_len);
    ck.scalars["cfg.num_classes"] = static_cast<double>(cfg_.num_classes);
    ck.scalars["cfg.classifier_hidden"] = static_cast<double>(cfg_.classifier_hidden);
    ck.scalars["cfg.softmax"] = cfg_.variant.softmax_baseline ? 1 : 0;
    ck.scalars["cfg.sampler"] = static_cast<double>(static_cast<int>(cfg_.variant.sampler));
    ck.scalars["cfg.featkind"] = static_cast<double>(static_cast<int>(cfg_.variant.featmap));
    ck.scalars["cfg.m"] = static_cast<double>(cfg_.featmap.samples);
    ck.scalars["cfg.epsilon"] = cfg_.featmap.epsilon;
    ck.scalars["cfg.clamp"] = cfg_.featmap.clamp;
    ck.scalars["cfg.half_norm"] = cfg_.featmap.half_norm ? 1 : 0;
    ck.scalars["cfg.gmm_components"] = static_cast<double>(cfg_.gmm_components);
    ck.scalars["cfg.ff_s"] = cfg_.ff_learnable.s ? 1 : 0;
    ck.scalars["cfg.ff_g"] = cfg_.ff_learnable.g ? 1 : 0;
    ck.scalars["cfg.ff_b"] = cfg_.ff_learnable.b ? 1 : 0;
    ck.scalars["cfg.gen_scaled"] = cfg_.generator_scaled_output ? 1 : 0;
    ck.scalars["cfg.positional"] = cfg_.positional == PositionalEncoding::Learnable ? 0 : 1;
    ck.scalars["cfg.pooling"] = cfg_.pooling == Pooling::Position0 ? 0 : 1;
    ck.scalars["cfg.dropout"] = cfg_.dropout;
    ck.scalars["cfg.resample_interval"] = static_cast<double>(cfg_.resample_interval);
    ck.counters["sampling_seed"] = sampling_seed_;

    for (Parameter* p : const_cast<Encoder*>(this)->params_.all()) {
        Checkpoint::Entry e;
        e.name = p->name;
        e.value = p->value;
        if (p->moment1.size() == p->value.size()) {
            e.moment1 = p->moment1;
            e.moment2 = p->moment2;
        }
        ck.arrays.push_back(std::move(e));
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        for (std::size_t s = 0; s < noise_[l].size(); ++s) {
            // The noise itself regenerates from (sampling_seed, drawn_at), so
            // only the provenance is stored.
            const std::string key =
                "noise.l" + std::to_string(l) + ".s" + std::to_string(s);
            ck.counters[key + ".drawn_at"] = noise_[l][s].drawn_at;
            ck.counters[key + ".primed"] = noise_[l][s].primed ? 1 : 0;
        }
        if (!cfg_.variant.softmax_baseline && cfg_.variant.sampler == SamplerKind::FastFood) {
            for (std::size_t h = 0; h < cfg_.heads; ++h) {
                const FfFixed& fx = ff_fixed_[l][h];
                const std::string key =
                    "fffixed.l" + std::to_string(l) + ".h" + std::to_string(h);
                DenseArray perm({fx.perm.size()});
                for (std::size_t i = 0; i < fx.perm.size(); ++i)
                    perm[i] = static_cast<double>(fx.perm[i]);
                ck.arrays.push_back({key + ".perm", std::move(perm), {}, {}});
                if (fx.s.size()) ck.arrays.push_back({key + ".s", fx.s, {}, {}});
                if (fx.g.size()) ck.arrays.push_back({key + ".g", fx.g, {}, {}});
                if (fx.b.size()) ck.arrays.push_back({key + ".b", fx.b, {}, {}});
            }
        }
    }
}

void Encoder::restore(const Checkpoint& ck) {
    for (Parameter* p : params_.all()) {
        const Checkpoint::Entry* e = ck.find(p->name);
        if (!e) throw DataError("checkpoint: missing parameter " + p->name);
        if (!e->value.same_shape(p->value))
            throw DataError("checkpoint: shape mismatch for " + p->name);
        p->value = e->value;
        if (e->moment1.size() == e->value.size()) {
            p->moment1 = e->moment1;
            p->moment2 = e->moment2;
        } else {
            p->moment1 = DenseArray{};
            p->moment2 = DenseArray{};
        }
    }
    if (auto it = ck.counters.find("sampling_seed"); it != ck.counters.end())
        sampling_seed_ = it->second;
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        if (!cfg_.variant.softmax_baseline && cfg_.variant.sampler == SamplerKind::FastFood) {
            for (std::size_t h = 0; h < cfg_.heads; ++h) {
                const std::string key =
                    "fffixed.l" + std::to_string(l) + ".h" + std::to_string(h);
                if (const auto* e = ck.find(key + ".perm")) {
                    ff_fixed_[l][h].perm.resize(e->value.size());
                    for (std::size_t i = 0; i < e->value.size(); ++i)
                        ff_fixed_[l][h].perm[i] = static_cast<std::size_t>(e->value[i]);
                }
                if (const auto* e = ck.find(key + ".s")) ff_fixed_[l][h].s = e->value;
                if (const auto* e = ck.find(key + ".g")) ff_fixed_[l][h].g = e->value;
                if (const auto* e = ck.find(key + ".b")) ff_fixed_[l][h].b = e->value;
            }
        }
        for (std::size_t s = 0; s < noise_[l].size(); ++s) {
            const std::string key = "noise.l" + std::to_string(l) + ".s" + std::to_string(s);
            const auto drawn = ck.counters.find(key + ".drawn_at");
            const auto primed = ck.counters.find(key + ".primed");
            if (drawn != ck.counters.end() && primed != ck.counters.end() &&
                primed->second == 1) {
                redraw_head(l, s, drawn->second, drawn->second);
            } else {
                noise_[l][s] = HeadNoise{};
            }
        }
    }
}

Encoder Encoder::from_checkpoint(const Checkpoint& ck) {
    auto get = [&](const std::string& k) {
        const auto it = ck.scalars.find("cfg." + k);
        if (it == ck.scalars.end()) throw DataError("checkpoint: missing config field " + k);
        return it->second;
    };
    EncoderConfig cfg;
    cfg.layers = static_cast<std::size_t>(get("layers"));
    cfg.d_model = static_cast<std::size_t>(get("d_model"));
    cfg.d_ff = static_cast<std::size_t>(get("d_ff"));
    cfg.heads = static_cast<std::size_t>(get("heads"));
    cfg.d_qk = static_cast<std::size_t>(get("d_qk"));
    cfg.d_v = static_cast<std::size_t>(get("d_v"));
    cfg.input_dim = static_cast<std::size_t>(get("input_dim"));
    cfg.max_len = static_cast<std::size_t>(get("max_len"));
    cfg.num_classes = static_cast<std::size_t>(get("num_classes"));
    cfg.classifier_hidden = static_cast<std::size_t>(get("classifier_hidden"));
    cfg.variant.softmax_baseline = get("softmax") != 0;
    cfg.variant.sampler = static_cast<SamplerKind>(static_cast<int>(get("sampler")));
    cfg.variant.featmap = static_cast<FeatureKind>(static_cast<int>(get("featkind")));
    cfg.featmap.kind = cfg.variant.featmap;
    cfg.featmap.samples = static_cast<std::size_t>(get("m"));
    cfg.featmap.epsilon = get("epsilon");
    cfg.featmap.clamp = get("clamp");
    cfg.featmap.half_norm = get("half_norm") != 0;
    cfg.gmm_components = static_cast<std::size_t>(get("gmm_components"));
    cfg.ff_learnable.s = get("ff_s") != 0;
    cfg.ff_learnable.g = get("ff_g") != 0;
    cfg.ff_learnable.b = get("ff_b") != 0;
    cfg.generator_scaled_output = get("gen_scaled") != 0;
    cfg.positional = get("positional") == 0 ? PositionalEncoding::Learnable
                                            : PositionalEncoding::Sinusoidal;
    cfg.pooling = get("pooling") == 0 ? Pooling::Position0 : Pooling::Cls;
    cfg.dropout = get("dropout");
    cfg.resample_interval = static_cast<std::uint64_t>(get("resample_interval"));

    std::uint64_t sampling_seed = 0;
    if (auto it = ck.counters.find("sampling_seed"); it != ck.counters.end())
        sampling_seed = it->second;
    Encoder enc(cfg, /*init_seed=*/1, sampling_seed);
    enc.restore(ck);
    return enc;
}

}  // namespace klab
