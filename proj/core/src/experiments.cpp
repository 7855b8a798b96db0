#include "klab/experiments.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>

namespace klab {

double evaluate_accuracy(Encoder& enc, const std::vector<SyntheticExample>& examples,
                         std::size_t batch_size) {
    if (examples.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
        const std::size_t end = std::min(begin + batch_size, examples.size());
        const DenseArray input = encode_batch(examples, begin, end);
        const std::vector<int> labels = encode_labels(examples, begin, end);
        const std::vector<int> pred = enc.predict(input);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

namespace {

void save_training_checkpoint(const Encoder& enc, const SparsitySpec& data,
                              const TrainingConfig& train, std::size_t step,
                              std::size_t adam_t, const Rng& data_rng, const Rng& drop_rng,
                              const std::string& path) {
    Checkpoint ck;
    enc.fill_checkpoint(ck);
    ck.step = step;
    ck.adam_t = adam_t;
    ck.rng_states["data"] = data_rng.state();
    ck.rng_states["dropout"] = drop_rng.state();
    stamp_experiment_config(ck, data, train);
    save_checkpoint(path, ck);
}

}  // namespace

ExperimentResult run_sparsity_experiment(const EncoderConfig& model_cfg,
                                         const SparsitySpec& data_spec,
                                         const TrainingConfig& train_cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    SparsityDataset ds = generate_sparsity_dataset(data_spec);

    Encoder enc(model_cfg, derive_seed(train_cfg.seed, 0x1217ull),
                derive_seed(train_cfg.seed, 0x5A3Dull));
    Rng data_rng(derive_seed(train_cfg.seed, 0xDA7Aull));
    Rng dropout_rng(derive_seed(train_cfg.seed, 0xD309ull));

    ExperimentResult result;
    result.variant = model_cfg.variant.name();

    if (!train_cfg.checkpoint_dir.empty())
        std::filesystem::create_directories(train_cfg.checkpoint_dir);

    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<SyntheticExample> batch_buf(train_cfg.batch_size);
    std::size_t step = 0, adam_t = 0;
    bool stop = false;
    for (std::size_t epoch = 0; !stop; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[data_rng.below(i)]);

        double loss_sum = 0;
        std::size_t loss_count = 0;
        for (std::size_t begin = 0; begin + train_cfg.batch_size <= order.size();
             begin += train_cfg.batch_size) {
            for (std::size_t i = 0; i < train_cfg.batch_size; ++i)
                batch_buf[i] = ds.train[order[begin + i]];
            const DenseArray input = encode_batch(batch_buf, 0, batch_buf.size());
            const std::vector<int> labels = encode_labels(batch_buf, 0, batch_buf.size());

            enc.maybe_resample(step);
            Tape tape;
            Var loss = enc.loss(tape, input, labels, /*train=*/true, dropout_rng);
            const double loss_value = loss.value().scalar_value();
            if (!std::isfinite(loss_value)) {
                result.diverged = true;
                stop = true;
                break;
            }
            tape.backward(loss);
            ++adam_t;
            for (Parameter* p : enc.params().all())
                adamw_step(*p, p->node.grad(), train_cfg.optimizer, adam_t);
            loss_sum += loss_value;
            ++loss_count;
            ++step;
            if (step >= train_cfg.max_steps) {
                stop = true;
                break;
            }
        }

        const double val_acc = evaluate_accuracy(enc, ds.validation, train_cfg.batch_size);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.step = step;
        rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
        rec.val_accuracy = val_acc;
        result.curve.push_back(rec);
        result.final_accuracy = val_acc;
        result.steps_run = step;
        if (train_cfg.verbose)
            std::cerr << result.variant << " epoch " << epoch << " step " << step << " loss "
                      << rec.train_loss << " val " << val_acc << "\n";

        for (int pct : train_cfg.checkpoint_thresholds) {
            if (result.threshold_steps.count(pct)) continue;
            if (val_acc >= static_cast<double>(pct) / 100.0) {
                result.threshold_steps[pct] = step;
                if (!train_cfg.checkpoint_dir.empty()) {
                    const std::string path = train_cfg.checkpoint_dir + "/" + result.variant +
                                             "-acc" + std::to_string(pct) + ".ckpt";
                    save_training_checkpoint(enc, data_spec, train_cfg, step, adam_t, data_rng,
                                             dropout_rng, path);
                    result.threshold_checkpoints[pct] = path;
                }
            }
        }
        if (val_acc >= train_cfg.target_accuracy) {
            result.reached_target = true;
            stop = true;
        }
        if (ds.train.size() < train_cfg.batch_size) stop = true;  // nothing trainable
    }

    if (!train_cfg.checkpoint_dir.empty()) {
        const std::string path =
            train_cfg.checkpoint_dir + "/" + result.variant + "-final.ckpt";
        save_training_checkpoint(enc, data_spec, train_cfg, step, adam_t, data_rng, dropout_rng,
                                 path);
        result.final_checkpoint = path;
    }
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

GradStats gradient_statistics(Encoder& enc, const std::vector<SyntheticExample>& pool,
                              std::size_t datapoints, std::size_t repetitions,
                              std::uint64_t seed) {
    if (pool.size() < datapoints)
        throw ContractError("gradient_statistics: not enough datapoints in the pool");
    if (repetitions < 2)
        throw ContractError("gradient_statistics: need at least 2 repetitions");
    const DenseArray input = encode_batch(pool, 0, datapoints);
    const std::vector<int> labels = encode_labels(pool, 0, datapoints);

    Parameter* target = enc.params().find("classifier.hidden.bias");
    if (!target) throw ContractError("gradient_statistics: classifier bias missing");
    const std::size_t n = target->value.size();

    std::vector<std::vector<double>> grads(repetitions, std::vector<double>(n));
    Rng unused(0);
    for (std::size_t r = 0; r < repetitions; ++r) {
        enc.resample_all(derive_seed(seed, r));
        Tape tape;
        Var loss = enc.loss(tape, input, labels, /*train=*/false, unused);
        tape.backward(loss);
        const DenseArray& g = target->node.grad();
        for (std::size_t j = 0; j < n; ++j) grads[r][j] = g[j];
    }

    GradStats out;
    out.neurons = n;
    out.repetitions = repetitions;
    out.datapoints = datapoints;
    out.per_neuron_abs_mean.resize(n);
    out.per_neuron_std.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        double mean = 0, abs_mean = 0;
        for (std::size_t r = 0; r < repetitions; ++r) {
            mean += grads[r][j];
            abs_mean += std::abs(grads[r][j]);
        }
        mean /= static_cast<double>(repetitions);
        abs_mean /= static_cast<double>(repetitions);
        double var = 0;
        for (std::size_t r = 0; r < repetitions; ++r) {
            const double dev = grads[r][j] - mean;
            var += dev * dev;
        }
        out.per_neuron_abs_mean[j] = abs_mean;
        out.per_neuron_std[j] = std::sqrt(var / static_cast<double>(repetitions - 1));
        out.abs_mean += abs_mean;
        out.std_dev += out.per_neuron_std[j];
    }
    out.abs_mean /= static_cast<double>(n);
    out.std_dev /= static_cast<double>(n);
    return out;
}

// ---- config construction -------------------------------------------------------------

EncoderConfig encoder_config_from(const Config& cfg, const std::string& variant_name) {
    EncoderConfig ec;
    ec.variant = VariantSpec::parse(variant_name);
    ec.layers = static_cast<std::size_t>(cfg.get_int("model.layers", 3));
    ec.d_model = static_cast<std::size_t>(cfg.get_int("model.d_model", 64));
    ec.d_ff = static_cast<std::size_t>(cfg.get_int("model.d_ff", 64));
    ec.heads = static_cast<std::size_t>(cfg.get_int("model.heads", 4));
    ec.d_qk = static_cast<std::size_t>(cfg.get_int("model.d_qk", 16));
    ec.d_v = static_cast<std::size_t>(cfg.get_int("model.d_v", 16));
    ec.input_dim = 3;
    ec.num_classes = 9;
    ec.classifier_hidden = static_cast<std::size_t>(cfg.get_int("model.classifier_hidden", 64));
    ec.featmap.kind = ec.variant.featmap;
    ec.featmap.samples = static_cast<std::size_t>(cfg.get_int("featmap.m", 64));
    ec.featmap.epsilon = cfg.get_double("featmap.epsilon", 1e-6);
    ec.featmap.clamp = cfg.get_double("featmap.clamp", 30.0);
    ec.featmap.half_norm = cfg.get_bool("featmap.half_norm", false);
    ec.gmm_components = static_cast<std::size_t>(cfg.get_int("sampler.gmm_components", 2));
    const std::string learn = cfg.get_string("fastfood.learnable", "sgb");
    if (learn == "none") ec.ff_learnable = FastFoodLearnable::none();
    else if (learn == "s") ec.ff_learnable = FastFoodLearnable::s_only();
    else if (learn == "sgb") ec.ff_learnable = FastFoodLearnable::sgb();
    else throw DataError("config: fastfood.learnable must be none, s, or sgb");
    ec.generator_scaled_output = cfg.get_bool("sampler.generator_scaled_output", true);
    const std::string pos = cfg.get_string("model.positional", "learnable");
    ec.positional = pos == "sinusoidal" ? PositionalEncoding::Sinusoidal
                                        : PositionalEncoding::Learnable;
    const std::string pool = cfg.get_string("model.pooling", "position0");
    ec.pooling = pool == "cls" ? Pooling::Cls : Pooling::Position0;
    ec.dropout = cfg.get_double("model.dropout", 0.0);
    ec.resample_interval =
        static_cast<std::uint64_t>(cfg.get_int("sampler.resample_interval", 100));
    const std::size_t L = static_cast<std::size_t>(cfg.get_int("data.length", 50));
    ec.max_len = L + (ec.pooling == Pooling::Cls ? 1 : 0);
    return ec;
}

SparsitySpec sparsity_spec_from(const Config& cfg, std::uint64_t seed) {
    SparsitySpec spec;
    spec.relevance_p = cfg.get_double("data.p", 0.5);
    spec.seq_len = static_cast<std::size_t>(cfg.get_int("data.length", 50));
    spec.count = static_cast<std::size_t>(cfg.get_int("data.count", 20000));
    spec.train_fraction = cfg.get_double("data.split", 0.8);
    spec.seed = cfg.get_u64("data.seed", seed);
    return spec;
}

TrainingConfig training_config_from(const Config& cfg, std::uint64_t seed) {
    TrainingConfig tc;
    tc.batch_size = static_cast<std::size_t>(cfg.get_int("train.batch", 400));
    tc.max_steps = static_cast<std::size_t>(cfg.get_int("train.steps", 30000));
    tc.optimizer.lr = cfg.get_double("train.lr", 5e-5);
    tc.optimizer.beta1 = cfg.get_double("train.beta1", 0.9);
    tc.optimizer.beta2 = cfg.get_double("train.beta2", 0.98);
    tc.optimizer.eps = cfg.get_double("train.eps", 1e-9);
    tc.optimizer.weight_decay = cfg.get_double("train.weight_decay", 0.1);
    tc.seed = seed;
    tc.target_accuracy = cfg.get_double("train.target_accuracy", 0.95);
    tc.checkpoint_dir = cfg.get_string("checkpoint.dir", "");
    tc.verbose = cfg.get_bool("train.verbose", false);
    return tc;
}

void stamp_experiment_config(Checkpoint& ck, const SparsitySpec& data,
                             const TrainingConfig& train) {
    ck.scalars["data.p"] = data.relevance_p;
    ck.scalars["data.length"] = static_cast<double>(data.seq_len);
    ck.scalars["data.count"] = static_cast<double>(data.count);
    ck.scalars["data.split"] = data.train_fraction;
    ck.counters["data.seed"] = data.seed;
    ck.scalars["train.lr"] = train.optimizer.lr;
    ck.scalars["train.batch"] = static_cast<double>(train.batch_size);
    ck.counters["train.seed"] = train.seed;
}

SparsitySpec sparsity_spec_from_checkpoint(const Checkpoint& ck) {
    auto need = [&](const char* k) {
        const auto it = ck.scalars.find(k);
        if (it == ck.scalars.end())
            throw DataError(std::string("checkpoint: missing experiment field ") + k);
        return it->second;
    };
    SparsitySpec spec;
    spec.relevance_p = need("data.p");
    spec.seq_len = static_cast<std::size_t>(need("data.length"));
    spec.count = static_cast<std::size_t>(need("data.count"));
    spec.train_fraction = need("data.split");
    const auto it = ck.counters.find("data.seed");
    if (it == ck.counters.end()) throw DataError("checkpoint: missing data.seed");
    spec.seed = it->second;
    return spec;
}

}  // namespace klab
