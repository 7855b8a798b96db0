#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "klab/config.hpp"
#include "klab/dataset.hpp"
#include "klab/model.hpp"

namespace klab {

struct TrainingConfig {
    std::size_t batch_size = 400;
    std::size_t max_steps = 30000;
    AdamWConfig optimizer{5e-5, 0.9, 0.98, 1e-9, 0.1};
    std::uint64_t seed = 1;
    double target_accuracy = 0.95;
    std::vector<int> checkpoint_thresholds = {20, 40, 60, 80};  // percent
    std::string checkpoint_dir;  // empty disables checkpoint files
    bool verbose = false;
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double train_loss = 0;
    double val_accuracy = 0;
};

struct ExperimentResult {
    std::string variant;
    std::vector<EpochRecord> curve;
    double final_accuracy = 0;
    std::size_t steps_run = 0;
    bool reached_target = false;
    bool diverged = false;
    std::map<int, std::size_t> threshold_steps;       // percent -> step of first crossing
    std::map<int, std::string> threshold_checkpoints;  // percent -> file
    std::string final_checkpoint;
    double wall_seconds = 0;
};

// Trains the configured encoder on the synthetic sparsity task, recording the
// per-epoch validation accuracy series and writing threshold checkpoints at
// the first crossing of each accuracy in checkpoint_thresholds. Training
// stops at target accuracy, the step budget, or divergence (non-finite
// loss), whichever comes first.
ExperimentResult run_sparsity_experiment(const EncoderConfig& model_cfg,
                                         const SparsitySpec& data_spec,
                                         const TrainingConfig& train_cfg);

double evaluate_accuracy(Encoder& enc, const std::vector<SyntheticExample>& examples,
                         std::size_t batch_size);

// ---- gradient statistics (classifier layer) ------------------------------------

struct GradStats {
    double abs_mean = 0;  // mean of |gradient| per neuron, averaged over neurons
    double std_dev = 0;   // std of gradient per neuron over repetitions, averaged
    std::size_t neurons = 0;
    std::size_t repetitions = 0;
    std::size_t datapoints = 0;
    std::vector<double> per_neuron_abs_mean;
    std::vector<double> per_neuron_std;
};

// Repeatedly re-draws the spectral frequencies, passes the same datapoints,
// and collects the loss gradient at each classifier hidden neuron. The mean
// is taken over absolute values; both statistics are then averaged over
// neurons.
GradStats gradient_statistics(Encoder& enc, const std::vector<SyntheticExample>& pool,
                              std::size_t datapoints = 50, std::size_t repetitions = 50,
                              std::uint64_t seed = 1);

// ---- config construction ---------------------------------------------------------

EncoderConfig encoder_config_from(const Config& cfg, const std::string& variant_name);
SparsitySpec sparsity_spec_from(const Config& cfg, std::uint64_t seed);
TrainingConfig training_config_from(const Config& cfg, std::uint64_t seed);

// Attaches dataset/model/training fields to a checkpoint so grad-stats can
// rebuild everything from the file alone.
void stamp_experiment_config(Checkpoint& ck, const SparsitySpec& data,
                             const TrainingConfig& train);
SparsitySpec sparsity_spec_from_checkpoint(const Checkpoint& ck);

}  // namespace klab
