#pragma once

#include <memory>
#include <string>
#include <vector>

#include "maskdiff/config.hpp"
#include "maskdiff/denoiser.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/maskops.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/shapesdata.hpp"

namespace maskdiff {

struct TrainConfig {
    std::string dataset_path;
    std::string run_dir;
    int batch_size = 16;
    double learning_rate = 2e-4;
    int total_steps = 20000;
    double p_inpaint = 0.8;
    double p_text_to_image = 0.2;
    double cond_dropout_prob = 0.1;
    double caption_prob = 0.5;  // caption vs class-label pairing
    double lambda = 0.01;
    double dice_smooth = 1.0;
    uint64_t seed = 0;
    int checkpoint_every = 2000;
    int schedule_steps = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    DenoiserConfig model;
    LadderConfig ladder;  // defaulted from the resolution when unset

    void validate() const;
    KeyValueConfig to_kv() const;
    static TrainConfig from_kv(const KeyValueConfig& kv);
    std::string config_hash() const { return to_kv().hash_hex(); }
};

// One assembled training example. Inpainting items noise inside the coarse
// mask m_s and supervise the mask head against the exact support;
// text-to-image items cover the whole frame at the coarsest indicator and
// skip the prediction loss.
struct BatchItem {
    int sample_index = 0;
    bool inpaint = true;
    int t = 1;
    int s = 0;
    InstanceMask noise_mask;
    InstanceMask target_mask;
    Condition cond;
    TensorF eps;  // (C,H,W)
};

struct TrainingBatch {
    std::vector<BatchItem> items;
};

struct LossRecord {
    int step = 0;
    int n_inpaint = 0;
    int n_t2i = 0;
    double seg = 0.0;
    double dice = 0.0;
    double total = 0.0;
};

// Raised when a training step produces a non-finite loss; carries the
// diagnostic record.
struct TrainingAbort : std::runtime_error {
    explicit TrainingAbort(const std::string& msg) : std::runtime_error(msg) {}
};

// Per-item randomness is a substream of step_rng keyed on the item index.
TrainingBatch assemble_batch(const Dataset& ds, const Rng& step_rng, const TrainConfig& cfg,
                             const LadderConfig& ladder);

// Checkpoint contents without the training-only state; enough to sample.
struct LoadedModel {
    std::unique_ptr<Denoiser> model;
    NoiseSchedule schedule;
    LadderConfig ladder;
    TrainConfig config;
    Vocabulary vocab = Vocabulary::standard();
    int step = 0;
};

LoadedModel load_model(const std::string& checkpoint_path);

class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    // One optimization step on the given batch (forward, losses, update).
    LossRecord apply_batch(const TrainingBatch& batch);

    // Assembles the batch for the current step counter and applies it.
    LossRecord train_step();

    // Full loop: config echo, per-step metrics rows, periodic checkpoints.
    void run();

    void save_checkpoint(const std::string& path) const;
    static std::unique_ptr<Trainer> load_checkpoint(const std::string& path,
                                                    const std::string& dataset_override = "");

    Denoiser& model() { return *model_; }
    const NoiseSchedule& schedule() const { return sched_; }
    const TrainConfig& config() const { return cfg_; }
    const LadderConfig& ladder() const { return ladder_; }
    const Dataset& dataset() const { return data_; }
    int step() const { return step_; }

private:
    Trainer(TrainConfig cfg, bool defer_model);

    TrainConfig cfg_;
    LadderConfig ladder_;
    NoiseSchedule sched_;
    Dataset data_;
    std::unique_ptr<Denoiser> model_;
    nn::AdamOptimizer<float> opt_;
    Rng master_;
    int step_ = 0;
};

}  // namespace maskdiff
