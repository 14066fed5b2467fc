// SPDX-License-Identifier: Apache-2.0
//
// Masked-token training: Adam with decoupled weight decay, linear
// warmup/decay schedule, deterministic batch/mask/dropout streams derived
// from (seed, step), and bitwise-exact checkpointing. Because per-step
// randomness depends only on the seed and the step index, a restored
// checkpoint replays the interrupted trajectory exactly.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xmoe/data.hpp"
#include "xmoe/model.hpp"
#include "xmoe/objective.hpp"

namespace xmoe {

struct TrainConfig {
    int64_t steps = 3000;
    int64_t batch_size = 32;  // sequences per step
    double lr_max = 3e-4;
    int64_t warmup_steps = 300;
    std::string schedule = "linear_decay";
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-6;
    double weight_decay = 0.01;
    double alpha = 1e-2;  // balance loss coefficient
    uint64_t seed = 1;
    int64_t checkpoint_every = 100;
    bool freeze_routing = false;
    double dropout_rate = 0.1;
    double grad_clip = 1.0;
    double mask_rate = 0.15;

    void validate() const;
};

uint64_t model_config_digest(const ModelConfig& cfg);

double lr_at(int64_t step, const TrainConfig& cfg);

struct AdamState {
    // moment buffers keyed by parameter name; t counts completed steps
    std::vector<std::pair<std::string, std::vector<double>>> m;
    std::vector<std::pair<std::string, std::vector<double>>> v;
    int64_t t = 0;
};

// One bias-corrected AdamW update over (param, grad) pairs. Moments are
// looked up (or created) by name, so the set of trainable tensors may be a
// subset of a previously restored state.
void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
               double lr, const TrainConfig& cfg);

struct StepRecord {
    int64_t step = 0;
    double task_loss = 0.0;
    double balance_loss = 0.0;
    double total_loss = 0.0;
    double tau = 0.0;
    double lr = 0.0;
    std::vector<int64_t> loads;
};

struct TrainLog {
    int64_t num_experts = 0;
    std::vector<StepRecord> records;

    void write_csv(const std::string& path) const;
    static TrainLog read_csv(const std::string& path);
};

struct Checkpoint {
    uint32_t version = 1;
    uint64_t step = 0;
    uint64_t seed = 0;
    uint64_t model_digest = 0;
    uint64_t run_digest = 0;
    uint64_t adam_t = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<std::pair<std::string, std::vector<double>>> adam_m;
    std::vector<std::pair<std::string, std::vector<double>>> adam_v;
};

void save_checkpoint(const std::string& path, const Checkpoint& cp);
Checkpoint load_checkpoint(const std::string& path);
std::vector<uint8_t> serialize_checkpoint(const Checkpoint& cp);

// Writes the checkpoint's parameter values into a model built from the same
// config; the digest and every name/shape must match.
void apply_checkpoint(Model& model, const Checkpoint& cp);

using CheckpointSink = std::function<void(const Checkpoint&)>;

// Drives one model through the masked-LM objective on a fixed corpus split.
class Trainer {
public:
    Trainer(Model& model, const Corpus& corpus, const TrainConfig& cfg, uint64_t run_digest = 0);

    // runs steps (from, to]; emits a checkpoint every checkpoint_every steps
    // and at the final step
    TrainLog run(int64_t from_step, int64_t to_step, const CheckpointSink& sink = nullptr);
    StepRecord step(int64_t s);

    Checkpoint make_checkpoint(int64_t step) const;
    void restore(const Checkpoint& cp);

    double eval_task_loss(std::span<const int64_t> seq_indices) const;
    const SplitIndices& split() const { return split_; }
    const AdamState& adam_state() const { return adam_; }

private:
    Model& model_;
    const Corpus& corpus_;
    TrainConfig cfg_;
    uint64_t model_digest_ = 0;
    uint64_t run_digest_ = 0;
    SplitIndices split_;
    AdamState adam_;
    Rng base_;
    std::vector<std::pair<std::string, Tensor>> trainable_;
    std::vector<std::pair<std::string, Tensor>> frozen_;
    std::vector<std::vector<double>> frozen_snapshot_;

    void check_frozen(int64_t s) const;
};

// Full pre-training run from step 0.
TrainLog pretrain(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                  const CheckpointSink& sink = nullptr);

// Fine-tuning with the router and expert networks frozen; the balance loss
// is still applied and reaches the backbone through the token
// representations.
TrainLog finetune_frozen(Model& model, const Corpus& corpus, const TrainConfig& cfg,
                         const CheckpointSink& sink = nullptr);

}  // namespace xmoe
