#pragma once

#include <array>
#include <string>
#include <vector>

#include "unitok/checkpoint.hpp"
#include "unitok/config.hpp"
#include "unitok/data.hpp"
#include "unitok/optim.hpp"

namespace unitok {

// One row of the training curve: every component loss is recorded at every
// step in every mode, optimized or not — the loss-interaction comparisons
// depend on observing the unoptimized components.
struct LossReport {
    int64_t step = 0;  // global step, 0-based across stages
    int stage = 1;     // 1-based
    double lr = 0.0;
    double pixel_l1 = 0.0;
    double latent_l1 = 0.0;
    double perceptual = 0.0;
    double caption_ce = 0.0;
    double contrastive = 0.0;
    double weighted_total = 0.0;  // omega_rec*(pix + beta*lat + lambda*perc) + omega_und*(cap + alpha*contr)
};

// Linear warmup 0 -> base_lr over warmup_steps, then cosine decay to 0 at
// total_steps. Exact at the endpoints.
double lr_at(int64_t step, const StageConfig& stage);

std::string curve_csv_header();  // step,stage,lr,pixel_l1,...,weighted_total
std::string curve_csv_row(const LossReport& r);
void write_curve_csv(const std::string& path, const std::vector<LossReport>& rows);
std::vector<LossReport> read_curve_csv(const std::string& path);

class Trainer {
  public:
    // `train` is the master-resolution dataset; batches are resized per stage.
    Trainer(const TrainerConfig& cfg, Dataset train, Vocab vocab);

    // One optimizer step on one batch. Always computes all five losses
    // forward; backpropagates only the mode's scalar. A non-finite component
    // aborts with its name and the step number.
    LossReport train_step(const Batch& batch);

    // Runs the current stage to completion (resuming mid-stage if restored
    // from a checkpoint); interpolates positional tables when entering a
    // stage whose token grid differs. Emits one report per step.
    std::vector<LossReport> run_stage(int stage_index);

    // Both stages back to back.
    std::vector<LossReport> run();

    // Three aligned runs from identical init/seed/data differing only in the
    // backward mode: [joint, und_only, rec_only].
    static std::array<std::vector<LossReport>, 3> run_ablation_suite(const TrainerConfig& cfg,
                                                                     const Dataset& train,
                                                                     const Vocab& vocab);

    void save(const std::string& path) const;
    // Restores params, optimizer moments, and step counters; cfg must carry
    // the same codec settings the checkpoint records.
    void restore(const std::string& path);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const TrainerConfig& config() const { return cfg_; }
    const CodecParams& codec() const { return codec_; }
    const PerceptualNet& perceptual_net() const { return pnet_; }
    const Vocab& vocab() const { return vocab_; }
    int stage_index() const { return stage_index_; }
    int64_t step_in_stage() const { return step_in_stage_; }
    int64_t global_step() const { return global_step_; }

    // Where run_stage writes its end-of-stage checkpoint; empty disables.
    std::string checkpoint_dir;

    const StageConfig& stage_config(int stage_index) const {
        return stage_index == 0 ? cfg_.stage1 : cfg_.stage2;
    }
    // Token-grid side for a stage's resolution.
    int token_grid(int stage_index) const;
    Batch next_batch();  // deterministic batch for (seed, stage, step_in_stage)

  private:
    void register_optimizer();
    void enter_stage(int stage_index);

    TrainerConfig cfg_;
    Dataset train_;
    Vocab vocab_;
    CodecParams codec_;
    PerceptualNet pnet_;
    ParamStore params_;
    AdamW opt_;
    std::vector<int> opt_slots_;  // store order -> optimizer slot
    int stage_index_ = 0;
    int64_t step_in_stage_ = 0;
    int64_t global_step_ = 0;
};

}  // namespace unitok
