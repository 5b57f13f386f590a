#pragma once

#include <string>

#include "unitok/model.hpp"

namespace unitok {

enum class TrainMode { joint, und_only, rec_only };

inline const char* mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::joint: return "joint";
        case TrainMode::und_only: return "und_only";
        default: return "rec_only";
    }
}
TrainMode parse_mode(const std::string& s);

struct StageConfig {
    int resolution = 32;
    int batch_size = 8;
    double base_lr = 3e-4;
    int total_steps = 3000;
    int warmup_steps = 150;
    double lambda = 0.0;  // perceptual weight, stage-dependent
};

// Everything a run needs; defaults are the desk preset.
struct TrainerConfig {
    ModelConfig model;
    double tau = 0.2;
    double beta = 0.4;
    double alpha = 1.0;
    double lambda_pretrain = 0.0;
    double lambda_finetune = 0.5;
    double omega_rec = 0.5;
    double omega_und = 1.0;
    uint64_t seed = 42;
    TrainMode mode = TrainMode::joint;
    std::string train_dir;
    std::string eval_dir;
    StageConfig stage1{32, 8, 3e-4, 3000, 150, 0.0};
    StageConfig stage2{64, 4, 1.5e-5, 300, 15, 0.5};

    void validate() const;
};

// key=value lines, '#' comments, dotted keys; unknown keys are an error.
TrainerConfig parse_config_text(const std::string& text);
TrainerConfig load_config(const std::string& path);
// One key=value line per setting; parse(serialize(c)) == c.
std::string serialize_config(const TrainerConfig& c);

// Short git revision baked in at build time ("unknown" outside a checkout).
std::string build_identifier();

}  // namespace unitok
