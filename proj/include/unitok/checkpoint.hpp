#pragma once

#include <map>
#include <string>
#include <vector>

#include "unitok/model.hpp"
#include "unitok/optim.hpp"

namespace unitok {

struct CheckpointMeta {
    uint64_t codec_seed = 0;
    int codec_f = 0;
    int stage_index = 0;       // 0-based
    int64_t step_in_stage = 0;
    int64_t global_step = 0;
    int64_t opt_step = 0;      // AdamW bias-correction counter
    uint64_t model_seed = 0;
};

struct Checkpoint {
    CheckpointMeta meta;
    ParamStore params;
    std::map<std::string, std::vector<float>> m, v;  // optimizer moments by param name
};

// Binary format: 4-byte magic, u32 version, fixed-width header, then named
// entries (u32 name length, name, u32 ndim, i32 dims, little-endian f32 data).
// Optimizer moments are stored as entries prefixed "m." / "v.".
void save_checkpoint(const std::string& path, const CheckpointMeta& meta, const ParamStore& params,
                     const AdamW* opt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace unitok
