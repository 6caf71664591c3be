#pragma once

#include <cstdint>
#include <vector>

#include "m3dnca/nca.hpp"

namespace m3dnca {

struct TrainingMeta {
    std::int64_t epoch = 0;
    std::int64_t optimizer_steps = 0;
    std::uint64_t seed = 0;
    /// Hash of the bit patterns of every recorded step loss.
    std::uint64_t loss_digest = 0;
    double best_eval_dice = -1.0;
};

/// A trained (or freshly initialized) model. Immutable once produced.
struct Checkpoint {
    ModelConfig config;
    std::vector<NcaLayerParams> layers;
    TrainingMeta meta;
};

Checkpoint fresh_checkpoint(const ModelConfig& config, std::uint64_t seed);

}  // namespace m3dnca
