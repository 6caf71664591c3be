#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "m3dnca/autodiff.hpp"
#include "m3dnca/checkpoint.hpp"
#include "m3dnca/nca.hpp"
#include "m3dnca/rng.hpp"
#include "m3dnca/synth.hpp"

namespace m3dnca {

/// Downscale factor of `level` (0 = coarsest) relative to full resolution.
std::int64_t level_factor(const ModelConfig& config, int level);
/// ceil(full / level_factor) per axis; config error if the pyramid is too deep.
Extent3 level_extent(const Extent3& full, const ModelConfig& config, int level);

/// Per-level images and labels, coarsest first, each [1, 1, z, y, x].
struct Pyramid {
    std::vector<Tensor> images;
    std::vector<Tensor> labels;  // empty when built without a label

    int levels() const { return static_cast<int>(images.size()); }
    Extent3 base_size() const { return images.front().extent(); }
};

/// Mean of f^3 blocks; the volume is first padded to a multiple of f by edge
/// replication.
Tensor downscale_mean(const Tensor& volume, std::int64_t f);
/// Block-center sample of each f^3 block (clamped at the far edge).
Tensor downscale_nearest(const Tensor& volume, std::int64_t f);

Pyramid build_pyramid(const Tensor& image, const Tensor* label, const ModelConfig& config);

/// Steps to run at `level` on a grid of `iterated` extent.
int level_steps(const ModelConfig& config, int level, const Extent3& iterated);

/// Uniform origin of a `base` patch inside the region [lo, lo + span) clipped
/// to [0, level). Geometry error if the patch cannot fit.
Extent3 sample_patch_origin(const Extent3& lo, const Extent3& span, const Extent3& level, const Extent3& base,
                            rng::Stream& rng);

struct Patch {
    StateGrid state;
    Tensor label;
    Extent3 origin;
};

/// Random `base` patch of a single-element grid and the congruent label crop.
Patch sample_patch(const StateGrid& level_state, const Tensor& level_label, const Extent3& base, rng::Stream& rng);

struct LossConfig {
    double gamma = 2.0;
    double alpha = 0.5;
    double eps = 1e-6;
};

/// Dice + focal loss per batch element of prob [b, 1, ...] against a binary
/// target of the same shape; the result is their mean over b. When
/// `per_element` is given it receives each element's loss.
ad::Var dice_focal_loss(ad::Var prob, const Tensor& target, const LossConfig& cfg = {},
                        std::vector<double>* per_element = nullptr);

struct TrainConfig {
    int epochs = 10;
    /// Grids per optimizer step, replicas included.
    int batch_size = 4;
    int dup_factor = 2;
    ad::AdamConfig adam{};
    /// Learning-rate multiplier applied after every optimizer step.
    double lr_decay = 0.9999;
    LossConfig loss{};
    std::uint64_t seed = 0;
    /// Evaluate on the validation split every this many epochs (0 = never).
    int eval_every = 1;
    /// Fire-mask seed of the single-pass validation segmentation.
    std::uint64_t eval_seed = 1;

    void validate() const;
};

struct StepResult {
    double loss = 0.0;
    std::vector<double> replica_losses;
    /// Gradients in NcaLayerParams::learnable() order, per level.
    std::vector<std::vector<Tensor>> grads;
    std::size_t tape_peak_bytes = 0;
    /// Final-level patch origins of each replica, in full-level coordinates.
    std::vector<Extent3> final_origins;
    /// Foreground probability and label crop the loss was computed on.
    Tensor prob;
    Tensor target;
};

/// Fire-mask seed of batch element `replica` in the step seeded `step_seed`.
std::uint64_t replica_seed(std::uint64_t step_seed, int replica);

/// One forward/backward pass over `unique` samples, each replicated
/// dup_factor times with its own seed. Batch-norm running statistics in
/// `layers` are updated; parameters are not.
StepResult train_step(const std::vector<const Pyramid*>& unique, std::vector<NcaLayerParams>& layers,
                      const ModelConfig& config, const TrainConfig& train, std::uint64_t step_seed);

struct EpochRecord {
    int epoch = 0;
    double mean_loss = 0.0;
    double loss_variance = 0.0;
    /// Mean validation Dice; NaN when not evaluated this epoch.
    double eval_dice = 0.0;
    std::int64_t optimizer_steps = 0;
};

struct TrainResult {
    Checkpoint best;
    Checkpoint last;
    std::vector<EpochRecord> history;
    std::vector<double> step_losses;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Full loop with Adam and per-step learning-rate decay. Returns the
/// checkpoint with the best validation Dice (the last one without a
/// validation split).
TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& validation,
                  const ModelConfig& config, const TrainConfig& train_config, const EpochCallback& on_epoch = {});

}  // namespace m3dnca
