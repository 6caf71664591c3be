#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3dnca/autodiff.hpp"
#include "m3dnca/tensor.hpp"

namespace m3dnca {

enum class StepPolicy {
    /// Recompute s from the grid actually being iterated.
    runtime_extent,
    /// Use the extent each level was iterated on during training.
    frozen_training_extent,
};

enum class UpsampleMode { nearest, trilinear };

/// Pyramid geometry, channel widths and step policy of an n-level model.
struct ModelConfig {
    int levels = 2;
    int scale = 4;
    std::vector<int> kernel_sizes{7, 3};
    int channels = 16;
    int hidden = 64;
    float fire_rate = 0.5f;
    StepPolicy step_policy = StepPolicy::runtime_extent;
    /// Total downscale d^n instead of d^(n-1); the final level then runs at
    /// 1/d resolution and its output is upscaled to the input grid.
    bool legacy_extra_downscale = false;
    UpsampleMode upsample = UpsampleMode::nearest;
    /// Per-level step counts that override the policy when non-empty.
    std::vector<int> fixed_steps;
    /// Patch extent the model was trained on; read by frozen_training_extent.
    Extent3 training_extent{};

    void validate() const;
    std::int64_t channel_count() const { return channels; }
};

/// Learnable parameters of one level's update rule plus its batch-norm
/// running statistics.
struct NcaLayerParams {
    Tensor perception;  // [c, k, k, k]
    Tensor w1;          // [h, 2c]
    Tensor b1;          // [h]
    Tensor gamma;       // [h]
    Tensor beta;        // [h]
    ad::BatchNormStats bn;
    Tensor w2;          // [c, h]
    Tensor b2;          // [c]

    int kernel_size() const { return static_cast<int>(perception.dim(1)); }
    std::int64_t channels() const { return perception.dim(0); }
    std::int64_t hidden() const { return w1.dim(0); }

    std::vector<Tensor*> learnable();
    std::vector<const Tensor*> learnable() const;
    static const std::vector<std::string>& learnable_names();
    std::int64_t learnable_count() const;
};

/// Fresh parameters for `level` (0-based): Kaiming-uniform perception and
/// first dense map, zero second dense map so the first update is the identity.
NcaLayerParams init_layer(const ModelConfig& config, int level, std::uint64_t seed);
std::vector<NcaLayerParams> init_model(const ModelConfig& config, std::uint64_t seed);

std::int64_t param_count(const ModelConfig& config);

/// ceil(max(extent) / ((k - 1) / 2)), at least 1.
int step_count(const Extent3& extent, int k);

/// Cell state of a batch of grids. Channel 0 holds the image, channel 1 the
/// segmentation logit, the rest hidden memory.
struct StateGrid {
    Tensor state;                 // [b, c, z, y, x]
    Tensor image;                 // [b, 1, z, y, x]
    std::vector<Extent3> origin;  // per batch element, in level coordinates

    std::int64_t batch() const { return state.dim(0); }
    Extent3 extent() const { return state.extent(); }
};

/// State with channel 0 = image, all other channels zero.
StateGrid make_state(const Tensor& image, std::int64_t channels, std::vector<Extent3> origins = {});

void validate_fire_rate(float fire_rate);

/// Per-voxel Bernoulli(fire_rate) mask [b, 1, z, y, x] keyed by each batch
/// element's seed and the global coordinates origin + local index.
Tensor fire_mask(const Extent3& extent, std::span<const Extent3> origins, std::span<const std::uint64_t> seeds,
                 int level, int step, float fire_rate);

/// Tape handles for one level's parameters.
struct LayerVars {
    ad::Var perception, w1, b1, gamma, beta, w2, b2;
};

/// Registers `params` on `tape`, as parameters or constants.
LayerVars bind_layer(ad::Tape& tape, const NcaLayerParams& params, bool trainable);

/// One synchronous cell update recorded on the tape:
///   u = w2 relu(bn(w1 [conv(s); s] + b1)) + b2,  s' = s + u * mask,
/// then channel 0 is reset to `image`.
ad::Var nca_step(ad::Var state, const LayerVars& layer, ad::BatchNormStats& bn, ad::BatchNormMode mode,
                 const Tensor& image, const Tensor& mask);

/// Value-level step. `seeds` holds one seed per batch element.
StateGrid nca_step(const StateGrid& grid, NcaLayerParams& params, int level, int step,
                   std::span<const std::uint64_t> seeds, float fire_rate,
                   ad::BatchNormMode mode = ad::BatchNormMode::eval);

/// `steps` consecutive updates with step indices first_step .. first_step+steps-1.
StateGrid nca_run(StateGrid grid, NcaLayerParams& params, int steps, int level, std::span<const std::uint64_t> seeds,
                  float fire_rate, ad::BatchNormMode mode = ad::BatchNormMode::eval, int first_step = 0);

/// logistic(x), the readout of the logit channel.
inline float logistic(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace m3dnca
