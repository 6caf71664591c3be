#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "m3dnca/checkpoint.hpp"
#include "m3dnca/tensor.hpp"

namespace m3dnca {

struct Segmentation {
    Tensor prob;  // [1, 1, z, y, x]
    Tensor mask;  // prob > 0.5
};

/// How each step is swept over the grid. Every level uses the same tile
/// extents, clipped to the level grid.
struct TilePlan {
    Extent3 volume;
    Extent3 tile;
    std::vector<Extent3> level_extents;
    std::vector<int> halo;
    std::vector<int> steps;
    std::vector<std::int64_t> tiles_per_level;
    /// Sum over levels of steps x tiles.
    std::int64_t tile_step_work = 0;
    std::size_t param_bytes = 0;
    /// 2 buffers x c x (largest tile + halo) voxels x 4 bytes + parameters.
    std::size_t peak_bytes = 0;
};

TilePlan plan_for_tile(const Extent3& volume, const ModelConfig& config, const Extent3& tile);

/// Largest cubic tile (clipped per axis) whose plan fits `budget_bytes`.
/// Memory-plan error with the minimal feasible budget when none does.
TilePlan memory_plan(const Extent3& volume, const ModelConfig& config, std::size_t budget_bytes);

/// Transient working set of the step engine, measured while it runs.
struct EngineStats {
    std::size_t peak_bytes = 0;
    std::int64_t tile_steps = 0;
};

struct SegmentOptions {
    /// Normalize with per-step batch statistics instead of running
    /// statistics. Only available full-frame.
    bool batch_stats_bn = false;
};

/// Full-frame cascade over all levels.
Segmentation segment(const Tensor& volume, const Checkpoint& model, std::uint64_t seed,
                     const SegmentOptions& options = {});

/// The same cascade swept tile by tile; bit-identical to segment().
Segmentation tiled_segment(const Tensor& volume, const Checkpoint& model, std::uint64_t seed,
                           std::size_t budget_bytes);
Segmentation run_plan(const Tensor& volume, const Checkpoint& model, std::uint64_t seed, const TilePlan& plan,
                      EngineStats* stats = nullptr);

/// Seed of ensemble member i.
std::uint64_t member_seed(std::uint64_t seed, int member);

struct EnsembleResult {
    Tensor mean_prob;
    Tensor sd_map;  // population standard deviation
    Tensor mask;    // mean_prob > 0.5
    int n_members = 0;
    double nqm = std::numeric_limits<double>::quiet_NaN();
    std::vector<Tensor> members;  // kept only on request
};

struct EnsembleOptions {
    SegmentOptions segment{};
    /// Route members through tiled execution when non-zero.
    std::size_t budget_bytes = 0;
    bool keep_members = false;
};

EnsembleResult ensemble_segment(const Tensor& volume, const Checkpoint& model, int n, std::uint64_t seed,
                                const EnsembleOptions& options = {});

/// Mean and population SD of member probability volumes, accumulated in
/// binary64.
EnsembleResult summarize_members(const std::vector<Tensor>& members);

}  // namespace m3dnca
