#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3dnca/tensor.hpp"

namespace m3dnca {

// Single volumes are [1, 1, z, y, x] tensors throughout.

enum class ShapeFamily { sphere, ellipsoid, two_lobe };

ShapeFamily parse_shape_family(const std::string& name);
const char* to_string(ShapeFamily f);

struct SyntheticSpec {
    Extent3 extent{32, 32, 32};
    ShapeFamily family = ShapeFamily::sphere;
    /// Radius range as a fraction of the extent (of the smallest axis for
    /// spheres and two-lobe shapes, per axis for ellipsoids).
    double radius_min = 0.25;
    double radius_max = 0.35;
    /// Maximum center offset from the volume center, as a fraction of the extent.
    double center_jitter = 0.1;
    double foreground_mean = 0.7;
    double background_mean = 0.3;
    double noise_std = 0.05;
    /// Peak relative amplitude of the smooth multiplicative bias field.
    double bias_strength = 0.1;
    int count = 8;

    void validate() const;
};

struct Sample {
    Tensor image;
    Tensor label;
};

/// Deterministic per seed; sample i depends only on (seed, i).
std::vector<Sample> generate(const SyntheticSpec& spec, std::uint64_t seed);
Sample generate_one(const SyntheticSpec& spec, std::uint64_t seed, int index);

/// Additive Gaussian noise, clamped to [0, 1].
Tensor corrupt_noise(const Tensor& volume, double std, std::uint64_t seed);
/// The same noise before clamping.
Tensor noise_unclamped(const Tensor& volume, double std, std::uint64_t seed);

/// Integer frequency index; negative values wrap.
struct Frequency {
    std::int64_t z = 0, y = 0, x = 0;
};

/// Spike artifact: adds intensity * max|spectrum| at each frequency and its
/// conjugate partner, then renormalizes to [0, 1].
Tensor corrupt_spike(const Tensor& volume, double intensity, int num_spikes, std::uint64_t seed);
std::vector<Frequency> spike_locations(const Extent3& e, int num_spikes, std::uint64_t seed);
/// Spike injection before renormalization, as float64 values in voxel order.
std::vector<double> spikes_unnormalized(const Tensor& volume, double intensity, std::span<const Frequency> where);

enum class Axis { z = 0, y = 1, x = 2 };
Axis parse_axis(const std::string& name);

/// Ghosting: every num_ghosts-th k-space line along `axis` (DC excluded) is
/// scaled by 1/(1+intensity), then the result is renormalized to [0, 1].
/// Ghosting is fully determined by its parameters; the seed is accepted so all
/// corruptions share one calling convention.
Tensor corrupt_ghost(const Tensor& volume, int num_ghosts, double intensity, Axis axis, std::uint64_t seed);
std::vector<double> ghost_unnormalized(const Tensor& volume, int num_ghosts, double intensity, Axis axis);

enum class CorruptionKind { noise, spike, ghost };

/// One QC stress transform with its parameters. Text form is
/// "kind[:key=value,...]", e.g. "noise:std=0.5" or "ghost:count=6,intensity=2.5,axis=y";
/// omitted keys keep their defaults.
struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::noise;
    double noise_std = 0.5;
    double spike_intensity = 5.0;
    int spike_count = 1;
    int ghost_count = 6;
    double ghost_intensity = 2.5;
    Axis ghost_axis = Axis::y;
    std::uint64_t seed = 0;

    void validate() const;
};

CorruptionSpec parse_corruption(const std::string& text);
/// Canonical text form (seed excluded); parse_corruption inverts it.
std::string to_string(const CorruptionSpec& spec);
Tensor corrupt(const Tensor& volume, const CorruptionSpec& spec);

/// Min-max rescale to [0, 1]; a constant input maps to zeros.
Tensor renormalize(std::span<const double> values, const Shape& shape);

/// 2|A and B| / (|A| + |B|) on masks thresholded at 0.5; 1 when both are empty.
double dice(const Tensor& a, const Tensor& b);

}  // namespace m3dnca
