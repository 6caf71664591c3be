#include "m3dnca/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "m3dnca/error.hpp"
#include "m3dnca/fft.hpp"
#include "m3dnca/rng.hpp"
#include "text.hpp"

namespace m3dnca {
namespace {

constexpr std::uint64_t kSampleTag = 0x5a3b1e;
constexpr std::uint64_t kNoiseTag = 0x2015e;
constexpr std::uint64_t kSpikeTag = 0x591ce;

void require_volume(const Tensor& v, const char* what) {
    require(v.rank() == 5 && v.dim(0) == 1 && v.dim(1) == 1, ErrorKind::shape,
            std::string(what) + ": expected a [1,1,z,y,x] volume, got " + to_string(v.shape()));
}

struct Ellipsoid {
    double cz, cy, cx, rz, ry, rx;
    bool contains(double z, double y, double x) const {
        const double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
        return a * a + b * b + c * c <= 1.0;
    }
    // Must lie inside the voxel grid, whose cells span [-0.5, e - 0.5].
    void require_inside(const Extent3& e) const {
        const bool ok = cz - rz >= -0.5 && cz + rz <= e.z - 0.5 && cy - ry >= -0.5 && cy + ry <= e.y - 0.5 &&
                        cx - rx >= -0.5 && cx + rx <= e.x - 0.5;
        require(ok, ErrorKind::spec, "synthetic shape does not fit inside the volume");
    }
};

double lerp(double lo, double hi, double u) { return lo + (hi - lo) * u; }

}  // namespace

ShapeFamily parse_shape_family(const std::string& name) {
    if (name == "sphere") return ShapeFamily::sphere;
    if (name == "ellipsoid") return ShapeFamily::ellipsoid;
    if (name == "two-lobe" || name == "two_lobe") return ShapeFamily::two_lobe;
    fail(ErrorKind::spec, "unknown shape family '" + name + "' (sphere, ellipsoid, two-lobe)");
}

const char* to_string(ShapeFamily f) {
    switch (f) {
        case ShapeFamily::sphere: return "sphere";
        case ShapeFamily::ellipsoid: return "ellipsoid";
        case ShapeFamily::two_lobe: return "two-lobe";
    }
    return "?";
}

void SyntheticSpec::validate() const {
    require(extent.z >= 1 && extent.y >= 1 && extent.x >= 1, ErrorKind::spec, "volume extents must be positive");
    require(radius_min > 0.0 && radius_min <= radius_max, ErrorKind::spec, "need 0 < radius_min <= radius_max");
    require(center_jitter >= 0.0, ErrorKind::spec, "center_jitter must be >= 0");
    require(noise_std >= 0.0 && bias_strength >= 0.0 && bias_strength < 1.0, ErrorKind::spec,
            "need noise_std >= 0 and 0 <= bias_strength < 1");
    require(foreground_mean != background_mean, ErrorKind::spec, "foreground and background means must differ");
    require(count >= 1, ErrorKind::spec, "count must be >= 1");
}

Sample generate_one(const SyntheticSpec& spec, std::uint64_t seed, int index) {
    spec.validate();
    const Extent3 e = spec.extent;
    rng::Stream s(rng::derive(seed, kSampleTag, static_cast<std::uint64_t>(index)));
    const double centre[3] = {(e.z - 1) / 2.0 + spec.center_jitter * e.z * (2.0 * s.uniform() - 1.0),
                              (e.y - 1) / 2.0 + spec.center_jitter * e.y * (2.0 * s.uniform() - 1.0),
                              (e.x - 1) / 2.0 + spec.center_jitter * e.x * (2.0 * s.uniform() - 1.0)};
    const double smallest = static_cast<double>(std::min({e.z, e.y, e.x}));

    std::vector<Ellipsoid> parts;
    switch (spec.family) {
        case ShapeFamily::sphere: {
            const double r = lerp(spec.radius_min, spec.radius_max, s.uniform()) * smallest;
            parts.push_back({centre[0], centre[1], centre[2], r, r, r});
            break;
        }
        case ShapeFamily::ellipsoid: {
            const double rz = lerp(spec.radius_min, spec.radius_max, s.uniform()) * e.z;
            const double ry = lerp(spec.radius_min, spec.radius_max, s.uniform()) * e.y;
            const double rx = lerp(spec.radius_min, spec.radius_max, s.uniform()) * e.x;
            parts.push_back({centre[0], centre[1], centre[2], rz, ry, rx});
            break;
        }
        case ShapeFamily::two_lobe: {
            // A large lobe and a smaller one whose centers are one large radius
            // apart along x, so they always overlap.
            const double r = lerp(spec.radius_min, spec.radius_max, s.uniform()) * smallest * 0.6;
            parts.push_back({centre[0], centre[1], centre[2] - 0.4 * r, r, r, r});
            parts.push_back({centre[0], centre[1], centre[2] + 0.6 * r, 0.8 * r, 0.8 * r, 0.8 * r});
            break;
        }
    }
    for (const auto& p : parts) p.require_inside(e);

    Sample out{Tensor::volume(1, 1, e), Tensor::volume(1, 1, e)};
    float* lab = out.label.channel(0, 0);
    std::int64_t fg = 0;
    for (std::int64_t z = 0, i = 0; z < e.z; ++z)
        for (std::int64_t y = 0; y < e.y; ++y)
            for (std::int64_t x = 0; x < e.x; ++x, ++i) {
                bool in = false;
                for (const auto& p : parts) in = in || p.contains(static_cast<double>(z), static_cast<double>(y), static_cast<double>(x));
                lab[i] = in ? 1.0f : 0.0f;
                fg += in;
            }
    const double fraction = static_cast<double>(fg) / static_cast<double>(e.voxels());
    require(fraction >= 0.01 && fraction <= 0.5, ErrorKind::spec,
            "foreground fraction " + std::to_string(fraction) + " outside [0.01, 0.5]; adjust the radius range");

    const double wz = s.uniform(), wy = s.uniform(), wx = s.uniform();
    const double phase = 2.0 * std::numbers::pi * s.uniform();
    std::vector<double> img(static_cast<std::size_t>(e.voxels()));
    for (std::int64_t z = 0, i = 0; z < e.z; ++z)
        for (std::int64_t y = 0; y < e.y; ++y)
            for (std::int64_t x = 0; x < e.x; ++x, ++i) {
                const double base = spec.background_mean + (spec.foreground_mean - spec.background_mean) * lab[i];
                const double arg = std::numbers::pi * (wz * z / e.z + wy * y / e.y + wx * x / e.x) + phase;
                const double bias = 1.0 + spec.bias_strength * std::cos(arg);
                img[static_cast<std::size_t>(i)] = (base + spec.noise_std * s.normal()) * bias;
            }
    out.image = renormalize(img, out.image.shape());
    return out;
}

std::vector<Sample> generate(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (int i = 0; i < spec.count; ++i) out.push_back(generate_one(spec, seed, i));
    return out;
}

Tensor noise_unclamped(const Tensor& volume, double std, std::uint64_t seed) {
    require_volume(volume, "corrupt_noise");
    require(std >= 0.0, ErrorKind::spec, "noise std must be >= 0");
    Tensor out = volume;
    if (std == 0.0) return out;
    rng::Stream s(rng::derive(seed, kNoiseTag));
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(out[i] + std * s.normal());
    return out;
}

Tensor corrupt_noise(const Tensor& volume, double std, std::uint64_t seed) {
    Tensor out = noise_unclamped(volume, std, seed);
    for (float& v : out.storage()) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

std::vector<Frequency> spike_locations(const Extent3& e, int num_spikes, std::uint64_t seed) {
    require(num_spikes >= 1, ErrorKind::spec, "num_spikes must be >= 1");
    require(e.voxels() >= 2, ErrorKind::spec, "spikes need at least two voxels");
    rng::Stream s(rng::derive(seed, kSpikeTag));
    std::vector<Frequency> out;
    for (int i = 0; i < num_spikes; ++i) {
        const std::int64_t k = s.uniform_int(1, e.voxels() - 1);  // never DC
        out.push_back({k / (e.y * e.x), (k / e.x) % e.y, k % e.x});
    }
    return out;
}

std::vector<double> spikes_unnormalized(const Tensor& volume, double intensity, std::span<const Frequency> where) {
    require_volume(volume, "corrupt_spike");
    require(intensity > 0.0, ErrorKind::spec, "spike intensity must be > 0");
    const Extent3 e = volume.extent();
    fft::Spectrum spec = fft::forward3(volume.channel(0, 0), e);
    double peak = 0.0;
    for (const auto& v : spec.data) peak = std::max(peak, std::abs(v));
    const double amount = intensity * peak;
    auto wrap = [](std::int64_t k, std::int64_t n) { return ((k % n) + n) % n; };
    for (const Frequency& f : where) {
        const std::int64_t z = wrap(f.z, e.z), y = wrap(f.y, e.y), x = wrap(f.x, e.x);
        const std::int64_t cz = wrap(-z, e.z), cy = wrap(-y, e.y), cx = wrap(-x, e.x);
        spec.at(z, y, x) += amount;
        if (cz != z || cy != y || cx != x) spec.at(cz, cy, cx) += amount;
    }
    std::vector<double> out(static_cast<std::size_t>(e.voxels()));
    fft::inverse3(std::move(spec), out.data());
    return out;
}

Tensor corrupt_spike(const Tensor& volume, double intensity, int num_spikes, std::uint64_t seed) {
    const auto where = spike_locations(volume.extent(), num_spikes, seed);
    return renormalize(spikes_unnormalized(volume, intensity, where), volume.shape());
}

Axis parse_axis(const std::string& name) {
    if (name == "z") return Axis::z;
    if (name == "y") return Axis::y;
    if (name == "x") return Axis::x;
    fail(ErrorKind::spec, "axis must be z, y or x, got '" + name + "'");
}

std::vector<double> ghost_unnormalized(const Tensor& volume, int num_ghosts, double intensity, Axis axis) {
    require_volume(volume, "corrupt_ghost");
    require(num_ghosts >= 2, ErrorKind::spec, "num_ghosts must be >= 2");
    require(intensity >= 0.0, ErrorKind::spec, "ghost intensity must be >= 0");
    const Extent3 e = volume.extent();
    const int a = static_cast<int>(axis);
    fft::Spectrum s{e, std::vector<fft::Complex>(static_cast<std::size_t>(e.voxels()))};
    const float* src = volume.channel(0, 0);
    for (std::int64_t i = 0; i < e.voxels(); ++i) s.data[static_cast<std::size_t>(i)] = src[i];
    fft::transform_axis(s, a, false);
    const double keep = 1.0 / (1.0 + intensity);
    for (std::int64_t z = 0; z < e.z; ++z)
        for (std::int64_t y = 0; y < e.y; ++y)
            for (std::int64_t x = 0; x < e.x; ++x) {
                const std::int64_t k = a == 0 ? z : a == 1 ? y : x;
                if (k != 0 && k % num_ghosts == 0) s.at(z, y, x) *= keep;
            }
    fft::transform_axis(s, a, true);
    std::vector<double> out(static_cast<std::size_t>(e.voxels()));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s.data[i].real();
    return out;
}

Tensor corrupt_ghost(const Tensor& volume, int num_ghosts, double intensity, Axis axis, std::uint64_t) {
    return renormalize(ghost_unnormalized(volume, num_ghosts, intensity, axis), volume.shape());
}

void CorruptionSpec::validate() const {
    switch (kind) {
        case CorruptionKind::noise:
            require(noise_std > 0.0, ErrorKind::spec, "noise std must be positive");
            break;
        case CorruptionKind::spike:
            require(spike_intensity > 0.0 && spike_count >= 1, ErrorKind::spec,
                    "spike intensity and count must be positive");
            break;
        case CorruptionKind::ghost:
            require(ghost_count >= 2 && ghost_intensity > 0.0, ErrorKind::spec,
                    "ghost count must be >= 2 and intensity positive");
            break;
    }
}

CorruptionSpec parse_corruption(const std::string& text) {
    CorruptionSpec c;
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    if (kind == "noise") c.kind = CorruptionKind::noise;
    else if (kind == "spike") c.kind = CorruptionKind::spike;
    else if (kind == "ghost") c.kind = CorruptionKind::ghost;
    else fail(ErrorKind::spec, "unknown corruption '" + kind + "' (noise, spike, ghost)");
    if (colon != std::string::npos) {
        for (const std::string& item : detail::split(std::string_view(text).substr(colon + 1), ',')) {
            const auto eq = item.find('=');
            require(eq != std::string::npos, ErrorKind::spec, "corruption parameter '" + item + "' is not key=value");
            const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
            bool ok = true;
            if (c.kind == CorruptionKind::noise && key == "std") ok = detail::parse_number(value, c.noise_std);
            else if (c.kind == CorruptionKind::spike && key == "intensity") ok = detail::parse_number(value, c.spike_intensity);
            else if (c.kind == CorruptionKind::spike && key == "count") ok = detail::parse_number(value, c.spike_count);
            else if (c.kind == CorruptionKind::ghost && key == "count") ok = detail::parse_number(value, c.ghost_count);
            else if (c.kind == CorruptionKind::ghost && key == "intensity") ok = detail::parse_number(value, c.ghost_intensity);
            else if (c.kind == CorruptionKind::ghost && key == "axis") c.ghost_axis = parse_axis(value);
            else fail(ErrorKind::spec, "unknown parameter '" + key + "' for " + kind);
            require(ok, ErrorKind::spec, "bad value '" + value + "' for " + kind + " " + key);
        }
    }
    c.validate();
    return c;
}

std::string to_string(const CorruptionSpec& c) {
    using detail::format_number;
    switch (c.kind) {
        case CorruptionKind::noise: return "noise:std=" + format_number(c.noise_std);
        case CorruptionKind::spike:
            return "spike:intensity=" + format_number(c.spike_intensity) + ",count=" + std::to_string(c.spike_count);
        case CorruptionKind::ghost: {
            static const char* axes[] = {"z", "y", "x"};
            return "ghost:count=" + std::to_string(c.ghost_count) + ",intensity=" + format_number(c.ghost_intensity) +
                   ",axis=" + axes[static_cast<int>(c.ghost_axis)];
        }
    }
    return "?";
}

Tensor corrupt(const Tensor& volume, const CorruptionSpec& c) {
    c.validate();
    switch (c.kind) {
        case CorruptionKind::noise: return corrupt_noise(volume, c.noise_std, c.seed);
        case CorruptionKind::spike: return corrupt_spike(volume, c.spike_intensity, c.spike_count, c.seed);
        case CorruptionKind::ghost: return corrupt_ghost(volume, c.ghost_count, c.ghost_intensity, c.ghost_axis, c.seed);
    }
    fail(ErrorKind::spec, "unknown corruption kind");
}

Tensor renormalize(std::span<const double> values, const Shape& shape) {
    Tensor out(shape);
    require(static_cast<std::int64_t>(values.size()) == out.numel(), ErrorKind::shape, "renormalize: size mismatch");
    if (values.empty()) return out;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double span = *hi - *lo;
    if (span <= 0.0) return out;
    for (std::size_t i = 0; i < values.size(); ++i)
        out[static_cast<std::int64_t>(i)] = static_cast<float>((values[i] - *lo) / span);
    return out;
}

double dice(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dice");
    std::int64_t na = 0, nb = 0, both = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const bool x = a[i] > 0.5f, y = b[i] > 0.5f;
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

}  // namespace m3dnca
