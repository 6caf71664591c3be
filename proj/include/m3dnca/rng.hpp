#pragma once

#include <cstdint>
#include <initializer_list>

namespace m3dnca::rng {

// Counter-based randomness: every draw is a pure hash of its coordinates, so
// results do not depend on visiting order, tiling, or thread count.

/// SplitMix64 finalizer; a bijection on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t hash_words(std::initializer_list<std::uint64_t> words) {
    std::uint64_t h = 0x6a09e667f3bcc909ULL;
    for (auto w : words) h = mix64(h ^ mix64(w + 0x9e3779b97f4a7c15ULL));
    return h;
}

/// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

/// Bernoulli(fire_rate) draw for the cell at global coordinates (gz, gy, gx)
/// of `level` during `step`.
inline bool fires(std::uint64_t seed, int level, int step, std::int64_t gz, std::int64_t gy, std::int64_t gx,
                  float fire_rate) {
    const std::uint64_t h = hash_words({seed, static_cast<std::uint64_t>(level), static_cast<std::uint64_t>(step),
                                        static_cast<std::uint64_t>(gz), static_cast<std::uint64_t>(gy),
                                        static_cast<std::uint64_t>(gx)});
    // 24 bits keep the comparison exact in binary32.
    const float u = static_cast<float>(h >> 40) * 0x1.0p-24f;
    return u < fire_rate;
}

/// Seed for a derived stream, e.g. ensemble member i of a base seed.
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
    return hash_words({seed, tag, index});
}

/// Sequential view over the counter-based generator: draw n is hash(key, n).
class Stream {
public:
    explicit Stream(std::uint64_t key) : key_(key) {}

    std::uint64_t next_u64() { return hash_words({key_, counter_++}); }
    double uniform() { return to_unit(next_u64()); }

    /// Uniform integer in [lo, hi], unbiased.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

    /// Standard normal via Box-Muller.
    double normal();

    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace m3dnca::rng
