#pragma once

#include <cstdint>
#include <cstring>

namespace m3dnca::detail {

inline constexpr int kLanes = 16;

/// 16 binary32 lanes; element-wise arithmetic matches the scalar operations
/// exactly (no contraction), so vector and scalar tails agree bit for bit.
typedef float Lanes __attribute__((vector_size(kLanes * sizeof(float))));

inline Lanes load_lanes(const float* p) {
    Lanes v;
    std::memcpy(&v, p, sizeof v);
    return v;
}
inline void store_lanes(float* p, Lanes v) { std::memcpy(p, &v, sizeof v); }
inline Lanes splat(float x) {
    Lanes v;
    for (int l = 0; l < kLanes; ++l) v[l] = x;
    return v;
}

/// Dot product with 16 independent binary32 lanes folded in binary64. The
/// lane split keeps the loop vectorizable without reassociation flags while
/// the result stays a fixed function of the inputs.
inline double dot_lanes(const float* a, const float* b, std::int64_t n) {
    Lanes lanes{};
    std::int64_t i = 0;
    for (; i + kLanes <= n; i += kLanes) lanes += load_lanes(a + i) * load_lanes(b + i);
    double acc = 0.0;
    for (int l = 0; l < kLanes; ++l) acc += lanes[l];
    for (; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return acc;
}

inline double sum_lanes(const float* a, std::int64_t n) {
    Lanes lanes{};
    std::int64_t i = 0;
    for (; i + kLanes <= n; i += kLanes) lanes += load_lanes(a + i);
    double acc = 0.0;
    for (int l = 0; l < kLanes; ++l) acc += lanes[l];
    for (; i < n; ++i) acc += a[i];
    return acc;
}

}  // namespace m3dnca::detail
