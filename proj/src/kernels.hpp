#pragma once

#include <cstdint>

// Raw loops shared by the tape ops and the fused inference engine. Every
// routine computes each output voxel with a fixed operation order that does
// not depend on how many voxels are processed together.

namespace m3dnca::detail {

/// out[o * out_stride + i] = bias[o] + sum_f weight[o * F + f] * in[f * in_stride + i]
/// for i in [0, n). `bias` may be null (treated as zero).
void dense_rows(const float* in, std::int64_t in_stride, std::int64_t F, const float* weight, const float* bias,
                std::int64_t O, float* out, std::int64_t out_stride, std::int64_t n);

/// Copies a Z x Y x X plane into the centre of a zero border of width r.
void pad_plane(const float* src, std::int64_t Z, std::int64_t Y, std::int64_t X, int r, float* dst);

/// k^3 cross-correlation of a plane already padded by (k-1)/2; taps summed in
/// (dz, dy, dx) order. `row_acc` holds X floats.
void correlate_padded(const float* padded, const float* w, int k, std::int64_t Z, std::int64_t Y, std::int64_t X,
                      float* dst, bool accumulate, float* row_acc);

}  // namespace m3dnca::detail
