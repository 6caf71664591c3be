#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "m3dnca/tensor.hpp"

namespace m3dnca::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode differentiation record. Single writer; build one per forward
/// pass. Values are kept until `backward` consumes the op that produced them.
class Tape {
public:
    /// Called with the op's output node during the reverse sweep.
    using BackwardFn = std::function<void(Tape&, Var)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf that never receives a gradient.
    Var constant(Tensor value);
    /// Leaf whose gradient is retained after `backward`.
    Var parameter(Tensor value);

    /// Records an op. `backward` reads output gradients through `grad` and
    /// accumulates into inputs through `grad_accum`.
    Var record(Tensor output, std::vector<Var> inputs, BackwardFn backward);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;

    /// Gradient of the loss w.r.t. `v`; zeros if nothing flowed into it.
    Tensor grad(Var v) const;
    /// Mutable gradient buffer, allocated as zeros on first use.
    Tensor& grad_accum(Var v);
    /// Read-only gradient of an op output during `backward` (zeros if absent).
    const Tensor& grad_ref(Var v);

    /// Runs the reverse sweep from a scalar (single-element) loss node.
    void backward(Var loss);

    std::size_t op_count() const { return ops_.size(); }
    std::size_t live_bytes() const { return live_bytes_; }
    std::size_t peak_bytes() const { return peak_bytes_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool is_leaf = true;
    };
    struct Op {
        int output;
        BackwardFn backward;
    };

    Var push(Tensor value, bool requires_grad, bool leaf);
    void account(std::ptrdiff_t delta);
    void release(int id);

    std::deque<Node> nodes_;
    std::vector<Op> ops_;
    Tensor zero_scratch_;
    bool backward_done_ = false;
    std::size_t live_bytes_ = 0;
    std::size_t peak_bytes_ = 0;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. All volumetric tensors are [b, c, z, y, x].

/// Per-channel 3D cross-correlation with zero padding of (k-1)/2.
/// kernels: [c, k, k, k] with k odd.
Var depthwise_conv3d(Var input, Var kernels);

/// Identical affine map at every voxel: weight [f_out, f_in], bias [f_out].
Var dense_per_voxel(Var input, Var weight, Var bias);

enum class BatchNormMode { train, eval };

struct BatchNormStats {
    Tensor running_mean;
    Tensor running_var;
};

inline constexpr float kBatchNormMomentum = 0.1f;
inline constexpr float kBatchNormEps = 1e-5f;

/// 3D batch normalization over (b, z, y, x) per channel. Train mode updates
/// `stats` in place with momentum 0.1 (unbiased variance); eval mode reads it.
Var batchnorm3d(Var input, Var gamma, Var beta, BatchNormStats& stats, BatchNormMode mode);

/// Positive rational scale factor.
struct Ratio {
    std::int64_t num = 1;
    std::int64_t den = 1;
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

enum class ResampleMode { nearest, trilinear, meanpool };

/// Output extent per axis: round(extent * factor), at least 1.
std::int64_t resampled_extent(std::int64_t extent, Ratio factor);
Extent3 resampled_extent(const Extent3& extent, const std::array<Ratio, 3>& factor);

Var resample(Var input, const std::array<Ratio, 3>& factor, ResampleMode mode);

/// Sub-volume [origin, origin + extent) of every batch element.
Var crop(Var input, const Extent3& origin, const Extent3& extent);
/// Per-batch-element origins; all crops share `extent`.
Var crop(Var input, const std::vector<Extent3>& origins, const Extent3& extent);

/// Nearest upscale by integer `scale` followed by a per-element crop, without
/// materializing the upscaled volume: out[p] = in[floor((origin + p) / scale)].
Var upsample_nearest_crop(Var input, std::int64_t scale, const std::vector<Extent3>& origins, const Extent3& extent);

Var concat_channels(Var a, Var b);
Var relu(Var input);
/// logistic() of channel `c`, shape [b, 1, z, y, x].
Var sigmoid_channel(Var input, std::int64_t c);
/// state + update * mask, mask [b, 1, z, y, x] broadcast over channels.
Var masked_add(Var state, Var update, const Tensor& mask);
/// Replaces channel `c` with `values` ([b, 1, z, y, x]); no gradient flows
/// through the overwritten channel.
Var assign_channel(Var input, std::int64_t c, const Tensor& values);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, float s);
/// Sum of all elements into a [1] tensor, reduced in binary64.
Var sum(Var a);
/// Mean of a rank-1 tensor into a [1] tensor.
Var mean(Var a);
/// Stacks scalars ([1] tensors) into a rank-1 tensor.
Var stack(const std::vector<Var>& scalars);

// ---------------------------------------------------------------------------
// Forward-only kernels, shared by the tape ops and the inference engine.

namespace kernels {

void depthwise_conv3d(const Tensor& input, const Tensor& kernels, Tensor& out);
void dense_per_voxel(const Tensor& input, const Tensor& weight, const Tensor& bias, Tensor& out);

}  // namespace kernels

// ---------------------------------------------------------------------------

struct AdamConfig {
    float lr = 1.6e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float eps = 1e-8f;
};

/// First and second moments per parameter tensor.
class AdamState {
public:
    AdamState() = default;
    explicit AdamState(const std::vector<const Tensor*>& params);

    std::int64_t step() const { return t_; }
    const std::vector<Tensor>& first_moment() const { return m_; }
    const std::vector<Tensor>& second_moment() const { return v_; }

private:
    friend void adam_step(std::vector<Tensor*>&, const std::vector<Tensor>&, AdamState&, const AdamConfig&);
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::int64_t t_ = 0;
};

/// Bias-corrected Adam update in place. Throws ErrorKind::diverged on a
/// non-finite gradient before touching any parameter.
void adam_step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& cfg);

}  // namespace m3dnca::ad
