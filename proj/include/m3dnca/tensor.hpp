#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "m3dnca/error.hpp"

namespace m3dnca {

/// Spatial extent or coordinate triple in (z, y, x) order.
struct Extent3 {
    std::int64_t z = 0;
    std::int64_t y = 0;
    std::int64_t x = 0;

    std::int64_t voxels() const { return z * y * x; }
    std::int64_t max() const;
    std::int64_t operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
    std::int64_t& operator[](int axis) { return axis == 0 ? z : (axis == 1 ? y : x); }

    friend bool operator==(const Extent3&, const Extent3&) = default;
};

std::string to_string(const Extent3& e);

using Shape = std::vector<std::int64_t>;

std::string to_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

/// Dense row-major binary32 array of up to five axes. Volumetric tensors use
/// the axis order [batch, channel, z, y, x] with x varying fastest.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor volume(std::int64_t batch, std::int64_t channels, const Extent3& e, float fill = 0.0f) {
        return Tensor({batch, channels, e.z, e.y, e.x}, fill);
    }

    const Shape& shape() const { return shape_; }
    std::int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    /// Spatial extent of a rank-5 volume tensor.
    Extent3 extent() const;
    std::int64_t channel_stride() const { return extent().voxels(); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    std::vector<float>& storage() { return data_; }
    const std::vector<float>& storage() const { return data_; }

    float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    float& at(std::int64_t b, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x);
    float at(std::int64_t b, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const;

    /// Pointer to the first voxel of channel `c` of batch element `b`.
    float* channel(std::int64_t b, std::int64_t c);
    const float* channel(std::int64_t b, std::int64_t c) const;

    std::size_t bytes() const { return data_.size() * sizeof(float); }

    void fill(float v);
    Tensor reshaped(Shape shape) const;

    /// Throws ErrorKind::diverged naming `what` if any element is NaN or Inf.
    void assert_finite(const std::string& what) const;

    friend bool operator==(const Tensor& a, const Tensor& b);

private:
    Shape shape_;
    std::vector<float> data_;
};

/// True when both tensors have the same shape and identical bit patterns.
bool bitwise_equal(const Tensor& a, const Tensor& b);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace m3dnca
