#include "m3dnca/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace m3dnca {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::shape: return "shape";
        case ErrorKind::contract: return "contract";
        case ErrorKind::geometry: return "geometry";
        case ErrorKind::memory_plan: return "memory-plan";
        case ErrorKind::diverged: return "diverged";
        case ErrorKind::corrupt_file: return "corrupt-file";
        case ErrorKind::unsupported_format: return "unsupported-format";
        case ErrorKind::calibration: return "calibration";
        case ErrorKind::spec: return "spec";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

std::int64_t Extent3::max() const { return std::max({z, y, x}); }

std::string to_string(const Extent3& e) {
    std::ostringstream os;
    os << "(" << e.z << "," << e.y << "," << e.x << ")";
    return os.str();
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

static void validate_shape(const Shape& shape) {
    require(!shape.empty() && shape.size() <= 5, ErrorKind::shape,
            "tensor rank must be 1..5, got shape " + to_string(shape));
    for (auto s : shape)
        require(s >= 1, ErrorKind::shape, "tensor extents must be >= 1, got " + to_string(shape));
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    require(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_), ErrorKind::shape,
            "data length " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
}

std::int64_t Tensor::dim(int axis) const {
    require(axis >= 0 && axis < rank(), ErrorKind::shape, "axis out of range");
    return shape_[static_cast<std::size_t>(axis)];
}

Extent3 Tensor::extent() const {
    require(rank() == 5, ErrorKind::shape, "expected a [b,c,z,y,x] tensor, got " + to_string(shape_));
    return {shape_[2], shape_[3], shape_[4]};
}

float& Tensor::at(std::int64_t b, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data_[static_cast<std::size_t>((((b * shape_[1] + c) * shape_[2] + z) * shape_[3] + y) * shape_[4] + x)];
}

float Tensor::at(std::int64_t b, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data_[static_cast<std::size_t>((((b * shape_[1] + c) * shape_[2] + z) * shape_[3] + y) * shape_[4] + x)];
}

float* Tensor::channel(std::int64_t b, std::int64_t c) {
    return data_.data() + (b * shape_[1] + c) * shape_[2] * shape_[3] * shape_[4];
}

const float* Tensor::channel(std::int64_t b, std::int64_t c) const {
    return data_.data() + (b * shape_[1] + c) * shape_[2] * shape_[3] * shape_[4];
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_numel(shape) == numel(), ErrorKind::shape,
            "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    return Tensor(std::move(shape), data_);
}

void Tensor::assert_finite(const std::string& what) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) {
            fail(ErrorKind::diverged, what + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data(), b.data(), a.bytes()) == 0;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::shape,
            std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

}  // namespace m3dnca
