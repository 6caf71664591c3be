#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "m3dnca/tensor.hpp"

namespace m3dnca::fft {

using Complex = std::complex<double>;

/// In-place DFT of any length: iterative radix-2 for powers of two, Bluestein
/// chirp-z otherwise. Forward is unnormalized, inverse divides by n.
void transform(std::vector<Complex>& data, bool inverse);

/// Complex volume in z-major order.
struct Spectrum {
    Extent3 extent;
    std::vector<Complex> data;

    Complex& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return data[static_cast<std::size_t>((z * extent.y + y) * extent.x + x)];
    }
    const Complex& at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return data[static_cast<std::size_t>((z * extent.y + y) * extent.x + x)];
    }
};

/// Transform every line along `axis` (0 = z, 1 = y, 2 = x).
void transform_axis(Spectrum& s, int axis, bool inverse);

/// Real [z,y,x] channel -> full 3D spectrum, and back (imaginary part dropped).
Spectrum forward3(const float* values, const Extent3& e);
void inverse3(Spectrum s, double* out);

}  // namespace m3dnca::fft
