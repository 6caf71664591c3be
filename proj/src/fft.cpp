#include "m3dnca/fft.hpp"

#include <bit>
#include <cmath>
#include <numbers>

namespace m3dnca::fft {
namespace {

void radix2(std::vector<Complex>& a, bool inverse) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const std::size_t half = len / 2;
        for (std::size_t i = 0; i < n; i += len)
            for (std::size_t k = 0; k < half; ++k) {
                // Twiddles from the angle directly; recurrences drift for long transforms.
                const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(len);
                const Complex w(std::cos(ang), std::sin(ang));
                const Complex u = a[i + k], v = a[i + k + half] * w;
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
    }
}

void bluestein(std::vector<Complex>& a, bool inverse) {
    const std::size_t n = a.size();
    const std::size_t m = std::bit_ceil(2 * n - 1);
    const double sign = inverse ? 1.0 : -1.0;
    std::vector<Complex> chirp(n);
    for (std::size_t k = 0; k < n; ++k) {
        // k^2 mod 2n keeps the angle argument small.
        const std::size_t k2 = (k * k) % (2 * n);
        const double ang = sign * std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
        chirp[k] = Complex(std::cos(ang), std::sin(ang));
    }
    std::vector<Complex> x(m), y(m);
    for (std::size_t k = 0; k < n; ++k) x[k] = a[k] * chirp[k];
    y[0] = std::conj(chirp[0]);
    for (std::size_t k = 1; k < n; ++k) y[k] = y[m - k] = std::conj(chirp[k]);
    radix2(x, false);
    radix2(y, false);
    for (std::size_t i = 0; i < m; ++i) x[i] *= y[i];
    radix2(x, true);
    for (std::size_t k = 0; k < n; ++k) a[k] = x[k] / static_cast<double>(m) * chirp[k];
}

}  // namespace

void transform(std::vector<Complex>& data, bool inverse) {
    const std::size_t n = data.size();
    if (n <= 1) return;
    if (std::has_single_bit(n)) radix2(data, inverse);
    else bluestein(data, inverse);
    if (inverse)
        for (auto& v : data) v /= static_cast<double>(n);
}

void transform_axis(Spectrum& s, int axis, bool inverse) {
    const Extent3& e = s.extent;
    const std::int64_t n = e[axis];
    if (n <= 1) return;
    const std::int64_t stride = axis == 0 ? e.y * e.x : axis == 1 ? e.x : 1;
    std::vector<Complex> line(static_cast<std::size_t>(n));
    for (std::int64_t base = 0; base < e.voxels(); ++base) {
        // Visit each line once, from the voxel whose coordinate on `axis` is 0.
        const std::int64_t coord = (base / stride) % n;
        if (coord != 0) continue;
        for (std::int64_t i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = s.data[static_cast<std::size_t>(base + i * stride)];
        transform(line, inverse);
        for (std::int64_t i = 0; i < n; ++i) s.data[static_cast<std::size_t>(base + i * stride)] = line[static_cast<std::size_t>(i)];
    }
}

Spectrum forward3(const float* values, const Extent3& e) {
    Spectrum s{e, std::vector<Complex>(static_cast<std::size_t>(e.voxels()))};
    for (std::int64_t i = 0; i < e.voxels(); ++i) s.data[static_cast<std::size_t>(i)] = values[i];
    for (int axis = 0; axis < 3; ++axis) transform_axis(s, axis, false);
    return s;
}

void inverse3(Spectrum s, double* out) {
    for (int axis = 0; axis < 3; ++axis) transform_axis(s, axis, true);
    for (std::int64_t i = 0; i < s.extent.voxels(); ++i) out[i] = s.data[static_cast<std::size_t>(i)].real();
}

}  // namespace m3dnca::fft
