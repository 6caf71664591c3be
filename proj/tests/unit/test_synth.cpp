#include <doctest.h>

#include <cmath>
#include <complex>
#include <numbers>
#include <queue>

#include "m3dnca/error.hpp"
#include "m3dnca/fft.hpp"
#include "m3dnca/synth.hpp"
#include "oracle.hpp"

using namespace m3dnca;
using C = std::complex<double>;

namespace {

std::vector<C> naive_dft(const std::vector<C>& a, bool inverse) {
    const auto n = a.size();
    std::vector<C> out(n);
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t k = 0; k < n; ++k) {
        C acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>((j * k) % n) / static_cast<double>(n);
            acc += a[j] * C(std::cos(ang), std::sin(ang));
        }
        out[k] = inverse ? acc / static_cast<double>(n) : acc;
    }
    return out;
}

// Naive 3D DFT magnitude peak.
double spectrum_peak(const Tensor& v) {
    const Extent3 e = v.extent();
    double peak = 0.0;
    for (std::int64_t kz = 0; kz < e.z; ++kz)
        for (std::int64_t ky = 0; ky < e.y; ++ky)
            for (std::int64_t kx = 0; kx < e.x; ++kx) {
                C acc = 0.0;
                for (std::int64_t z = 0; z < e.z; ++z)
                    for (std::int64_t y = 0; y < e.y; ++y)
                        for (std::int64_t x = 0; x < e.x; ++x) {
                            const double ang = -2.0 * std::numbers::pi *
                                               (static_cast<double>(kz * z) / e.z + static_cast<double>(ky * y) / e.y +
                                                static_cast<double>(kx * x) / e.x);
                            acc += static_cast<double>(v.at(0, 0, z, y, x)) * C(std::cos(ang), std::sin(ang));
                        }
                peak = std::max(peak, std::abs(acc));
            }
    return peak;
}

int components(const Tensor& label) {
    const Extent3 e = label.extent();
    std::vector<int> seen(static_cast<std::size_t>(e.voxels()), 0);
    int count = 0;
    for (std::int64_t start = 0; start < e.voxels(); ++start) {
        if (label[start] <= 0.5f || seen[static_cast<std::size_t>(start)]) continue;
        ++count;
        std::queue<std::int64_t> q;
        q.push(start);
        seen[static_cast<std::size_t>(start)] = 1;
        while (!q.empty()) {
            const std::int64_t i = q.front();
            q.pop();
            const std::int64_t z = i / (e.y * e.x), y = (i / e.x) % e.y, x = i % e.x;
            const std::int64_t nb[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x},
                                           {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
            for (const auto& n : nb) {
                if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= e.z || n[1] >= e.y || n[2] >= e.x) continue;
                const std::int64_t j = (n[0] * e.y + n[1]) * e.x + n[2];
                if (label[j] > 0.5f && !seen[static_cast<std::size_t>(j)]) {
                    seen[static_cast<std::size_t>(j)] = 1;
                    q.push(j);
                }
            }
        }
    }
    return count;
}

Tensor mask_from(std::initializer_list<int> bits) {
    Tensor t({1, 1, 1, 1, static_cast<std::int64_t>(bits.size())});
    std::int64_t i = 0;
    for (int b : bits) t[i++] = static_cast<float>(b);
    return t;
}

}  // namespace

TEST_CASE("fft matches the naive transform") {
    for (std::size_t n : {1u, 2u, 5u, 6u, 8u, 12u, 17u, 48u, 64u, 100u}) {
        std::vector<C> a(n);
        m3dnca::rng::Stream s(n);
        for (auto& v : a) v = C(s.uniform() - 0.5, s.uniform() - 0.5);
        auto fast = a;
        fft::transform(fast, false);
        const auto slow = naive_dft(a, false);
        double worst = 0.0;
        for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(fast[i] - slow[i]));
        CHECK(worst < 1e-9 * static_cast<double>(n));
        fft::transform(fast, true);
        worst = 0.0;
        for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(fast[i] - a[i]));
        CHECK(worst < 1e-12 * static_cast<double>(n));
    }
}

TEST_CASE("3d round trip") {
    const Tensor v = oracle::random_tensor({1, 1, 7, 8, 12}, 4, 0.0, 1.0);
    std::vector<double> back(static_cast<std::size_t>(v.numel()));
    fft::inverse3(fft::forward3(v.channel(0, 0), v.extent()), back.data());
    double worst = 0.0;
    for (std::int64_t i = 0; i < v.numel(); ++i) worst = std::max(worst, std::abs(back[static_cast<std::size_t>(i)] - v[i]));
    CHECK(worst < 1e-4);
}

TEST_CASE("generation") {
    SUBCASE("sphere volume matches the analytic volume") {
        SyntheticSpec spec;
        spec.extent = {40, 40, 40};
        spec.radius_min = spec.radius_max = 0.25;  // r = 10
        spec.center_jitter = 0.0;
        spec.count = 1;
        const Sample s = generate(spec, 1).front();
        double fg = 0.0;
        for (float v : s.label.values()) fg += v;
        const double expected = 4.0 / 3.0 * std::numbers::pi * 1000.0;
        CHECK(std::abs(fg - expected) / expected < 0.05);
        CHECK(components(s.label) == 1);
    }

    SUBCASE("fixed geometry gives identical labels and different textures") {
        SyntheticSpec spec;
        spec.extent = {24, 24, 24};
        spec.radius_min = spec.radius_max = 0.3;
        spec.center_jitter = 0.0;
        spec.count = 3;
        const auto samples = generate(spec, 9);
        CHECK(bitwise_equal(samples[0].label, samples[1].label));
        CHECK(bitwise_equal(samples[1].label, samples[2].label));
        CHECK_FALSE(bitwise_equal(samples[0].image, samples[1].image));
    }

    SUBCASE("deterministic per seed and normalized") {
        SyntheticSpec spec;
        spec.extent = {20, 24, 16};
        spec.family = ShapeFamily::ellipsoid;
        spec.count = 2;
        const auto a = generate(spec, 3), b = generate(spec, 3), c = generate(spec, 4);
        CHECK(bitwise_equal(a[1].image, b[1].image));
        CHECK_FALSE(bitwise_equal(a[1].image, c[1].image));
        float lo = 1.0f, hi = 0.0f;
        for (float v : a[0].image.values()) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(lo == 0.0f);
        CHECK(hi == 1.0f);
    }

    SUBCASE("foreground is brighter on average") {
        SyntheticSpec spec;
        spec.count = 1;
        const Sample s = generate(spec, 2).front();
        double fg = 0.0, bg = 0.0, nf = 0.0, nb = 0.0;
        for (std::int64_t i = 0; i < s.image.numel(); ++i) {
            if (s.label[i] > 0.5f) {
                fg += s.image[i];
                nf += 1;
            } else {
                bg += s.image[i];
                nb += 1;
            }
        }
        CHECK(fg / nf > bg / nb + 0.2);
    }

    SUBCASE("two-lobe shapes are one connected component") {
        SyntheticSpec spec;
        spec.family = ShapeFamily::two_lobe;
        spec.extent = {24, 28, 36};
        spec.count = 6;
        for (const auto& s : generate(spec, 17)) CHECK(components(s.label) == 1);
    }

    SUBCASE("shapes that do not fit are rejected") {
        SyntheticSpec spec;
        spec.radius_min = spec.radius_max = 0.45;
        spec.center_jitter = 0.2;
        spec.count = 4;
        try {
            generate(spec, 1);
            FAIL("expected a spec error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::spec);
        }
    }
}

TEST_CASE("noise corruption") {
    const Tensor flat = Tensor::volume(1, 1, {32, 32, 32}, 0.5f);
    CHECK(bitwise_equal(corrupt_noise(flat, 0.0, 3), flat));
    const Tensor raw = noise_unclamped(flat, 0.5, 3);
    double mean = 0.0;
    for (float v : raw.values()) mean += v;
    mean /= static_cast<double>(raw.numel());
    double var = 0.0;
    for (float v : raw.values()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(raw.numel() - 1);
    CHECK(std::abs(var - 0.25) / 0.25 < 0.05);
    const Tensor out = corrupt_noise(flat, 0.5, 3);
    CHECK(bitwise_equal(out, corrupt_noise(flat, 0.5, 3)));
    for (float v : out.values()) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("spike corruption") {
    SyntheticSpec spec;
    spec.extent = {8, 6, 10};
    spec.radius_min = spec.radius_max = 0.3;
    spec.count = 1;
    const Tensor img = generate(spec, 5).front().image;
    const Extent3 e = img.extent();
    const double n = static_cast<double>(e.voxels());

    SUBCASE("single spike is a pure cosine") {
        const Frequency f{2, 1, 3};
        const double intensity = 0.7;
        const auto raw = spikes_unnormalized(img, intensity, std::span(&f, 1));
        const double amplitude = 2.0 * intensity * spectrum_peak(img) / n;
        double worst = 0.0, energy = 0.0;
        for (std::int64_t z = 0, i = 0; z < e.z; ++z)
            for (std::int64_t y = 0; y < e.y; ++y)
                for (std::int64_t x = 0; x < e.x; ++x, ++i) {
                    const double r = raw[static_cast<std::size_t>(i)] - img[i];
                    const double want = amplitude * std::cos(2.0 * std::numbers::pi *
                                                             (2.0 * z / e.z + 1.0 * y / e.y + 3.0 * x / e.x));
                    worst = std::max(worst, std::abs(r - want));
                    energy += r * r;
                }
        CHECK(worst < 1e-5 * amplitude);
        // Parseval: residual energy equals the injected spectral energy / N.
        const double injected = 2.0 * std::pow(intensity * spectrum_peak(img), 2) / n;
        CHECK(std::abs(energy - injected) / injected < 1e-3);
    }

    SUBCASE("vanishing intensity is continuous") {
        const Tensor out = corrupt_spike(img, 1e-6, 3, 8);
        double worst = 0.0;
        for (std::int64_t i = 0; i < img.numel(); ++i) worst = std::max(worst, static_cast<double>(std::abs(out[i] - img[i])));
        CHECK(worst < 1e-3);
    }

    SUBCASE("deterministic and bounded") {
        const Tensor a = corrupt_spike(img, 5.0, 2, 8);
        CHECK(bitwise_equal(a, corrupt_spike(img, 5.0, 2, 8)));
        CHECK(a.shape() == img.shape());
        for (float v : a.values()) CHECK((v >= 0.0f && v <= 1.0f));
        for (const auto& f : spike_locations(e, 20, 8)) CHECK((f.z != 0 || f.y != 0 || f.x != 0));
    }
}

TEST_CASE("ghost corruption") {
    SUBCASE("impulse response has equally spaced echoes") {
        const int N = 48, G = 6;
        for (Axis axis : {Axis::x, Axis::y}) {
            const Extent3 e = axis == Axis::x ? Extent3{2, 3, N} : Extent3{2, N, 3};
            Tensor v = Tensor::volume(1, 1, e);
            const std::int64_t p = 5;
            if (axis == Axis::x) v.at(0, 0, 1, 2, p) = 1.0f;
            else v.at(0, 0, 1, p, 2) = 1.0f;
            const double intensity = 2.5;
            const auto raw = ghost_unnormalized(v, G, intensity, axis);
            const double removed = 1.0 - 1.0 / (1.0 + intensity);
            const double dc = removed / N;  // DC is spared from the attenuation
            std::vector<std::int64_t> peaks;
            for (std::int64_t i = 0; i < N; ++i) {
                const std::int64_t idx = axis == Axis::x ? (1 * 3 + 2) * N + i : (1 * N + i) * 3 + 2;
                const double dev = raw[static_cast<std::size_t>(idx)] - v[idx] - dc;
                if (std::abs(dev) > 1e-6) {
                    peaks.push_back(i);
                    CHECK(dev == doctest::Approx(-removed / G).epsilon(1e-6));
                }
            }
            REQUIRE(peaks.size() == static_cast<std::size_t>(G));
            for (int j = 0; j < G; ++j) CHECK(peaks[static_cast<std::size_t>(j)] == (p + j * N / G) % N);
        }
    }

    SUBCASE("attenuation never adds energy") {
        const Tensor v = oracle::random_tensor({1, 1, 6, 10, 14}, 3, 0.0, 1.0);
        double before = 0.0, after = 0.0;
        for (float x : v.values()) before += static_cast<double>(x) * x;
        for (double x : ghost_unnormalized(v, 3, 1.0, Axis::x)) after += x * x;
        CHECK(after <= before);
    }

    SUBCASE("zero intensity and parameter checks") {
        SyntheticSpec spec;
        spec.extent = {12, 12, 12};
        spec.count = 1;
        const Tensor img = generate(spec, 2).front().image;
        const Tensor same = corrupt_ghost(img, 6, 0.0, Axis::x, 1);
        double worst = 0.0;
        for (std::int64_t i = 0; i < img.numel(); ++i) worst = std::max(worst, static_cast<double>(std::abs(same[i] - img[i])));
        CHECK(worst < 1e-5);
        CHECK_THROWS_AS(corrupt_ghost(img, 1, 2.5, Axis::x, 1), Error);
        CHECK_THROWS_AS(parse_axis("w"), Error);
    }
}

TEST_CASE("dice") {
    const Tensor a = mask_from({1, 1, 1, 1, 0, 0, 0, 0});
    const Tensor b = mask_from({1, 1, 1, 0, 1, 1, 1, 0});
    CHECK(dice(a, b) == doctest::Approx(0.6));
    CHECK(dice(b, a) == doctest::Approx(0.6));
    CHECK(dice(a, a) == 1.0);
    CHECK(dice(a, mask_from({0, 0, 0, 0, 1, 1, 0, 0})) == 0.0);
    CHECK(dice(mask_from({0, 0}), mask_from({0, 0})) == 1.0);
    CHECK_THROWS_AS(dice(a, mask_from({1, 0})), Error);
}

TEST_CASE("corruption specs") {
    const CorruptionSpec n = parse_corruption("noise:std=0.5");
    CHECK(n.kind == CorruptionKind::noise);
    CHECK(n.noise_std == 0.5);
    const CorruptionSpec g = parse_corruption("ghost:count=6,intensity=2.5,axis=x");
    CHECK(g.ghost_count == 6);
    CHECK(g.ghost_intensity == 2.5);
    CHECK(g.ghost_axis == Axis::x);
    const CorruptionSpec s = parse_corruption("spike");
    CHECK(s.spike_intensity == 5.0);
    CHECK(s.spike_count == 1);

    for (const char* text : {"noise:std=0.25", "spike:intensity=5,count=3", "ghost:count=4,intensity=1.5,axis=z"})
        CHECK(to_string(parse_corruption(text)) == text);

    CHECK_THROWS_AS(parse_corruption("blur"), Error);
    CHECK_THROWS_AS(parse_corruption("noise:sigma=1"), Error);
    CHECK_THROWS_AS(parse_corruption("noise:std=abc"), Error);
    CHECK_THROWS_AS(parse_corruption("noise:std=-1"), Error);
    CHECK_THROWS_AS(parse_corruption("ghost:count=1"), Error);

    // The generic entry point dispatches to the specific transform.
    const Tensor v = generate_one(SyntheticSpec{}, 1, 0).image;
    CorruptionSpec c = parse_corruption("spike:intensity=2,count=2");
    c.seed = 17;
    const Tensor a = corrupt(v, c), b = corrupt_spike(v, 2.0, 2, 17);
    CHECK(std::equal(a.data(), a.data() + a.numel(), b.data()));
}
