#include "m3dnca/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "kernels.hpp"
#include "simd.hpp"

namespace m3dnca {

namespace detail {

namespace {

template <int OB>
void dense_block(const float* in, std::int64_t in_stride, std::int64_t F, const float* weight, const float* bias,
                 std::int64_t o0, float* out, std::int64_t out_stride, std::int64_t n) {
    std::int64_t i0 = 0;
    for (; i0 + kLanes <= n; i0 += kLanes) {
        Lanes acc[OB];
        for (int oo = 0; oo < OB; ++oo) acc[oo] = splat(bias ? bias[o0 + oo] : 0.0f);
        for (std::int64_t f = 0; f < F; ++f) {
            const Lanes s = load_lanes(in + f * in_stride + i0);
            for (int oo = 0; oo < OB; ++oo) acc[oo] += weight[(o0 + oo) * F + f] * s;
        }
        for (int oo = 0; oo < OB; ++oo) store_lanes(out + (o0 + oo) * out_stride + i0, acc[oo]);
    }
    for (std::int64_t i = i0; i < n; ++i) {
        for (int oo = 0; oo < OB; ++oo) {
            float a = bias ? bias[o0 + oo] : 0.0f;
            for (std::int64_t f = 0; f < F; ++f) a += weight[(o0 + oo) * F + f] * in[f * in_stride + i];
            out[(o0 + oo) * out_stride + i] = a;
        }
    }
}

}  // namespace

void dense_rows(const float* in, std::int64_t in_stride, std::int64_t F, const float* weight, const float* bias,
                std::int64_t O, float* out, std::int64_t out_stride, std::int64_t n) {
    std::int64_t o0 = 0;
    for (; o0 + 8 <= O; o0 += 8) dense_block<8>(in, in_stride, F, weight, bias, o0, out, out_stride, n);
    for (; o0 < O; ++o0) dense_block<1>(in, in_stride, F, weight, bias, o0, out, out_stride, n);
}

void pad_plane(const float* src, std::int64_t Z, std::int64_t Y, std::int64_t X, int r, float* dst) {
    const std::int64_t Yp = Y + 2 * r, Xp = X + 2 * r;
    std::fill(dst, dst + (Z + 2 * r) * Yp * Xp, 0.0f);
    for (std::int64_t z = 0; z < Z; ++z)
        for (std::int64_t y = 0; y < Y; ++y) {
            const float* row = src + (z * Y + y) * X;
            std::copy(row, row + X, dst + ((z + r) * Yp + y + r) * Xp + r);
        }
}

void correlate_padded(const float* padded, const float* w, int k, std::int64_t Z, std::int64_t Y, std::int64_t X,
                      float* dst, bool accumulate, float* row_acc) {
    const std::int64_t Yp = Y + k - 1, Xp = X + k - 1;
    const std::int64_t vec_end = X - X % kLanes;
    for (std::int64_t z = 0; z < Z; ++z) {
        for (std::int64_t y = 0; y < Y; ++y) {
            std::fill(row_acc, row_acc + X, 0.0f);
            for (int dz = 0; dz < k; ++dz) {
                for (int dy = 0; dy < k; ++dy) {
                    const float* line = padded + ((z + dz) * Yp + y + dy) * Xp;
                    const float* wr = w + (dz * k + dy) * k;
                    for (int dx = 0; dx < k; ++dx) {
                        const float wv = wr[dx];
                        const float* s = line + dx;
                        for (std::int64_t x = 0; x < vec_end; x += kLanes)
                            store_lanes(row_acc + x, load_lanes(row_acc + x) + wv * load_lanes(s + x));
                        for (std::int64_t x = vec_end; x < X; ++x) row_acc[x] += wv * s[x];
                    }
                }
            }
            float* o = dst + (z * Y + y) * X;
            if (accumulate) {
                for (std::int64_t x = 0; x < X; ++x) o[x] += row_acc[x];
            } else {
                std::copy(row_acc, row_acc + X, o);
            }
        }
    }
}

}  // namespace detail

namespace ad {

using detail::dot_lanes;
using detail::sum_lanes;
using detail::kLanes;
using detail::Lanes;
using detail::load_lanes;
using detail::splat;

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::push(Tensor value, bool requires_grad, bool leaf) {
    account(static_cast<std::ptrdiff_t>(value.bytes()));
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, leaf});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::account(std::ptrdiff_t delta) {
    live_bytes_ = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(live_bytes_) + delta);
    peak_bytes_ = std::max(peak_bytes_, live_bytes_);
}

Var Tape::constant(Tensor value) { return push(std::move(value), false, true); }

Var Tape::parameter(Tensor value) { return push(std::move(value), true, true); }

Var Tape::record(Tensor output, std::vector<Var> inputs, BackwardFn backward) {
    require(!backward_done_, ErrorKind::contract, "tape already consumed by backward()");
    bool rg = false;
    for (const Var& in : inputs) {
        require(in.tape == this, ErrorKind::contract, "op input belongs to a different tape");
        rg = rg || nodes_[static_cast<std::size_t>(in.id)].requires_grad;
    }
    Var out = push(std::move(output), rg, false);
    if (rg) ops_.push_back(Op{out.id, std::move(backward)});
    return out;
}

const Tensor& Tape::value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    require(!n.value.empty() || n.is_leaf, ErrorKind::contract, "value already released by backward()");
    return n.value;
}

bool Tape::requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

Tensor Tape::grad(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (!n.grad.empty()) return n.grad;
    require(!n.value.empty(), ErrorKind::contract, "gradient requested for a released node");
    return Tensor(n.value.shape(), 0.0f);
}

Tensor& Tape::grad_accum(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    if (n.grad.empty()) {
        n.grad = Tensor(n.value.shape(), 0.0f);
        account(static_cast<std::ptrdiff_t>(n.grad.bytes()));
    }
    return n.grad;
}

const Tensor& Tape::grad_ref(Var v) { return grad_accum(v); }

void Tape::release(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    account(-static_cast<std::ptrdiff_t>(n.value.bytes() + n.grad.bytes()));
    n.value = Tensor{};
    n.grad = Tensor{};
}

void Tape::backward(Var loss) {
    require(loss.tape == this, ErrorKind::contract, "loss belongs to a different tape");
    require(!backward_done_, ErrorKind::contract, "backward() may only run once per tape");
    const Tensor& lv = value(loss);
    require(lv.numel() == 1, ErrorKind::contract, "loss must be scalar, got shape " + to_string(lv.shape()));
    backward_done_ = true;
    if (!requires_grad(loss)) return;
    grad_accum(loss).fill(1.0f);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        Node& out = nodes_[static_cast<std::size_t>(it->output)];
        if (!out.grad.empty()) it->backward(*this, Var{this, it->output});
        if (it->output != loss.id) release(it->output);
        it->backward = nullptr;
    }
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

struct Dims {
    std::int64_t b, c, z, y, x;
    std::int64_t voxels() const { return z * y * x; }
};

Dims dims5(const Tensor& t, const char* op) {
    require(t.rank() == 5, ErrorKind::shape, std::string(op) + ": expected [b,c,z,y,x], got " + to_string(t.shape()));
    return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

void add_into(Tensor& dst, const Tensor& src) {
    float* d = dst.data();
    const float* s = src.data();
    const std::int64_t n = dst.numel();
    for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

int kernel_size(const Tensor& kernels, std::int64_t channels, const char* op) {
    require(kernels.rank() == 4, ErrorKind::shape, std::string(op) + ": kernels must be [c,k,k,k]");
    const std::int64_t k = kernels.dim(1);
    require(kernels.dim(2) == k && kernels.dim(3) == k, ErrorKind::shape, std::string(op) + ": kernels must be cubic");
    require(k % 2 == 1, ErrorKind::config, std::string(op) + ": kernel size must be odd, got " + std::to_string(k));
    require(kernels.dim(0) == channels, ErrorKind::shape,
            std::string(op) + ": kernel channels " + std::to_string(kernels.dim(0)) + " != input channels " +
                std::to_string(channels));
    return static_cast<int>(k);
}

}  // namespace

// ---------------------------------------------------------------------------
// depthwise_conv3d

void kernels::depthwise_conv3d(const Tensor& input, const Tensor& kern, Tensor& out) {
    const Dims d = dims5(input, "depthwise_conv3d");
    const int k = kernel_size(kern, d.c, "depthwise_conv3d");
    if (out.shape() != input.shape()) out = Tensor(input.shape());
    const std::int64_t k3 = static_cast<std::int64_t>(k) * k * k;
#pragma omp parallel
    {
        const int r = (k - 1) / 2;
        std::vector<float> row(static_cast<std::size_t>(d.x));
        std::vector<float> padded(static_cast<std::size_t>((d.z + 2 * r) * (d.y + 2 * r) * (d.x + 2 * r)));
#pragma omp for schedule(static)
        for (std::int64_t bc = 0; bc < d.b * d.c; ++bc) {
            const std::int64_t b = bc / d.c, c = bc % d.c;
            detail::pad_plane(input.channel(b, c), d.z, d.y, d.x, r, padded.data());
            detail::correlate_padded(padded.data(), kern.data() + c * k3, k, d.z, d.y, d.x, out.channel(b, c),
                                     false, row.data());
        }
    }
}

Var depthwise_conv3d(Var input, Var kern) {
    Tape& T = *input.tape;
    Tensor out;
    kernels::depthwise_conv3d(T.value(input), T.value(kern), out);
    return T.record(std::move(out), {input, kern}, [input, kern](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& x = t.value(input);
        const Tensor& w = t.value(kern);
        const Dims d = dims5(x, "depthwise_conv3d");
        const int k = static_cast<int>(w.dim(1));
        const int r = (k - 1) / 2;
        const std::int64_t k3 = static_cast<std::int64_t>(k) * k * k;
        const std::int64_t Yp = d.y + 2 * r, Xp = d.x + 2 * r;
        const std::int64_t padded_size = (d.z + 2 * r) * Yp * Xp;
        if (t.requires_grad(input)) {
            Tensor& gx = t.grad_accum(input);
            // Input gradient is a correlation with the point-reflected kernel.
            std::vector<float> flipped(static_cast<std::size_t>(d.c * k3));
            for (std::int64_t c = 0; c < d.c; ++c)
                for (std::int64_t i = 0; i < k3; ++i)
                    flipped[static_cast<std::size_t>(c * k3 + i)] = w[c * k3 + (k3 - 1 - i)];
#pragma omp parallel
            {
                std::vector<float> row(static_cast<std::size_t>(d.x));
                std::vector<float> padded(static_cast<std::size_t>(padded_size));
#pragma omp for schedule(static)
                for (std::int64_t bc = 0; bc < d.b * d.c; ++bc) {
                    const std::int64_t b = bc / d.c, c = bc % d.c;
                    detail::pad_plane(g.channel(b, c), d.z, d.y, d.x, r, padded.data());
                    detail::correlate_padded(padded.data(), flipped.data() + c * k3, k, d.z, d.y, d.x,
                                             gx.channel(b, c), true, row.data());
                }
            }
        }
        if (t.requires_grad(kern)) {
            Tensor& gw = t.grad_accum(kern);
#pragma omp parallel
            {
                std::vector<float> padded(static_cast<std::size_t>(padded_size));
#pragma omp for schedule(static)
                for (std::int64_t c = 0; c < d.c; ++c) {
                    // Full lanes accumulate per tap across all rows and fold once;
                    // the ragged row tail goes straight to binary64.
                    std::vector<Lanes> lanes(static_cast<std::size_t>(k3), splat(0.0f));
                    std::vector<double> acc(static_cast<std::size_t>(k3), 0.0);
                    const std::int64_t vec_end = d.x - d.x % kLanes;
                    for (std::int64_t b = 0; b < d.b; ++b) {
                        const float* gp = g.channel(b, c);
                        detail::pad_plane(x.channel(b, c), d.z, d.y, d.x, r, padded.data());
                        for (std::int64_t z = 0; z < d.z; ++z) {
                            for (std::int64_t y = 0; y < d.y; ++y) {
                                const float* grow = gp + (z * d.y + y) * d.x;
                                for (int dz = 0; dz < k; ++dz) {
                                    for (int dy = 0; dy < k; ++dy) {
                                        const float* xrow = padded.data() + ((z + dz) * Yp + y + dy) * Xp;
                                        const std::size_t tap = static_cast<std::size_t>((dz * k + dy) * k);
                                        for (int dx = 0; dx < k; ++dx) {
                                            Lanes v = lanes[tap + dx];
                                            for (std::int64_t i = 0; i < vec_end; i += kLanes)
                                                v += load_lanes(grow + i) * load_lanes(xrow + dx + i);
                                            lanes[tap + dx] = v;
                                            double tail = 0.0;
                                            for (std::int64_t i = vec_end; i < d.x; ++i)
                                                tail += static_cast<double>(grow[i]) * xrow[dx + i];
                                            acc[tap + dx] += tail;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (std::int64_t i = 0; i < k3; ++i) {
                        const Lanes& v = lanes[static_cast<std::size_t>(i)];
                        for (int l = 0; l < kLanes; ++l) acc[static_cast<std::size_t>(i)] += v[l];
                    }
                    for (std::int64_t i = 0; i < k3; ++i) gw[c * k3 + i] += static_cast<float>(acc[static_cast<std::size_t>(i)]);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// dense_per_voxel

namespace {

void check_dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    const Dims d = dims5(x, "dense_per_voxel");
    require(w.rank() == 2, ErrorKind::shape, "dense_per_voxel: weight must be [f_out, f_in]");
    require(w.dim(1) == d.c, ErrorKind::shape,
            "dense_per_voxel: weight inner dim " + std::to_string(w.dim(1)) + " != input channels " +
                std::to_string(d.c));
    require(b.rank() == 1 && b.dim(0) == w.dim(0), ErrorKind::shape, "dense_per_voxel: bias must be [f_out]");
}

constexpr std::int64_t kDenseChunk = 512;

void dense_forward(const Tensor& x, const float* weight, const float* bias, std::int64_t O, Tensor& out) {
    const Dims d = dims5(x, "dense_per_voxel");
    const Shape shape{d.b, O, d.z, d.y, d.x};
    if (out.shape() != shape) out = Tensor(shape);
    const std::int64_t V = d.voxels();
    const std::int64_t chunks = (V + kDenseChunk - 1) / kDenseChunk;
#pragma omp parallel for schedule(static)
    for (std::int64_t job = 0; job < d.b * chunks; ++job) {
        const std::int64_t b = job / chunks, v0 = (job % chunks) * kDenseChunk;
        const std::int64_t n = std::min(kDenseChunk, V - v0);
        detail::dense_rows(x.channel(b, 0) + v0, V, d.c, weight, bias, O, out.channel(b, 0) + v0, V, n);
    }
}

}  // namespace

void kernels::dense_per_voxel(const Tensor& input, const Tensor& weight, const Tensor& bias, Tensor& out) {
    check_dense(input, weight, bias);
    dense_forward(input, weight.data(), bias.data(), weight.dim(0), out);
}

Var dense_per_voxel(Var input, Var weight, Var bias) {
    Tape& T = *input.tape;
    Tensor out;
    kernels::dense_per_voxel(T.value(input), T.value(weight), T.value(bias), out);
    return T.record(std::move(out), {input, weight, bias}, [input, weight, bias](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& x = t.value(input);
        const Tensor& w = t.value(weight);
        const Dims d = dims5(x, "dense_per_voxel");
        const std::int64_t O = w.dim(0), F = w.dim(1), V = d.voxels();
        if (t.requires_grad(input)) {
            std::vector<float> wt(static_cast<std::size_t>(O * F));
            for (std::int64_t o = 0; o < O; ++o)
                for (std::int64_t f = 0; f < F; ++f) wt[static_cast<std::size_t>(f * O + o)] = w[o * F + f];
            Tensor gx;
            dense_forward(g, wt.data(), nullptr, F, gx);
            add_into(t.grad_accum(input), gx);
        }
        if (t.requires_grad(weight)) {
            Tensor& gw = t.grad_accum(weight);
#pragma omp parallel for schedule(static)
            for (std::int64_t of = 0; of < O * F; ++of) {
                const std::int64_t o = of / F, f = of % F;
                double acc = 0.0;
                for (std::int64_t b = 0; b < d.b; ++b) acc += dot_lanes(g.channel(b, o), x.channel(b, f), V);
                gw[of] += static_cast<float>(acc);
            }
        }
        if (t.requires_grad(bias)) {
            Tensor& gb = t.grad_accum(bias);
            for (std::int64_t o = 0; o < O; ++o) {
                double acc = 0.0;
                for (std::int64_t b = 0; b < d.b; ++b) acc += sum_lanes(g.channel(b, o), V);
                gb[o] += static_cast<float>(acc);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// batchnorm3d

Var batchnorm3d(Var input, Var gamma, Var beta, BatchNormStats& stats, BatchNormMode mode) {
    Tape& T = *input.tape;
    const Tensor& x = T.value(input);
    const Dims d = dims5(x, "batchnorm3d");
    const Tensor& ga = T.value(gamma);
    const Tensor& be = T.value(beta);
    require(ga.numel() == d.c && be.numel() == d.c, ErrorKind::shape, "batchnorm3d: affine params must be [c]");
    require(stats.running_mean.numel() == d.c && stats.running_var.numel() == d.c, ErrorKind::shape,
            "batchnorm3d: running stats must be [c]");
    const std::int64_t V = d.voxels();
    const std::int64_t N = d.b * V;
    require(mode == BatchNormMode::eval || N >= 2, ErrorKind::contract,
            "batchnorm3d: degenerate batch, train mode needs at least 2 values per channel");

    std::vector<float> shift(static_cast<std::size_t>(d.c));
    std::vector<float> inv_std(static_cast<std::size_t>(d.c));
    for (std::int64_t c = 0; c < d.c; ++c) {
        if (mode == BatchNormMode::train) {
            double s = 0.0;
            for (std::int64_t b = 0; b < d.b; ++b) s += sum_lanes(x.channel(b, c), V);
            const double m = s / static_cast<double>(N);
            double ss = 0.0;
            for (std::int64_t b = 0; b < d.b; ++b) {
                const float* p = x.channel(b, c);
                for (std::int64_t i = 0; i < V; ++i) {
                    const double dv = p[i] - m;
                    ss += dv * dv;
                }
            }
            const double var = ss / static_cast<double>(N);
            shift[static_cast<std::size_t>(c)] = static_cast<float>(m);
            inv_std[static_cast<std::size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + kBatchNormEps));
            const double unbiased = var * static_cast<double>(N) / static_cast<double>(N - 1);
            stats.running_mean[c] = static_cast<float>((1.0 - kBatchNormMomentum) * stats.running_mean[c] +
                                                       kBatchNormMomentum * m);
            stats.running_var[c] = static_cast<float>((1.0 - kBatchNormMomentum) * stats.running_var[c] +
                                                      kBatchNormMomentum * unbiased);
        } else {
            shift[static_cast<std::size_t>(c)] = stats.running_mean[c];
            inv_std[static_cast<std::size_t>(c)] =
                static_cast<float>(1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) + kBatchNormEps));
        }
    }

    Tensor out(x.shape());
#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < d.b * d.c; ++bc) {
        const std::int64_t b = bc / d.c, c = bc % d.c;
        const float m = shift[static_cast<std::size_t>(c)], is = inv_std[static_cast<std::size_t>(c)];
        const float gv = ga[c], bv = be[c];
        const float* p = x.channel(b, c);
        float* o = out.channel(b, c);
        for (std::int64_t i = 0; i < V; ++i) o[i] = (p[i] - m) * is * gv + bv;
    }

    return T.record(std::move(out), {input, gamma, beta},
                    [input, gamma, beta, shift, inv_std, mode](Tape& t, Var self) {
                        const Tensor& g = t.grad_ref(self);
                        const Tensor& xv = t.value(input);
                        const Tensor& gav = t.value(gamma);
                        const Dims dd = dims5(xv, "batchnorm3d");
                        const std::int64_t VV = dd.voxels();
                        const double NN = static_cast<double>(dd.b * VV);
                        std::vector<double> sg(static_cast<std::size_t>(dd.c), 0.0);
                        std::vector<double> sgx(static_cast<std::size_t>(dd.c), 0.0);
#pragma omp parallel for schedule(static)
                        for (std::int64_t c = 0; c < dd.c; ++c) {
                            const float m = shift[static_cast<std::size_t>(c)];
                            const float is = inv_std[static_cast<std::size_t>(c)];
                            double a = 0.0, bsum = 0.0;
                            for (std::int64_t b = 0; b < dd.b; ++b) {
                                const float* gp = g.channel(b, c);
                                const float* xp = xv.channel(b, c);
                                for (std::int64_t i = 0; i < VV; ++i) {
                                    a += gp[i];
                                    bsum += static_cast<double>(gp[i]) * ((xp[i] - m) * is);
                                }
                            }
                            sg[static_cast<std::size_t>(c)] = a;
                            sgx[static_cast<std::size_t>(c)] = bsum;
                        }
                        if (t.requires_grad(gamma)) {
                            Tensor& gg = t.grad_accum(gamma);
                            for (std::int64_t c = 0; c < dd.c; ++c) gg[c] += static_cast<float>(sgx[static_cast<std::size_t>(c)]);
                        }
                        if (t.requires_grad(beta)) {
                            Tensor& gb = t.grad_accum(beta);
                            for (std::int64_t c = 0; c < dd.c; ++c) gb[c] += static_cast<float>(sg[static_cast<std::size_t>(c)]);
                        }
                        if (t.requires_grad(input)) {
                            Tensor& gx = t.grad_accum(input);
#pragma omp parallel for schedule(static)
                            for (std::int64_t bc = 0; bc < dd.b * dd.c; ++bc) {
                                const std::int64_t b = bc / dd.c, c = bc % dd.c;
                                const float m = shift[static_cast<std::size_t>(c)];
                                const float is = inv_std[static_cast<std::size_t>(c)];
                                const float* gp = g.channel(b, c);
                                const float* xp = xv.channel(b, c);
                                float* op = gx.channel(b, c);
                                if (mode == BatchNormMode::train) {
                                    const float scale_ = static_cast<float>(gav[c] * is / NN);
                                    const float mg = static_cast<float>(sg[static_cast<std::size_t>(c)]);
                                    const float mgx = static_cast<float>(sgx[static_cast<std::size_t>(c)]);
                                    const float nf = static_cast<float>(NN);
                                    for (std::int64_t i = 0; i < VV; ++i) {
                                        const float xh = (xp[i] - m) * is;
                                        op[i] += scale_ * (nf * gp[i] - mg - xh * mgx);
                                    }
                                } else {
                                    const float s = gav[c] * is;
                                    for (std::int64_t i = 0; i < VV; ++i) op[i] += gp[i] * s;
                                }
                            }
                        }
                    });
}

// ---------------------------------------------------------------------------
// resample

std::int64_t resampled_extent(std::int64_t extent, Ratio f) {
    require(f.num > 0 && f.den > 0, ErrorKind::config, "resample: scale factor must be positive");
    const double v = std::round(static_cast<double>(extent) * f.value());
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(v));
}

Extent3 resampled_extent(const Extent3& e, const std::array<Ratio, 3>& f) {
    return {resampled_extent(e.z, f[0]), resampled_extent(e.y, f[1]), resampled_extent(e.x, f[2])};
}

namespace {

struct Tap {
    std::int64_t src;
    double w;
};

// Per-axis sampling table: taps[out] lists source indices and weights.
std::vector<std::vector<Tap>> axis_taps(std::int64_t in, std::int64_t out, Ratio f, ResampleMode mode) {
    std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(out));
    for (std::int64_t o = 0; o < out; ++o) {
        auto& t = taps[static_cast<std::size_t>(o)];
        switch (mode) {
            case ResampleMode::nearest: {
                const std::int64_t s = std::min(in - 1, (o * f.den) / f.num);
                t.push_back({s, 1.0});
                break;
            }
            case ResampleMode::trilinear: {
                double s = (static_cast<double>(o) + 0.5) * static_cast<double>(f.den) / static_cast<double>(f.num) - 0.5;
                s = std::clamp(s, 0.0, static_cast<double>(in - 1));
                const auto i0 = static_cast<std::int64_t>(std::floor(s));
                const std::int64_t i1 = std::min(i0 + 1, in - 1);
                const double a = s - static_cast<double>(i0);
                t.push_back({i0, 1.0 - a});
                if (i1 != i0 && a > 0.0) t.push_back({i1, a});
                break;
            }
            case ResampleMode::meanpool: {
                for (std::int64_t j = 0; j < f.den; ++j) t.push_back({o * f.den + j, 1.0 / static_cast<double>(f.den)});
                break;
            }
        }
    }
    return taps;
}

}  // namespace

Var resample(Var input, const std::array<Ratio, 3>& factor, ResampleMode mode) {
    Tape& T = *input.tape;
    const Tensor& x = T.value(input);
    const Dims d = dims5(x, "resample");
    const Extent3 in_e = x.extent();
    Extent3 out_e = resampled_extent(in_e, factor);
    if (mode == ResampleMode::meanpool) {
        for (int a = 0; a < 3; ++a) {
            require(factor[static_cast<std::size_t>(a)].num == 1, ErrorKind::config,
                    "resample: meanpool factor must be 1/integer");
            require(in_e[a] % factor[static_cast<std::size_t>(a)].den == 0, ErrorKind::shape,
                    "resample: meanpool extent " + to_string(in_e) + " not divisible by pooling factor");
            out_e[a] = in_e[a] / factor[static_cast<std::size_t>(a)].den;
        }
    }
    auto tz = axis_taps(in_e.z, out_e.z, factor[0], mode);
    auto ty = axis_taps(in_e.y, out_e.y, factor[1], mode);
    auto tx = axis_taps(in_e.x, out_e.x, factor[2], mode);

    Tensor out = Tensor::volume(d.b, d.c, out_e);
#pragma omp parallel for schedule(static)
    for (std::int64_t bc = 0; bc < d.b * d.c; ++bc) {
        const float* s = x.channel(bc / d.c, bc % d.c);
        float* o = out.channel(bc / d.c, bc % d.c);
        for (std::int64_t z = 0; z < out_e.z; ++z)
            for (std::int64_t y = 0; y < out_e.y; ++y)
                for (std::int64_t xx = 0; xx < out_e.x; ++xx) {
                    double acc = 0.0;
                    for (const Tap& a : tz[static_cast<std::size_t>(z)])
                        for (const Tap& b : ty[static_cast<std::size_t>(y)])
                            for (const Tap& c : tx[static_cast<std::size_t>(xx)])
                                acc += a.w * b.w * c.w * s[(a.src * in_e.y + b.src) * in_e.x + c.src];
                    o[(z * out_e.y + y) * out_e.x + xx] = static_cast<float>(acc);
                }
    }
    return T.record(std::move(out), {input}, [input, tz, ty, tx, in_e, out_e](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& gx = t.grad_accum(input);
        const Dims dd = dims5(gx, "resample");
#pragma omp parallel for schedule(static)
        for (std::int64_t bc = 0; bc < dd.b * dd.c; ++bc) {
            const float* gp = g.channel(bc / dd.c, bc % dd.c);
            float* o = gx.channel(bc / dd.c, bc % dd.c);
            for (std::int64_t z = 0; z < out_e.z; ++z)
                for (std::int64_t y = 0; y < out_e.y; ++y)
                    for (std::int64_t xx = 0; xx < out_e.x; ++xx) {
                        const double gv = gp[(z * out_e.y + y) * out_e.x + xx];
                        for (const Tap& a : tz[static_cast<std::size_t>(z)])
                            for (const Tap& b : ty[static_cast<std::size_t>(y)])
                                for (const Tap& c : tx[static_cast<std::size_t>(xx)])
                                    o[(a.src * in_e.y + b.src) * in_e.x + c.src] +=
                                        static_cast<float>(a.w * b.w * c.w * gv);
                    }
        }
    });
}

// ---------------------------------------------------------------------------
// Cropping and upscaling

namespace {

// Copies/accumulates a sub-volume where source coordinate along each axis is
// (origin + p) / scale.
void gather_region(const Tensor& src, Tensor& dst, const std::vector<Extent3>& origins, std::int64_t scale) {
    const Dims dd = dims5(dst, "crop");
    const Extent3 se = src.extent();
    const Extent3 de = dst.extent();
    for (std::int64_t b = 0; b < dd.b; ++b) {
        const Extent3& o = origins[static_cast<std::size_t>(b)];
        for (std::int64_t c = 0; c < dd.c; ++c) {
            const float* sp = src.channel(b, c);
            float* dp = dst.channel(b, c);
            for (std::int64_t z = 0; z < de.z; ++z) {
                const std::int64_t sz = (o.z + z) / scale;
                for (std::int64_t y = 0; y < de.y; ++y) {
                    const std::int64_t sy = (o.y + y) / scale;
                    const float* srow = sp + (sz * se.y + sy) * se.x;
                    float* drow = dp + (z * de.y + y) * de.x;
                    for (std::int64_t x = 0; x < de.x; ++x) drow[x] = srow[(o.x + x) / scale];
                }
            }
        }
    }
}

void scatter_region(const Tensor& g, Tensor& gx, const std::vector<Extent3>& origins, std::int64_t scale) {
    const Dims dg = dims5(g, "crop");
    const Extent3 ge = g.extent();
    const Extent3 xe = gx.extent();
    for (std::int64_t b = 0; b < dg.b; ++b) {
        const Extent3& o = origins[static_cast<std::size_t>(b)];
        for (std::int64_t c = 0; c < dg.c; ++c) {
            const float* gp = g.channel(b, c);
            float* xp = gx.channel(b, c);
            for (std::int64_t z = 0; z < ge.z; ++z) {
                const std::int64_t sz = (o.z + z) / scale;
                for (std::int64_t y = 0; y < ge.y; ++y) {
                    const std::int64_t sy = (o.y + y) / scale;
                    float* xrow = xp + (sz * xe.y + sy) * xe.x;
                    const float* grow = gp + (z * ge.y + y) * ge.x;
                    for (std::int64_t x = 0; x < ge.x; ++x) xrow[(o.x + x) / scale] += grow[x];
                }
            }
        }
    }
}

Var region_op(Var input, std::int64_t scale, const std::vector<Extent3>& origins, const Extent3& extent,
              const char* name) {
    Tape& T = *input.tape;
    const Tensor& x = T.value(input);
    const Dims d = dims5(x, name);
    require(static_cast<std::int64_t>(origins.size()) == d.b, ErrorKind::shape,
            std::string(name) + ": need one origin per batch element");
    const Extent3 se = x.extent();
    for (const Extent3& o : origins) {
        for (int a = 0; a < 3; ++a) {
            require(o[a] >= 0 && extent[a] >= 1 && (o[a] + extent[a] - 1) / scale < se[a], ErrorKind::geometry,
                    std::string(name) + ": region origin " + to_string(o) + " extent " + to_string(extent) +
                        " exceeds source " + to_string(se));
        }
    }
    Tensor out = Tensor::volume(d.b, d.c, extent);
    gather_region(x, out, origins, scale);
    return T.record(std::move(out), {input}, [input, origins, scale](Tape& t, Var self) {
        scatter_region(t.grad_ref(self), t.grad_accum(input), origins, scale);
    });
}

}  // namespace

Var crop(Var input, const Extent3& origin, const Extent3& extent) {
    const std::int64_t b = input.value().dim(0);
    return region_op(input, 1, std::vector<Extent3>(static_cast<std::size_t>(b), origin), extent, "crop");
}

Var crop(Var input, const std::vector<Extent3>& origins, const Extent3& extent) {
    return region_op(input, 1, origins, extent, "crop");
}

Var upsample_nearest_crop(Var input, std::int64_t scale, const std::vector<Extent3>& origins, const Extent3& extent) {
    require(scale >= 1, ErrorKind::config, "upsample_nearest_crop: scale must be >= 1");
    return region_op(input, scale, origins, extent, "upsample_nearest_crop");
}

// ---------------------------------------------------------------------------
// Channel and elementwise ops

Var concat_channels(Var a, Var b) {
    Tape& T = *a.tape;
    const Tensor& xa = T.value(a);
    const Tensor& xb = T.value(b);
    const Dims da = dims5(xa, "concat_channels");
    const Dims db = dims5(xb, "concat_channels");
    require(da.b == db.b && xa.extent() == xb.extent(), ErrorKind::shape, "concat_channels: batch/extent mismatch");
    const std::int64_t V = da.voxels();
    Tensor out = Tensor::volume(da.b, da.c + db.c, xa.extent());
    for (std::int64_t bi = 0; bi < da.b; ++bi) {
        std::copy(xa.channel(bi, 0), xa.channel(bi, 0) + da.c * V, out.channel(bi, 0));
        std::copy(xb.channel(bi, 0), xb.channel(bi, 0) + db.c * V, out.channel(bi, da.c));
    }
    return T.record(std::move(out), {a, b}, [a, b, ca = da.c, cb = db.c, V](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        const std::int64_t B = g.dim(0);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_accum(a);
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const float* s = g.channel(bi, 0);
                float* o = ga.channel(bi, 0);
                for (std::int64_t i = 0; i < ca * V; ++i) o[i] += s[i];
            }
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_accum(b);
            for (std::int64_t bi = 0; bi < B; ++bi) {
                const float* s = g.channel(bi, ca);
                float* o = gb.channel(bi, 0);
                for (std::int64_t i = 0; i < cb * V; ++i) o[i] += s[i];
            }
        }
    });
}

Var relu(Var input) {
    Tape& T = *input.tape;
    const Tensor& x = T.value(input);
    Tensor out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
    return T.record(std::move(out), {input}, [input](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad_accum(input);
        const std::int64_t n2 = g.numel();
        for (std::int64_t i = 0; i < n2; ++i) gx[i] += y[i] > 0.0f ? g[i] : 0.0f;
    });
}

Var sigmoid_channel(Var input, std::int64_t c) {
    Tape& T = *input.tape;
    const Tensor& x = T.value(input);
    const Dims d = dims5(x, "sigmoid_channel");
    require(c >= 0 && c < d.c, ErrorKind::shape, "sigmoid_channel: channel out of range");
    const std::int64_t V = d.voxels();
    Tensor out = Tensor::volume(d.b, 1, x.extent());
    for (std::int64_t b = 0; b < d.b; ++b) {
        const float* s = x.channel(b, c);
        float* o = out.channel(b, 0);
        for (std::int64_t i = 0; i < V; ++i) o[i] = 1.0f / (1.0f + std::exp(-s[i]));
    }
    return T.record(std::move(out), {input}, [input, c, V](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad_accum(input);
        for (std::int64_t b = 0; b < g.dim(0); ++b) {
            const float* gp = g.channel(b, 0);
            const float* yp = y.channel(b, 0);
            float* o = gx.channel(b, c);
            for (std::int64_t i = 0; i < V; ++i) o[i] += gp[i] * yp[i] * (1.0f - yp[i]);
        }
    });
}

Var masked_add(Var state, Var update, const Tensor& mask) {
    Tape& T = *state.tape;
    const Tensor& s = T.value(state);
    const Tensor& u = T.value(update);
    require_same_shape(s, u, "masked_add");
    const Dims d = dims5(s, "masked_add");
    require(mask.rank() == 5 && mask.dim(0) == d.b && mask.dim(1) == 1 && mask.extent() == s.extent(),
            ErrorKind::shape, "masked_add: mask must be [b,1,z,y,x]");
    const std::int64_t V = d.voxels();
    Tensor out(s.shape());
    for (std::int64_t b = 0; b < d.b; ++b) {
        const float* m = mask.channel(b, 0);
        for (std::int64_t c = 0; c < d.c; ++c) {
            const float* sp = s.channel(b, c);
            const float* up = u.channel(b, c);
            float* o = out.channel(b, c);
            for (std::int64_t i = 0; i < V; ++i) o[i] = sp[i] + up[i] * m[i];
        }
    }
    return T.record(std::move(out), {state, update}, [state, update, mask, V](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        if (t.requires_grad(state)) add_into(t.grad_accum(state), g);
        if (t.requires_grad(update)) {
            Tensor& gu = t.grad_accum(update);
            for (std::int64_t b = 0; b < g.dim(0); ++b) {
                const float* m = mask.channel(b, 0);
                for (std::int64_t c = 0; c < g.dim(1); ++c) {
                    const float* gp = g.channel(b, c);
                    float* o = gu.channel(b, c);
                    for (std::int64_t i = 0; i < V; ++i) o[i] += gp[i] * m[i];
                }
            }
        }
    });
}

Var assign_channel(Var input, std::int64_t c, const Tensor& values) {
    Tape& T = *input.tape;
    const Tensor& x = T.value(input);
    const Dims d = dims5(x, "assign_channel");
    require(c >= 0 && c < d.c, ErrorKind::shape, "assign_channel: channel out of range");
    require(values.rank() == 5 && values.dim(0) == d.b && values.dim(1) == 1 && values.extent() == x.extent(),
            ErrorKind::shape, "assign_channel: values must be [b,1,z,y,x]");
    const std::int64_t V = d.voxels();
    Tensor out = x;
    for (std::int64_t b = 0; b < d.b; ++b) std::copy(values.channel(b, 0), values.channel(b, 0) + V, out.channel(b, c));
    return T.record(std::move(out), {input}, [input, c, V](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& gx = t.grad_accum(input);
        for (std::int64_t b = 0; b < g.dim(0); ++b)
            for (std::int64_t ch = 0; ch < g.dim(1); ++ch) {
                if (ch == c) continue;
                const float* gp = g.channel(b, ch);
                float* o = gx.channel(b, ch);
                for (std::int64_t i = 0; i < V; ++i) o[i] += gp[i];
            }
    });
}

Var add(Var a, Var b) {
    Tape& T = *a.tape;
    const Tensor& xa = T.value(a);
    const Tensor& xb = T.value(b);
    require_same_shape(xa, xb, "add");
    Tensor out(xa.shape());
    for (std::int64_t i = 0; i < xa.numel(); ++i) out[i] = xa[i] + xb[i];
    return T.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        if (t.requires_grad(a)) add_into(t.grad_accum(a), g);
        if (t.requires_grad(b)) add_into(t.grad_accum(b), g);
    });
}

Var mul(Var a, Var b) {
    Tape& T = *a.tape;
    const Tensor& xa = T.value(a);
    const Tensor& xb = T.value(b);
    require_same_shape(xa, xb, "mul");
    Tensor out(xa.shape());
    for (std::int64_t i = 0; i < xa.numel(); ++i) out[i] = xa[i] * xb[i];
    return T.record(std::move(out), {a, b}, [a, b](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        const Tensor& va = t.value(a);
        const Tensor& vb = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_accum(a);
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb[i];
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_accum(b);
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

Var scale(Var a, float s) {
    Tape& T = *a.tape;
    const Tensor& x = T.value(a);
    Tensor out(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
    return T.record(std::move(out), {a}, [a, s](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        Tensor& ga = t.grad_accum(a);
        for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
    });
}

Var sum(Var a) {
    Tape& T = *a.tape;
    const Tensor& x = T.value(a);
    Tensor out({1}, static_cast<float>(sum_lanes(x.data(), x.numel())));
    return T.record(std::move(out), {a}, [a](Tape& t, Var self) {
        const float g = t.grad_ref(self)[0];
        Tensor& ga = t.grad_accum(a);
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var mean(Var a) {
    Tape& T = *a.tape;
    const Tensor& x = T.value(a);
    const auto n = static_cast<double>(x.numel());
    Tensor out({1}, static_cast<float>(sum_lanes(x.data(), x.numel()) / n));
    return T.record(std::move(out), {a}, [a, n](Tape& t, Var self) {
        const float g = static_cast<float>(t.grad_ref(self)[0] / n);
        Tensor& ga = t.grad_accum(a);
        for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

Var stack(const std::vector<Var>& scalars) {
    require(!scalars.empty(), ErrorKind::shape, "stack: no inputs");
    Tape& T = *scalars.front().tape;
    Tensor out({static_cast<std::int64_t>(scalars.size())});
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        const Tensor& v = T.value(scalars[i]);
        require(v.numel() == 1, ErrorKind::shape, "stack: inputs must be scalars");
        out[static_cast<std::int64_t>(i)] = v[0];
    }
    return T.record(std::move(out), scalars, [scalars](Tape& t, Var self) {
        const Tensor& g = t.grad_ref(self);
        for (std::size_t i = 0; i < scalars.size(); ++i)
            if (t.requires_grad(scalars[i])) t.grad_accum(scalars[i])[0] += g[static_cast<std::int64_t>(i)];
    });
}

// ---------------------------------------------------------------------------
// Adam

AdamState::AdamState(const std::vector<const Tensor*>& params) {
    for (const Tensor* p : params) {
        m_.emplace_back(p->shape(), 0.0f);
        v_.emplace_back(p->shape(), 0.0f);
    }
}

void adam_step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& cfg) {
    require(params.size() == grads.size() && params.size() == state.m_.size(), ErrorKind::shape,
            "adam_step: parameter, gradient and state counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(params[i]->shape() == grads[i].shape() && grads[i].shape() == state.m_[i].shape(), ErrorKind::shape,
                "adam_step: shape mismatch for parameter " + std::to_string(i));
        grads[i].assert_finite("adam_step gradient " + std::to_string(i) + " (training diverged)");
    }
    state.t_ += 1;
    const double t = static_cast<double>(state.t_);
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), t);
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        Tensor& m = state.m_[i];
        Tensor& v = state.v_[i];
        const Tensor& g = grads[i];
        for (std::int64_t j = 0; j < p.numel(); ++j) {
            const double gj = g[j];
            const double mj = static_cast<double>(cfg.beta1) * m[j] + (1.0 - cfg.beta1) * gj;
            const double vj = static_cast<double>(cfg.beta2) * v[j] + (1.0 - cfg.beta2) * gj * gj;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double step = cfg.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg.eps);
            p[j] = static_cast<float>(p[j] - step);
        }
    }
}

}  // namespace ad
}  // namespace m3dnca
