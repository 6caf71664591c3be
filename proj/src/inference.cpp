#include "m3dnca/inference.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"
#include "simd.hpp"
#include "m3dnca/error.hpp"
#include "m3dnca/pipeline.hpp"
#include "m3dnca/rng.hpp"

namespace m3dnca {

Checkpoint fresh_checkpoint(const ModelConfig& config, std::uint64_t seed) {
    Checkpoint c{config, init_model(config, seed), {}};
    c.meta.seed = seed;
    return c;
}

namespace {

constexpr std::uint64_t kMemberTag = 0xe45e;

std::size_t param_bytes(const ModelConfig& config) {
    // Learnable tensors plus the two running statistics per level.
    const auto stats = static_cast<std::int64_t>(config.levels) * 2 * config.hidden;
    return static_cast<std::size_t>(param_count(config) + stats) * sizeof(float);
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

/// Live-byte accounting of the engine's transient buffers.
class Tracker {
public:
    explicit Tracker(EngineStats* stats) : stats_(stats) {}
    void add(std::size_t n) {
        live_ += n;
        peak_ = std::max(peak_, live_);
        if (stats_) stats_->peak_bytes = std::max(stats_->peak_bytes, peak_);
    }
    void sub(std::size_t n) { live_ -= n; }

private:
    EngineStats* stats_;
    std::size_t live_ = 0;
    std::size_t peak_ = 0;
};

/// A float buffer whose size is reported to a Tracker while it lives.
class Tracked {
public:
    Tracked(Tracker& t, std::size_t n) : tracker_(t), data_(n) { tracker_.add(n * sizeof(float)); }
    ~Tracked() { tracker_.sub(data_.size() * sizeof(float)); }
    Tracked(const Tracked&) = delete;
    Tracked& operator=(const Tracked&) = delete;
    float* data() { return data_.data(); }

private:
    Tracker& tracker_;
    std::vector<float> data_;
};

/// Eval-mode layer constants.
struct Layer {
    const NcaLayerParams* p;
    std::int64_t c, h;
    int k, r;
    std::vector<float> shift, inv_std;

    explicit Layer(const NcaLayerParams& params)
        : p(&params), c(params.channels()), h(params.hidden()), k(params.kernel_size()), r((k - 1) / 2) {
        for (std::int64_t i = 0; i < h; ++i) {
            shift.push_back(params.bn.running_mean[i]);
            inv_std.push_back(static_cast<float>(
                1.0 / std::sqrt(static_cast<double>(params.bn.running_var[i]) + ad::kBatchNormEps)));
        }
    }
};

struct Box {
    Extent3 origin, extent;
    std::int64_t index(std::int64_t gz, std::int64_t gy, std::int64_t gx) const {
        return ((gz - origin.z) * extent.y + (gy - origin.y)) * extent.x + (gx - origin.x);
    }
};

struct RowScratch {
    std::vector<float> perc, v, hid, u;
    std::vector<std::int64_t> firing;
};

// Updates one tile. `src` holds the previous state on `halo` (the tile grown
// by the kernel radius and clipped to the level grid), channel-major; `dst`
// receives the tile itself. Each voxel's arithmetic depends only on global
// coordinates, so any tiling reproduces the full-frame result bit for bit.
void step_tile(const float* src, const Box& halo, float* dst, const Box& tile, const Tensor& image,
               const Layer& L, std::uint64_t seed, int level, int step, float fire_rate) {
    const std::int64_t c = L.c, h = L.h, k = L.k, r = L.r;
    const std::int64_t Tx = tile.extent.x;
    const std::int64_t halo_vox = halo.extent.voxels(), tile_vox = tile.extent.voxels();
    const Extent3 img_ext = image.extent();
    const float* img = image.channel(0, 0);
    const float* w = L.p->perception.channel(0, 0);
    const std::int64_t rows = tile.extent.z * tile.extent.y;

#pragma omp parallel
    {
        // Firing cells are packed with a stride rounded up to whole vector
        // blocks; the padding lanes compute values nobody reads.
        const std::int64_t Tp = (Tx + detail::kLanes - 1) / detail::kLanes * detail::kLanes;
        RowScratch s;
        s.perc.resize(static_cast<std::size_t>(c * Tx));
        s.v.resize(static_cast<std::size_t>(2 * c * Tp));
        s.hid.resize(static_cast<std::size_t>(h * Tp));
        s.u.resize(static_cast<std::size_t>(c * Tp));
        s.firing.reserve(static_cast<std::size_t>(Tx));
#pragma omp for schedule(static)
        for (std::int64_t row = 0; row < rows; ++row) {
            const std::int64_t gz = tile.origin.z + row / tile.extent.y;
            const std::int64_t gy = tile.origin.y + row % tile.extent.y;
            const std::int64_t gx0 = tile.origin.x;
            const std::int64_t src_row = halo.index(gz, gy, gx0);
            const std::int64_t dst_row = (row)*Tx;
            const float* img_row = img + (gz * img_ext.y + gy) * img_ext.x + gx0;

            s.firing.clear();
            for (std::int64_t x = 0; x < Tx; ++x)
                if (rng::fires(seed, level, step, gz, gy, gx0 + x, fire_rate)) s.firing.push_back(x);

            for (std::int64_t ch = 0; ch < c; ++ch) {
                float* d = dst + ch * tile_vox + dst_row;
                const float* sp = src + ch * halo_vox + src_row;
                if (ch == 0) std::copy(img_row, img_row + Tx, d);
                else std::copy(sp, sp + Tx, d);
            }
            const auto n = static_cast<std::int64_t>(s.firing.size());
            if (n == 0) continue;

            // Perception for the whole row: taps in (dz, dy, dx) order,
            // skipping those outside the level grid.
            const std::int64_t hz0 = halo.origin.z, hz1 = hz0 + halo.extent.z;
            const std::int64_t hy0 = halo.origin.y, hy1 = hy0 + halo.extent.y;
            const std::int64_t hx0 = halo.origin.x, hx1 = hx0 + halo.extent.x;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                float* acc = s.perc.data() + ch * Tx;
                std::fill(acc, acc + Tx, 0.0f);
                const float* wc = w + ch * k * k * k;
                const float* sc = src + ch * halo_vox;
                for (std::int64_t dz = 0; dz < k; ++dz) {
                    const std::int64_t sz = gz + dz - r;
                    if (sz < hz0 || sz >= hz1) continue;
                    for (std::int64_t dy = 0; dy < k; ++dy) {
                        const std::int64_t sy = gy + dy - r;
                        if (sy < hy0 || sy >= hy1) continue;
                        const float* line = sc + ((sz - hz0) * halo.extent.y + (sy - hy0)) * halo.extent.x;
                        for (std::int64_t dx = 0; dx < k; ++dx) {
                            const float wv = wc[(dz * k + dy) * k + dx];
                            // x such that hx0 <= gx0 + x + dx - r < hx1
                            const std::int64_t lo = std::max<std::int64_t>(0, hx0 - gx0 - dx + r);
                            const std::int64_t hi = std::min<std::int64_t>(Tx, hx1 - gx0 - dx + r);
                            const float* sl = line + (gx0 + dx - r - hx0);
                            for (std::int64_t x = lo; x < hi; ++x) acc[x] += wv * sl[x];
                        }
                    }
                }
            }

            const std::int64_t np = (n + detail::kLanes - 1) / detail::kLanes * detail::kLanes;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const float* pc = s.perc.data() + ch * Tx;
                const float* sp = src + ch * halo_vox + src_row;
                float* vp = s.v.data() + ch * np;
                float* vs = s.v.data() + (c + ch) * np;
                for (std::int64_t j = 0; j < n; ++j) {
                    const std::int64_t x = s.firing[static_cast<std::size_t>(j)];
                    vp[j] = pc[x];
                    vs[j] = sp[x];
                }
            }
            detail::dense_rows(s.v.data(), np, 2 * c, L.p->w1.channel(0, 0), L.p->b1.channel(0, 0), h, s.hid.data(),
                               np, np);
            for (std::int64_t o = 0; o < h; ++o) {
                const float m = L.shift[static_cast<std::size_t>(o)], is = L.inv_std[static_cast<std::size_t>(o)];
                const float gv = L.p->gamma[o], bv = L.p->beta[o];
                float* hp = s.hid.data() + o * np;
                for (std::int64_t j = 0; j < np; ++j) hp[j] = std::max((hp[j] - m) * is * gv + bv, 0.0f);
            }
            detail::dense_rows(s.hid.data(), np, h, L.p->w2.channel(0, 0), L.p->b2.channel(0, 0), c, s.u.data(), np,
                               np);
            for (std::int64_t ch = 1; ch < c; ++ch) {
                const float* up = s.u.data() + ch * np;
                const float* sp = src + ch * halo_vox + src_row;
                float* d = dst + ch * tile_vox + dst_row;
                for (std::int64_t j = 0; j < n; ++j) {
                    const std::int64_t x = s.firing[static_cast<std::size_t>(j)];
                    d[x] = sp[x] + up[j];
                }
            }
        }
    }
}

void copy_box(const Tensor& from, const Box& box, std::int64_t c, float* to) {
    const Extent3 e = from.extent();
    const std::int64_t bv = box.extent.voxels();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* f = from.channel(0, ch);
        float* t = to + ch * bv;
        for (std::int64_t z = 0; z < box.extent.z; ++z)
            for (std::int64_t y = 0; y < box.extent.y; ++y) {
                const float* row = f + ((box.origin.z + z) * e.y + box.origin.y + y) * e.x + box.origin.x;
                std::copy(row, row + box.extent.x, t + (z * box.extent.y + y) * box.extent.x);
            }
    }
}

void paste_box(const float* from, const Box& box, std::int64_t c, Tensor& to) {
    const Extent3 e = to.extent();
    const std::int64_t bv = box.extent.voxels();
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const float* f = from + ch * bv;
        float* t = to.channel(0, ch);
        for (std::int64_t z = 0; z < box.extent.z; ++z)
            for (std::int64_t y = 0; y < box.extent.y; ++y) {
                const float* row = f + (z * box.extent.y + y) * box.extent.x;
                std::copy(row, row + box.extent.x, t + ((box.origin.z + z) * e.y + box.origin.y + y) * e.x + box.origin.x);
            }
    }
}

Extent3 clipped(const Extent3& tile, const Extent3& grid) {
    return {std::min(tile.z, grid.z), std::min(tile.y, grid.y), std::min(tile.x, grid.x)};
}

Extent3 halo_extent(const Extent3& t, int r, const Extent3& grid) {
    return {std::min(t.z + 2 * r, grid.z), std::min(t.y + 2 * r, grid.y), std::min(t.x + 2 * r, grid.x)};
}

void run_level(Tensor& state, const Tensor& image, const Layer& L, const Extent3& tile_request, int steps,
               std::uint64_t seed, int level, float fire_rate, Tracker& tracker, EngineStats* stats) {
    const Extent3 E = state.extent();
    const Extent3 t = clipped(tile_request, E);
    const Extent3 hmax = halo_extent(t, L.r, E);
    Tracked in(tracker, static_cast<std::size_t>(L.c * hmax.voxels()));
    Tracked out(tracker, static_cast<std::size_t>(L.c * t.voxels()));
    Tensor next(state.shape());
    for (int s = 0; s < steps; ++s) {
        for (std::int64_t z0 = 0; z0 < E.z; z0 += t.z)
            for (std::int64_t y0 = 0; y0 < E.y; y0 += t.y)
                for (std::int64_t x0 = 0; x0 < E.x; x0 += t.x) {
                    const Box tile{{z0, y0, x0}, {std::min(t.z, E.z - z0), std::min(t.y, E.y - y0), std::min(t.x, E.x - x0)}};
                    Box halo;
                    halo.origin = {std::max<std::int64_t>(0, z0 - L.r), std::max<std::int64_t>(0, y0 - L.r),
                                   std::max<std::int64_t>(0, x0 - L.r)};
                    halo.extent = {std::min(E.z, z0 + tile.extent.z + L.r) - halo.origin.z,
                                   std::min(E.y, y0 + tile.extent.y + L.r) - halo.origin.y,
                                   std::min(E.x, x0 + tile.extent.x + L.r) - halo.origin.x};
                    copy_box(state, halo, L.c, in.data());
                    step_tile(in.data(), halo, out.data(), tile, image, L, seed, level, s, fire_rate);
                    paste_box(out.data(), tile, L.c, next);
                    if (stats) ++stats->tile_steps;
                }
        std::swap(state, next);
    }
}

/// Nearest (or trilinear) upscale by d, cropped to `target`, with channel 0
/// replaced by `image`.
Tensor lift_state(const Tensor& state, std::int64_t d, const Extent3& target, const Tensor& image, UpsampleMode mode) {
    const std::int64_t c = state.dim(1);
    const Extent3 e = state.extent();
    Tensor out = Tensor::volume(1, c, target);
    if (mode == UpsampleMode::nearest) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const float* s = state.channel(0, ch);
            float* o = out.channel(0, ch);
            for (std::int64_t z = 0; z < target.z; ++z)
                for (std::int64_t y = 0; y < target.y; ++y)
                    for (std::int64_t x = 0; x < target.x; ++x)
                        *o++ = s[((z / d) * e.y + y / d) * e.x + x / d];
        }
    } else {
        ad::Tape tape;
        const ad::Ratio f{d, 1};
        ad::Var up = ad::resample(tape.constant(state), {f, f, f}, ad::ResampleMode::trilinear);
        out = ad::crop(up, Extent3{}, target).value();
    }
    std::copy(image.channel(0, 0), image.channel(0, 0) + target.voxels(), out.channel(0, 0));
    return out;
}

Segmentation finish(const Tensor& final_state, const ModelConfig& config, const Extent3& full) {
    const Extent3 e = final_state.extent();
    const std::int64_t f = config.legacy_extra_downscale ? config.scale : 1;
    Segmentation seg{Tensor::volume(1, 1, full), Tensor::volume(1, 1, full)};
    const float* logit = final_state.channel(0, 1);
    float* p = seg.prob.channel(0, 0);
    for (std::int64_t z = 0; z < full.z; ++z)
        for (std::int64_t y = 0; y < full.y; ++y)
            for (std::int64_t x = 0; x < full.x; ++x) *p++ = logistic(logit[((z / f) * e.y + y / f) * e.x + x / f]);
    for (std::int64_t i = 0; i < seg.prob.numel(); ++i) seg.mask[i] = seg.prob[i] > 0.5f ? 1.0f : 0.0f;
    return seg;
}

void require_input(const Tensor& volume, const Checkpoint& model) {
    require(volume.rank() == 5 && volume.dim(0) == 1 && volume.dim(1) == 1, ErrorKind::shape,
            "expected a [1,1,z,y,x] volume, got " + to_string(volume.shape()));
    model.config.validate();
    require(static_cast<int>(model.layers.size()) == model.config.levels, ErrorKind::config,
            "checkpoint has " + std::to_string(model.layers.size()) + " levels, config says " +
                std::to_string(model.config.levels));
    const std::int64_t f = level_factor(model.config, 0);
    const Extent3 e = volume.extent();
    require(e.z >= f && e.y >= f && e.x >= f, ErrorKind::geometry,
            "volume " + to_string(e) + " is smaller than the coarsest-level factor " + std::to_string(f));
}

Segmentation segment_batch_stats(const Tensor& volume, const Checkpoint& model, std::uint64_t seed) {
    const ModelConfig& cfg = model.config;
    const Pyramid pyr = build_pyramid(volume, nullptr, cfg);
    std::vector<NcaLayerParams> layers = model.layers;  // running stats get overwritten
    Tensor state;
    const std::uint64_t seeds[] = {seed};
    for (int l = 0; l < cfg.levels; ++l) {
        const Tensor& img = pyr.images[static_cast<std::size_t>(l)];
        StateGrid g = l == 0 ? make_state(img, cfg.channels)
                             : StateGrid{lift_state(state, cfg.scale, img.extent(), img, cfg.upsample), img, {Extent3{}}};
        const int steps = level_steps(cfg, l, img.extent());
        g = nca_run(std::move(g), layers[static_cast<std::size_t>(l)], steps, l, seeds, cfg.fire_rate,
                    ad::BatchNormMode::train);
        state = std::move(g.state);
    }
    return finish(state, cfg, volume.extent());
}

}  // namespace

TilePlan plan_for_tile(const Extent3& volume, const ModelConfig& config, const Extent3& tile) {
    config.validate();
    require(tile.z >= 1 && tile.y >= 1 && tile.x >= 1, ErrorKind::memory_plan, "tile extents must be positive");
    TilePlan plan;
    plan.volume = volume;
    plan.tile = tile;
    plan.param_bytes = param_bytes(config);
    std::size_t worst = 0;
    for (int l = 0; l < config.levels; ++l) {
        const Extent3 E = level_extent(volume, config, l);
        const int k = config.kernel_sizes[static_cast<std::size_t>(l)];
        const int r = (k - 1) / 2;
        const Extent3 t = clipped(tile, E);
        const std::int64_t tiles = ceil_div(E.z, t.z) * ceil_div(E.y, t.y) * ceil_div(E.x, t.x);
        const int steps = level_steps(config, l, E);
        plan.level_extents.push_back(E);
        plan.halo.push_back(r);
        plan.steps.push_back(steps);
        plan.tiles_per_level.push_back(tiles);
        plan.tile_step_work += tiles * steps;
        const auto bytes = static_cast<std::size_t>(2 * config.channels * halo_extent(t, r, E).voxels()) * sizeof(float);
        worst = std::max(worst, bytes);
    }
    plan.peak_bytes = worst + plan.param_bytes;
    return plan;
}

TilePlan memory_plan(const Extent3& volume, const ModelConfig& config, std::size_t budget_bytes) {
    require(budget_bytes > 0, ErrorKind::memory_plan, "memory budget must be positive");
    config.validate();
    // Smallest admissible tile: one kernel width per axis (or the whole axis).
    const std::int64_t kmax = *std::max_element(config.kernel_sizes.begin(), config.kernel_sizes.end());
    const std::int64_t largest = volume.max();
    const std::int64_t smallest = std::min(kmax, largest);
    for (std::int64_t t = largest; t >= smallest; --t) {
        TilePlan plan = plan_for_tile(volume, config, {t, t, t});
        if (plan.peak_bytes <= budget_bytes) return plan;
    }
    const TilePlan minimal = plan_for_tile(volume, config, {smallest, smallest, smallest});
    fail(ErrorKind::memory_plan, "budget of " + std::to_string(budget_bytes) +
                                     " bytes admits no tile; the minimal feasible budget is " +
                                     std::to_string(minimal.peak_bytes) + " bytes");
}

Segmentation run_plan(const Tensor& volume, const Checkpoint& model, std::uint64_t seed, const TilePlan& plan,
                      EngineStats* stats) {
    require_input(volume, model);
    const ModelConfig& cfg = model.config;
    require(plan.volume == volume.extent(), ErrorKind::memory_plan, "plan was made for a different volume extent");
    const Pyramid pyr = build_pyramid(volume, nullptr, cfg);
    Tracker tracker(stats);
    Tensor state;
    for (int l = 0; l < cfg.levels; ++l) {
        const Tensor& img = pyr.images[static_cast<std::size_t>(l)];
        if (l == 0) state = make_state(img, cfg.channels).state;
        else state = lift_state(state, cfg.scale, img.extent(), img, cfg.upsample);
        const Layer L(model.layers[static_cast<std::size_t>(l)]);
        require(L.c == cfg.channels, ErrorKind::shape, "layer channel count does not match the config");
        run_level(state, img, L, plan.tile, plan.steps[static_cast<std::size_t>(l)], seed, l, cfg.fire_rate, tracker,
                  stats);
    }
    if (stats) stats->peak_bytes += plan.param_bytes;
    return finish(state, cfg, volume.extent());
}

Segmentation segment(const Tensor& volume, const Checkpoint& model, std::uint64_t seed,
                     const SegmentOptions& options) {
    require_input(volume, model);
    if (options.batch_stats_bn) return segment_batch_stats(volume, model, seed);
    const Extent3 e = volume.extent();
    const std::int64_t m = e.max();
    return run_plan(volume, model, seed, plan_for_tile(e, model.config, {m, m, m}));
}

Segmentation tiled_segment(const Tensor& volume, const Checkpoint& model, std::uint64_t seed,
                           std::size_t budget_bytes) {
    require_input(volume, model);
    return run_plan(volume, model, seed, memory_plan(volume.extent(), model.config, budget_bytes));
}

std::uint64_t member_seed(std::uint64_t seed, int member) {
    return rng::derive(seed, kMemberTag, static_cast<std::uint64_t>(member));
}

EnsembleResult summarize_members(const std::vector<Tensor>& members) {
    require(!members.empty(), ErrorKind::contract, "ensemble needs at least one member");
    const Tensor& first = members.front();
    for (const Tensor& m : members) require_same_shape(first, m, "ensemble");
    const double n = static_cast<double>(members.size());
    EnsembleResult r{Tensor(first.shape()), Tensor(first.shape()), Tensor(first.shape()),
                     static_cast<int>(members.size()), std::numeric_limits<double>::quiet_NaN(), {}};
    for (std::int64_t i = 0; i < first.numel(); ++i) {
        double s = 0.0;
        for (const Tensor& m : members) s += m[i];
        const double mu = s / n;
        double ss = 0.0;
        for (const Tensor& m : members) ss += (m[i] - mu) * (m[i] - mu);
        r.mean_prob[i] = static_cast<float>(mu);
        r.sd_map[i] = static_cast<float>(std::sqrt(ss / n));
        r.mask[i] = r.mean_prob[i] > 0.5f ? 1.0f : 0.0f;
    }
    return r;
}

EnsembleResult ensemble_segment(const Tensor& volume, const Checkpoint& model, int n, std::uint64_t seed,
                                const EnsembleOptions& options) {
    require(n >= 1, ErrorKind::contract, "ensemble size must be >= 1");
    std::vector<Tensor> members;
    for (int i = 0; i < n; ++i) {
        const std::uint64_t s = member_seed(seed, i);
        Segmentation seg = options.budget_bytes ? tiled_segment(volume, model, s, options.budget_bytes)
                                                : segment(volume, model, s, options.segment);
        members.push_back(std::move(seg.prob));
    }
    EnsembleResult r = summarize_members(members);
    if (options.keep_members) r.members = std::move(members);
    return r;
}

}  // namespace m3dnca
