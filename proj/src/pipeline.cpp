#include "m3dnca/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>

#include "m3dnca/error.hpp"
#include "m3dnca/inference.hpp"

namespace m3dnca {
namespace {

constexpr std::uint64_t kReplicaTag = 0x4e91;
constexpr std::uint64_t kPatchTag = 0x9a7c;
constexpr std::uint64_t kStepTag = 0x57e9;
constexpr std::uint64_t kShuffleTag = 0x5f1e;
constexpr double kProbFloor = 1e-7;

std::int64_t ipow(std::int64_t b, int e) {
    std::int64_t r = 1;
    for (int i = 0; i < e; ++i) r *= b;
    return r;
}

Tensor stack_crops(const std::vector<const Tensor*>& sources, const std::vector<Extent3>& origins,
                   const Extent3& extent) {
    const auto b = static_cast<std::int64_t>(sources.size());
    Tensor out = Tensor::volume(b, 1, extent);
    for (std::int64_t i = 0; i < b; ++i) {
        const Tensor& s = *sources[static_cast<std::size_t>(i)];
        const Extent3 e = s.extent();
        const Extent3 o = origins[static_cast<std::size_t>(i)];
        require(o.z >= 0 && o.y >= 0 && o.x >= 0 && o.z + extent.z <= e.z && o.y + extent.y <= e.y &&
                    o.x + extent.x <= e.x,
                ErrorKind::geometry, "crop " + to_string(o) + " + " + to_string(extent) + " leaves " + to_string(e));
        float* d = out.channel(i, 0);
        for (std::int64_t z = 0; z < extent.z; ++z)
            for (std::int64_t y = 0; y < extent.y; ++y) {
                const float* row = s.channel(0, 0) + ((o.z + z) * e.y + o.y + y) * e.x + o.x;
                d = std::copy(row, row + extent.x, d);
            }
    }
    return out;
}

std::uint64_t fold_loss(std::uint64_t digest, double loss) {
    return rng::hash_words({digest, std::bit_cast<std::uint64_t>(loss)});
}

}  // namespace

std::int64_t level_factor(const ModelConfig& config, int level) {
    require(level >= 0 && level < config.levels, ErrorKind::config, "level index out of range");
    return ipow(config.scale, config.levels - 1 - level + (config.legacy_extra_downscale ? 1 : 0));
}

Extent3 level_extent(const Extent3& full, const ModelConfig& config, int level) {
    const std::int64_t f = level_factor(config, level);
    require(full.z >= f && full.y >= f && full.x >= f, ErrorKind::config,
            "too many levels for this volume: " + to_string(full) + " cannot be downscaled by " + std::to_string(f));
    return {(full.z + f - 1) / f, (full.y + f - 1) / f, (full.x + f - 1) / f};
}

Tensor downscale_mean(const Tensor& volume, std::int64_t f) {
    require(f >= 1, ErrorKind::config, "downscale factor must be >= 1");
    if (f == 1) return volume;
    const Extent3 e = volume.extent();
    const Extent3 o{(e.z + f - 1) / f, (e.y + f - 1) / f, (e.x + f - 1) / f};
    Tensor out = Tensor::volume(volume.dim(0), volume.dim(1), o);
    const double norm = 1.0 / static_cast<double>(f * f * f);
    for (std::int64_t b = 0; b < volume.dim(0); ++b)
        for (std::int64_t c = 0; c < volume.dim(1); ++c) {
            const float* s = volume.channel(b, c);
            float* d = out.channel(b, c);
            for (std::int64_t z = 0; z < o.z; ++z)
                for (std::int64_t y = 0; y < o.y; ++y)
                    for (std::int64_t x = 0; x < o.x; ++x) {
                        double acc = 0.0;
                        for (std::int64_t a = 0; a < f; ++a) {
                            const std::int64_t sz = std::min(z * f + a, e.z - 1);
                            for (std::int64_t bb = 0; bb < f; ++bb) {
                                const std::int64_t sy = std::min(y * f + bb, e.y - 1);
                                for (std::int64_t cc = 0; cc < f; ++cc)
                                    acc += s[(sz * e.y + sy) * e.x + std::min(x * f + cc, e.x - 1)];
                            }
                        }
                        *d++ = static_cast<float>(acc * norm);
                    }
        }
    return out;
}

Tensor downscale_nearest(const Tensor& volume, std::int64_t f) {
    require(f >= 1, ErrorKind::config, "downscale factor must be >= 1");
    if (f == 1) return volume;
    const Extent3 e = volume.extent();
    const Extent3 o{(e.z + f - 1) / f, (e.y + f - 1) / f, (e.x + f - 1) / f};
    Tensor out = Tensor::volume(volume.dim(0), volume.dim(1), o);
    for (std::int64_t b = 0; b < volume.dim(0); ++b)
        for (std::int64_t c = 0; c < volume.dim(1); ++c) {
            const float* s = volume.channel(b, c);
            float* d = out.channel(b, c);
            for (std::int64_t z = 0; z < o.z; ++z)
                for (std::int64_t y = 0; y < o.y; ++y)
                    for (std::int64_t x = 0; x < o.x; ++x)
                        *d++ = s[(std::min(z * f + f / 2, e.z - 1) * e.y + std::min(y * f + f / 2, e.y - 1)) * e.x +
                                 std::min(x * f + f / 2, e.x - 1)];
        }
    return out;
}

Pyramid build_pyramid(const Tensor& image, const Tensor* label, const ModelConfig& config) {
    config.validate();
    require(image.rank() == 5 && image.dim(0) == 1 && image.dim(1) == 1, ErrorKind::shape,
            "build_pyramid: expected a [1,1,z,y,x] image");
    if (label) require_same_shape(image, *label, "build_pyramid");
    Pyramid p;
    for (int l = 0; l < config.levels; ++l) {
        const Extent3 e = level_extent(image.extent(), config, l);
        const std::int64_t f = level_factor(config, l);
        p.images.push_back(downscale_mean(image, f));
        if (label) p.labels.push_back(downscale_nearest(*label, f));
        require(p.images.back().extent() == e, ErrorKind::contract, "pyramid extent bookkeeping mismatch");
    }
    return p;
}

int level_steps(const ModelConfig& config, int level, const Extent3& iterated) {
    if (!config.fixed_steps.empty()) return config.fixed_steps.at(static_cast<std::size_t>(level));
    const int k = config.kernel_sizes.at(static_cast<std::size_t>(level));
    if (config.step_policy == StepPolicy::frozen_training_extent) {
        require(config.training_extent.voxels() > 0, ErrorKind::config,
                "frozen-training-extent step policy needs the training extent recorded in the model");
        return step_count(config.training_extent, k);
    }
    return step_count(iterated, k);
}

Extent3 sample_patch_origin(const Extent3& lo, const Extent3& span, const Extent3& level, const Extent3& base,
                            rng::Stream& rng) {
    Extent3 o;
    for (int a = 0; a < 3; ++a) {
        const std::int64_t first = std::max<std::int64_t>(lo[a], 0);
        const std::int64_t last = std::min(lo[a] + span[a], level[a]) - base[a];
        require(last >= first, ErrorKind::geometry,
                "patch " + to_string(base) + " does not fit in region " + to_string(lo) + " + " + to_string(span) +
                    " of level " + to_string(level));
        o[a] = rng.uniform_int(first, last);
    }
    return o;
}

Patch sample_patch(const StateGrid& level_state, const Tensor& level_label, const Extent3& base, rng::Stream& rng) {
    require(level_state.batch() == 1, ErrorKind::shape, "sample_patch works on a single grid");
    const Extent3 e = level_state.extent();
    require(level_label.extent() == e, ErrorKind::shape, "sample_patch: label and state extents differ");
    const Extent3 o = sample_patch_origin({}, e, e, base, rng);
    ad::Tape tape;
    Patch p;
    p.origin = o;
    const Extent3 g = level_state.origin.empty() ? Extent3{} : level_state.origin.front();
    p.state = StateGrid{ad::crop(tape.constant(level_state.state), o, base).value(),
                        ad::crop(tape.constant(level_state.image), o, base).value(),
                        {Extent3{g.z + o.z, g.y + o.y, g.x + o.x}}};
    p.label = ad::crop(tape.constant(level_label), o, base).value();
    return p;
}

ad::Var dice_focal_loss(ad::Var prob, const Tensor& target, const LossConfig& cfg, std::vector<double>* per_element) {
    ad::Tape& T = *prob.tape;
    const Tensor& p = T.value(prob);
    require_same_shape(p, target, "dice_focal_loss");
    require(p.rank() == 5 && p.dim(1) == 1, ErrorKind::shape, "dice_focal_loss expects [b,1,z,y,x]");
    const std::int64_t B = p.dim(0), V = p.extent().voxels();
    const double gamma = cfg.gamma, alpha = cfg.alpha, eps = cfg.eps;

    std::vector<double> losses(static_cast<std::size_t>(B));
    std::vector<double> spt(static_cast<std::size_t>(B)), sp(static_cast<std::size_t>(B)), st(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) {
        const float* pp = p.channel(b, 0);
        const float* tp = target.channel(b, 0);
        double a = 0.0, s1 = 0.0, s2 = 0.0, focal = 0.0;
        for (std::int64_t i = 0; i < V; ++i) {
            const double pv = pp[i], tv = tp[i];
            a += pv * tv;
            s1 += pv;
            s2 += tv;
            const double q = std::clamp(pv, kProbFloor, 1.0 - kProbFloor);
            focal += -alpha * tv * std::pow(1.0 - q, gamma) * std::log(q) -
                     (1.0 - alpha) * (1.0 - tv) * std::pow(q, gamma) * std::log(1.0 - q);
        }
        spt[static_cast<std::size_t>(b)] = a;
        sp[static_cast<std::size_t>(b)] = s1;
        st[static_cast<std::size_t>(b)] = s2;
        const double dice = 1.0 - (2.0 * a + eps) / (s1 + s2 + eps);
        losses[static_cast<std::size_t>(b)] = dice + focal / static_cast<double>(V);
    }
    if (per_element) *per_element = losses;
    const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(B);

    return T.record(Tensor({1}, {static_cast<float>(mean)}), {prob},
                    [prob, target, spt, sp, st, B, V, gamma, alpha, eps](ad::Tape& t, ad::Var self) {
                        if (!t.requires_grad(prob)) return;
                        const double g = t.grad_ref(self)[0] / static_cast<double>(B);
                        const Tensor& pv = t.value(prob);
                        Tensor& gp = t.grad_accum(prob);
                        for (std::int64_t b = 0; b < B; ++b) {
                            const double num = 2.0 * spt[static_cast<std::size_t>(b)] + eps;
                            const double den = sp[static_cast<std::size_t>(b)] + st[static_cast<std::size_t>(b)] + eps;
                            const float* pp = pv.channel(b, 0);
                            const float* tp = target.channel(b, 0);
                            float* out = gp.channel(b, 0);
                            for (std::int64_t i = 0; i < V; ++i) {
                                const double p_ = pp[i], tv = tp[i];
                                const double d_dice = -(2.0 * tv * den - num) / (den * den);
                                double d_focal = 0.0;
                                if (p_ >= kProbFloor && p_ <= 1.0 - kProbFloor) {
                                    const double q = p_;
                                    const double pos = -alpha * tv *
                                                       (-gamma * std::pow(1.0 - q, gamma - 1.0) * std::log(q) +
                                                        std::pow(1.0 - q, gamma) / q);
                                    const double neg = -(1.0 - alpha) * (1.0 - tv) *
                                                       (gamma * std::pow(q, gamma - 1.0) * std::log(1.0 - q) -
                                                        std::pow(q, gamma) / (1.0 - q));
                                    d_focal = (pos + neg) / static_cast<double>(V);
                                }
                                out[i] += static_cast<float>(g * (d_dice + d_focal));
                            }
                        }
                    });
}

void TrainConfig::validate() const {
    require(epochs >= 0, ErrorKind::config, "epochs must be >= 0");
    require(dup_factor >= 1, ErrorKind::config, "dup_factor must be >= 1");
    require(batch_size >= 1 && batch_size % dup_factor == 0, ErrorKind::config,
            "batch_size (" + std::to_string(batch_size) + ") must be a positive multiple of dup_factor (" +
                std::to_string(dup_factor) + ")");
    require(adam.lr > 0.0f, ErrorKind::config, "learning rate must be positive");
    require(lr_decay > 0.0 && lr_decay <= 1.0, ErrorKind::config, "lr_decay must lie in (0, 1]");
    require(loss.eps > 0.0 && loss.gamma >= 0.0 && loss.alpha >= 0.0 && loss.alpha <= 1.0, ErrorKind::config,
            "invalid loss parameters");
    require(eval_every >= 0, ErrorKind::config, "eval_every must be >= 0");
}

std::uint64_t replica_seed(std::uint64_t step_seed, int replica) {
    return rng::derive(step_seed, kReplicaTag, static_cast<std::uint64_t>(replica));
}

StepResult train_step(const std::vector<const Pyramid*>& unique, std::vector<NcaLayerParams>& layers,
                      const ModelConfig& config, const TrainConfig& train, std::uint64_t step_seed) {
    config.validate();
    require(!unique.empty(), ErrorKind::config, "train_step needs at least one sample");
    require(static_cast<int>(layers.size()) == config.levels, ErrorKind::config, "layer count does not match config");
    const int n = config.levels;
    const std::int64_t d = config.scale;
    for (const Pyramid* p : unique) {
        require(p->levels() == n && static_cast<int>(p->labels.size()) == n, ErrorKind::config,
                "pyramid level count does not match the model");
        for (int l = 0; l < n; ++l)
            require(p->images[static_cast<std::size_t>(l)].extent() == unique.front()->images[static_cast<std::size_t>(l)].extent(),
                    ErrorKind::geometry, "all samples in a batch must share the pyramid geometry");
    }

    const int dup = train.dup_factor;
    const std::size_t B = unique.size() * static_cast<std::size_t>(dup);
    std::vector<std::uint64_t> seeds(B);
    std::vector<rng::Stream> streams;
    std::vector<const Pyramid*> owner(B);
    for (std::size_t j = 0; j < B; ++j) {
        seeds[j] = replica_seed(step_seed, static_cast<int>(j));
        streams.emplace_back(rng::derive(seeds[j], kPatchTag));
        owner[j] = unique[j / static_cast<std::size_t>(dup)];
    }
    auto level_sources = [&](int l, bool labels) {
        std::vector<const Tensor*> v;
        for (const Pyramid* p : owner) v.push_back(labels ? &p->labels[static_cast<std::size_t>(l)] : &p->images[static_cast<std::size_t>(l)]);
        return v;
    };

    const Extent3 base = unique.front()->base_size();
    std::vector<Extent3> origins(B);
    Extent3 extent = base;

    ad::Tape tape;
    std::vector<LayerVars> vars;
    for (const auto& layer : layers) vars.push_back(bind_layer(tape, layer, true));

    Tensor image = stack_crops(level_sources(0, false), origins, base);
    ad::Var state = tape.constant(make_state(image, config.channels, origins).state);
    for (int l = 0; l < n; ++l) {
        if (l > 0) {
            const Extent3 E = unique.front()->images[static_cast<std::size_t>(l)].extent();
            std::vector<Extent3> next(B), local(B);
            for (std::size_t j = 0; j < B; ++j) {
                const Extent3 lo{origins[j].z * d, origins[j].y * d, origins[j].x * d};
                const Extent3 span{extent.z * d, extent.y * d, extent.x * d};
                next[j] = sample_patch_origin(lo, span, E, base, streams[j]);
                local[j] = {next[j].z - lo.z, next[j].y - lo.y, next[j].x - lo.x};
            }
            if (config.upsample == UpsampleMode::nearest) {
                state = ad::upsample_nearest_crop(state, d, local, base);
            } else {
                const ad::Ratio f{d, 1};
                state = ad::crop(ad::resample(state, {f, f, f}, ad::ResampleMode::trilinear), local, base);
            }
            origins = std::move(next);
            extent = base;
            image = stack_crops(level_sources(l, false), origins, base);
            state = ad::assign_channel(state, 0, image);
        }
        const int steps = level_steps(config, l, extent);
        auto& layer = layers[static_cast<std::size_t>(l)];
        for (int s = 0; s < steps; ++s) {
            const Tensor mask = fire_mask(extent, origins, seeds, l, s, config.fire_rate);
            state = nca_step(state, vars[static_cast<std::size_t>(l)], layer.bn, ad::BatchNormMode::train, image, mask);
        }
    }

    const Tensor target = stack_crops(level_sources(n - 1, true), origins, base);
    StepResult r;
    const ad::Var prob = ad::sigmoid_channel(state, 1);
    ad::Var loss = dice_focal_loss(prob, target, train.loss, &r.replica_losses);
    r.loss = loss.value()[0];
    r.prob = prob.value();
    r.target = target;
    require(std::isfinite(r.loss), ErrorKind::diverged, "training loss is not finite (" + std::to_string(r.loss) + ")");
    tape.backward(loss);
    for (const LayerVars& v : vars)
        r.grads.push_back({tape.grad(v.perception), tape.grad(v.w1), tape.grad(v.b1), tape.grad(v.gamma),
                           tape.grad(v.beta), tape.grad(v.w2), tape.grad(v.b2)});
    r.tape_peak_bytes = tape.peak_bytes();
    r.final_origins = std::move(origins);
    return r;
}

TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& validation,
                  const ModelConfig& config, const TrainConfig& tc, const EpochCallback& on_epoch) {
    config.validate();
    tc.validate();
    require(!train_set.empty(), ErrorKind::config, "training set is empty");

    std::vector<Pyramid> pyramids;
    for (const Sample& s : train_set) pyramids.push_back(build_pyramid(s.image, &s.label, config));

    ModelConfig cfg = config;
    cfg.training_extent = pyramids.front().base_size();
    Checkpoint current = fresh_checkpoint(cfg, tc.seed);
    current.meta.seed = tc.seed;

    std::vector<Tensor*> params;
    for (auto& layer : current.layers)
        for (Tensor* t : layer.learnable()) params.push_back(t);
    ad::AdamState adam(std::vector<const Tensor*>(params.begin(), params.end()));

    TrainResult result;
    bool have_best = false;
    const std::size_t per_step = static_cast<std::size_t>(tc.batch_size / tc.dup_factor);
    std::vector<std::size_t> order(pyramids.size());

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng::Stream shuffle(rng::derive(tc.seed, kShuffleTag, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

        std::vector<double> losses;
        for (std::size_t start = 0; start < order.size(); start += per_step) {
            std::vector<const Pyramid*> group;
            for (std::size_t i = start; i < std::min(order.size(), start + per_step); ++i) group.push_back(&pyramids[order[i]]);
            const auto step = current.meta.optimizer_steps;
            StepResult r = train_step(group, current.layers, cfg, tc,
                                      rng::derive(tc.seed, kStepTag, static_cast<std::uint64_t>(step)));
            std::vector<Tensor> grads;
            for (auto& g : r.grads)
                for (auto& t : g) grads.push_back(std::move(t));
            ad::AdamConfig ac = tc.adam;
            ac.lr = static_cast<float>(tc.adam.lr * std::pow(tc.lr_decay, static_cast<double>(step)));
            ad::adam_step(params, grads, adam, ac);
            ++current.meta.optimizer_steps;
            losses.push_back(r.loss);
            result.step_losses.push_back(r.loss);
            current.meta.loss_digest = fold_loss(current.meta.loss_digest, r.loss);
        }
        current.meta.epoch = epoch;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.optimizer_steps = current.meta.optimizer_steps;
        rec.mean_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
        for (double l : losses) rec.loss_variance += (l - rec.mean_loss) * (l - rec.mean_loss);
        rec.loss_variance /= static_cast<double>(losses.size());
        rec.eval_dice = std::numeric_limits<double>::quiet_NaN();
        const bool evaluate = !validation.empty() && tc.eval_every > 0 &&
                              (epoch % tc.eval_every == 0 || epoch == tc.epochs);
        if (evaluate) {
            double total = 0.0;
            for (const Sample& s : validation) total += dice(segment(s.image, current, tc.eval_seed).mask, s.label);
            rec.eval_dice = total / static_cast<double>(validation.size());
            if (!have_best || rec.eval_dice > result.best.meta.best_eval_dice) {
                current.meta.best_eval_dice = rec.eval_dice;
                result.best = current;
                have_best = true;
            }
        }
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    result.last = current;
    if (!have_best) result.best = current;
    return result;
}

}  // namespace m3dnca
