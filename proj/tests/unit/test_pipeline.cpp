#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "m3dnca/error.hpp"
#include "m3dnca/pipeline.hpp"
#include "oracle.hpp"

using namespace m3dnca;

namespace {

Tensor volume_of(Extent3 e, float fill = 0.0f) { return Tensor::volume(1, 1, e, fill); }

double tensor_loss(const Tensor& prob, const Tensor& target) {
    double total = 0;
    const std::int64_t V = prob.extent().voxels();
    for (std::int64_t b = 0; b < prob.dim(0); ++b) {
        std::vector<double> p(prob.channel(b, 0), prob.channel(b, 0) + V), t(target.channel(b, 0), target.channel(b, 0) + V);
        total += oracle::dice_focal(p, t);
    }
    return total / static_cast<double>(prob.dim(0));
}

Tensor crop_oracle(const Tensor& full, Extent3 o, Extent3 e) {
    Tensor out = Tensor::volume(1, 1, e);
    const Extent3 f = full.extent();
    for (std::int64_t z = 0; z < e.z; ++z)
        for (std::int64_t y = 0; y < e.y; ++y)
            for (std::int64_t x = 0; x < e.x; ++x)
                out[(z * e.y + y) * e.x + x] = full[((o.z + z) * f.y + o.y + y) * f.x + o.x + x];
    return out;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data(), a.data() + a.numel(), b.data());
}

ModelConfig small_model(int levels = 2, std::int64_t scale = 2) {
    ModelConfig cfg;
    cfg.levels = levels;
    cfg.scale = scale;
    cfg.kernel_sizes.assign(static_cast<std::size_t>(levels), 3);
    cfg.channels = 6;
    cfg.hidden = 12;
    return cfg;
}

Sample sphere_sample(std::int64_t n, std::uint64_t seed, int index = 0) {
    SyntheticSpec spec;
    spec.extent = {n, n, n};
    return generate_one(spec, seed, index);
}

}  // namespace

TEST_CASE("pyramid extents") {
    ModelConfig legacy;
    legacy.levels = 3;
    legacy.scale = 2;
    legacy.kernel_sizes = {7, 3, 3};
    legacy.legacy_extra_downscale = true;
    const Extent3 full{24, 320, 320};
    CHECK(level_extent(full, legacy, 0) == Extent3{3, 40, 40});

    ModelConfig standard;
    CHECK(level_extent(full, standard, 0) == Extent3{6, 80, 80});
    CHECK(level_extent(full, standard, 1) == full);

    // Built pyramids agree with the extent rule, ceil included.
    const Pyramid p = build_pyramid(volume_of({13, 18, 21}), nullptr, standard);
    REQUIRE(p.levels() == 2);
    CHECK(p.images[0].extent() == Extent3{4, 5, 6});
    CHECK(p.images[1].extent() == Extent3{13, 18, 21});
    CHECK(p.labels.empty());

    SUBCASE("single level is the identity") {
        ModelConfig one = small_model(1);
        const Tensor img = oracle::random_tensor({1, 1, 5, 6, 7}, 3, 0.0, 1.0);
        const Tensor lab = volume_of({5, 6, 7}, 1.0f);
        const Pyramid q = build_pyramid(img, &lab, one);
        REQUIRE(q.levels() == 1);
        CHECK(bit_equal(q.images[0], img));
        CHECK(bit_equal(q.labels[0], lab));
    }

    SUBCASE("too many levels") {
        ModelConfig deep = standard;
        deep.levels = 4;
        deep.kernel_sizes = {3, 3, 3, 3};
        CHECK_THROWS_AS(build_pyramid(volume_of({16, 16, 16}), nullptr, deep), Error);
    }
}

TEST_CASE("downscale oracles") {
    const Tensor img = oracle::random_tensor({1, 1, 7, 5, 6}, 11, 0.0, 1.0);
    const std::int64_t f = 2;
    const Tensor mean = downscale_mean(img, f);
    const Tensor near = downscale_nearest(img, f);
    REQUIRE(mean.extent() == Extent3{4, 3, 3});
    const Extent3 e = img.extent();
    auto at = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        z = std::min(z, e.z - 1), y = std::min(y, e.y - 1), x = std::min(x, e.x - 1);
        return static_cast<double>(img[(z * e.y + y) * e.x + x]);
    };
    for (std::int64_t z = 0; z < 4; ++z)
        for (std::int64_t y = 0; y < 3; ++y)
            for (std::int64_t x = 0; x < 3; ++x) {
                double acc = 0;
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b)
                        for (int c = 0; c < 2; ++c) acc += at(2 * z + a, 2 * y + b, 2 * x + c);
                CHECK(mean[(z * 3 + y) * 3 + x] == doctest::Approx(acc / 8).epsilon(1e-6));
                CHECK(near[(z * 3 + y) * 3 + x] == static_cast<float>(at(2 * z + 1, 2 * y + 1, 2 * x + 1)));
            }

    // Labels stay binary.
    Tensor lab = oracle::random_tensor({1, 1, 9, 9, 9}, 5, 0.0, 1.0);
    for (std::int64_t i = 0; i < lab.numel(); ++i) lab[i] = lab[i] > 0.5f ? 1.0f : 0.0f;
    const Tensor small = downscale_nearest(lab, 4);
    for (std::int64_t i = 0; i < small.numel(); ++i) CHECK((small[i] == 0.0f || small[i] == 1.0f));
}

TEST_CASE("patch sampling") {
    SUBCASE("coverage") {
        rng::Stream s(42);
        std::set<std::int64_t> seen[3];
        const Extent3 level{6, 80, 80}, base{3, 40, 40};
        for (int i = 0; i < 1000; ++i) {
            const Extent3 o = sample_patch_origin({}, level, level, base, s);
            for (int a = 0; a < 3; ++a) {
                REQUIRE(o[a] >= 0);
                REQUIRE(o[a] <= level[a] - base[a]);
                seen[a].insert(o[a]);
            }
        }
        CHECK(seen[0].size() == 4);
        CHECK(seen[1].size() == 41);
        CHECK(seen[2].size() == 41);
    }

    SUBCASE("forced origin") {
        rng::Stream s(1);
        const Extent3 e{3, 4, 5};
        CHECK(sample_patch_origin({}, e, e, e, s) == Extent3{});
    }

    SUBCASE("region is clipped to the level") {
        rng::Stream s(2);
        for (int i = 0; i < 200; ++i) {
            const Extent3 o = sample_patch_origin({4, 4, 4}, {8, 8, 8}, {10, 10, 10}, {4, 4, 4}, s);
            for (int a = 0; a < 3; ++a) {
                CHECK(o[a] >= 4);
                CHECK(o[a] <= 6);
            }
        }
    }

    SUBCASE("too large") {
        rng::Stream s(3);
        CHECK_THROWS_AS(sample_patch_origin({}, {4, 4, 4}, {4, 4, 4}, {5, 4, 4}, s), Error);
    }

    SUBCASE("label congruence") {
        const Extent3 e{7, 9, 11}, base{3, 4, 5};
        const Tensor img = oracle::random_tensor({1, 1, e.z, e.y, e.x}, 8, 0.0, 1.0);
        const Tensor lab = oracle::random_tensor({1, 1, e.z, e.y, e.x}, 9, 0.0, 1.0);
        StateGrid g = make_state(img, 4, {Extent3{10, 20, 30}});
        rng::Stream s(4);
        for (int i = 0; i < 25; ++i) {
            const Patch p = sample_patch(g, lab, base, s);
            CHECK(bit_equal(p.label, crop_oracle(lab, p.origin, base)));
            CHECK(bit_equal(p.state.image, crop_oracle(img, p.origin, base)));
            CHECK(p.state.origin.front() == Extent3{10 + p.origin.z, 20 + p.origin.y, 30 + p.origin.x});
        }
    }
}

TEST_CASE("dice focal loss") {
    const Extent3 e{4, 5, 6};
    const double N = static_cast<double>(e.voxels());

    SUBCASE("perfect prediction") {
        ad::Tape t;
        const double l = dice_focal_loss(t.constant(volume_of(e, 1.0f)), volume_of(e, 1.0f)).value()[0];
        CHECK(std::abs(l) <= 1e-5);
    }

    SUBCASE("uninformative prediction") {
        ad::Tape t;
        const double l = dice_focal_loss(t.constant(volume_of(e, 0.5f)), volume_of(e, 1.0f)).value()[0];
        const double dice = 1.0 - (N + 1e-6) / (1.5 * N + 1e-6);
        const double focal = 0.5 * 0.25 * std::log(2.0);
        CHECK(l == doctest::Approx(dice + focal).epsilon(1e-6));
        CHECK(dice == doctest::Approx(1.0 / 3).epsilon(1e-6));
        CHECK(focal == doctest::Approx(0.0866).epsilon(1e-3));
    }

    SUBCASE("gradient against finite differences") {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const Tensor prob = oracle::random_tensor({2, 1, 3, 3, 3}, seed, 0.05, 0.95);
            Tensor target = oracle::random_tensor(prob.shape(), seed + 100, 0.0, 1.0);
            for (std::int64_t i = 0; i < target.numel(); ++i) target[i] = target[i] > 0.5f ? 1.0f : 0.0f;
            ad::Tape t;
            const ad::Var p = t.parameter(prob);
            std::vector<double> per;
            const ad::Var l = dice_focal_loss(p, target, {}, &per);
            CHECK(l.value()[0] == doctest::Approx(tensor_loss(prob, target)).epsilon(1e-6));
            REQUIRE(per.size() == 2);
            t.backward(l);
            const Tensor g = t.grad(p);

            // Central differences of the binary64 oracle, perturbing one voxel.
            std::vector<double> pd(prob.data(), prob.data() + prob.numel()), td(target.data(), target.data() + target.numel());
            double worst = 0, scale = 0;
            for (std::int64_t i = 0; i < prob.numel(); ++i) {
                auto eval = [&](double delta) {
                    std::vector<double> q = pd;
                    q[static_cast<std::size_t>(i)] += delta;
                    const std::size_t half = q.size() / 2;
                    return 0.5 * (oracle::dice_focal({q.begin(), q.begin() + half}, {td.begin(), td.begin() + half}) +
                                  oracle::dice_focal({q.begin() + half, q.end()}, {td.begin() + half, td.end()}));
                };
                const double fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                worst = std::max(worst, std::abs(fd - g[i]));
                scale = std::max(scale, std::abs(fd));
            }
            CHECK(worst / scale < 1e-3);
        }
    }

    SUBCASE("shape mismatch") {
        ad::Tape t;
        CHECK_THROWS_AS(dice_focal_loss(t.constant(volume_of({2, 2, 2})), volume_of({2, 2, 3})), Error);
    }
}

TEST_CASE("train step") {
    const ModelConfig cfg = small_model();
    const Sample s = sphere_sample(16, 7);
    const Pyramid pyr = build_pyramid(s.image, &s.label, cfg);
    std::vector<NcaLayerParams> layers = init_model(cfg, 5);
    // Non-zero output layers so the state actually changes.
    for (auto& l : layers) l.w2 = oracle::random_tensor(l.w2.shape(), 77, -0.1, 0.1);

    TrainConfig tc;
    tc.batch_size = 2;
    tc.dup_factor = 2;

    SUBCASE("replicas differ and the target is the congruent label crop") {
        const StepResult r = train_step({&pyr}, layers, cfg, tc, 123);
        REQUIRE(r.replica_losses.size() == 2);
        CHECK(r.replica_losses[0] != r.replica_losses[1]);
        CHECK(r.loss == doctest::Approx((r.replica_losses[0] + r.replica_losses[1]) / 2).epsilon(1e-6));
        CHECK(r.final_origins[0] != r.final_origins[1]);
        const Extent3 base = pyr.base_size();
        for (std::size_t j = 0; j < 2; ++j) {
            const Tensor crop = crop_oracle(s.label, r.final_origins[j], base);
            CHECK(std::equal(crop.data(), crop.data() + crop.numel(), r.target.channel(static_cast<std::int64_t>(j), 0)));
        }
        CHECK(r.loss == doctest::Approx(tensor_loss(r.prob, r.target)).epsilon(1e-5));
    }

    SUBCASE("every level receives gradient") {
        const StepResult r = train_step({&pyr}, layers, cfg, tc, 9);
        REQUIRE(r.grads.size() == 2);
        for (const auto& level : r.grads) {
            double norm = 0;
            for (const Tensor& g : level)
                for (std::int64_t i = 0; i < g.numel(); ++i) norm += std::abs(g[i]);
            CHECK(norm > 0);
            CHECK(std::isfinite(norm));
        }
    }

    SUBCASE("deterministic") {
        std::vector<NcaLayerParams> a = layers, b = layers;
        const StepResult ra = train_step({&pyr}, a, cfg, tc, 31);
        const StepResult rb = train_step({&pyr}, b, cfg, tc, 31);
        CHECK(ra.loss == rb.loss);
        for (std::size_t l = 0; l < ra.grads.size(); ++l)
            for (std::size_t i = 0; i < ra.grads[l].size(); ++i) CHECK(bit_equal(ra.grads[l][i], rb.grads[l][i]));
        CHECK(bit_equal(a[1].bn.running_mean, b[1].bn.running_mean));
    }

    SUBCASE("stored state does not grow with the full volume") {
        const ModelConfig std_cfg{};
        std::vector<NcaLayerParams> std_layers = init_model(std_cfg, 1);
        TrainConfig one = tc;
        one.batch_size = 1;
        one.dup_factor = 1;
        std::size_t peak[2];
        int i = 0;
        for (std::int64_t n : {61, 64}) {
            const Sample v = sphere_sample(n, 3);
            const Pyramid p = build_pyramid(v.image, &v.label, std_cfg);
            CHECK(p.base_size() == Extent3{16, 16, 16});
            peak[i++] = train_step({&p}, std_layers, std_cfg, one, 1).tape_peak_bytes;
        }
        CHECK(peak[0] == peak[1]);
    }

    SUBCASE("mixed geometry is rejected") {
        const Sample other = sphere_sample(24, 7);
        const Pyramid p2 = build_pyramid(other.image, &other.label, cfg);
        CHECK_THROWS_AS(train_step({&pyr, &p2}, layers, cfg, tc, 1), Error);
    }
}

TEST_CASE("single level collapses to full-grid training") {
    ModelConfig cfg = small_model(1);
    cfg.fire_rate = 1.0f;
    const Sample s = sphere_sample(12, 2);
    const Pyramid pyr = build_pyramid(s.image, &s.label, cfg);
    std::vector<NcaLayerParams> layers = init_model(cfg, 4);
    layers[0].w2 = oracle::random_tensor(layers[0].w2.shape(), 6, -0.1, 0.1);
    NcaLayerParams copy = layers[0];

    TrainConfig tc;
    tc.batch_size = 1;
    tc.dup_factor = 1;
    const StepResult r = train_step({&pyr}, layers, cfg, tc, 17);
    CHECK(r.final_origins.front() == Extent3{});
    CHECK(bit_equal(r.target, s.label));

    // Every cell fires, so the seeds are irrelevant.
    const std::uint64_t seed = 0;
    const StateGrid out = nca_run(make_state(s.image, cfg.channels), copy, step_count(s.image.extent(), 3), 0,
                                  {&seed, 1}, 1.0f, ad::BatchNormMode::train);
    Tensor prob = volume_of(s.image.extent());
    for (std::int64_t i = 0; i < prob.numel(); ++i) prob[i] = static_cast<float>(logistic(out.state.channel(0, 1)[i]));
    CHECK(r.loss == doctest::Approx(tensor_loss(prob, s.label)).epsilon(1e-5));
}

TEST_CASE("smoke training on a sphere") {
    const ModelConfig cfg{};
    const Sample s = sphere_sample(32, 21);
    const Pyramid pyr = build_pyramid(s.image, &s.label, cfg);
    Checkpoint model = fresh_checkpoint(cfg, 3);
    std::vector<Tensor*> params;
    for (auto& l : model.layers)
        for (Tensor* t : l.learnable()) params.push_back(t);
    ad::AdamState adam(std::vector<const Tensor*>(params.begin(), params.end()));
    TrainConfig tc;

    // Patches differ from step to step, so compare the model before and after
    // on the same fixed probe steps rather than on single training losses.
    auto probe = [&] {
        double total = 0;
        for (std::uint64_t i = 0; i < 8; ++i) {
            std::vector<NcaLayerParams> scratch = model.layers;
            total += train_step({&pyr}, scratch, cfg, tc, rng::derive(7, i)).loss;
        }
        return total / 8;
    };
    const double initial = probe();
    for (int step = 0; step < 200; ++step) {
        StepResult r = train_step({&pyr}, model.layers, cfg, tc, rng::derive(99, static_cast<std::uint64_t>(step)));
        std::vector<Tensor> grads;
        for (auto& g : r.grads)
            for (auto& t : g) grads.push_back(std::move(t));
        ad::AdamConfig ac = tc.adam;
        ac.lr = static_cast<float>(tc.adam.lr * std::pow(tc.lr_decay, step));
        ad::adam_step(params, grads, adam, ac);
    }
    const double final_loss = probe();
    MESSAGE("probe loss " << initial << " -> " << final_loss);
    CHECK(final_loss < 0.5 * initial);
}

TEST_CASE("training loop bookkeeping") {
    const ModelConfig cfg = small_model();
    SyntheticSpec spec;
    spec.extent = {16, 16, 16};
    spec.count = 3;
    const std::vector<Sample> data = generate(spec, 5);
    const std::vector<Sample> train_set(data.begin(), data.begin() + 2);
    const std::vector<Sample> held_out(data.begin() + 2, data.end());

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.dup_factor = 1;
    const TrainResult r = train(train_set, held_out, cfg, tc);
    CHECK(r.last.meta.optimizer_steps == 1);
    CHECK(r.step_losses.size() == 1);
    REQUIRE(r.history.size() == 1);
    CHECK(std::isfinite(r.history[0].eval_dice));
    CHECK(r.best.meta.best_eval_dice == r.history[0].eval_dice);
    CHECK(r.last.config.training_extent == Extent3{8, 8, 8});

    SUBCASE("same seed, same checkpoint") {
        TrainConfig two = tc;
        two.epochs = 2;
        two.dup_factor = 2;
        const TrainResult a = train(train_set, held_out, cfg, two);
        const TrainResult b = train(train_set, held_out, cfg, two);
        CHECK(a.last.meta.loss_digest == b.last.meta.loss_digest);
        for (std::size_t l = 0; l < a.last.layers.size(); ++l) {
            const auto pa = a.last.layers[l].learnable();
            const auto pb = b.last.layers[l].learnable();
            for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bit_equal(*pa[i], *pb[i]));
            CHECK(bit_equal(a.last.layers[l].bn.running_var, b.last.layers[l].bn.running_var));
        }
    }

    SUBCASE("config errors") {
        CHECK_THROWS_AS(train({}, {}, cfg, tc), Error);
        TrainConfig bad = tc;
        bad.batch_size = 3;
        bad.dup_factor = 2;
        CHECK_THROWS_AS(bad.validate(), Error);
    }
}
