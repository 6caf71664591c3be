#include "m3dnca/nca.hpp"

#include <cmath>

#include "m3dnca/rng.hpp"

namespace m3dnca {

void ModelConfig::validate() const {
    require(levels >= 1, ErrorKind::config, "model needs at least one level");
    require(scale >= 2 || levels == 1, ErrorKind::config, "inter-level scale factor must be >= 2");
    require(static_cast<int>(kernel_sizes.size()) == levels, ErrorKind::config,
            "kernel_sizes has " + std::to_string(kernel_sizes.size()) + " entries for " + std::to_string(levels) +
                " levels");
    for (int k : kernel_sizes)
        require(k >= 1 && k % 2 == 1, ErrorKind::config, "kernel sizes must be odd, got " + std::to_string(k));
    require(channels >= 2, ErrorKind::config, "need at least 2 state channels (image and logit)");
    require(hidden >= 1, ErrorKind::config, "hidden width must be >= 1");
    validate_fire_rate(fire_rate);
    require(fixed_steps.empty() || static_cast<int>(fixed_steps.size()) == levels, ErrorKind::config,
            "fixed_steps must list one count per level");
    for (int s : fixed_steps) require(s >= 1, ErrorKind::config, "step counts must be >= 1");
}

void validate_fire_rate(float fire_rate) {
    require(fire_rate > 0.0f && fire_rate <= 1.0f, ErrorKind::config,
            "fire_rate must lie in (0, 1], got " + std::to_string(fire_rate));
}

std::vector<Tensor*> NcaLayerParams::learnable() { return {&perception, &w1, &b1, &gamma, &beta, &w2, &b2}; }

std::vector<const Tensor*> NcaLayerParams::learnable() const {
    return {&perception, &w1, &b1, &gamma, &beta, &w2, &b2};
}

const std::vector<std::string>& NcaLayerParams::learnable_names() {
    static const std::vector<std::string> names{"perception", "dense1.weight", "dense1.bias", "bn.gamma",
                                                "bn.beta",    "dense2.weight", "dense2.bias"};
    return names;
}

std::int64_t NcaLayerParams::learnable_count() const {
    std::int64_t n = 0;
    for (const Tensor* t : learnable()) n += t->numel();
    return n;
}

NcaLayerParams init_layer(const ModelConfig& config, int level, std::uint64_t seed) {
    config.validate();
    const std::int64_t c = config.channels, h = config.hidden;
    const std::int64_t k = config.kernel_sizes.at(static_cast<std::size_t>(level));
    rng::Stream s(rng::derive(seed, 0x1a7e5, static_cast<std::uint64_t>(level)));
    auto uniform = [&s](Tensor& t, double bound) {
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>((2.0 * s.uniform() - 1.0) * bound);
    };
    NcaLayerParams p;
    p.perception = Tensor({c, k, k, k});
    uniform(p.perception, 1.0 / std::sqrt(static_cast<double>(k * k * k)));
    p.w1 = Tensor({h, 2 * c});
    uniform(p.w1, std::sqrt(6.0 / static_cast<double>(2 * c)));
    p.b1 = Tensor({h}, 0.0f);
    p.gamma = Tensor({h}, 1.0f);
    p.beta = Tensor({h}, 0.0f);
    p.bn = ad::BatchNormStats{Tensor({h}, 0.0f), Tensor({h}, 1.0f)};
    p.w2 = Tensor({c, h}, 0.0f);
    p.b2 = Tensor({c}, 0.0f);
    return p;
}

std::vector<NcaLayerParams> init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    std::vector<NcaLayerParams> layers;
    for (int l = 0; l < config.levels; ++l) layers.push_back(init_layer(config, l, seed));
    return layers;
}

std::int64_t param_count(const ModelConfig& config) {
    config.validate();
    const std::int64_t c = config.channels, h = config.hidden;
    std::int64_t total = 0;
    for (int k : config.kernel_sizes) {
        const std::int64_t k3 = static_cast<std::int64_t>(k) * k * k;
        total += c * k3 + (2 * c * h + h) + 2 * h + (h * c + c);
    }
    return total;
}

int step_count(const Extent3& extent, int k) {
    require(k >= 3 && k % 2 == 1, ErrorKind::config,
            "step_count needs an odd kernel size >= 3, got " + std::to_string(k));
    const std::int64_t radius = (k - 1) / 2;
    const std::int64_t m = extent.max();
    return static_cast<int>(std::max<std::int64_t>(1, (m + radius - 1) / radius));
}

StateGrid make_state(const Tensor& image, std::int64_t channels, std::vector<Extent3> origins) {
    require(image.rank() == 5 && image.dim(1) == 1, ErrorKind::shape, "image must be [b,1,z,y,x]");
    require(channels >= 2, ErrorKind::config, "need at least 2 state channels");
    const std::int64_t b = image.dim(0);
    if (origins.empty()) origins.assign(static_cast<std::size_t>(b), Extent3{});
    require(static_cast<std::int64_t>(origins.size()) == b, ErrorKind::shape, "need one origin per batch element");
    StateGrid g{Tensor::volume(b, channels, image.extent()), image, std::move(origins)};
    const std::int64_t V = image.extent().voxels();
    for (std::int64_t i = 0; i < b; ++i) std::copy(image.channel(i, 0), image.channel(i, 0) + V, g.state.channel(i, 0));
    return g;
}

Tensor fire_mask(const Extent3& extent, std::span<const Extent3> origins, std::span<const std::uint64_t> seeds,
                 int level, int step, float fire_rate) {
    validate_fire_rate(fire_rate);
    require(origins.size() == seeds.size(), ErrorKind::shape, "fire_mask: need one seed per origin");
    const auto b = static_cast<std::int64_t>(origins.size());
    Tensor mask = Tensor::volume(b, 1, extent);
    for (std::int64_t i = 0; i < b; ++i) {
        const Extent3& o = origins[static_cast<std::size_t>(i)];
        const std::uint64_t seed = seeds[static_cast<std::size_t>(i)];
        float* m = mask.channel(i, 0);
        for (std::int64_t z = 0; z < extent.z; ++z)
            for (std::int64_t y = 0; y < extent.y; ++y)
                for (std::int64_t x = 0; x < extent.x; ++x)
                    *m++ = rng::fires(seed, level, step, o.z + z, o.y + y, o.x + x, fire_rate) ? 1.0f : 0.0f;
    }
    return mask;
}

LayerVars bind_layer(ad::Tape& tape, const NcaLayerParams& p, bool trainable) {
    auto bind = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    return LayerVars{bind(p.perception), bind(p.w1), bind(p.b1), bind(p.gamma), bind(p.beta), bind(p.w2), bind(p.b2)};
}

ad::Var nca_step(ad::Var state, const LayerVars& layer, ad::BatchNormStats& bn, ad::BatchNormMode mode,
                 const Tensor& image, const Tensor& mask) {
    using namespace ad;
    Var perceived = depthwise_conv3d(state, layer.perception);
    Var v = concat_channels(perceived, state);
    Var hidden = relu(batchnorm3d(dense_per_voxel(v, layer.w1, layer.b1), layer.gamma, layer.beta, bn, mode));
    Var update = dense_per_voxel(hidden, layer.w2, layer.b2);
    return assign_channel(masked_add(state, update, mask), 0, image);
}

StateGrid nca_step(const StateGrid& grid, NcaLayerParams& params, int level, int step,
                   std::span<const std::uint64_t> seeds, float fire_rate, ad::BatchNormMode mode) {
    validate_fire_rate(fire_rate);
    require(grid.state.dim(1) == params.channels(), ErrorKind::shape,
            "state has " + std::to_string(grid.state.dim(1)) + " channels, layer expects " +
                std::to_string(params.channels()));
    require(static_cast<std::int64_t>(seeds.size()) == grid.batch(), ErrorKind::shape,
            "nca_step: need one seed per batch element");
    const Tensor mask = fire_mask(grid.extent(), grid.origin, seeds, level, step, fire_rate);
    ad::Tape tape;
    const LayerVars layer = bind_layer(tape, params, false);
    ad::Var out = nca_step(tape.constant(grid.state), layer, params.bn, mode, grid.image, mask);
    return StateGrid{out.value(), grid.image, grid.origin};
}

StateGrid nca_run(StateGrid grid, NcaLayerParams& params, int steps, int level, std::span<const std::uint64_t> seeds,
                  float fire_rate, ad::BatchNormMode mode, int first_step) {
    require(steps >= 1, ErrorKind::config, "nca_run needs steps >= 1");
    for (int s = 0; s < steps; ++s) grid = nca_step(grid, params, level, first_step + s, seeds, fire_rate, mode);
    return grid;
}

}  // namespace m3dnca
