#include "dyad/model.hpp"

#include <cmath>

#include "dyad/rng.hpp"

namespace dyad::model {

namespace {

Tensor uniform_init(SeededRng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_tensor(rng, std::move(shape), -s, s);
}

void add_linear(ParamStore& ps, SeededRng& rng, const std::string& name, std::size_t in, std::size_t out) {
    ps.add(name + ".w", uniform_init(rng, {in, out}, in));
    ps.add(name + ".b", Tensor::zeros({out}));
}

void add_attention(ParamStore& ps, SeededRng& rng, const std::string& name, std::size_t h) {
    for (const char* part : {"wq", "wk", "wv", "wo"}) {
        ps.add(name + "." + std::string(part), uniform_init(rng, {h, h}, h));
    }
    for (const char* part : {"bq", "bk", "bv", "bo"}) {
        ps.add(name + "." + std::string(part), Tensor::zeros({h}));
    }
}

}  // namespace

SelfMasks build_self_masks(const ModelConfig& cfg, std::size_t n) {
    auto share = [](mask::AttentionMask m) {
        return std::make_shared<const mask::AttentionMask>(std::move(m));
    };
    SelfMasks masks;
    switch (cfg.mask_kind) {
        case mask::MaskKind::BlockwiseLookahead:
            // look-ahead columns only in the first block; the causal mask in
            // deeper blocks composes transitively, so the network's total
            // look-ahead horizon stays exactly l
            masks.first = share(cfg.look_ahead_in_frames
                                    ? mask::build_lookahead_mask_frames(n, cfg.frames_per_block, cfg.look_ahead)
                                    : mask::build_lookahead_mask(n, cfg.frames_per_block, cfg.look_ahead));
            masks.rest = share(mask::build_blockwise_causal_mask(n, cfg.frames_per_block));
            break;
        case mask::MaskKind::BlockwiseCausal:
            masks.first = share(mask::build_blockwise_causal_mask(n, cfg.frames_per_block));
            masks.rest = masks.first;
            break;
        case mask::MaskKind::FramewiseCausal:
            masks.first = share(mask::build_framewise_causal_mask(n));
            masks.rest = masks.first;
            break;
        case mask::MaskKind::Full:
            masks.first = share(mask::build_full_mask(n, n));
            masks.rest = masks.first;
            break;
        default:
            throw std::invalid_argument("unsupported self mask kind");
    }
    return masks;
}

std::size_t sliding_half(const ModelConfig& cfg) { return std::max<std::size_t>(1, cfg.look_ahead); }

VectorFieldModel::VectorFieldModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.width % cfg.heads != 0) throw std::invalid_argument("model: width not divisible by heads");
    if ((cfg.width / cfg.heads) % 2 != 0) throw std::invalid_argument("model: head dim must be even for rotary");
    SeededRng rng(SeededRng::mix(seed, 0x0f1e1d));
    const std::size_t h = cfg.width, d = cfg.latent_dim, da = cfg.audio_dim;

    add_linear(params_, rng, "model/enc.in_mu", d, h);
    add_linear(params_, rng, "model/enc.in_au", da, h);
    add_linear(params_, rng, "model/enc.in_a", da, h);
    add_attention(params_, rng, "model/enc.ca1", h);
    add_attention(params_, rng, "model/enc.ca2", h);
    params_.add("model/null_cond", uniform_tensor(rng, {h}, -0.02, 0.02));

    add_linear(params_, rng, "model/in_proj", 2 * d, h);
    params_.add("model/time.w1", uniform_init(rng, {h, h}, h));
    params_.add("model/time.b1", Tensor::zeros({h}));
    params_.add("model/time.w2", uniform_init(rng, {h, h}, h));
    params_.add("model/time.b2", Tensor::zeros({h}));
    add_linear(params_, rng, "model/adaln", h, 6 * h);
    for (std::size_t layer = 0; layer < cfg.depth; ++layer) {
        const std::string p = "model/blk" + std::to_string(layer);
        add_attention(params_, rng, p + ".sa", h);
        add_attention(params_, rng, p + ".ca", h);
        params_.add(p + ".ff.w1", uniform_init(rng, {h, 4 * h}, h));
        params_.add(p + ".ff.b1", Tensor::zeros({4 * h}));
        params_.add(p + ".ff.w2", uniform_init(rng, {4 * h, h}, 4 * h));
        params_.add(p + ".ff.b2", Tensor::zeros({h}));
    }
    // zero-initialized output head: the field is identically zero at init
    params_.add("model/head.w", Tensor::zeros({h, d}));
    params_.add("model/head.b", Tensor::zeros({d}));

    params_.add("model/norm.mean", Tensor::zeros({d}), /*requires_grad=*/false);
    params_.add("model/norm.scale", Tensor::full({d}, 1.0f), /*requires_grad=*/false);
}

VectorFieldModel VectorFieldModel::from_store(ModelConfig cfg, ParamStore store) {
    VectorFieldModel m(cfg, 0);
    if (store.size() != m.params_.size()) {
        throw std::invalid_argument("model checkpoint does not match config (entry count)");
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& have = store.entry(i);
        const auto& want = m.params_.entry(i);
        if (have.name != want.name || have.value.shape != want.value.shape) {
            throw std::invalid_argument("model checkpoint does not match config at " + have.name);
        }
    }
    for (std::size_t i = 0; i < store.size(); ++i) {
        store.entry(i).requires_grad = m.params_.entry(i).requires_grad;
    }
    m.params_ = std::move(store);
    return m;
}

void VectorFieldModel::set_latent_norm(const Tensor& mean, const Tensor& scale) {
    params_.at("model/norm.mean") = mean;
    params_.at("model/norm.scale") = scale;
}

std::size_t VectorFieldModel::param_count(const ModelConfig& cfg) {
    const std::size_t h = cfg.width, d = cfg.latent_dim, da = cfg.audio_dim;
    auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
    auto attention = [&](std::size_t width) { return 4 * (width * width + width); };
    std::size_t n = 0;
    n += linear(d, h) + 2 * linear(da, h);  // encoder lifts
    n += 2 * attention(h);                  // CA1, CA2
    n += h;                                 // null condition embedding
    n += linear(2 * d, h);                  // input projection
    n += 2 * linear(h, h);                  // time embedding MLP
    n += linear(h, 6 * h);                  // shared AdaLN projection
    n += cfg.depth * (2 * attention(h) + linear(h, 4 * h) + linear(4 * h, h));
    n += linear(h, d);  // output head
    n += 2 * d;         // latent normalization stats
    return n;
}

}  // namespace dyad::model
