#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyad/mask.hpp"
#include "dyad/param_store.hpp"
#include "dyad/tape.hpp"
#include "dyad/tensor.hpp"

namespace dyad::model {

struct ModelConfig {
    std::size_t width = 64;       // h
    std::size_t heads = 4;
    std::size_t depth = 8;        // DFoT blocks
    std::size_t latent_dim = 16;  // d
    std::size_t audio_dim = 4;
    std::size_t frames_per_block = 10;
    std::size_t look_ahead = 2;   // l, in blocks for the Eq-style mask
    mask::MaskKind mask_kind = mask::MaskKind::BlockwiseLookahead;
    // frames-granularity reading of the look-ahead (off by default)
    bool look_ahead_in_frames = false;

    bool operator==(const ModelConfig&) const = default;
};

// Per-frame noise levels in [0,1].
struct FlowTimes {
    std::vector<float> t;
    static FlowTimes constant(std::size_t n, float v) {
        FlowTimes f;
        f.t.assign(n, v);
        return f;
    }
    void validate() const {
        for (float v : t) {
            if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("flow time outside [0,1]");
        }
    }
};

// Rolling-cache views consumed by the forward pass; rows are already-final
// key/value tensors of past frame and condition tokens (keys post-rotary).
struct LayerKV {
    Tensor k, v;    // frame tokens
    Tensor ck, cv;  // condition tokens
};
struct CacheView {
    std::vector<const LayerKV*> layers;  // size = depth, or empty for none
    bool empty() const { return layers.empty(); }
};
struct CacheCapture {
    std::vector<LayerKV> layers;
};

// Self masks for an n-frame window per the configured kind. The look-ahead
// columns live only in the first DFoT block; deeper blocks use the plain
// blockwise causal mask, which composes transitively, so the whole
// network's look-ahead horizon stays exactly l blocks.
struct SelfMasks {
    mask::MaskPtr first;
    mask::MaskPtr rest;
};
SelfMasks build_self_masks(const ModelConfig& cfg, std::size_t n);
// Conditioning mask: sliding window of 2*sliding_half frames.
std::size_t sliding_half(const ModelConfig& cfg);

struct FieldInputs {
    // ids refer to nodes already on the tape
    int noisy = -1;  // N x d current rows
    FlowTimes times;
    int cond = -1;  // Nc x h condition rows
    int reference_motion = -1;  // m_S, d vector
    std::size_t pos0 = 0;       // absolute frame index of noisy row 0
    std::size_t cond_pos0 = 0;  // absolute frame index of cond row 0
    mask::MaskPtr self_mask_first;  // rows = N, cols = cached frames + N
    mask::MaskPtr self_mask_rest;
    mask::MaskPtr cross_mask;  // rows = N, cols = cached conds + Nc
    const CacheView* caches = nullptr;
    CacheCapture* capture = nullptr;
};

class VectorFieldModel {
public:
    VectorFieldModel(ModelConfig cfg, std::uint64_t seed);
    static VectorFieldModel from_store(ModelConfig cfg, ParamStore store);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // Latent standardization applied by the data pipeline; stored with the
    // parameters so checkpoints reproduce generation exactly.
    void set_latent_norm(const Tensor& mean, const Tensor& scale);
    const Tensor& latent_mean() const { return params_.at("model/norm.mean"); }
    const Tensor& latent_scale() const { return params_.at("model/norm.scale"); }

    static std::size_t param_count(const ModelConfig& cfg);

    // ---- templated forward ------------------------------------------------

    // Dual Motion Encoder: CA1 aligns user motion (query) with user audio,
    // CA2 integrates avatar audio (query) with that alignment.
    template <typename T>
    int encode_condition_node(TapeT<T>& tape, const BoundParams<T>& bp, int a_u, int m_u, int a,
                              std::size_t pos0) const;

    // Learned null embedding broadcast to n rows (whole-condition dropout).
    template <typename T>
    int null_condition_node(TapeT<T>& tape, const BoundParams<T>& bp, std::size_t n) const;

    // Causal DFoT stack; masks and caches per FieldInputs.
    template <typename T>
    int predict_field_node(TapeT<T>& tape, const BoundParams<T>& bp, const FieldInputs& in) const;

    // Convenience full-window forward without caches: masks built from the
    // config (self mask per kind, sliding-window conditioning mask).
    template <typename T>
    int forward_window_node(TapeT<T>& tape, const BoundParams<T>& bp, int noisy, const FlowTimes& times,
                            int cond, int m_s, std::size_t pos0 = 0) const;

private:
    ModelConfig cfg_;
    ParamStore params_;
};

// Sinusoidal features of per-frame flow times, constant w.r.t. parameters.
template <typename T>
TensorT<T> time_features(const FlowTimes& times, std::size_t dim);

// ---------------------------------------------------------------------------
// template definitions

template <typename T>
TensorT<T> time_features(const FlowTimes& times, std::size_t dim) {
    const std::size_t n = times.t.size();
    const std::size_t half = dim / 2;
    TensorT<T> out({n, dim});
    for (std::size_t i = 0; i < n; ++i) {
        const double tv = static_cast<double>(times.t[i]);
        for (std::size_t p = 0; p < half; ++p) {
            const double frac = half > 1 ? static_cast<double>(p) / static_cast<double>(half - 1) : 0.0;
            const double omega = std::exp(std::log(1.0) + frac * (std::log(1000.0) - std::log(1.0)));
            out.at(i, 2 * p) = static_cast<T>(std::sin(tv * omega));
            out.at(i, 2 * p + 1) = static_cast<T>(std::cos(tv * omega));
        }
    }
    return out;
}

template <typename T>
int VectorFieldModel::encode_condition_node(TapeT<T>& tape, const BoundParams<T>& bp, int a_u, int m_u,
                                            int a, std::size_t pos0) const {
    const std::size_t n = tape.val(m_u).rows();
    if (tape.val(a_u).rows() != n || tape.val(a).rows() != n) {
        throw std::invalid_argument("encode_condition: stream length mismatch");
    }
    const auto heads = cfg_.heads;
    auto full = std::make_shared<const mask::AttentionMask>(mask::build_full_mask(n, n));

    auto x = tape.linear(m_u, bp.id_of("model/enc.in_mu.w"), bp.id_of("model/enc.in_mu.b"));
    auto c = tape.linear(a_u, bp.id_of("model/enc.in_au.w"), bp.id_of("model/enc.in_au.b"));
    {
        auto xq = tape.layer_norm(x);
        auto ckv = tape.layer_norm(c);
        auto q = tape.rope(tape.linear(xq, bp.id_of("model/enc.ca1.wq"), bp.id_of("model/enc.ca1.bq")), heads, pos0);
        auto k = tape.rope(tape.linear(ckv, bp.id_of("model/enc.ca1.wk"), bp.id_of("model/enc.ca1.bk")), heads, pos0);
        auto v = tape.linear(ckv, bp.id_of("model/enc.ca1.wv"), bp.id_of("model/enc.ca1.bv"));
        auto att = tape.masked_attention(q, k, v, full, heads);
        x = tape.add(x, tape.linear(att, bp.id_of("model/enc.ca1.wo"), bp.id_of("model/enc.ca1.bo")));
    }
    auto y = tape.linear(a, bp.id_of("model/enc.in_a.w"), bp.id_of("model/enc.in_a.b"));
    {
        auto yq = tape.layer_norm(y);
        auto xkv = tape.layer_norm(x);
        auto q = tape.rope(tape.linear(yq, bp.id_of("model/enc.ca2.wq"), bp.id_of("model/enc.ca2.bq")), heads, pos0);
        auto k = tape.rope(tape.linear(xkv, bp.id_of("model/enc.ca2.wk"), bp.id_of("model/enc.ca2.bk")), heads, pos0);
        auto v = tape.linear(xkv, bp.id_of("model/enc.ca2.wv"), bp.id_of("model/enc.ca2.bv"));
        auto att = tape.masked_attention(q, k, v, full, heads);
        y = tape.add(y, tape.linear(att, bp.id_of("model/enc.ca2.wo"), bp.id_of("model/enc.ca2.bo")));
    }
    return y;
}

template <typename T>
int VectorFieldModel::null_condition_node(TapeT<T>& tape, const BoundParams<T>& bp, std::size_t n) const {
    return tape.broadcast_rows(bp.id_of("model/null_cond"), n);
}

template <typename T>
int VectorFieldModel::predict_field_node(TapeT<T>& tape, const BoundParams<T>& bp,
                                         const FieldInputs& in) const {
    const std::size_t n = tape.val(in.noisy).rows();
    const std::size_t h = cfg_.width;
    if (in.times.t.size() != n) throw std::invalid_argument("predict_field: times length mismatch");
    in.times.validate();
    if (in.caches && !in.caches->empty() && in.caches->layers.size() != cfg_.depth) {
        throw std::invalid_argument("predict_field: cache layer count does not match depth");
    }
    if (in.capture) in.capture->layers.resize(cfg_.depth);
    const bool cached = in.caches && !in.caches->empty();

    // channel concat of the noisy frame with the reference motion latent
    auto x = tape.linear(tape.concat_cols(in.noisy, tape.broadcast_rows(in.reference_motion, n)),
                         bp.id_of("model/in_proj.w"), bp.id_of("model/in_proj.b"));

    // shared AdaLN: one projection from the time embedding to six
    // per-frame coefficient vectors used identically in every block
    auto tf = tape.constant(time_features<T>(in.times, h));
    auto te = tape.linear(tape.silu(tape.linear(tf, bp.id_of("model/time.w1"), bp.id_of("model/time.b1"))),
                          bp.id_of("model/time.w2"), bp.id_of("model/time.b2"));
    auto coeffs = tape.linear(tape.silu(te), bp.id_of("model/adaln.w"), bp.id_of("model/adaln.b"));
    auto sa_scale = tape.slice_cols(coeffs, 0, h);
    auto sa_shift = tape.slice_cols(coeffs, h, 2 * h);
    auto sa_gate = tape.slice_cols(coeffs, 2 * h, 3 * h);
    auto ff_scale = tape.slice_cols(coeffs, 3 * h, 4 * h);
    auto ff_shift = tape.slice_cols(coeffs, 4 * h, 5 * h);
    auto ff_gate = tape.slice_cols(coeffs, 5 * h, 6 * h);

    auto cond_ln = tape.layer_norm(in.cond);

    for (std::size_t layer = 0; layer < cfg_.depth; ++layer) {
        const std::string p = "model/blk" + std::to_string(layer);
        // self-attention, AdaLN-modulated
        {
            auto ln = tape.layer_norm(x);
            auto modded = tape.add(tape.mul(ln, tape.add_const(sa_scale, T(1))), sa_shift);
            auto q = tape.rope(tape.linear(modded, bp.id_of(p + ".sa.wq"), bp.id_of(p + ".sa.bq")),
                               cfg_.heads, in.pos0);
            auto k = tape.rope(tape.linear(modded, bp.id_of(p + ".sa.wk"), bp.id_of(p + ".sa.bk")),
                               cfg_.heads, in.pos0);
            auto v = tape.linear(modded, bp.id_of(p + ".sa.wv"), bp.id_of(p + ".sa.bv"));
            if (in.capture) {
                in.capture->layers[layer].k = tape.val(k).template cast<float>();
                in.capture->layers[layer].v = tape.val(v).template cast<float>();
            }
            if (cached) {
                k = tape.concat_rows(tape.constant(in.caches->layers[layer]->k.template cast<T>()), k);
                v = tape.concat_rows(tape.constant(in.caches->layers[layer]->v.template cast<T>()), v);
            }
            auto att = tape.masked_attention(q, k, v, layer == 0 ? in.self_mask_first : in.self_mask_rest,
                                             cfg_.heads);
            auto out = tape.linear(att, bp.id_of(p + ".sa.wo"), bp.id_of(p + ".sa.bo"));
            x = tape.add(x, tape.mul(sa_gate, out));
        }
        // cross-attention to the unified condition
        {
            auto ln = tape.layer_norm(x);
            auto q = tape.rope(tape.linear(ln, bp.id_of(p + ".ca.wq"), bp.id_of(p + ".ca.bq")),
                               cfg_.heads, in.pos0);
            auto k = tape.rope(tape.linear(cond_ln, bp.id_of(p + ".ca.wk"), bp.id_of(p + ".ca.bk")),
                               cfg_.heads, in.cond_pos0);
            auto v = tape.linear(cond_ln, bp.id_of(p + ".ca.wv"), bp.id_of(p + ".ca.bv"));
            if (in.capture) {
                in.capture->layers[layer].ck = tape.val(k).template cast<float>();
                in.capture->layers[layer].cv = tape.val(v).template cast<float>();
            }
            if (cached) {
                k = tape.concat_rows(tape.constant(in.caches->layers[layer]->ck.template cast<T>()), k);
                v = tape.concat_rows(tape.constant(in.caches->layers[layer]->cv.template cast<T>()), v);
            }
            auto att = tape.masked_attention(q, k, v, in.cross_mask, cfg_.heads);
            x = tape.add(x, tape.linear(att, bp.id_of(p + ".ca.wo"), bp.id_of(p + ".ca.bo")));
        }
        // feed-forward, AdaLN-modulated
        {
            auto ln = tape.layer_norm(x);
            auto modded = tape.add(tape.mul(ln, tape.add_const(ff_scale, T(1))), ff_shift);
            auto hmid = tape.gelu(tape.linear(modded, bp.id_of(p + ".ff.w1"), bp.id_of(p + ".ff.b1")));
            auto out = tape.linear(hmid, bp.id_of(p + ".ff.w2"), bp.id_of(p + ".ff.b2"));
            x = tape.add(x, tape.mul(ff_gate, out));
        }
    }
    return tape.linear(tape.layer_norm(x), bp.id_of("model/head.w"), bp.id_of("model/head.b"));
}

template <typename T>
int VectorFieldModel::forward_window_node(TapeT<T>& tape, const BoundParams<T>& bp, int noisy,
                                          const FlowTimes& times, int cond, int m_s,
                                          std::size_t pos0) const {
    const std::size_t n = tape.val(noisy).rows();
    FieldInputs in;
    in.noisy = noisy;
    in.times = times;
    in.cond = cond;
    in.reference_motion = m_s;
    in.pos0 = pos0;
    in.cond_pos0 = pos0;
    const auto masks = build_self_masks(cfg_, n);
    in.self_mask_first = masks.first;
    in.self_mask_rest = masks.rest;
    in.cross_mask =
        std::make_shared<const mask::AttentionMask>(mask::build_sliding_window_mask(n, sliding_half(cfg_)));
    return predict_field_node(tape, bp, in);
}

}  // namespace dyad::model
