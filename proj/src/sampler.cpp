#include "dyad/sampler.hpp"

#include <chrono>
#include <cstring>
#include <fstream>

#include "dyad/checkpoint.hpp"

namespace dyad::stream {

namespace {

using Clock = std::chrono::steady_clock;

Tensor cut_rows(const Tensor& t, std::size_t r0, std::size_t r1) {
    Tensor out({r1 - r0, t.cols()});
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t c = 0; c < t.cols(); ++c) out.at(i - r0, c) = t.at(i, c);
    return out;
}

// cross-attention admits condition j (absolute frame cond0+j) for query row
// i (absolute row0+i) iff it falls in the sliding window [abs_i-half, abs_i+half)
mask::AttentionMask absolute_cross_mask(std::size_t rows, std::size_t row0, std::size_t cols,
                                        std::size_t cond0, std::size_t half) {
    mask::AttentionMask m(rows, cols, mask::MaskKind::Custom);
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t abs_i = row0 + i;
        for (std::size_t j = 0; j < cols; ++j) {
            const std::size_t abs_j = cond0 + j;
            m.set(i, j, abs_j + half >= abs_i && abs_j < abs_i + half);
        }
    }
    return m;
}

Tensor cfg_combine(const Tensor* v_null, const Tensor* v_cond, float s) {
    if (s == 0.0f) return *v_null;
    if (s == 1.0f) return *v_cond;
    Tensor out(v_cond->shape);
    const float a = 1.0f - s;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.data[i] = a * v_null->data[i] + s * v_cond->data[i];
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// KVCacheSet

KVCacheSet::KVCacheSet(std::size_t depth, std::size_t max_blocks)
    : depth_(depth), max_blocks_(max_blocks) {
    merged_.resize(depth_);
}

std::size_t KVCacheSet::frame_rows() const {
    std::size_t rows = 0;
    for (const auto& b : frame_blocks_) rows += b.empty() ? 0 : b[0].first.rows();
    return rows;
}

std::size_t KVCacheSet::byte_size() const {
    std::size_t bytes = 0;
    for (const auto& blocks : {frame_blocks_, cond_blocks_}) {
        for (const auto& b : blocks) {
            for (const auto& [k, v] : b) bytes += (k.numel() + v.numel()) * sizeof(float);
        }
    }
    return bytes;
}

void KVCacheSet::append(model::CacheCapture capture, std::size_t block_index) {
    if (capture.layers.size() != depth_) {
        throw std::invalid_argument("kv cache: capture layer count mismatch");
    }
    // Algorithm-style eviction: only when both buffers sit at capacity,
    // drop the oldest entry of every layer at once
    if (frame_blocks_.size() != cond_blocks_.size()) {
        throw std::logic_error("kv cache: frame/cond buffers diverged");
    }
    if (frame_blocks_.size() == max_blocks_) {
        frame_blocks_.pop_front();
        cond_blocks_.pop_front();
        ++first_block_;
    }
    std::vector<std::pair<Tensor, Tensor>> frames, conds;
    frames.reserve(depth_);
    conds.reserve(depth_);
    for (auto& l : capture.layers) {
        frames.emplace_back(std::move(l.k), std::move(l.v));
        conds.emplace_back(std::move(l.ck), std::move(l.cv));
    }
    if (frame_blocks_.empty()) first_block_ = block_index;
    frame_blocks_.push_back(std::move(frames));
    cond_blocks_.push_back(std::move(conds));
    materialize();
}

void KVCacheSet::materialize() {
    auto concat = [](Tensor& dst, const Tensor& add) {
        if (dst.numel() == 0) {
            dst = add;
            return;
        }
        Tensor merged({dst.rows() + add.rows(), add.cols()});
        std::copy(dst.data.begin(), dst.data.end(), merged.data.begin());
        std::copy(add.data.begin(), add.data.end(),
                  merged.data.begin() + static_cast<std::ptrdiff_t>(dst.numel()));
        dst = std::move(merged);
    };
    for (std::size_t l = 0; l < depth_; ++l) {
        merged_[l] = model::LayerKV{};
        for (std::size_t b = 0; b < frame_blocks_.size(); ++b) {
            concat(merged_[l].k, frame_blocks_[b][l].first);
            concat(merged_[l].v, frame_blocks_[b][l].second);
            concat(merged_[l].ck, cond_blocks_[b][l].first);
            concat(merged_[l].cv, cond_blocks_[b][l].second);
        }
    }
}

model::CacheView KVCacheSet::view() const {
    model::CacheView v;
    if (frame_blocks_.empty()) return v;
    for (const auto& l : merged_) v.layers.push_back(&l);
    return v;
}

LatencyReport build_latency_report(const std::vector<double>& per_block_ms) {
    if (per_block_ms.size() < 2) {
        throw std::invalid_argument("latency report requires at least two blocks");
    }
    LatencyReport r;
    r.per_block_ms = per_block_ms;
    r.first_block_ms = per_block_ms.front();
    double lo = 0, hi = 0;
    bool have = false;
    for (std::size_t i = 2; i < per_block_ms.size(); ++i) {
        if (!have) {
            lo = hi = per_block_ms[i];
            have = true;
        } else {
            lo = std::min(lo, per_block_ms[i]);
            hi = std::max(hi, per_block_ms[i]);
        }
    }
    r.max_min_ratio_after_warmup = have && lo > 0 ? hi / lo : 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// StreamSession

StreamSession::StreamSession(const model::VectorFieldModel& m, const codec::Codec* codec,
                             Tensor identity_latent, Tensor reference_motion_raw, SamplerConfig cfg)
    : model_(m),
      codec_(codec),
      identity_latent_(std::move(identity_latent)),
      cfg_(cfg),
      caches_(m.config().depth, cfg.max_cache_blocks),
      noise_rng_(SeededRng::mix(cfg.seed, 0xb10c)) {
    if (cfg_.ode_steps < 1) throw std::invalid_argument("session: ode_steps must be >= 1");
    if (cfg_.guidance < 0) throw std::invalid_argument("session: guidance must be >= 0");
    if (cfg_.max_cache_blocks < 1) throw std::invalid_argument("session: cache capacity must be >= 1");
    reference_motion_ = normalize(reference_motion_raw);
}

Tensor StreamSession::normalize(const Tensor& raw) const {
    const auto& mean = model_.latent_mean();
    const auto& scale = model_.latent_scale();
    Tensor out(raw.shape);
    const std::size_t d = raw.cols();
    for (std::size_t i = 0; i < raw.rows(); ++i)
        for (std::size_t c = 0; c < d; ++c) out.at(i, c) = (raw.at(i, c) - mean.data[c]) / scale.data[c];
    return out;
}

Tensor StreamSession::denormalize(const Tensor& norm) const {
    const auto& mean = model_.latent_mean();
    const auto& scale = model_.latent_scale();
    Tensor out(norm.shape);
    const std::size_t d = norm.cols();
    for (std::size_t i = 0; i < norm.rows(); ++i)
        for (std::size_t c = 0; c < d; ++c) out.at(i, c) = norm.at(i, c) * scale.data[c] + mean.data[c];
    return out;
}

Tensor StreamSession::encode_block_condition(const ConditionBlock& cond, std::size_t block_index) const {
    Tape tape;
    auto bp = bind_params<float>(tape, model_.params(), false);
    auto id = model_.encode_condition_node(tape, bp, tape.constant(cond.user_audio),
                                           tape.constant(normalize(cond.user_latents)),
                                           tape.constant(cond.avatar_audio),
                                           block_index * model_.config().frames_per_block);
    return tape.val(id);
}

Tensor StreamSession::eval_field(const Tensor& noisy, float t, const Tensor& cond_rows, std::size_t pos0,
                                 std::size_t cond_pos0, bool use_null,
                                 model::CacheCapture* capture) const {
    const auto& cfg = model_.config();
    const std::size_t rows = noisy.rows();
    Tape tape;
    auto bp = bind_params<float>(tape, model_.params(), false);
    model::FieldInputs in;
    in.noisy = tape.constant(noisy);
    in.times = model::FlowTimes::constant(rows, t);
    in.cond = use_null ? model_.null_condition_node(tape, bp, cond_rows.rows())
                       : tape.constant(cond_rows);
    in.reference_motion = tape.constant(reference_motion_);
    in.pos0 = pos0;
    in.cond_pos0 = cond_pos0;

    const auto cache_view = caches_.view();
    const std::size_t prefix = cache_view.empty() ? 0 : caches_.frame_rows();
    in.caches = cache_view.empty() ? nullptr : &cache_view;
    in.capture = capture;

    // self masks over [prefix | window rows]: every cached block is past,
    // within the window the configured kind applies (strict mode windows
    // are one block, where every kind reduces to full attention)
    mask::AttentionMask first(rows, prefix + rows, mask::MaskKind::Custom);
    mask::AttentionMask rest(rows, prefix + rows, mask::MaskKind::Custom);
    const auto window_masks = model::build_self_masks(cfg, rows);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < prefix; ++j) {
            first.set(i, j, true);
            rest.set(i, j, true);
        }
        for (std::size_t j = 0; j < rows; ++j) {
            first.set(i, prefix + j, window_masks.first->at(i, j));
            rest.set(i, prefix + j, window_masks.rest->at(i, j));
        }
    }
    in.self_mask_first = std::make_shared<const mask::AttentionMask>(std::move(first));
    in.self_mask_rest = std::make_shared<const mask::AttentionMask>(std::move(rest));

    const std::size_t cprefix = prefix;  // cached cond rows mirror cached frame rows
    const std::size_t cond0_abs =
        cache_view.empty() ? cond_pos0 : caches_.first_block_index() * cfg.frames_per_block;
    in.cross_mask = std::make_shared<const mask::AttentionMask>(
        absolute_cross_mask(rows, pos0, cprefix + cond_rows.rows(), cond0_abs, model::sliding_half(cfg)));

    auto out = model_.predict_field_node(tape, bp, in);
    return tape.val(out);
}

Tensor StreamSession::guided_field(const Tensor& noisy, float t, const Tensor& cond_rows,
                                   std::size_t pos0) const {
    const float s = cfg_.guidance;
    if (s == 1.0f) {
        return eval_field(noisy, t, cond_rows, pos0, pos0, false, nullptr);
    }
    if (s == 0.0f) {
        return eval_field(noisy, t, cond_rows, pos0, pos0, true, nullptr);
    }
    const Tensor vc = eval_field(noisy, t, cond_rows, pos0, pos0, false, nullptr);
    const Tensor vn = eval_field(noisy, t, cond_rows, pos0, pos0, true, nullptr);
    return cfg_combine(&vn, &vc, s);
}

Tensor StreamSession::emit_one(const Tensor& cond_rows) {
    const auto& cfg = model_.config();
    const std::size_t B = cfg.frames_per_block;
    const std::size_t d = cfg.latent_dim;
    const std::size_t block_index = blocks_emitted_;
    const std::size_t pos0 = block_index * B;
    const std::size_t rows = cond_rows.rows();

    Tensor m = gaussian(noise_rng_, {rows, d});
    const float dt = 1.0f / static_cast<float>(cfg_.ode_steps);
    for (std::size_t j = 0; j < cfg_.ode_steps; ++j) {
        const float t = static_cast<float>(j) * dt;
        const Tensor v = guided_field(m, t, cond_rows, pos0);
        for (std::size_t i = 0; i < m.numel(); ++i) m.data[i] += dt * v.data[i];
    }
    Tensor clean = cut_rows(m, 0, B);

    // cache update: one conditional pass of the clean block at t = 1
    model::CacheCapture capture;
    eval_field(clean, 1.0f, cut_rows(cond_rows, 0, B), pos0, pos0, false, &capture);
    caches_.append(std::move(capture), block_index);

    ++blocks_emitted_;
    return denormalize(clean);
}

std::vector<Tensor> StreamSession::push_block(const ConditionBlock& cond) {
    if (closed_) throw std::logic_error("push_block: session is closed");
    const auto& cfg = model_.config();
    const std::size_t B = cfg.frames_per_block;
    if (cond.user_audio.rows() != B || cond.user_latents.rows() != B || cond.avatar_audio.rows() != B) {
        throw std::invalid_argument("push_block: condition block must have frames_per_block rows");
    }
    const auto t0 = Clock::now();
    std::vector<Tensor> emitted;
    const Tensor encoded = encode_block_condition(cond, blocks_pushed_);
    ++blocks_pushed_;

    if (cfg_.mode == Mode::Strict) {
        emitted.push_back(emit_one(encoded));
    } else {
        pending_cond_.push_back(encoded);
        if (pending_cond_.size() > cfg.look_ahead) {
            // window = emission block + up to l buffered future blocks
            Tensor cond_rows = pending_cond_.front();
            for (std::size_t b = 1; b < pending_cond_.size(); ++b) {
                Tensor merged({cond_rows.rows() + B, cond_rows.cols()});
                std::copy(cond_rows.data.begin(), cond_rows.data.end(), merged.data.begin());
                std::copy(pending_cond_[b].data.begin(), pending_cond_[b].data.end(),
                          merged.data.begin() + static_cast<std::ptrdiff_t>(cond_rows.numel()));
                cond_rows = std::move(merged);
            }
            emitted.push_back(emit_one(cond_rows));
            pending_cond_.pop_front();
        }
    }
    wall_ms_.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    return emitted;
}

std::vector<Tensor> StreamSession::finish() {
    if (closed_) throw std::logic_error("finish: session already closed");
    closed_ = true;
    std::vector<Tensor> emitted;
    while (!pending_cond_.empty()) {
        const std::size_t B = model_.config().frames_per_block;
        Tensor cond_rows = pending_cond_.front();
        for (std::size_t b = 1; b < pending_cond_.size(); ++b) {
            Tensor merged({cond_rows.rows() + B, cond_rows.cols()});
            std::copy(cond_rows.data.begin(), cond_rows.data.end(), merged.data.begin());
            std::copy(pending_cond_[b].data.begin(), pending_cond_[b].data.end(),
                      merged.data.begin() + static_cast<std::ptrdiff_t>(cond_rows.numel()));
            cond_rows = std::move(merged);
        }
        emitted.push_back(emit_one(cond_rows));
        pending_cond_.pop_front();
    }
    return emitted;
}

Tensor StreamSession::decode_block(const Tensor& motion_block) const {
    if (!codec_) throw std::logic_error("decode_block: no codec attached");
    const std::size_t d = motion_block.cols();
    Tensor z({motion_block.rows(), d});
    for (std::size_t i = 0; i < motion_block.rows(); ++i)
        for (std::size_t c = 0; c < d; ++c) z.at(i, c) = identity_latent_.data[c] + motion_block.at(i, c);
    return codec_->decode(z);
}

LatencyReport StreamSession::latency_report() const { return build_latency_report(wall_ms_); }

// ---------------------------------------------------------------------------
// cache-free reference

namespace {

struct ReferenceContext {
    const model::VectorFieldModel* m;
    Tensor m_s;                   // normalized reference motion
    std::vector<Tensor> cond_enc;  // per-block encoded conditions

    Tensor denormalize(const Tensor& t) const {
        const auto& mean = m->latent_mean();
        const auto& scale = m->latent_scale();
        Tensor out(t.shape);
        for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t c = 0; c < t.cols(); ++c)
                out.at(i, c) = t.at(i, c) * scale.data[c] + mean.data[c];
        return out;
    }
};

ReferenceContext make_reference_context(const model::VectorFieldModel& m,
                                        const Tensor& reference_motion_raw,
                                        const std::vector<ConditionBlock>& conds) {
    const auto& mc = m.config();
    const std::size_t B = mc.frames_per_block;
    const auto& mean = m.latent_mean();
    const auto& scale = m.latent_scale();
    auto normalize = [&](const Tensor& raw) {
        Tensor out(raw.shape);
        for (std::size_t i = 0; i < raw.rows(); ++i)
            for (std::size_t c = 0; c < raw.cols(); ++c)
                out.at(i, c) = (raw.at(i, c) - mean.data[c]) / scale.data[c];
        return out;
    };
    ReferenceContext ctx;
    ctx.m = &m;
    ctx.m_s = normalize(reference_motion_raw);
    for (std::size_t b = 0; b < conds.size(); ++b) {
        Tape tape;
        auto bp = bind_params<float>(tape, m.params(), false);
        ctx.cond_enc.push_back(tape.val(m.encode_condition_node(
            tape, bp, tape.constant(conds[b].user_audio), tape.constant(normalize(conds[b].user_latents)),
            tape.constant(conds[b].avatar_audio), b * B)));
    }
    return ctx;
}

}  // namespace

std::vector<Tensor> generate_blockwise_reference(const model::VectorFieldModel& m,
                                                 const Tensor& reference_motion_raw,
                                                 const std::vector<ConditionBlock>& conds,
                                                 const SamplerConfig& cfg) {
    const auto& mc = m.config();
    const std::size_t B = mc.frames_per_block;
    const std::size_t d = mc.latent_dim;
    const std::size_t half = model::sliding_half(mc);
    if (conds.size() > cfg.max_cache_blocks) {
        throw std::invalid_argument(
            "blockwise reference covers k <= max_cache_blocks; use generate_truncated_reference");
    }
    SeededRng noise_rng(SeededRng::mix(cfg.seed, 0xb10c));
    const ReferenceContext ctx = make_reference_context(m, reference_motion_raw, conds);

    std::vector<Tensor> history;  // clean normalized blocks
    std::vector<Tensor> emitted;
    for (std::size_t blk = 0; blk < conds.size(); ++blk) {
        const std::size_t keep = history.size();
        const std::size_t rows = (keep + 1) * B;

        Tensor joined({rows, d});
        for (std::size_t b = 0; b < keep; ++b)
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t c = 0; c < d; ++c) joined.at(b * B + i, c) = history[b].at(i, c);

        Tensor cond_rows({rows, mc.width});
        for (std::size_t b = 0; b <= keep; ++b)
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t c = 0; c < mc.width; ++c)
                    cond_rows.at(b * B + i, c) = ctx.cond_enc[b].at(i, c);

        // blockwise causal over [history | current]; the cross window is
        // additionally clipped at each frame's own block end, which is what
        // the per-block streaming schedule implies
        auto self_mask = std::make_shared<const mask::AttentionMask>(
            mask::build_blockwise_causal_mask(rows, B));
        auto cross = absolute_cross_mask(rows, 0, rows, 0, half);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < rows; ++j)
                if (j / B > i / B) cross.set(i, j, false);
        auto cross_mask = std::make_shared<const mask::AttentionMask>(std::move(cross));

        // the null branch drops only the current block's condition; history
        // conditions stay real, mirroring what the rolling cKV cache holds
        Tensor cond_nulled = cond_rows;
        {
            const auto& null_emb = m.params().at("model/null_cond");
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t c = 0; c < mc.width; ++c)
                    cond_nulled.at(keep * B + i, c) = null_emb.data[c];
        }

        auto field = [&](const Tensor& cur, float t, bool use_null) {
            Tape tape;
            auto bp = bind_params<float>(tape, m.params(), false);
            Tensor noisy = joined;
            model::FlowTimes times = model::FlowTimes::constant(rows, 1.0f);
            for (std::size_t i = 0; i < B; ++i) {
                times.t[keep * B + i] = t;
                for (std::size_t c = 0; c < d; ++c) noisy.at(keep * B + i, c) = cur.at(i, c);
            }
            model::FieldInputs in;
            in.noisy = tape.constant(noisy);
            in.times = times;
            in.cond = tape.constant(use_null ? cond_nulled : cond_rows);
            in.reference_motion = tape.constant(ctx.m_s);
            in.self_mask_first = self_mask;
            in.self_mask_rest = self_mask;
            in.cross_mask = cross_mask;
            auto out = tape.val(m.predict_field_node(tape, bp, in));
            return cut_rows(out, keep * B, rows);
        };

        Tensor cur = gaussian(noise_rng, {B, d});
        const float dt = 1.0f / static_cast<float>(cfg.ode_steps);
        const float s = cfg.guidance;
        for (std::size_t j = 0; j < cfg.ode_steps; ++j) {
            const float t = static_cast<float>(j) * dt;
            Tensor v;
            if (s == 1.0f) {
                v = field(cur, t, false);
            } else if (s == 0.0f) {
                v = field(cur, t, true);
            } else {
                const Tensor vc = field(cur, t, false);
                const Tensor vn = field(cur, t, true);
                v = cfg_combine(&vn, &vc, s);
            }
            for (std::size_t i = 0; i < cur.numel(); ++i) cur.data[i] += dt * v.data[i];
        }
        history.push_back(cur);
        emitted.push_back(ctx.denormalize(cur));
    }
    return emitted;
}

std::vector<Tensor> generate_truncated_reference(const model::VectorFieldModel& m,
                                                 const Tensor& reference_motion_raw,
                                                 const std::vector<ConditionBlock>& conds,
                                                 const SamplerConfig& cfg) {
    const auto& mc = m.config();
    const std::size_t B = mc.frames_per_block;
    const std::size_t d = mc.latent_dim;
    const std::size_t half = model::sliding_half(mc);
    const std::size_t M = cfg.max_cache_blocks;
    SeededRng noise_rng(SeededRng::mix(cfg.seed, 0xb10c));
    const ReferenceContext ctx = make_reference_context(m, reference_motion_raw, conds);

    // per generated block, per layer (k, v, ck, cv) from its clean pass;
    // plain vectors, no ring-buffer bookkeeping
    std::vector<std::vector<model::LayerKV>> block_kv;
    std::vector<Tensor> emitted;

    for (std::size_t blk = 0; blk < conds.size(); ++blk) {
        const std::size_t keep = std::min(blk, M);
        const std::size_t first = blk - keep;
        const std::size_t prefix = keep * B;
        const std::size_t pos0 = blk * B;

        // concatenate the kept blocks' key/values per layer
        std::vector<model::LayerKV> merged(mc.depth);
        auto concat = [](Tensor& dst, const Tensor& add) {
            if (dst.numel() == 0) {
                dst = add;
                return;
            }
            Tensor out({dst.rows() + add.rows(), add.cols()});
            std::copy(dst.data.begin(), dst.data.end(), out.data.begin());
            std::copy(add.data.begin(), add.data.end(),
                      out.data.begin() + static_cast<std::ptrdiff_t>(dst.numel()));
            dst = std::move(out);
        };
        for (std::size_t b = first; b < blk; ++b) {
            for (std::size_t l = 0; l < mc.depth; ++l) {
                concat(merged[l].k, block_kv[b][l].k);
                concat(merged[l].v, block_kv[b][l].v);
                concat(merged[l].ck, block_kv[b][l].ck);
                concat(merged[l].cv, block_kv[b][l].cv);
            }
        }
        model::CacheView view;
        if (keep > 0) {
            for (const auto& l : merged) view.layers.push_back(&l);
        }

        auto self_mask = std::make_shared<const mask::AttentionMask>(mask::build_full_mask(B, prefix + B));
        auto cross_mask = std::make_shared<const mask::AttentionMask>(
            absolute_cross_mask(B, pos0, prefix + B, first * B, half));

        auto field = [&](const Tensor& cur, float t, bool use_null, model::CacheCapture* capture) {
            Tape tape;
            auto bp = bind_params<float>(tape, m.params(), false);
            model::FieldInputs in;
            in.noisy = tape.constant(cur);
            in.times = model::FlowTimes::constant(B, t);
            in.cond = use_null ? m.null_condition_node(tape, bp, B) : tape.constant(ctx.cond_enc[blk]);
            in.reference_motion = tape.constant(ctx.m_s);
            in.pos0 = pos0;
            in.cond_pos0 = pos0;
            in.self_mask_first = self_mask;
            in.self_mask_rest = self_mask;
            in.cross_mask = cross_mask;
            in.caches = view.layers.empty() ? nullptr : &view;
            in.capture = capture;
            return tape.val(m.predict_field_node(tape, bp, in));
        };

        Tensor cur = gaussian(noise_rng, {B, d});
        const float dt = 1.0f / static_cast<float>(cfg.ode_steps);
        const float s = cfg.guidance;
        for (std::size_t j = 0; j < cfg.ode_steps; ++j) {
            const float t = static_cast<float>(j) * dt;
            Tensor v;
            if (s == 1.0f) {
                v = field(cur, t, false, nullptr);
            } else if (s == 0.0f) {
                v = field(cur, t, true, nullptr);
            } else {
                const Tensor vc = field(cur, t, false, nullptr);
                const Tensor vn = field(cur, t, true, nullptr);
                v = cfg_combine(&vn, &vc, s);
            }
            for (std::size_t i = 0; i < cur.numel(); ++i) cur.data[i] += dt * v.data[i];
        }
        model::CacheCapture capture;
        field(cur, 1.0f, false, &capture);
        block_kv.push_back(std::move(capture.layers));
        emitted.push_back(ctx.denormalize(cur));
    }
    return emitted;
}

std::vector<ConditionBlock> make_condition_blocks(const world::DyadicClip& clip, const codec::Codec& codec,
                                                  const codec::ObservationSpace& space,
                                                  const Tensor& user_identity, std::size_t frames_per_block,
                                                  bool zero_user) {
    const std::size_t blocks = clip.frames / frames_per_block;
    Tensor idrow({1, user_identity.numel()});
    idrow.data = user_identity.data;
    Tensor user_latents;
    if (zero_user) {
        user_latents = Tensor::zeros({clip.frames, codec.config().latent_dim});
    } else {
        auto [zs, mm] = codec.encode(space.synth(idrow, clip.user_motion));
        (void)zs;
        user_latents = std::move(mm);
    }
    std::vector<ConditionBlock> out;
    for (std::size_t b = 0; b < blocks; ++b) {
        ConditionBlock cb;
        const std::size_t r0 = b * frames_per_block, r1 = (b + 1) * frames_per_block;
        cb.user_audio = zero_user ? Tensor::zeros({frames_per_block, clip.user_audio.cols()})
                                  : cut_rows(clip.user_audio, r0, r1);
        cb.user_latents = cut_rows(user_latents, r0, r1);
        cb.avatar_audio = cut_rows(clip.avatar_audio, r0, r1);
        out.push_back(std::move(cb));
    }
    return out;
}

// ---------------------------------------------------------------------------
// stream dump

void write_stream_dump(const std::string& path, const std::vector<Tensor>& blocks,
                       std::size_t frames_per_block) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointErrorCode::Io, "stream dump: cannot open " + path);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        write_u32(os, static_cast<std::uint32_t>(b));
        // media timestamp of the block start at the nominal 25 fps
        const std::uint64_t ns = static_cast<std::uint64_t>(b) * frames_per_block * (1000000000ull / 25);
        unsigned char raw[8];
        for (int i = 0; i < 8; ++i) raw[i] = static_cast<unsigned char>(ns >> (8 * i));
        os.write(reinterpret_cast<const char*>(raw), 8);
        write_tensor_entry(os, "motion", blocks[b]);
    }
    os.flush();
    if (!os) throw CheckpointError(CheckpointErrorCode::Io, "stream dump: write failed " + path);
}

std::vector<Tensor> read_stream_dump(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(CheckpointErrorCode::Io, "stream dump: cannot open " + path);
    std::vector<Tensor> out;
    while (true) {
        is.peek();
        if (is.eof()) break;
        read_u32(is);
        char ts[8];
        is.read(ts, 8);
        if (!is) throw CheckpointError(CheckpointErrorCode::Truncated, "stream dump: truncated timestamp");
        auto [name, t] = read_tensor_entry(is);
        if (name != "motion") {
            throw CheckpointError(CheckpointErrorCode::BadShape, "stream dump: unexpected entry " + name);
        }
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace dyad::stream
