#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "dyad/codec.hpp"
#include "dyad/model.hpp"
#include "dyad/rng.hpp"
#include "dyad/world.hpp"

namespace dyad::stream {

enum class Mode {
    // one block in, one block out; look-ahead columns never materialize
    Strict,
    // buffer l blocks and co-denoise a sliding window so look-ahead
    // attention is realized; emission is delayed by l blocks
    Delayed,
};

struct SamplerConfig {
    std::size_t ode_steps = 10;        // Euler NFEs per block
    float guidance = 2.0f;             // classifier-free guidance scale
    std::size_t max_cache_blocks = 8;  // M
    std::uint64_t seed = 0;
    Mode mode = Mode::Strict;
};

// One block of the condition triplet; m_u in raw codec latent space.
struct ConditionBlock {
    Tensor user_audio;    // B x d_a
    Tensor user_latents;  // B x d
    Tensor avatar_audio;  // B x d_a
};

// Per-layer rolling buffers of past frame K/V and condition K/V.
class KVCacheSet {
public:
    KVCacheSet(std::size_t depth, std::size_t max_blocks);

    std::size_t cached_blocks() const { return frame_blocks_.size(); }
    std::size_t max_blocks() const { return max_blocks_; }
    std::size_t first_block_index() const { return first_block_; }
    std::size_t frame_rows() const;
    std::size_t byte_size() const;

    // appends the current block, evicting the oldest entry from every
    // layer simultaneously when at capacity
    void append(model::CacheCapture capture, std::size_t block_index);

    // concatenated per-layer view; valid until the next append
    model::CacheView view() const;

private:
    void materialize();

    std::size_t depth_;
    std::size_t max_blocks_;
    std::size_t first_block_ = 0;
    // frame-token and condition-token entries kept separately so the
    // equality |KV| == |cKV| is an actual runtime check
    std::deque<std::vector<std::pair<Tensor, Tensor>>> frame_blocks_;  // per block, per layer (k, v)
    std::deque<std::vector<std::pair<Tensor, Tensor>>> cond_blocks_;   // per block, per layer (ck, cv)
    std::vector<model::LayerKV> merged_;
};

struct LatencyReport {
    std::vector<double> per_block_ms;
    double first_block_ms = 0;
    double max_min_ratio_after_warmup = 0;  // blocks 3+ only
};

LatencyReport build_latency_report(const std::vector<double>& per_block_ms);

// Blockwise autoregressive generation with rolling caches, Euler ODE
// integration and classifier-free guidance.
class StreamSession {
public:
    StreamSession(const model::VectorFieldModel& m, const codec::Codec* codec, Tensor identity_latent,
                  Tensor reference_motion_raw, SamplerConfig cfg);

    // Consumes exactly one block of conditions; returns the motion blocks
    // emitted by this push (strict: always one; delayed: none until the
    // look-ahead buffer is full). Emitted latents are in codec space.
    std::vector<Tensor> push_block(const ConditionBlock& cond);

    // Delayed mode: drain buffered blocks at end of stream.
    std::vector<Tensor> finish();

    // decode(z_S + m) through the attached codec
    Tensor decode_block(const Tensor& motion_block) const;

    std::size_t blocks_emitted() const { return blocks_emitted_; }
    std::size_t blocks_pushed() const { return blocks_pushed_; }
    const std::vector<double>& block_wall_ms() const { return wall_ms_; }
    LatencyReport latency_report() const;
    const KVCacheSet& caches() const { return caches_; }
    bool closed() const { return closed_; }

private:
    Tensor normalize(const Tensor& raw) const;
    Tensor denormalize(const Tensor& norm) const;
    Tensor encode_block_condition(const ConditionBlock& cond, std::size_t block_index) const;
    Tensor eval_field(const Tensor& noisy, float t, const Tensor& cond_rows, std::size_t pos0,
                      std::size_t cond_pos0, bool use_null, model::CacheCapture* capture) const;
    Tensor guided_field(const Tensor& noisy, float t, const Tensor& cond_rows, std::size_t pos0) const;
    Tensor emit_one(const Tensor& cond_rows);

    const model::VectorFieldModel& model_;
    const codec::Codec* codec_;
    Tensor identity_latent_;
    Tensor reference_motion_;  // normalized
    SamplerConfig cfg_;
    KVCacheSet caches_;
    SeededRng noise_rng_;
    std::size_t blocks_pushed_ = 0;
    std::size_t blocks_emitted_ = 0;
    std::vector<double> wall_ms_;
    bool closed_ = false;
    // delayed-mode condition buffer (encoded per block on arrival)
    std::deque<Tensor> pending_cond_;
    std::deque<Tensor> pending_raw_mu_;
};

// Cache-free reference for k <= M blocks: every field evaluation is one
// joined forward over [clean history | current block] with blockwise-causal
// masks and per-block condition encoding — no cache machinery at all.
std::vector<Tensor> generate_blockwise_reference(const model::VectorFieldModel& m,
                                                 const Tensor& reference_motion_raw,
                                                 const std::vector<ConditionBlock>& conds,
                                                 const SamplerConfig& cfg);

// Sequential replay defining the rolling-cache semantics for any k: block
// k sees the most recent M blocks' key/values, each of which was produced
// against its own truncated prefix at its own generation time. Uses plain
// vectors instead of the KVCacheSet bookkeeping.
std::vector<Tensor> generate_truncated_reference(const model::VectorFieldModel& m,
                                                 const Tensor& reference_motion_raw,
                                                 const std::vector<ConditionBlock>& conds,
                                                 const SamplerConfig& cfg);

// Condition blocks of a clip embedded through the codec; talking-only
// variants zero the user streams.
std::vector<ConditionBlock> make_condition_blocks(const world::DyadicClip& clip, const codec::Codec& codec,
                                                  const codec::ObservationSpace& space,
                                                  const Tensor& user_identity, std::size_t frames_per_block,
                                                  bool zero_user);

// Stream dump: per block u32 index, u64 media timestamp in ns (block start
// at the nominal 25 fps; deterministic by design), then the motion tensor.
void write_stream_dump(const std::string& path, const std::vector<Tensor>& blocks,
                       std::size_t frames_per_block);
std::vector<Tensor> read_stream_dump(const std::string& path);

}  // namespace dyad::stream
