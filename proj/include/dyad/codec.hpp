#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dyad/param_store.hpp"
#include "dyad/rng.hpp"
#include "dyad/tape.hpp"
#include "dyad/tensor.hpp"
#include "dyad/world.hpp"

namespace dyad::codec {

struct CodecConfig {
    std::size_t obs_dim = 32;
    std::size_t id_dim = 8;
    std::size_t latent_dim = 16;
    std::size_t hidden = 64;
    // rank of the motion head bottleneck; keeps identity content out of m
    std::size_t motion_rank = 6;
};

// Frozen linear observation generator: obs = W_id id + W_mo motion + b with
// mutually orthonormal mixing columns, so ground-truth identity and motion
// content stay recoverable in closed form (the linear-world oracle).
class ObservationSpace {
public:
    static ObservationSpace make(std::uint64_t seed, std::size_t obs_dim = 32, std::size_t id_dim = 8,
                                 std::size_t motion_dim = world::kMotionDim);

    // rows of `ids`/`motions` are mixed rowwise; single vectors also accepted
    Tensor synth(const Tensor& id, const Tensor& motion) const;
    Tensor recover_motion(const Tensor& obs) const;
    Tensor recover_identity(const Tensor& obs) const;

    const Tensor& w_id() const { return w_id_; }
    const Tensor& w_mo() const { return w_mo_; }
    const Tensor& bias() const { return bias_; }
    std::size_t obs_dim() const { return bias_.numel(); }
    std::size_t id_dim() const { return w_id_.cols(); }
    std::size_t motion_dim() const { return w_mo_.cols(); }

private:
    Tensor w_id_;   // obs_dim x id_dim, orthonormal columns
    Tensor w_mo_;   // obs_dim x motion_dim, orthonormal columns
    Tensor bias_;   // obs_dim
};

// Deterministic identity vector for (world seed, clip index, role).
Tensor identity_for(std::uint64_t world_seed, std::size_t clip_index, int role, std::size_t id_dim);

// Two-layer perceptron encoder/decoder over observations. The motion head
// is a low-rank bottleneck (it cannot carry identity alongside motion), the
// identity latent is the residual z_S = z_raw - m, and the canonical full
// latent is the recomputed sum z_S + m, so the split heads sum to the full
// latent bit-exactly by construction.
class Codec {
public:
    Codec(CodecConfig cfg, std::uint64_t seed);
    static Codec from_store(ParamStore store);

    const CodecConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    bool trained() const { return trained_; }
    void mark_trained() { trained_ = true; sync_trained_flag(); }

    // rows = observations; returns (identity latents, motion latents)
    std::pair<Tensor, Tensor> encode(const Tensor& obs) const;
    Tensor encode_full(const Tensor& obs) const;  // = z_S + m as computed
    Tensor decode(const Tensor& z) const;

    // tape forward used by training and by the raw entry points; both MLPs
    // carry a linear skip so the nonlinear units only model corrections
    template <typename T>
    typename TapeT<T>::Id trunk_node(TapeT<T>& tape, const BoundParams<T>& b,
                                     typename TapeT<T>::Id obs) const {
        auto h = tape.silu(tape.linear(obs, b.id_of("codec/enc.w1"), b.id_of("codec/enc.b1")));
        auto mlp = tape.linear(h, b.id_of("codec/enc.w2"), b.id_of("codec/enc.b2"));
        return tape.add(mlp, tape.matmul(obs, b.id_of("codec/enc.skip")));
    }
    template <typename T>
    typename TapeT<T>::Id motion_head_node(TapeT<T>& tape, const BoundParams<T>& b,
                                           typename TapeT<T>::Id z_raw) const {
        // m = z W^T W: orthogonal projection onto a learned rank motion_rank
        // subspace (W is driven toward orthonormal rows during training).
        // The motion image fills that rank exactly, which squeezes identity
        // content out of m structurally.
        auto w = b.id_of("codec/mo.w");
        return tape.matmul(tape.matmul(z_raw, tape.transpose(w)), w);
    }
    template <typename T>
    typename TapeT<T>::Id decode_node(TapeT<T>& tape, const BoundParams<T>& b,
                                      typename TapeT<T>::Id z) const {
        auto h = tape.silu(tape.linear(z, b.id_of("codec/dec.w1"), b.id_of("codec/dec.b1")));
        auto mlp = tape.linear(h, b.id_of("codec/dec.w2"), b.id_of("codec/dec.b2"));
        return tape.add(mlp, tape.matmul(z, b.id_of("codec/dec.skip")));
    }

private:
    void sync_trained_flag();
    CodecConfig cfg_;
    ParamStore params_;
    bool trained_ = false;
};

// One identity, one motion sequence; the codec trains on same-identity
// cross reconstruction within these groups.
struct IdentityClip {
    Tensor identity;  // id_dim
    Tensor motion;    // N x motion_dim
};

std::vector<IdentityClip> identity_clips_from(const std::vector<world::DyadicClip>& clips,
                                              std::uint64_t world_seed, std::size_t id_dim);

struct CodecTrainReport {
    std::vector<float> loss_trace;
    std::size_t skipped_single_frame = 0;
    float initial_loss = 0;
    float final_loss = 0;
};

CodecTrainReport train_codec(Codec& codec, const ObservationSpace& space,
                             const std::vector<IdentityClip>& groups, std::size_t steps,
                             float lr, std::size_t batch, std::uint64_t seed);

// Per-frame motion latents for user and avatar streams of a clip.
struct EmbeddedClip {
    Tensor user_latents;    // N x d
    Tensor avatar_latents;  // N x d
    Tensor avatar_identity_latent;   // z_S of avatar frame 0
    Tensor avatar_reference_motion;  // m_S: motion latent of avatar frame 0
};

EmbeddedClip embed_motion(const world::DyadicClip& clip, const Codec& codec, const ObservationSpace& space,
                          const Tensor& user_id, const Tensor& avatar_id);

}  // namespace dyad::codec
