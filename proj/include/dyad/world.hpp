#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyad/rng.hpp"
#include "dyad/tensor.hpp"

namespace dyad::world {

// Motion channel layout (d_mo = 6): pose, expression, lip, blink.
inline constexpr std::size_t kMotionDim = 6;
inline constexpr std::size_t kAudioDim = 4;  // envelope + 3 bands
inline constexpr std::size_t kChanNod = 0;
inline constexpr std::size_t kChanSway = 1;
inline constexpr std::size_t kChanSmile = 2;
inline constexpr std::size_t kChanBrow = 3;
inline constexpr std::size_t kChanLip = 4;
inline constexpr std::size_t kChanBlink = 5;
inline constexpr std::size_t kPoseChannels[2] = {kChanNod, kChanSway};
inline constexpr std::size_t kExprChannels[2] = {kChanSmile, kChanBrow};

struct WorldParams {
    std::size_t reaction_lag = 5;   // frames between user cue and avatar response
    float reaction_gain = 0.8f;     // 0 disables the coupling entirely
    float smile_rate = 0.01f;       // user smile events per frame (Poisson)
    std::size_t turn_min = 20;
    std::size_t turn_max = 60;
    float noise_scale = 0.05f;
    float speaking_threshold = 0.2f;
};

// Paired user/avatar sequences with fully known reactive coupling:
// avatar expression mirrors user smiles at reaction_lag, avatar pose nods
// after user audio stress peaks while listening, lips follow own audio.
struct DyadicClip {
    std::size_t frames = 0;
    Tensor user_motion;    // N x 6
    Tensor user_audio;     // N x 4
    Tensor avatar_audio;   // N x 4
    Tensor avatar_motion;  // N x 6 ground truth
    Tensor turn_schedule;  // N x 1: 0 user speaking, 1 avatar speaking
    std::vector<std::uint32_t> smile_events;
    std::vector<std::uint32_t> stress_peaks;

    // generation provenance, in-memory only; needed by passive_variant
    bool has_provenance = false;
    std::uint64_t gen_seed = 0;
    WorldParams gen_params;

    bool avatar_speaking(std::size_t n) const { return turn_schedule.at(n, 0) > 0.5f; }
};

// Deterministic per (seed, n, params); bit-identical on regeneration.
DyadicClip generate_clip(std::uint64_t seed, std::size_t n, const WorldParams& params);

// Reactive terms zeroed (regenerated with gain 0 on the same seed), non-lip
// motion scaled by 0.3, lip sync and audio untouched.
DyadicClip passive_variant(const DyadicClip& clip);

// Closed-form predictors used as analytic bounds in tests: one that mirrors
// the user's motion with the world's own lag/gain, one that only sees the
// user's audio envelope.
Tensor predict_lagged_mirror(const DyadicClip& clip, const WorldParams& params);
Tensor predict_audio_only(const DyadicClip& clip, const WorldParams& params);

// Dataset container: magic "AFDS", u32 version, u32 clip count; per clip the
// five tensors in checkpoint entry encoding plus the two event index lists.
void save_dataset(const std::vector<DyadicClip>& clips, const std::string& path);
std::vector<DyadicClip> load_dataset(const std::string& path);

}  // namespace dyad::world
