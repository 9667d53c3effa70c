#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dyad/codec.hpp"
#include "dyad/model.hpp"
#include "dyad/param_store.hpp"
#include "dyad/rng.hpp"
#include "dyad/world.hpp"

namespace dyad::train {

enum class TimeScheme { Independent, BlockwiseShared };
enum class ConditionVariant { Full, TalkingOnly };

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch = 8;
    float lr = 1e-4f;
    std::size_t window = 50;
    float p_drop = 0.1f;  // whole-window condition dropout for CFG
    std::uint64_t seed = 1;
    TimeScheme time_scheme = TimeScheme::Independent;
    ConditionVariant variant = ConditionVariant::Full;
    std::size_t threads = 0;  // 0 = hardware concurrency, capped at batch
};

// Thrown when training hits a non-finite loss; carries the step diagnostic.
class NumericAbort : public std::runtime_error {
public:
    NumericAbort(std::size_t step, std::uint64_t batch_seed, const std::string& what)
        : std::runtime_error(what), step_(step), batch_seed_(batch_seed) {}
    std::size_t step() const { return step_; }
    std::uint64_t batch_seed() const { return batch_seed_; }

private:
    std::size_t step_;
    std::uint64_t batch_seed_;
};

model::FlowTimes sample_flow_times(std::size_t n, SeededRng& rng, TimeScheme scheme,
                                   std::size_t frames_per_block);

// Per-frame linear interpolation between noise (t=0) and data (t=1); exact
// endpoints by construction.
Tensor noise_interpolate(const Tensor& m1, const Tensor& m0, const model::FlowTimes& t);

// Dataset embedded into the codec's motion latent space, standardized with
// global per-channel stats (kept so generation can be de-standardized).
struct LatentClip {
    Tensor user_latents;      // N x d
    Tensor avatar_latents;    // N x d
    Tensor user_audio;        // N x d_a
    Tensor avatar_audio;      // N x d_a
    Tensor reference_motion;  // d, avatar frame 0
};

struct LatentDataset {
    std::vector<LatentClip> clips;
    Tensor mean;   // d
    Tensor scale;  // d
};

LatentDataset embed_dataset(const std::vector<world::DyadicClip>& clips, const codec::Codec& codec,
                            const codec::ObservationSpace& space, std::uint64_t world_seed);

// One training window cut from a clip.
struct Window {
    Tensor target;  // window x d avatar latents (m1)
    Tensor user_latents;
    Tensor user_audio;
    Tensor avatar_audio;
    Tensor reference_motion;
};

Window cut_window(const LatentClip& clip, std::size_t start, std::size_t len);

// Diffusion-forcing loss for one window on the given tape. Draws the noise
// sequence, flow times, and the condition-dropout decision from rng.
struct DfLossInfo {
    int loss = -1;
    bool used_null = false;
};

template <typename T>
DfLossInfo df_loss_node(TapeT<T>& tape, const BoundParams<T>& bp, const model::VectorFieldModel& m,
                        const Window& w, SeededRng& rng, float p_drop, TimeScheme scheme,
                        ConditionVariant variant) {
    const std::size_t n = w.target.rows();
    const std::size_t d = w.target.cols();
    const Tensor m0f = gaussian(rng, {n, d});
    const auto times = sample_flow_times(n, rng, scheme, m.config().frames_per_block);
    const bool drop = rng.bernoulli(p_drop);
    const Tensor noisy_f = noise_interpolate(w.target, m0f, times);

    auto noisy = tape.constant(noisy_f.cast<T>());
    auto m_s = tape.constant(w.reference_motion.cast<T>());
    int cond;
    if (drop) {
        cond = m.null_condition_node(tape, bp, n);
    } else {
        Tensor ua = w.user_audio, um = w.user_latents;
        if (variant == ConditionVariant::TalkingOnly) {
            ua = Tensor::zeros(ua.shape);
            um = Tensor::zeros(um.shape);
        }
        cond = m.encode_condition_node(tape, bp, tape.constant(ua.cast<T>()), tape.constant(um.cast<T>()),
                                       tape.constant(w.avatar_audio.cast<T>()), 0);
    }
    auto pred = m.forward_window_node(tape, bp, noisy, times, cond, m_s, 0);

    // regression target is exactly m1 - m0, independent of t
    Tensor target_f(w.target.shape);
    for (std::size_t i = 0; i < target_f.numel(); ++i) target_f.data[i] = w.target.data[i] - m0f.data[i];
    auto err = tape.sub(pred, tape.constant(target_f.cast<T>()));
    DfLossInfo info;
    info.loss = tape.mean_all(tape.abs_act(err));
    info.used_null = drop;
    return info;
}

struct TrainResult {
    std::vector<float> loss_trace;  // one entry per step, mean over batch
    std::vector<double> wall_ms;    // per step
    std::size_t null_condition_batches = 0;
    float lr = 0;
};

// Deterministic per-item seed; shared by the trainer and the fine-tuner so
// a lambda = 0 fine-tune replays plain training bit for bit.
inline std::uint64_t item_seed(std::uint64_t seed, std::size_t step, std::size_t batch, std::size_t b) {
    return SeededRng::mix(seed, step * batch + b + 1);
}

// One batch item: sample a window, compute the loss and its gradients.
struct DfItemResult {
    float loss = 0;
    bool used_null = false;
    std::vector<Tensor> grads;
};
DfItemResult run_df_item(const model::VectorFieldModel& m, const LatentDataset& data,
                         const TrainConfig& cfg, std::uint64_t seed);

using CheckpointHook = std::function<void(std::size_t step, const model::VectorFieldModel&)>;

TrainResult train(model::VectorFieldModel& m, const LatentDataset& data, const TrainConfig& cfg,
                  const CheckpointHook& hook = nullptr);

}  // namespace dyad::train
