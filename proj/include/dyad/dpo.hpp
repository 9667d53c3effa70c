#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dyad/sampler.hpp"
#include "dyad/trainer.hpp"

namespace dyad::dpo {

struct DpoConfig {
    float beta = 1000.0f;   // deviation parameter
    float lambda = 0.1f;    // balance between the flow loss and the DPO term
    std::size_t steps = 500;
    std::size_t pair_batch = 4;  // preference pairs per fine-tune step
};

// Winner = embedded ground-truth avatar motion, loser = talking-only
// generation under the same avatar audio; conditions are the clip's full
// triplet. All latents normalized with the dataset stats.
struct PreferencePair {
    Tensor winner;  // N x d
    Tensor loser;   // N x d
    Tensor user_audio;
    Tensor user_latents;
    Tensor avatar_audio;
    Tensor reference_motion;  // d
};

// Trains the talking-only v_theta variant: user audio and user motion are
// zeroed at train time (and must be zeroed again at inference).
train::TrainResult train_talking_only(model::VectorFieldModel& m, const train::LatentDataset& data,
                                      train::TrainConfig cfg,
                                      const train::CheckpointHook& hook = nullptr);

struct PairBuildResult {
    std::vector<PreferencePair> pairs;
    std::size_t skipped = 0;
};

PairBuildResult build_pairs(const std::vector<world::DyadicClip>& clips, const train::LatentDataset& data,
                            const model::VectorFieldModel& talking_model, const codec::Codec& codec,
                            const codec::ObservationSpace& space, std::uint64_t world_seed,
                            const stream::SamplerConfig& sampler_cfg);

// Pair container: the dataset layout plus one loser tensor per clip
// (codec-space latents), magic "AFPP".
void save_pairs(const std::string& path, const std::vector<world::DyadicClip>& clips,
                const std::vector<Tensor>& losers_raw);
std::pair<std::vector<world::DyadicClip>, std::vector<Tensor>> load_pairs(const std::string& path);

// Diffusion-forcing DPO loss: shared noise and flow times for winner and
// loser; per-sequence errors are frame-averaged L1 distances to the
// respective target fields; one sigmoid on the aggregated margin.
struct DpoLossInfo {
    int loss = -1;    // scalar node
    int margin = -1;  // scalar node, (e_th_w - e_ref_w) - (e_th_l - e_ref_l)
};

template <typename T>
DpoLossInfo dpo_loss_node(TapeT<T>& tape, const BoundParams<T>& theta, const BoundParams<T>& ref,
                          const model::VectorFieldModel& m, const PreferencePair& pair,
                          std::size_t start, std::size_t len, SeededRng& rng, float beta) {
    if (start + len > pair.winner.rows()) throw std::invalid_argument("dpo_loss: window out of range");
    const std::size_t d = pair.winner.cols();
    auto cut = [&](const Tensor& t) {
        Tensor w({len, t.cols()});
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t c = 0; c < t.cols(); ++c) w.at(i, c) = t.at(start + i, c);
        return w;
    };
    const Tensor winner = cut(pair.winner);
    const Tensor loser = cut(pair.loser);
    const Tensor a_u = cut(pair.user_audio);
    const Tensor m_u = cut(pair.user_latents);
    const Tensor a = cut(pair.avatar_audio);

    // one noise sequence and one flow-time draw shared by both branches
    const Tensor m0 = gaussian(rng, {len, d});
    const auto times = train::sample_flow_times(len, rng, train::TimeScheme::Independent,
                                                m.config().frames_per_block);
    const Tensor noisy_w = train::noise_interpolate(winner, m0, times);
    const Tensor noisy_l = train::noise_interpolate(loser, m0, times);
    Tensor target_w(winner.shape), target_l(loser.shape);
    for (std::size_t i = 0; i < winner.numel(); ++i) {
        target_w.data[i] = winner.data[i] - m0.data[i];
        target_l.data[i] = loser.data[i] - m0.data[i];
    }

    auto branch_error = [&](const BoundParams<T>& bp, const Tensor& noisy, const Tensor& target) {
        auto cond = m.encode_condition_node(tape, bp, tape.constant(a_u.cast<T>()),
                                            tape.constant(m_u.cast<T>()), tape.constant(a.cast<T>()), 0);
        auto pred = m.forward_window_node(tape, bp, tape.constant(noisy.cast<T>()), times, cond,
                                          tape.constant(pair.reference_motion.cast<T>()), 0);
        return tape.mean_all(tape.abs_act(tape.sub(pred, tape.constant(target.cast<T>()))));
    };

    auto e_th_w = branch_error(theta, noisy_w, target_w);
    auto e_th_l = branch_error(theta, noisy_l, target_l);
    auto e_ref_w = branch_error(ref, noisy_w, target_w);
    auto e_ref_l = branch_error(ref, noisy_l, target_l);

    DpoLossInfo info;
    info.margin = tape.sub(tape.sub(e_th_w, e_ref_w), tape.sub(e_th_l, e_ref_l));
    // -log sigmoid(-beta * margin) = softplus(beta * margin)
    info.loss = tape.softplus(tape.scale(info.margin, T(beta)));
    return info;
}

struct FinetuneResult {
    std::vector<float> df_trace;
    std::vector<float> dpo_trace;
    std::vector<double> wall_ms;
};

// Eq-style combined objective: L_DF + lambda * L_DPO against a frozen
// reference copy; the reference is never touched.
FinetuneResult finetune(model::VectorFieldModel& m, const model::VectorFieldModel& ref,
                        const std::vector<PreferencePair>& pairs, const train::LatentDataset& data,
                        const train::TrainConfig& tcfg, const DpoConfig& dcfg,
                        const train::CheckpointHook& hook = nullptr);

}  // namespace dyad::dpo
