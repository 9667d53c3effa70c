#include "dyad/trainer.hpp"

#include <chrono>
#include <cmath>
#include <thread>

namespace dyad::train {

model::FlowTimes sample_flow_times(std::size_t n, SeededRng& rng, TimeScheme scheme,
                                   std::size_t frames_per_block) {
    model::FlowTimes times;
    times.t.resize(n);
    if (scheme == TimeScheme::Independent) {
        for (auto& v : times.t) v = static_cast<float>(rng.next_unit());
    } else {
        std::size_t i = 0;
        while (i < n) {
            const float v = static_cast<float>(rng.next_unit());
            for (std::size_t j = 0; j < frames_per_block && i < n; ++j, ++i) times.t[i] = v;
        }
    }
    return times;
}

Tensor noise_interpolate(const Tensor& m1, const Tensor& m0, const model::FlowTimes& t) {
    if (!m1.same_shape(m0)) throw std::invalid_argument("noise_interpolate: shape mismatch");
    if (t.t.size() != m1.rows()) throw std::invalid_argument("noise_interpolate: times length mismatch");
    Tensor out(m1.shape);
    const std::size_t d = m1.cols();
    for (std::size_t i = 0; i < m1.rows(); ++i) {
        const float tv = t.t[i];
        const float om = 1.0f - tv;
        for (std::size_t c = 0; c < d; ++c) {
            out.at(i, c) = tv * m1.at(i, c) + om * m0.at(i, c);
        }
    }
    return out;
}

LatentDataset embed_dataset(const std::vector<world::DyadicClip>& clips, const codec::Codec& codec,
                            const codec::ObservationSpace& space, std::uint64_t world_seed) {
    LatentDataset out;
    const std::size_t d = codec.config().latent_dim;
    std::vector<codec::EmbeddedClip> raw;
    raw.reserve(clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) {
        const Tensor uid = codec::identity_for(world_seed, i, 0, codec.config().id_dim);
        const Tensor aid = codec::identity_for(world_seed, i, 1, codec.config().id_dim);
        raw.push_back(codec::embed_motion(clips[i], codec, space, uid, aid));
    }

    // global per-channel standardization over both latent streams
    Tensor mean({d}), scale({d});
    double count = 0;
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    for (const auto& e : raw) {
        for (const Tensor* t : {&e.user_latents, &e.avatar_latents}) {
            for (std::size_t i = 0; i < t->rows(); ++i) {
                for (std::size_t c = 0; c < d; ++c) {
                    sum[c] += t->at(i, c);
                    sq[c] += static_cast<double>(t->at(i, c)) * t->at(i, c);
                }
            }
            count += static_cast<double>(t->rows());
        }
    }
    for (std::size_t c = 0; c < d; ++c) {
        const double mu = sum[c] / count;
        const double var = sq[c] / count - mu * mu;
        mean.data[c] = static_cast<float>(mu);
        scale.data[c] = static_cast<float>(std::max(std::sqrt(std::max(var, 0.0)), 1e-4));
    }
    out.mean = mean;
    out.scale = scale;

    auto standardize = [&](const Tensor& t) {
        Tensor s(t.shape);
        for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t c = 0; c < d; ++c) s.at(i, c) = (t.at(i, c) - mean.data[c]) / scale.data[c];
        return s;
    };
    for (std::size_t i = 0; i < clips.size(); ++i) {
        LatentClip lc;
        lc.user_latents = standardize(raw[i].user_latents);
        lc.avatar_latents = standardize(raw[i].avatar_latents);
        lc.user_audio = clips[i].user_audio;
        lc.avatar_audio = clips[i].avatar_audio;
        lc.reference_motion = Tensor({d});
        for (std::size_t c = 0; c < d; ++c) {
            lc.reference_motion.data[c] =
                (raw[i].avatar_reference_motion.data[c] - mean.data[c]) / scale.data[c];
        }
        out.clips.push_back(std::move(lc));
    }
    return out;
}

Window cut_window(const LatentClip& clip, std::size_t start, std::size_t len) {
    if (start + len > clip.avatar_latents.rows()) throw std::invalid_argument("cut_window: out of range");
    auto cut = [&](const Tensor& t) {
        Tensor w({len, t.cols()});
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t c = 0; c < t.cols(); ++c) w.at(i, c) = t.at(start + i, c);
        return w;
    };
    Window w;
    w.target = cut(clip.avatar_latents);
    w.user_latents = cut(clip.user_latents);
    w.user_audio = cut(clip.user_audio);
    w.avatar_audio = cut(clip.avatar_audio);
    w.reference_motion = clip.reference_motion;
    return w;
}

DfItemResult run_df_item(const model::VectorFieldModel& m, const LatentDataset& data,
                         const TrainConfig& cfg, std::uint64_t seed) {
    SeededRng rng(seed);
    const auto& clip = data.clips[rng.below(data.clips.size())];
    const std::size_t max_start = clip.avatar_latents.rows() - cfg.window;
    const std::size_t start = rng.below(max_start + 1);
    const Window w = cut_window(clip, start, cfg.window);

    Tape tape;
    auto bp = bind_params<float>(tape, m.params(), /*trainable=*/true);
    const auto info = df_loss_node(tape, bp, m, w, rng, cfg.p_drop, cfg.time_scheme, cfg.variant);
    DfItemResult r;
    r.loss = tape.val(info.loss).data[0];
    r.used_null = info.used_null;
    tape.backward(info.loss);
    r.grads = collect_grads(tape, bp);
    return r;
}

TrainResult train(model::VectorFieldModel& m, const LatentDataset& data, const TrainConfig& cfg,
                  const CheckpointHook& hook) {
    if (data.clips.empty()) throw std::invalid_argument("train: empty dataset");
    for (const auto& c : data.clips) {
        if (c.avatar_latents.rows() < cfg.window) {
            throw std::invalid_argument("train: clip shorter than the training window");
        }
    }
    m.set_latent_norm(data.mean, data.scale);

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    auto adam = AdamState::init(m.params(), acfg);
    std::size_t threads = cfg.threads == 0 ? std::thread::hardware_concurrency() : cfg.threads;
    threads = std::max<std::size_t>(1, std::min(threads, cfg.batch));

    TrainResult result;
    result.lr = cfg.lr;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<DfItemResult> items(cfg.batch);
        // batch items draw from per-item seeds, so any thread schedule
        // produces the same gradients; accumulation below is in item order
        auto worker = [&](std::size_t tid) {
            for (std::size_t b = tid; b < cfg.batch; b += threads) {
                items[b] = run_df_item(m, data, cfg, item_seed(cfg.seed, step, cfg.batch, b));
            }
        };
        if (threads == 1) {
            worker(0);
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t);
            for (auto& t : pool) t.join();
        }

        float mean_loss = 0;
        bool any_null = false;
        std::vector<Tensor> grads;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            mean_loss += items[b].loss;
            any_null = any_null || items[b].used_null;
            if (b == 0) {
                grads = std::move(items[b].grads);
            } else {
                for (std::size_t p = 0; p < grads.size(); ++p) {
                    for (std::size_t j = 0; j < grads[p].numel(); ++j) {
                        grads[p].data[j] += items[b].grads[p].data[j];
                    }
                }
            }
        }
        mean_loss /= static_cast<float>(cfg.batch);
        const float inv = 1.0f / static_cast<float>(cfg.batch);
        for (auto& g : grads) {
            for (auto& v : g.data) v *= inv;
        }
        if (!std::isfinite(mean_loss)) {
            throw NumericAbort(step, cfg.seed, "train: non-finite loss at step " + std::to_string(step));
        }
        adam_step(m.params(), grads, adam);

        result.loss_trace.push_back(mean_loss);
        if (any_null) ++result.null_condition_batches;
        result.wall_ms.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        if (hook) hook(step + 1, m);
    }
    return result;
}

}  // namespace dyad::train
