#include "dyad/codec.hpp"

#include <cmath>
#include <iostream>
#include <stdexcept>

namespace dyad::codec {

namespace {

// Gram-Schmidt in double over gaussian columns; the joint basis keeps the
// identity and motion subspaces exactly orthogonal.
std::vector<std::vector<double>> orthonormal_columns(SeededRng& rng, std::size_t dim, std::size_t count) {
    std::vector<std::vector<double>> cols;
    while (cols.size() < count) {
        std::vector<double> v(dim);
        for (auto& x : v) x = rng.next_gauss();
        for (const auto& u : cols) {
            double dot = 0;
            for (std::size_t i = 0; i < dim; ++i) dot += v[i] * u[i];
            for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * u[i];
        }
        double norm = 0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-6) continue;  // degenerate draw, resample
        for (auto& x : v) x /= norm;
        cols.push_back(std::move(v));
    }
    return cols;
}

Tensor uniform_init(SeededRng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_tensor(rng, std::move(shape), -s, s);
}

}  // namespace

ObservationSpace ObservationSpace::make(std::uint64_t seed, std::size_t obs_dim, std::size_t id_dim,
                                        std::size_t motion_dim) {
    if (id_dim + motion_dim > obs_dim) {
        throw std::invalid_argument("observation space: latent factors exceed observation dim");
    }
    SeededRng rng(SeededRng::mix(seed, 0x0b5e11));
    const auto cols = orthonormal_columns(rng, obs_dim, id_dim + motion_dim);
    ObservationSpace s;
    s.w_id_ = Tensor({obs_dim, id_dim});
    s.w_mo_ = Tensor({obs_dim, motion_dim});
    for (std::size_t i = 0; i < obs_dim; ++i) {
        for (std::size_t j = 0; j < id_dim; ++j) s.w_id_.at(i, j) = static_cast<float>(cols[j][i]);
        for (std::size_t j = 0; j < motion_dim; ++j) {
            s.w_mo_.at(i, j) = static_cast<float>(cols[id_dim + j][i]);
        }
    }
    s.bias_ = uniform_tensor(rng, {obs_dim}, -0.15, 0.15);
    return s;
}

Tensor ObservationSpace::synth(const Tensor& id, const Tensor& motion) const {
    const std::size_t rows = std::max(id.rows(), motion.rows());
    if (id.cols() != id_dim() || motion.cols() != motion_dim()) {
        throw std::invalid_argument("synth: factor width mismatch");
    }
    Tensor out({rows, obs_dim()});
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t ri = id.rows() == 1 ? 0 : r;
        const std::size_t rm = motion.rows() == 1 ? 0 : r;
        for (std::size_t i = 0; i < obs_dim(); ++i) {
            float v = bias_.data[i];
            for (std::size_t j = 0; j < id_dim(); ++j) v += w_id_.at(i, j) * id.at(ri, j);
            for (std::size_t j = 0; j < motion_dim(); ++j) v += w_mo_.at(i, j) * motion.at(rm, j);
            out.at(r, i) = v;
        }
    }
    if (rows == 1 && id.rank() == 1 && motion.rank() == 1) out.shape = {obs_dim()};
    return out;
}

Tensor ObservationSpace::recover_motion(const Tensor& obs) const {
    const std::size_t rows = obs.rows();
    Tensor out({rows, motion_dim()});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < motion_dim(); ++j) {
            float v = 0;
            for (std::size_t i = 0; i < obs_dim(); ++i) v += w_mo_.at(i, j) * (obs.at(r, i) - bias_.data[i]);
            out.at(r, j) = v;
        }
    }
    return out;
}

Tensor ObservationSpace::recover_identity(const Tensor& obs) const {
    const std::size_t rows = obs.rows();
    Tensor out({rows, id_dim()});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < id_dim(); ++j) {
            float v = 0;
            for (std::size_t i = 0; i < obs_dim(); ++i) v += w_id_.at(i, j) * (obs.at(r, i) - bias_.data[i]);
            out.at(r, j) = v;
        }
    }
    return out;
}

Tensor identity_for(std::uint64_t world_seed, std::size_t clip_index, int role, std::size_t id_dim) {
    SeededRng rng(SeededRng::mix(world_seed ^ 0x1dull, clip_index * 2 + static_cast<std::size_t>(role)));
    return gaussian(rng, {id_dim});
}

Codec::Codec(CodecConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    SeededRng rng(SeededRng::mix(seed, 0xc0dec));
    params_.add("codec/enc.w1", uniform_init(rng, {cfg.obs_dim, cfg.hidden}, cfg.obs_dim));
    params_.add("codec/enc.b1", Tensor::zeros({cfg.hidden}));
    params_.add("codec/enc.w2", uniform_init(rng, {cfg.hidden, cfg.latent_dim}, cfg.hidden));
    params_.add("codec/enc.b2", Tensor::zeros({cfg.latent_dim}));
    params_.add("codec/enc.skip", uniform_init(rng, {cfg.obs_dim, cfg.latent_dim}, cfg.obs_dim));
    params_.add("codec/mo.w", uniform_init(rng, {cfg.motion_rank, cfg.latent_dim}, cfg.latent_dim));
    params_.add("codec/dec.w1", uniform_init(rng, {cfg.latent_dim, cfg.hidden}, cfg.latent_dim));
    params_.add("codec/dec.b1", Tensor::zeros({cfg.hidden}));
    params_.add("codec/dec.w2", uniform_init(rng, {cfg.hidden, cfg.obs_dim}, cfg.hidden));
    params_.add("codec/dec.b2", Tensor::zeros({cfg.obs_dim}));
    params_.add("codec/dec.skip", uniform_init(rng, {cfg.latent_dim, cfg.obs_dim}, cfg.latent_dim));
    params_.add("codec/trained", Tensor::scalar(0.0f), /*requires_grad=*/false);
}

Codec Codec::from_store(ParamStore store) {
    CodecConfig cfg;
    cfg.obs_dim = store.at("codec/enc.w1").shape[0];
    cfg.hidden = store.at("codec/enc.w1").shape[1];
    cfg.latent_dim = store.at("codec/enc.w2").shape[1];
    cfg.motion_rank = store.at("codec/mo.w").shape[0];
    Codec c(cfg, 0);
    const bool trained = store.at("codec/trained").data[0] > 0.5f;
    c.params_ = std::move(store);
    for (std::size_t i = 0; i < c.params_.size(); ++i) {
        if (c.params_.entry(i).name == "codec/trained") c.params_.entry(i).requires_grad = false;
    }
    c.trained_ = trained;
    return c;
}

void Codec::sync_trained_flag() { params_.at("codec/trained").data[0] = trained_ ? 1.0f : 0.0f; }

std::pair<Tensor, Tensor> Codec::encode(const Tensor& obs) const {
    if (!trained_) {
        std::cerr << "[codec] warning: encoding with an untrained codec\n";
    }
    Tape tape;
    auto bound = bind_params<float>(tape, params_, /*trainable=*/false);
    auto in = tape.constant(obs);
    auto z_raw = trunk_node(tape, bound, in);
    auto m = motion_head_node(tape, bound, z_raw);
    auto zs = tape.sub(z_raw, m);
    return {tape.val(zs), tape.val(m)};
}

Tensor Codec::encode_full(const Tensor& obs) const {
    auto [zs, m] = encode(obs);
    Tensor z = zs;
    for (std::size_t i = 0; i < z.numel(); ++i) z.data[i] += m.data[i];
    return z;
}

Tensor Codec::decode(const Tensor& z) const {
    Tape tape;
    auto bound = bind_params<float>(tape, params_, false);
    return tape.val(decode_node(tape, bound, tape.constant(z)));
}

std::vector<IdentityClip> identity_clips_from(const std::vector<world::DyadicClip>& clips,
                                              std::uint64_t world_seed, std::size_t id_dim) {
    std::vector<IdentityClip> out;
    out.reserve(clips.size() * 2);
    for (std::size_t i = 0; i < clips.size(); ++i) {
        out.push_back({identity_for(world_seed, i, 0, id_dim), clips[i].user_motion});
        out.push_back({identity_for(world_seed, i, 1, id_dim), clips[i].avatar_motion});
    }
    return out;
}

CodecTrainReport train_codec(Codec& codec, const ObservationSpace& space,
                             const std::vector<IdentityClip>& groups, std::size_t steps,
                             float lr, std::size_t batch, std::uint64_t seed) {
    CodecTrainReport report;
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        if (groups[i].motion.rows() >= 2) {
            usable.push_back(i);
        } else {
            ++report.skipped_single_frame;
        }
    }
    if (usable.empty()) throw std::invalid_argument("train_codec: no identity with >= 2 observations");

    AdamConfig acfg;
    acfg.lr = lr;
    auto adam = AdamState::init(codec.params(), acfg);
    SeededRng rng(SeededRng::mix(seed, 0x7a11));

    for (std::size_t step = 0; step < steps; ++step) {
        // linear decay to 10% quiets late-training gradient noise
        adam.cfg.lr = lr * static_cast<float>(1.0 - 0.97 * static_cast<double>(step) / static_cast<double>(steps));
        // assemble a batch of same-identity (source, driving) observation pairs
        Tensor src({batch, space.obs_dim()});
        Tensor drv({batch, space.obs_dim()});
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& g = groups[usable[rng.below(usable.size())]];
            const std::size_t n = g.motion.rows();
            const std::size_t s = rng.below(n);
            const std::size_t d = rng.below(n);
            Tensor ms({1, g.motion.cols()});
            Tensor md({1, g.motion.cols()});
            for (std::size_t c = 0; c < g.motion.cols(); ++c) {
                ms.at(0, c) = g.motion.at(s, c);
                md.at(0, c) = g.motion.at(d, c);
            }
            Tensor id({1, g.identity.numel()});
            for (std::size_t c = 0; c < id.cols(); ++c) id.at(0, c) = g.identity.data[c];
            const Tensor os = space.synth(id, ms);
            const Tensor od = space.synth(id, md);
            for (std::size_t c = 0; c < space.obs_dim(); ++c) {
                src.at(b, c) = os.at(0, c);
                drv.at(b, c) = od.at(0, c);
            }
        }

        Tape tape;
        auto bound = bind_params<float>(tape, codec.params(), true);
        auto s_in = tape.constant(src);
        auto d_in = tape.constant(drv);
        auto z_src = codec.trunk_node(tape, bound, s_in);
        auto z_drv = codec.trunk_node(tape, bound, d_in);
        auto m_src = codec.motion_head_node(tape, bound, z_src);
        auto m_drv = codec.motion_head_node(tape, bound, z_drv);
        auto zs_src = tape.sub(z_src, m_src);
        auto zs_drv = tape.sub(z_drv, m_drv);
        auto recon = codec.decode_node(tape, bound, tape.add(zs_src, m_drv));
        auto err = tape.sub(recon, d_in);
        auto recon_loss = tape.mean_all(tape.mul(err, err));
        // keep the motion head's rows orthonormal so it stays a projection
        auto w = bound.id_of("codec/mo.w");
        auto gram = tape.matmul(w, tape.transpose(w));
        Tensor eye({codec.config().motion_rank, codec.config().motion_rank});
        for (std::size_t i = 0; i < codec.config().motion_rank; ++i) eye.at(i, i) = 1.0f;
        auto orth_err = tape.sub(gram, tape.constant(eye));
        auto orth_loss = tape.scale(tape.mean_all(tape.mul(orth_err, orth_err)), 0.1f);
        // same identity => same identity latent; all frame-to-frame change
        // must flow through the motion head
        auto zs_diff = tape.sub(zs_src, zs_drv);
        auto consist_loss = tape.scale(tape.mean_all(tape.mul(zs_diff, zs_diff)), 0.05f);
        // identity content inside m is reconstruction-neutral on
        // same-identity pairs but costs this penalty, so its optimum is 0;
        // motion content is load-bearing and survives
        auto m_pen = tape.scale(
            tape.add(tape.mean_all(tape.mul(m_src, m_src)), tape.mean_all(tape.mul(m_drv, m_drv))), 5e-3f);
        auto loss = tape.add(tape.add(recon_loss, orth_loss), tape.add(consist_loss, m_pen));

        const float loss_v = tape.val(loss).data[0];
        if (!std::isfinite(loss_v)) {
            throw std::runtime_error("train_codec: non-finite loss at step " + std::to_string(step));
        }
        report.loss_trace.push_back(loss_v);
        if (step == 0) report.initial_loss = loss_v;

        tape.backward(loss);
        auto grads = collect_grads(tape, bound);
        adam_step(codec.params(), grads, adam);
    }
    report.final_loss = report.loss_trace.back();
    codec.mark_trained();
    return report;
}

EmbeddedClip embed_motion(const world::DyadicClip& clip, const Codec& codec, const ObservationSpace& space,
                          const Tensor& user_id, const Tensor& avatar_id) {
    if (!codec.trained()) throw std::invalid_argument("embed_motion: codec is untrained");
    auto as_row = [](const Tensor& v) {
        Tensor r({1, v.numel()});
        r.data = v.data;
        return r;
    };
    const Tensor user_obs = space.synth(as_row(user_id), clip.user_motion);
    const Tensor avatar_obs = space.synth(as_row(avatar_id), clip.avatar_motion);
    EmbeddedClip out;
    auto [us, um] = codec.encode(user_obs);
    auto [as, am] = codec.encode(avatar_obs);
    (void)us;
    out.user_latents = std::move(um);
    out.avatar_latents = std::move(am);
    // reference latents come from the avatar's frame 0
    const std::size_t d = codec.config().latent_dim;
    out.avatar_identity_latent = Tensor({d});
    out.avatar_reference_motion = Tensor({d});
    for (std::size_t c = 0; c < d; ++c) {
        out.avatar_identity_latent.data[c] = as.at(0, c);
        out.avatar_reference_motion.data[c] = out.avatar_latents.at(0, c);
    }
    return out;
}

}  // namespace dyad::codec
