#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dyad/model.hpp"
#include "dyad/rng.hpp"
#include "dyad/trainer.hpp"

using namespace dyad;
using namespace dyad::model;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.depth = 2;
    cfg.latent_dim = 4;
    cfg.audio_dim = 2;
    cfg.frames_per_block = 2;
    cfg.look_ahead = 1;
    return cfg;
}

struct WindowInputs {
    Tensor noisy, a_u, m_u, a, m_s;
    FlowTimes times;
};

WindowInputs random_inputs(const ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
    SeededRng rng(seed);
    WindowInputs w;
    w.noisy = gaussian(rng, {n, cfg.latent_dim});
    w.a_u = gaussian(rng, {n, cfg.audio_dim});
    w.m_u = gaussian(rng, {n, cfg.latent_dim});
    w.a = gaussian(rng, {n, cfg.audio_dim});
    w.m_s = gaussian(rng, {cfg.latent_dim});
    w.times.t.resize(n);
    for (auto& t : w.times.t) t = static_cast<float>(rng.next_unit());
    return w;
}

Tensor run_forward(const VectorFieldModel& m, const WindowInputs& w) {
    Tape tape;
    auto bp = bind_params<float>(tape, m.params(), false);
    auto cond = m.encode_condition_node(tape, bp, tape.constant(w.a_u), tape.constant(w.m_u),
                                        tape.constant(w.a), 0);
    auto out = m.forward_window_node(tape, bp, tape.constant(w.noisy), w.times, cond,
                                     tape.constant(w.m_s), 0);
    return tape.val(out);
}

// give the zero-initialized head random weights so outputs are non-trivial
void randomize_head(VectorFieldModel& m, std::uint64_t seed) {
    SeededRng rng(seed);
    m.params().at("model/head.w") = uniform_tensor(rng, m.params().at("model/head.w").shape, -0.3, 0.3);
    m.params().at("model/head.b") = uniform_tensor(rng, m.params().at("model/head.b").shape, -0.1, 0.1);
}

}  // namespace

TEST_CASE("condition encoder contracts") {
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 3);
    SUBCASE("output shape is N x h for any N") {
        for (std::size_t n : {1ul, 3ul, 8ul}) {
            auto w = random_inputs(cfg, n, 10 + n);
            Tape tape;
            auto bp = bind_params<float>(tape, m.params(), false);
            auto cond = m.encode_condition_node(tape, bp, tape.constant(w.a_u), tape.constant(w.m_u),
                                                tape.constant(w.a), 0);
            CHECK(tape.val(cond).rows() == n);
            CHECK(tape.val(cond).cols() == cfg.width);
        }
    }
    SUBCASE("deterministic per inputs") {
        auto w = random_inputs(cfg, 6, 77);
        auto run = [&] {
            Tape tape;
            auto bp = bind_params<float>(tape, m.params(), false);
            return tape.val(m.encode_condition_node(tape, bp, tape.constant(w.a_u), tape.constant(w.m_u),
                                                    tape.constant(w.a), 0));
        };
        CHECK(bit_equal(run(), run()));
    }
    SUBCASE("stream length mismatch rejected") {
        auto w = random_inputs(cfg, 6, 78);
        Tape tape;
        auto bp = bind_params<float>(tape, m.params(), false);
        SeededRng srng(1);
        auto short_a = tape.constant(gaussian<float>(srng, {4, cfg.audio_dim}));
        CHECK_THROWS_AS(
            m.encode_condition_node(tape, bp, short_a, tape.constant(w.m_u), tape.constant(w.a), 0),
            std::invalid_argument);
    }
}

TEST_CASE("null condition") {
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 4);
    Tape tape;
    auto bp = bind_params<float>(tape, m.params(), false);
    auto c1 = m.null_condition_node(tape, bp, 5);
    auto c2 = m.null_condition_node(tape, bp, 5);
    CHECK(tape.val(c1).rows() == 5);
    CHECK(tape.val(c1).cols() == cfg.width);
    CHECK(bit_equal(tape.val(c1), tape.val(c2)));
    // every row equals the learned embedding
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t c = 0; c < cfg.width; ++c) {
            CHECK(tape.val(c1).at(i, c) == m.params().at("model/null_cond").data[c]);
        }
    }
}

TEST_CASE("zero-initialized head gives the zero field") {
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 5);
    auto w = random_inputs(cfg, 6, 99);
    auto out = run_forward(m, w);
    for (float v : out.data) CHECK(v == 0.0f);
}

TEST_CASE("output finite for all flow times and bounded inputs") {
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 6);
    randomize_head(m, 1);
    for (std::uint64_t s = 0; s < 4; ++s) {
        auto w = random_inputs(cfg, 6, 200 + s);
        for (float tv : {0.0f, 0.5f, 1.0f}) {
            w.times = FlowTimes::constant(6, tv);
            CHECK(run_forward(m, w).all_finite());
        }
    }
}

TEST_CASE("parameter count is a pure function of the config") {
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 7);
    CHECK(m.params().total_scalars() == VectorFieldModel::param_count(cfg));

    ModelConfig big;
    big.width = 64;
    big.heads = 4;
    big.depth = 8;
    big.latent_dim = 16;
    big.audio_dim = 4;
    VectorFieldModel m2(big, 8);
    CHECK(m2.params().total_scalars() == VectorFieldModel::param_count(big));
}

TEST_CASE("causality: noisy-block perturbations beyond the horizon") {
    auto cfg = tiny_config();
    cfg.depth = 3;  // deeper than the look-ahead to exercise composition
    VectorFieldModel m(cfg, 9);
    randomize_head(m, 2);
    const std::size_t n = 10;  // 5 blocks of 2
    auto w = random_inputs(cfg, n, 1234);

    auto forward = [&](const Tensor& noisy) {
        Tape tape;
        auto bp = bind_params<float>(tape, m.params(), false);
        auto cond = m.encode_condition_node(tape, bp, tape.constant(w.a_u), tape.constant(w.m_u),
                                            tape.constant(w.a), 0);
        return tape.val(
            m.forward_window_node(tape, bp, tape.constant(noisy), w.times, cond, tape.constant(w.m_s), 0));
    };

    // claimed horizon: block i is blind to blocks beyond i + l
    auto claimed = mask::build_lookahead_mask(n, cfg.frames_per_block, cfg.look_ahead);
    auto report = mask::causality_probe(forward, w.noisy, claimed, cfg.frames_per_block);
    CHECK(report.pass());
    CHECK(report.perturbations > 0);

    SUBCASE("perturbing inside the look-ahead window does change the output") {
        Tensor perturbed = w.noisy;
        for (std::size_t c = 0; c < cfg.latent_dim; ++c) perturbed.at(2, c) += 0.5f;  // block 1
        auto base = forward(w.noisy);
        auto out = forward(perturbed);
        double diff = 0;
        for (std::size_t c = 0; c < cfg.latent_dim; ++c) diff += std::abs(out.at(0, c) - base.at(0, c));
        CHECK(diff > 0);  // block 0 may see block 1 (l = 1)
    }
}

TEST_CASE("causality: per-frame time modulation respects the mask") {
    auto cfg = tiny_config();
    cfg.depth = 3;
    VectorFieldModel m(cfg, 10);
    randomize_head(m, 3);
    const std::size_t n = 10;
    auto w = random_inputs(cfg, n, 555);
    auto base = run_forward(m, w);

    // change t on the last block; frames beyond the horizon must be
    // bit-identical
    auto w2 = w;
    w2.times.t[n - 1] = 0.123f;
    w2.times.t[n - 2] = 0.456f;
    auto out = run_forward(m, w2);
    const std::size_t last_blind_frame = n - cfg.frames_per_block * (cfg.look_ahead + 1);
    for (std::size_t i = 0; i < last_blind_frame; ++i) {
        for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
            CHECK(out.at(i, c) == base.at(i, c));
        }
    }
}

TEST_CASE("condition sensitivity: nulling the user streams changes the field") {
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 11);
    randomize_head(m, 4);
    auto w = random_inputs(cfg, 6, 808);
    auto base = run_forward(m, w);
    auto w2 = w;
    w2.a_u = Tensor::zeros(w.a_u.shape);
    w2.m_u = Tensor::zeros(w.m_u.shape);
    auto out = run_forward(m, w2);
    CHECK(max_abs_diff(base, out) > 0.0);
}

TEST_CASE("cached forward equals full forward on the last block") {
    // strict streaming semantics: history processed per-block with causal
    // masks equals the cached path (checked < 1e-5 per spec)
    auto cfg = tiny_config();
    cfg.mask_kind = mask::MaskKind::BlockwiseCausal;  // strict mode masks
    VectorFieldModel m(cfg, 12);
    randomize_head(m, 5);
    const std::size_t B = cfg.frames_per_block;
    const std::size_t blocks = 3;
    const std::size_t n = B * blocks;
    auto w = random_inputs(cfg, n, 2024);
    w.times = FlowTimes::constant(n, 1.0f);  // clean history convention

    auto cut_rows = [](const Tensor& t, std::size_t r0, std::size_t r1) {
        Tensor out({r1 - r0, t.cols()});
        for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t c = 0; c < t.cols(); ++c) out.at(i - r0, c) = t.at(i, c);
        return out;
    };

    // per-block condition encoding (the streaming convention)
    Tensor cond_full({n, cfg.width});
    {
        Tape tape;
        auto bp = bind_params<float>(tape, m.params(), false);
        for (std::size_t b = 0; b < blocks; ++b) {
            auto cond = m.encode_condition_node(
                tape, bp, tape.constant(cut_rows(w.a_u, b * B, (b + 1) * B)),
                tape.constant(cut_rows(w.m_u, b * B, (b + 1) * B)),
                tape.constant(cut_rows(w.a, b * B, (b + 1) * B)), b * B);
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t c = 0; c < cfg.width; ++c)
                    cond_full.at(b * B + i, c) = tape.val(cond).at(i, c);
        }
    }
    Tensor full_out;
    {
        Tape tape;
        auto bp = bind_params<float>(tape, m.params(), false);
        FieldInputs in;
        in.noisy = tape.constant(w.noisy);
        in.times = w.times;
        in.cond = tape.constant(cond_full);
        in.reference_motion = tape.constant(w.m_s);
        auto masks = build_self_masks(cfg, n);
        in.self_mask_first = masks.first;
        in.self_mask_rest = masks.rest;
        // streaming cross window: sliding window clipped at the own block end
        auto cross = mask::build_sliding_window_mask(n, sliding_half(cfg));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (j / B > i / B) cross.set(i, j, false);
        in.cross_mask = std::make_shared<const mask::AttentionMask>(cross);
        full_out = tape.val(m.predict_field_node(tape, bp, in));
    }

    // cached path: process blocks in order, capturing and reusing K/V
    std::vector<LayerKV> accum(cfg.depth);
    auto append = [&](const CacheCapture& cap) {
        for (std::size_t l = 0; l < cfg.depth; ++l) {
            auto cat = [](Tensor& dst, const Tensor& add) {
                if (dst.numel() == 0) {
                    dst = add;
                    return;
                }
                Tensor merged({dst.rows() + add.rows(), add.cols()});
                std::copy(dst.data.begin(), dst.data.end(), merged.data.begin());
                std::copy(add.data.begin(), add.data.end(),
                          merged.data.begin() + static_cast<std::ptrdiff_t>(dst.numel()));
                dst = merged;
            };
            cat(accum[l].k, cap.layers[l].k);
            cat(accum[l].v, cap.layers[l].v);
            cat(accum[l].ck, cap.layers[l].ck);
            cat(accum[l].cv, cap.layers[l].cv);
        }
    };

    Tensor last_out;
    CacheCapture capture;
    for (std::size_t b = 0; b < blocks; ++b) {
        Tape tape;
        auto bp = bind_params<float>(tape, m.params(), false);
        auto cond = m.encode_condition_node(
            tape, bp, tape.constant(cut_rows(w.a_u, b * B, (b + 1) * B)),
            tape.constant(cut_rows(w.m_u, b * B, (b + 1) * B)),
            tape.constant(cut_rows(w.a, b * B, (b + 1) * B)), b * B);
        FieldInputs in;
        in.noisy = tape.constant(cut_rows(w.noisy, b * B, (b + 1) * B));
        in.times = FlowTimes::constant(B, 1.0f);
        in.cond = cond;
        in.reference_motion = tape.constant(w.m_s);
        in.pos0 = b * B;
        in.cond_pos0 = b * B;
        const std::size_t prefix = b * B;
        in.self_mask_first = std::make_shared<const mask::AttentionMask>(mask::build_full_mask(B, prefix + B));
        in.self_mask_rest = in.self_mask_first;
        // cross window over [cached conds ; current conds] in absolute frames
        mask::AttentionMask cross(B, prefix + B, mask::MaskKind::Custom);
        const std::size_t half = sliding_half(cfg);
        for (std::size_t i = 0; i < B; ++i) {
            const std::size_t abs_i = b * B + i;
            for (std::size_t j = 0; j < prefix + B; ++j) {
                const bool in_window = j + half >= abs_i && j < abs_i + half;
                cross.set(i, j, in_window);
            }
        }
        in.cross_mask = std::make_shared<const mask::AttentionMask>(cross);
        CacheView view;
        if (b > 0) {
            for (auto& l : accum) view.layers.push_back(&l);
        }
        in.caches = view.layers.empty() ? nullptr : &view;
        capture = CacheCapture{};
        in.capture = &capture;
        auto out = m.predict_field_node(tape, bp, in);
        last_out = tape.val(out);
        append(capture);
    }

    double max_diff = 0;
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
            max_diff = std::max(max_diff,
                                std::abs(static_cast<double>(last_out.at(i, c)) -
                                         full_out.at((blocks - 1) * B + i, c)));
        }
    }
    CHECK(max_diff < 1e-5);

    SUBCASE("cache layer-count mismatch is rejected") {
        Tape tape;
        auto bp = bind_params<float>(tape, m.params(), false);
        FieldInputs in;
        in.noisy = tape.constant(Tensor::zeros({B, cfg.latent_dim}));
        in.times = FlowTimes::constant(B, 1.0f);
        in.cond = m.null_condition_node(tape, bp, B);
        in.reference_motion = tape.constant(w.m_s);
        in.self_mask_first = std::make_shared<const mask::AttentionMask>(mask::build_full_mask(B, B));
        in.self_mask_rest = in.self_mask_first;
        in.cross_mask = in.self_mask_first;
        CacheView bad;
        bad.layers.push_back(&accum[0]);  // one layer instead of depth
        in.caches = &bad;
        CHECK_THROWS_AS(m.predict_field_node(tape, bp, in), std::invalid_argument);
    }
}

TEST_CASE("gradient of the full model forward matches finite differences") {
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 13);
    randomize_head(m, 6);
    const std::size_t n = 4;
    auto w = random_inputs(cfg, n, 31);

    auto build = [&](Tape64& tape, const BoundParams<double>& bp) {
        auto cond = m.encode_condition_node(tape, bp, tape.constant(w.a_u.cast<double>()),
                                            tape.constant(w.m_u.cast<double>()),
                                            tape.constant(w.a.cast<double>()), 0);
        auto out = m.forward_window_node(tape, bp, tape.constant(w.noisy.cast<double>()), w.times, cond,
                                         tape.constant(w.m_s.cast<double>()), 0);
        // project through a fixed random matrix for a generic scalar
        SeededRng prng(4242);
        auto proj = tape.constant(gaussian<double>(prng, {n, cfg.latent_dim}));
        return tape.mean_all(tape.mul(out, proj));
    };

    Tape64 tape;
    auto bp = bind_params<double>(tape, m.params(), true);
    auto loss = build(tape, bp);
    tape.backward(loss);
    auto analytic = collect_grads(tape, bp);

    auto eval = [&](const std::vector<Tensor64>& vals) {
        Tape64 t2;
        auto bp2 = bind_params<double>(t2, m.params(), true, &vals);
        return t2.val(build(t2, bp2)).data[0];
    };
    auto fd = finite_diff_grad(eval, param_values<double>(m.params()), 1e-5);
    CHECK(grad_rel_err(analytic, fd) < 1e-4);
}
