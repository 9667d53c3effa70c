#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "dyad/sampler.hpp"

using namespace dyad;
using namespace dyad::model;
using namespace dyad::stream;

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

VectorFieldModel random_model(const ModelConfig& cfg, std::uint64_t seed) {
    VectorFieldModel m(cfg, seed);
    SeededRng rng(SeededRng::mix(seed, 0xead));
    m.params().at("model/head.w") = uniform_tensor(rng, m.params().at("model/head.w").shape, -0.3, 0.3);
    m.params().at("model/head.b") = uniform_tensor(rng, m.params().at("model/head.b").shape, -0.1, 0.1);
    // non-trivial latent standardization to exercise both directions
    Tensor mean({cfg.latent_dim}), scale({cfg.latent_dim});
    for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
        mean.data[c] = 0.05f * static_cast<float>(c);
        scale.data[c] = 0.8f + 0.1f * static_cast<float>(c);
    }
    m.set_latent_norm(mean, scale);
    return m;
}

std::vector<ConditionBlock> random_conditions(const ModelConfig& cfg, std::size_t blocks,
                                              std::uint64_t seed) {
    SeededRng rng(seed);
    std::vector<ConditionBlock> out;
    for (std::size_t b = 0; b < blocks; ++b) {
        ConditionBlock cb;
        cb.user_audio = gaussian(rng, {cfg.frames_per_block, cfg.audio_dim});
        cb.user_latents = gaussian(rng, {cfg.frames_per_block, cfg.latent_dim});
        cb.avatar_audio = gaussian(rng, {cfg.frames_per_block, cfg.audio_dim});
        out.push_back(std::move(cb));
    }
    return out;
}

Tensor random_reference_motion(const ModelConfig& cfg, std::uint64_t seed) {
    SeededRng rng(seed);
    return gaussian(rng, {cfg.latent_dim});
}

double blocks_max_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
    return m;
}

}  // namespace

TEST_CASE("session lifecycle and contracts") {
    auto cfg = tiny_config();
    auto m = random_model(cfg, 1);
    SamplerConfig sc;
    sc.seed = 9;

    SUBCASE("fresh session has zero cached blocks") {
        StreamSession s(m, nullptr, Tensor::zeros({4}), random_reference_motion(cfg, 2), sc);
        CHECK(s.caches().cached_blocks() == 0);
        CHECK(s.blocks_emitted() == 0);
    }
    SUBCASE("wrong block length rejected") {
        StreamSession s(m, nullptr, Tensor::zeros({4}), random_reference_motion(cfg, 2), sc);
        ConditionBlock bad;
        bad.user_audio = Tensor::zeros({3, cfg.audio_dim});
        bad.user_latents = Tensor::zeros({3, cfg.latent_dim});
        bad.avatar_audio = Tensor::zeros({3, cfg.audio_dim});
        CHECK_THROWS_AS(s.push_block(bad), std::invalid_argument);
    }
    SUBCASE("closed session rejects pushes") {
        StreamSession s(m, nullptr, Tensor::zeros({4}), random_reference_motion(cfg, 2), sc);
        auto conds = random_conditions(cfg, 1, 3);
        s.push_block(conds[0]);
        s.finish();
        CHECK_THROWS_AS(s.push_block(conds[0]), std::logic_error);
        CHECK_THROWS_AS(s.finish(), std::logic_error);
    }
    SUBCASE("bad sampler config rejected") {
        SamplerConfig bad = sc;
        bad.ode_steps = 0;
        CHECK_THROWS_AS(StreamSession(m, nullptr, Tensor::zeros({4}), Tensor::zeros({4}), bad),
                        std::invalid_argument);
    }
    SUBCASE("two equal-seed sessions emit identical streams") {
        auto conds = random_conditions(cfg, 4, 5);
        StreamSession a(m, nullptr, Tensor::zeros({4}), random_reference_motion(cfg, 2), sc);
        StreamSession b(m, nullptr, Tensor::zeros({4}), random_reference_motion(cfg, 2), sc);
        for (const auto& c : conds) {
            auto ea = a.push_block(c);
            auto eb = b.push_block(c);
            REQUIRE(ea.size() == eb.size());
            for (std::size_t i = 0; i < ea.size(); ++i) CHECK(bit_equal(ea[i], eb[i]));
        }
    }
}

TEST_CASE("euler integration of a constant oracle field") {
    // zero model with head bias c: v == c everywhere, so T uniform Euler
    // steps move m0 by exactly c
    auto cfg = tiny_config();
    VectorFieldModel m(cfg, 7);  // zero head
    Tensor c({cfg.latent_dim}, {0.5f, -0.25f, 1.0f, 0.125f});
    m.params().at("model/head.b") = c;
    SamplerConfig sc;
    sc.ode_steps = 8;  // dt = 0.125 is exact in binary
    sc.guidance = 1.0f;
    sc.seed = 21;

    StreamSession s(m, nullptr, Tensor::zeros({4}), Tensor::zeros({cfg.latent_dim}), sc);
    auto conds = random_conditions(cfg, 1, 11);
    auto out = s.push_block(conds[0]);
    REQUIRE(out.size() == 1);

    // replay the session's noise draw
    SeededRng nrng(SeededRng::mix(sc.seed, 0xb10c));
    const Tensor m0 = gaussian(nrng, {cfg.frames_per_block, cfg.latent_dim});
    for (std::size_t i = 0; i < out[0].rows(); ++i) {
        for (std::size_t ch = 0; ch < cfg.latent_dim; ++ch) {
            CHECK(out[0].at(i, ch) == doctest::Approx(m0.at(i, ch) + c.data[ch]).epsilon(1e-5));
        }
    }
}

TEST_CASE("classifier-free guidance degenerations") {
    auto cfg = tiny_config();
    auto m = random_model(cfg, 31);
    auto conds = random_conditions(cfg, 3, 13);
    const Tensor ref = random_reference_motion(cfg, 4);

    SUBCASE("s = 1: the null embedding is irrelevant") {
        SamplerConfig sc;
        sc.guidance = 1.0f;
        sc.seed = 17;
        auto m2 = m;
        m2.params().at("model/null_cond") = Tensor::full({cfg.width}, 7.0f);
        StreamSession a(m, nullptr, Tensor::zeros({4}), ref, sc);
        StreamSession b(m2, nullptr, Tensor::zeros({4}), ref, sc);
        for (const auto& c : conds) {
            auto ea = a.push_block(c);
            auto eb = b.push_block(c);
            CHECK(bit_equal(ea[0], eb[0]));
        }
    }
    SUBCASE("s = 0: block 0 ignores its conditions") {
        SamplerConfig sc;
        sc.guidance = 0.0f;
        sc.seed = 18;
        StreamSession a(m, nullptr, Tensor::zeros({4}), ref, sc);
        StreamSession b(m, nullptr, Tensor::zeros({4}), ref, sc);
        auto perturbed = conds[0];
        for (auto& v : perturbed.avatar_audio.data) v += 1.5f;
        for (auto& v : perturbed.user_latents.data) v -= 0.7f;
        auto ea = a.push_block(conds[0]);
        auto eb = b.push_block(perturbed);
        CHECK(bit_equal(ea[0], eb[0]));
    }
    SUBCASE("s = 2 differs from s = 1") {
        SamplerConfig s1;
        s1.guidance = 1.0f;
        s1.seed = 19;
        SamplerConfig s2 = s1;
        s2.guidance = 2.0f;
        StreamSession a(m, nullptr, Tensor::zeros({4}), ref, s1);
        StreamSession b(m, nullptr, Tensor::zeros({4}), ref, s2);
        auto ea = a.push_block(conds[0]);
        auto eb = b.push_block(conds[0]);
        CHECK(max_abs_diff(ea[0], eb[0]) > 0.0);
    }
}

TEST_CASE("streaming equals the cache-free blockwise reference (k <= M)") {
    auto cfg = tiny_config();
    auto m = random_model(cfg, 41);
    SamplerConfig sc;
    sc.guidance = 2.0f;
    sc.seed = 23;
    sc.max_cache_blocks = 8;
    auto conds = random_conditions(cfg, 5, 14);
    const Tensor ref_m = random_reference_motion(cfg, 5);

    StreamSession s(m, nullptr, Tensor::zeros({4}), ref_m, sc);
    std::vector<Tensor> streamed;
    for (const auto& c : conds) {
        for (auto& t : s.push_block(c)) streamed.push_back(std::move(t));
    }
    auto reference = generate_blockwise_reference(m, ref_m, conds, sc);
    CHECK(blocks_max_diff(streamed, reference) < 1e-5);
}

TEST_CASE("streaming equals the truncated-history reference (k > M)") {
    auto cfg = tiny_config();
    auto m = random_model(cfg, 42);
    SamplerConfig sc;
    sc.guidance = 2.0f;
    sc.seed = 24;
    sc.max_cache_blocks = 3;
    auto conds = random_conditions(cfg, 8, 15);
    const Tensor ref_m = random_reference_motion(cfg, 6);

    StreamSession s(m, nullptr, Tensor::zeros({4}), ref_m, sc);
    std::vector<Tensor> streamed;
    for (const auto& c : conds) {
        for (auto& t : s.push_block(c)) streamed.push_back(std::move(t));
    }
    auto reference = generate_truncated_reference(m, ref_m, conds, sc);
    CHECK(blocks_max_diff(streamed, reference) < 1e-5);

    SUBCASE("the two references agree while k <= M") {
        SamplerConfig small = sc;
        auto conds3 = random_conditions(cfg, 3, 16);
        auto a = generate_blockwise_reference(m, ref_m, conds3, small);
        auto b = generate_truncated_reference(m, ref_m, conds3, small);
        CHECK(blocks_max_diff(a, b) < 1e-5);
    }
}

TEST_CASE("cache size law and eviction") {
    auto cfg = tiny_config();
    auto m = random_model(cfg, 43);
    SamplerConfig sc;
    sc.seed = 25;
    sc.max_cache_blocks = 3;
    auto conds = random_conditions(cfg, 7, 17);
    StreamSession s(m, nullptr, Tensor::zeros({4}), random_reference_motion(cfg, 7), sc);

    std::vector<std::size_t> sizes;
    std::vector<std::size_t> bytes;
    for (const auto& c : conds) {
        s.push_block(c);
        sizes.push_back(s.caches().cached_blocks());
        bytes.push_back(s.caches().byte_size());
    }
    for (std::size_t k = 1; k <= conds.size(); ++k) {
        CHECK(sizes[k - 1] == std::min(k, sc.max_cache_blocks));
    }
    SUBCASE("memory is constant once beyond capacity") {
        for (std::size_t k = sc.max_cache_blocks; k < conds.size(); ++k) {
            CHECK(bytes[k] == bytes[sc.max_cache_blocks - 1]);
        }
    }
    SUBCASE("eviction is oldest-first across every layer simultaneously") {
        CHECK(s.caches().first_block_index() == conds.size() - sc.max_cache_blocks);
        auto view = s.caches().view();
        REQUIRE(view.layers.size() == cfg.depth);
        const std::size_t want_rows = sc.max_cache_blocks * cfg.frames_per_block;
        for (const auto* l : view.layers) {
            CHECK(l->k.rows() == want_rows);
            CHECK(l->v.rows() == want_rows);
            CHECK(l->ck.rows() == want_rows);
            CHECK(l->cv.rows() == want_rows);
        }
    }
}

TEST_CASE("latency report") {
    SUBCASE("requires two blocks") {
        CHECK_THROWS_AS(build_latency_report({1.0}), std::invalid_argument);
    }
    SUBCASE("fields populated from per-block walls") {
        auto r = build_latency_report({5.0, 1.0, 2.0, 1.0, 1.5});
        CHECK(r.first_block_ms == 5.0);
        CHECK(r.per_block_ms.size() == 5);
        CHECK(r.max_min_ratio_after_warmup == doctest::Approx(2.0));
    }
    SUBCASE("session records one wall entry per push") {
        auto cfg = tiny_config();
        auto m = random_model(cfg, 44);
        SamplerConfig sc;
        sc.seed = 26;
        StreamSession s(m, nullptr, Tensor::zeros({4}), random_reference_motion(cfg, 8), sc);
        auto conds = random_conditions(cfg, 4, 18);
        for (const auto& c : conds) s.push_block(c);
        CHECK(s.block_wall_ms().size() == 4);
        auto rep = s.latency_report();
        CHECK(rep.per_block_ms.size() == 4);
        for (double v : rep.per_block_ms) CHECK(v > 0);
    }
}

TEST_CASE("delayed mode realizes look-ahead with bounded delay") {
    auto cfg = tiny_config();  // l = 1
    auto m = random_model(cfg, 45);
    SamplerConfig sc;
    sc.seed = 27;
    sc.mode = Mode::Delayed;
    auto conds = random_conditions(cfg, 5, 19);
    const Tensor ref_m = random_reference_motion(cfg, 9);

    SUBCASE("emission lags by exactly l blocks and finish drains") {
        StreamSession s(m, nullptr, Tensor::zeros({4}), ref_m, sc);
        std::size_t emitted = 0;
        for (std::size_t b = 0; b < conds.size(); ++b) {
            auto out = s.push_block(conds[b]);
            emitted += out.size();
            if (b < cfg.look_ahead) CHECK(out.empty());
        }
        CHECK(emitted == conds.size() - cfg.look_ahead);
        auto rest = s.finish();
        CHECK(rest.size() == cfg.look_ahead);
        CHECK(emitted + rest.size() == conds.size());
    }
    SUBCASE("deterministic per seed") {
        auto run = [&] {
            StreamSession s(m, nullptr, Tensor::zeros({4}), ref_m, sc);
            std::vector<Tensor> all;
            for (const auto& c : conds) {
                for (auto& t : s.push_block(c)) all.push_back(std::move(t));
            }
            for (auto& t : s.finish()) all.push_back(std::move(t));
            return all;
        };
        auto a = run(), b = run();
        CHECK(blocks_max_diff(a, b) == 0.0);
    }
    SUBCASE("emitted block uses future conditions within the look-ahead") {
        // perturb condition block i+1; emitted block i must change
        StreamSession a(m, nullptr, Tensor::zeros({4}), ref_m, sc);
        StreamSession b(m, nullptr, Tensor::zeros({4}), ref_m, sc);
        auto perturbed = conds;
        for (auto& v : perturbed[1].avatar_audio.data) v += 1.0f;
        a.push_block(conds[0]);
        b.push_block(perturbed[0]);
        auto ea = a.push_block(conds[1]);
        auto eb = b.push_block(perturbed[1]);
        REQUIRE(ea.size() == 1);
        REQUIRE(eb.size() == 1);
        CHECK(max_abs_diff(ea[0], eb[0]) > 0.0);
    }
    SUBCASE("conditions beyond the look-ahead leave the emission bit-identical") {
        StreamSession a(m, nullptr, Tensor::zeros({4}), ref_m, sc);
        StreamSession b(m, nullptr, Tensor::zeros({4}), ref_m, sc);
        auto perturbed = conds;
        for (auto& v : perturbed[2].avatar_audio.data) v += 2.0f;  // beyond l=1 from block 0
        a.push_block(conds[0]);
        b.push_block(conds[0]);
        auto ea = a.push_block(conds[1]);
        auto eb = b.push_block(conds[1]);
        REQUIRE(ea.size() == 1);  // emission of block 0
        CHECK(bit_equal(ea[0], eb[0]));
        // now the perturbation enters: emission of block 1 differs
        auto na = a.push_block(conds[2]);
        auto nb = b.push_block(perturbed[2]);
        CHECK(max_abs_diff(na[0], nb[0]) > 0.0);
    }
}

TEST_CASE("stream dump round trip") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dyad_stream_test";
    fs::create_directories(dir);
    const std::string path = (dir / "dump.bin").string();

    SeededRng rng(3);
    std::vector<Tensor> blocks;
    for (int b = 0; b < 3; ++b) blocks.push_back(gaussian(rng, {2, 4}));
    write_stream_dump(path, blocks, 2);
    auto loaded = read_stream_dump(path);
    REQUIRE(loaded.size() == blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) CHECK(bit_equal(loaded[i], blocks[i]));

    SUBCASE("dump is byte-identical across writes") {
        const std::string path2 = (dir / "dump2.bin").string();
        write_stream_dump(path2, blocks, 2);
        std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
        std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
        CHECK(sa == sb);
    }
}
