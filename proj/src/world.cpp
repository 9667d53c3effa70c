#include "dyad/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dyad/checkpoint.hpp"

namespace dyad::world {

namespace {

constexpr double kTau = 6.283185307179586477;

float clamp3(double v) { return static_cast<float>(std::clamp(v, -3.0, 3.0)); }

// First-order smoothed noise; stationary scale is roughly target_sd.
std::vector<double> smooth_walk(SeededRng& rng, std::size_t n, double target_sd) {
    const double a = 0.96;
    const double drive = target_sd * std::sqrt(1.0 - a * a);
    std::vector<double> out(n);
    double x = rng.next_gauss() * target_sd;
    for (std::size_t i = 0; i < n; ++i) {
        x = a * x + drive * rng.next_gauss();
        out[i] = x;
    }
    return out;
}

struct Turns {
    // role[n]: 0 user speaking, 1 avatar speaking
    std::vector<std::uint8_t> role;
};

Turns build_turns(SeededRng& rng, std::size_t n, const WorldParams& p) {
    Turns t;
    t.role.resize(n);
    std::uint8_t who = static_cast<std::uint8_t>(rng.below(2));
    std::size_t pos = 0;
    while (pos < n) {
        const std::size_t len = p.turn_min + rng.below(p.turn_max - p.turn_min + 1);
        for (std::size_t i = pos; i < std::min(pos + len, n); ++i) t.role[i] = who;
        pos += len;
        who = static_cast<std::uint8_t>(1 - who);
    }
    return t;
}

// Speech envelope: syllable oscillation on a slow loudness drift, strictly
// above the speaking threshold while talking, exactly zero otherwise.
void synth_audio(SeededRng& rng, const Turns& turns, std::uint8_t who, Tensor& audio) {
    const std::size_t n = audio.rows();
    const double phi = rng.uniform(0.0, kTau);
    const double phi2 = rng.uniform(0.0, kTau);
    const double band_phi[3] = {rng.uniform(0.0, kTau), rng.uniform(0.0, kTau), rng.uniform(0.0, kTau)};
    const double band_period[3] = {4.1, 9.7, 17.3};
    for (std::size_t i = 0; i < n; ++i) {
        // draw noise every frame so the turn layout cannot shift the stream
        const double e_noise = rng.next_gauss();
        const double b_noise[3] = {rng.next_gauss(), rng.next_gauss(), rng.next_gauss()};
        if (turns.role[i] != who) continue;
        const double t = static_cast<double>(i);
        double env = 0.62 + 0.22 * std::sin(kTau * t / 7.3 + phi) + 0.1 * std::sin(kTau * t / 29.0 + phi2) +
                     0.02 * e_noise;
        env = std::clamp(env, 0.3, 1.1);
        audio.at(i, 0) = static_cast<float>(env);
        for (int b = 0; b < 3; ++b) {
            const double band = env * (0.45 + 0.35 * std::sin(kTau * t / band_period[b] + band_phi[b])) +
                                0.02 * b_noise[b];
            audio.at(i, static_cast<std::size_t>(b) + 1) = static_cast<float>(band);
        }
    }
}

std::vector<std::uint32_t> find_stress_peaks(const Tensor& user_audio, const Turns& turns) {
    std::vector<std::uint32_t> peaks;
    const std::size_t n = user_audio.rows();
    for (std::size_t i = 1; i + 1 < n; ++i) {
        if (turns.role[i] != 0) continue;
        const float e = user_audio.at(i, 0);
        if (e > 0.8f && e > user_audio.at(i - 1, 0) && e >= user_audio.at(i + 1, 0)) {
            peaks.push_back(static_cast<std::uint32_t>(i));
        }
    }
    return peaks;
}

void add_pulse(std::vector<double>& chan, std::size_t start, double amp, std::size_t width) {
    for (std::size_t k = 0; k < width && start + k < chan.size(); ++k) {
        const double x = static_cast<double>(k) / static_cast<double>(width);
        chan[start + k] += amp * 0.5 * (1.0 - std::cos(kTau * x));
    }
}

void add_nod_pulse(std::vector<double>& chan, std::size_t start, double amp) {
    constexpr std::size_t kWidth = 16;
    for (std::size_t k = 0; k < kWidth && start + k < chan.size(); ++k) {
        const double t = static_cast<double>(k);
        chan[start + k] += amp * std::sin(kTau * t / 8.0) * std::exp(-t / 6.0);
    }
}

std::vector<double> blink_track(SeededRng& rng, std::size_t n) {
    std::vector<double> out(n, 0.0);
    std::size_t next = 10 + rng.below(25);
    while (next < n) {
        out[next] += 1.0;
        if (next + 1 < n) out[next + 1] += 0.55;
        next += 30 + rng.below(22);
    }
    return out;
}

}  // namespace

DyadicClip generate_clip(std::uint64_t seed, std::size_t n, const WorldParams& params) {
    if (n < 2 * params.turn_min) {
        throw std::invalid_argument("generate_clip: need at least two minimum-length turns");
    }
    SeededRng root(seed);
    SeededRng turn_rng = root.split(1);
    SeededRng ua_rng = root.split(2);
    SeededRng aa_rng = root.split(3);
    SeededRng um_rng = root.split(4);
    SeededRng ev_rng = root.split(5);
    SeededRng am_rng = root.split(6);
    SeededRng noise_rng = root.split(7);

    DyadicClip clip;
    clip.frames = n;
    clip.user_motion = Tensor({n, kMotionDim});
    clip.user_audio = Tensor({n, kAudioDim});
    clip.avatar_audio = Tensor({n, kAudioDim});
    clip.avatar_motion = Tensor({n, kMotionDim});
    clip.turn_schedule = Tensor({n, 1});
    clip.has_provenance = true;
    clip.gen_seed = seed;
    clip.gen_params = params;

    const Turns turns = build_turns(turn_rng, n, params);
    for (std::size_t i = 0; i < n; ++i) clip.turn_schedule.at(i, 0) = static_cast<float>(turns.role[i]);

    synth_audio(ua_rng, turns, 0, clip.user_audio);
    synth_audio(aa_rng, turns, 1, clip.avatar_audio);
    clip.stress_peaks = find_stress_peaks(clip.user_audio, turns);

    // --- user motion -----------------------------------------------------
    const auto u_nod = smooth_walk(um_rng, n, 0.40);
    const auto u_sway = smooth_walk(um_rng, n, 0.40);
    const auto u_smile_base = smooth_walk(um_rng, n, 0.20);
    const auto u_brow = smooth_walk(um_rng, n, 0.22);
    const auto u_lip_idle = smooth_walk(um_rng, n, 0.02);
    const auto u_blink = blink_track(um_rng, n);
    const double u_bob_phi = um_rng.uniform(0.0, kTau);

    std::vector<double> u_smile = u_smile_base;
    for (std::size_t i = 0; i < n; ++i) {
        // smile events are visual-only cues, independent of any audio
        if (ev_rng.bernoulli(params.smile_rate)) {
            clip.smile_events.push_back(static_cast<std::uint32_t>(i));
            add_pulse(u_smile, i, 1.2 + 0.6 * ev_rng.next_unit(), 14);
        } else {
            ev_rng.next_unit();  // keep the stream aligned per frame
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        const bool speaking = turns.role[i] == 0;
        const double t = static_cast<double>(i);
        const double bob = speaking ? 0.25 * std::sin(kTau * t / 16.0 + u_bob_phi) : 0.0;
        clip.user_motion.at(i, kChanNod) = clamp3(u_nod[i] + bob);
        clip.user_motion.at(i, kChanSway) = clamp3(u_sway[i] + 0.5 * bob);
        clip.user_motion.at(i, kChanSmile) = clamp3(u_smile[i]);
        clip.user_motion.at(i, kChanBrow) = clamp3(u_brow[i] + (speaking ? 0.2 * std::sin(kTau * t / 19.0) : 0.0));
        const double lip = speaking ? 1.3 * clip.user_audio.at(i, 0) - 0.5 : u_lip_idle[i];
        clip.user_motion.at(i, kChanLip) = clamp3(lip);
        clip.user_motion.at(i, kChanBlink) = clamp3(u_blink[i]);
    }

    // --- avatar motion ---------------------------------------------------
    const auto a_nod_base = smooth_walk(am_rng, n, 0.30);
    const auto a_sway = smooth_walk(am_rng, n, 0.30);
    const auto a_smile_self = smooth_walk(am_rng, n, 0.45);
    const auto a_brow_base = smooth_walk(am_rng, n, 0.18);
    const auto a_lip_idle = smooth_walk(am_rng, n, 0.02);
    const auto a_blink = blink_track(am_rng, n);
    const double a_bob_phi = am_rng.uniform(0.0, kTau);
    const double a_brow_phi = am_rng.uniform(0.0, kTau);

    // listening nods: reaction_lag frames after each user stress peak
    std::vector<double> a_nod_react(n, 0.0);
    for (std::uint32_t p : clip.stress_peaks) {
        const std::size_t at = p + params.reaction_lag;
        if (at < n && turns.role[p] == 0) {
            add_nod_pulse(a_nod_react, at, static_cast<double>(params.reaction_gain));
        }
    }

    const std::size_t lag = params.reaction_lag;
    const double gain = params.reaction_gain;
    for (std::size_t i = 0; i < n; ++i) {
        const bool speaking = turns.role[i] == 1;
        const double t = static_cast<double>(i);
        const double wn = params.noise_scale;
        const double bob = speaking ? 0.25 * std::sin(kTau * t / 17.0 + a_bob_phi) : 0.0;

        const double mirrored = i >= lag ? gain * clip.user_motion.at(i - lag, kChanSmile) : 0.0;
        const double smile = mirrored + (speaking ? a_smile_self[i] : 0.0) + wn * noise_rng.next_gauss();
        const double brow = a_brow_base[i] + (speaking ? 0.35 * std::sin(kTau * t / 21.0 + a_brow_phi) : 0.0) +
                            wn * noise_rng.next_gauss();
        const double nod = a_nod_base[i] + a_nod_react[i] + bob + wn * noise_rng.next_gauss();
        const double sway = a_sway[i] + 0.5 * bob + wn * noise_rng.next_gauss();
        const double lip = speaking ? 1.3 * clip.avatar_audio.at(i, 0) - 0.5 : a_lip_idle[i];

        clip.avatar_motion.at(i, kChanNod) = clamp3(nod);
        clip.avatar_motion.at(i, kChanSway) = clamp3(sway);
        clip.avatar_motion.at(i, kChanSmile) = clamp3(smile);
        clip.avatar_motion.at(i, kChanBrow) = clamp3(brow);
        clip.avatar_motion.at(i, kChanLip) = clamp3(lip + wn * 0.2 * noise_rng.next_gauss());
        clip.avatar_motion.at(i, kChanBlink) = clamp3(a_blink[i]);
    }
    return clip;
}

DyadicClip passive_variant(const DyadicClip& clip) {
    if (!clip.has_provenance) {
        throw std::invalid_argument("passive_variant: clip lacks generation provenance");
    }
    WorldParams p = clip.gen_params;
    p.reaction_gain = 0.0f;  // same rng consumption, reactive terms vanish
    DyadicClip out = generate_clip(clip.gen_seed, clip.frames, p);
    for (std::size_t i = 0; i < out.frames; ++i) {
        for (std::size_t c : {kChanNod, kChanSway, kChanSmile, kChanBrow, kChanBlink}) {
            out.avatar_motion.at(i, c) *= 0.3f;
        }
    }
    out.has_provenance = false;
    return out;
}

Tensor predict_lagged_mirror(const DyadicClip& clip, const WorldParams& params) {
    const std::size_t n = clip.frames;
    Tensor out({n, kMotionDim});
    for (std::size_t i = 0; i < n; ++i) {
        if (i >= params.reaction_lag) {
            out.at(i, kChanSmile) = params.reaction_gain * clip.user_motion.at(i - params.reaction_lag, kChanSmile);
            out.at(i, kChanBrow) = params.reaction_gain * clip.user_motion.at(i - params.reaction_lag, kChanBrow);
        }
    }
    return out;
}

Tensor predict_audio_only(const DyadicClip& clip, const WorldParams& params) {
    const std::size_t n = clip.frames;
    Tensor out({n, kMotionDim});
    for (std::size_t i = 0; i < n; ++i) {
        if (i >= params.reaction_lag) {
            const float env = clip.user_audio.at(i - params.reaction_lag, 0);
            out.at(i, kChanSmile) = params.reaction_gain * env;
            out.at(i, kChanBrow) = params.reaction_gain * env;
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// dataset container

namespace {
constexpr char kDatasetMagic[4] = {'A', 'F', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;

void write_events(std::ostream& os, const std::vector<std::uint32_t>& ev) {
    write_u32(os, static_cast<std::uint32_t>(ev.size()));
    for (std::uint32_t v : ev) write_u32(os, v);
}
std::vector<std::uint32_t> read_events(std::istream& is) {
    const std::uint32_t count = read_u32(is);
    std::vector<std::uint32_t> ev(count);
    for (auto& v : ev) v = read_u32(is);
    return ev;
}
}  // namespace

void save_dataset(const std::vector<DyadicClip>& clips, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointErrorCode::Io, "dataset: cannot open for write: " + path);
    os.write(kDatasetMagic, 4);
    write_u32(os, kDatasetVersion);
    write_u32(os, static_cast<std::uint32_t>(clips.size()));
    for (const auto& c : clips) {
        write_tensor_entry(os, "user_motion", c.user_motion);
        write_tensor_entry(os, "user_audio", c.user_audio);
        write_tensor_entry(os, "avatar_audio", c.avatar_audio);
        write_tensor_entry(os, "avatar_motion", c.avatar_motion);
        write_tensor_entry(os, "turn_schedule", c.turn_schedule);
        write_events(os, c.smile_events);
        write_events(os, c.stress_peaks);
    }
    os.flush();
    if (!os) throw CheckpointError(CheckpointErrorCode::Io, "dataset: write failed: " + path);
}

std::vector<DyadicClip> load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(CheckpointErrorCode::Io, "dataset: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kDatasetMagic, 4) != 0) {
        throw CheckpointError(CheckpointErrorCode::BadMagic, "dataset: bad magic in " + path);
    }
    const std::uint32_t version = read_u32(is);
    if (version != kDatasetVersion) {
        throw CheckpointError(CheckpointErrorCode::BadVersion,
                              "dataset: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = read_u32(is);
    std::vector<DyadicClip> clips(count);
    for (auto& c : clips) {
        auto expect = [&](const char* want) {
            auto [name, t] = read_tensor_entry(is);
            if (name != want) {
                throw CheckpointError(CheckpointErrorCode::BadShape,
                                      std::string("dataset: expected tensor ") + want + ", got " + name);
            }
            return t;
        };
        c.user_motion = expect("user_motion");
        c.user_audio = expect("user_audio");
        c.avatar_audio = expect("avatar_audio");
        c.avatar_motion = expect("avatar_motion");
        c.turn_schedule = expect("turn_schedule");
        c.frames = c.user_motion.rows();
        c.smile_events = read_events(is);
        c.stress_peaks = read_events(is);
    }
    return clips;
}

}  // namespace dyad::world
