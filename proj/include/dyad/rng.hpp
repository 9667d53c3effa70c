#pragma once

#include <cmath>
#include <cstdint>

#include "dyad/tensor.hpp"

namespace dyad {

// xoshiro256++ seeded through splitmix64. Hand-rolled so that a given seed
// and call sequence produce the same stream on every platform; the standard
// library distributions are implementation-defined and would break that.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : state_) w = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Box-Muller from two fresh uniforms. No cached spare: one sample per
    // call keeps the call-sequence contract trivial.
    double next_gauss() {
        double u1 = next_unit();
        while (u1 <= 0.0) u1 = next_unit();
        const double u2 = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    bool bernoulli(double p) { return next_unit() < p; }

    // Deterministic stream splitting, independent of thread schedule.
    SeededRng split(std::uint64_t tag) const {
        std::uint64_t x = state_[0] ^ (state_[3] + 0x9e3779b97f4a7c15ULL * (tag + 1));
        return SeededRng(x);
    }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
        return splitmix64(x);
    }

private:
    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::uint64_t state_[4];
};

// i.i.d. standard normal tensor, reproducible per seed state.
template <typename T = float>
TensorT<T> gaussian(SeededRng& rng, std::vector<std::size_t> shape) {
    TensorT<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.next_gauss());
    return t;
}

template <typename T = float>
TensorT<T> uniform_tensor(SeededRng& rng, std::vector<std::size_t> shape, double lo, double hi) {
    TensorT<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

}  // namespace dyad
