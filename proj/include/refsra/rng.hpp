#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string_view>

namespace refsra {

/// Deterministic PRNG with a fixed, platform-independent bit stream.
/// All randomness in the library flows through this type so that results
/// are reproducible from integer seeds alone (std::uniform_* distributions
/// are not bit-stable across standard libraries).
class Rng {
public:
    explicit Rng(uint64_t seed) {
        // SplitMix64 expansion of the seed into xoshiro256** state.
        uint64_t s = seed;
        for (auto& word : state_) word = splitmix64(s);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller. Draws two words per call; the second
    /// variate is discarded to keep the stream position independent of use.
    double normal() {
        const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0,1]
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform integer in [lo, hi] inclusive. Modulo bias is negligible for
    /// the ranges used here and keeps the mapping trivially portable.
    int uniform_int(int lo, int hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

/// Order-independent derivation of per-item seeds from a master seed.
inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9e3779b97f4a7c15ull;
    x ^= b + 0x9e3779b97f4a7c15ull + (x << 6) + (x >> 2);
    uint64_t s = x;
    return Rng::splitmix64(s);
}

/// FNV-1a on bytes; used to derive RNG streams from string ids.
inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace refsra
