#pragma once

#include <cstdint>

namespace forge {

// Seedable, cross-platform deterministic generator. std::uniform_real_distribution
// is implementation-defined, so all uniform draws are built from raw 64-bit output
// of a splitmix64-seeded xoshiro256**. Every piece of randomness in the repo flows
// from one root seed through child streams (see split()).
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [-r, r].
    double uniform_sym(double r) { return (2.0 * uniform01() - 1.0) * r; }

    // {-r, +r} with equal probability.
    double sign_times(double r) { return (next_u64() & 1u) ? r : -r; }

    // Independent child stream; deterministic function of (parent seed, index).
    Rng split(std::uint64_t index) const {
        std::uint64_t x = state_[0] ^ (0x9e3779b97f4a7c15ULL * (index + 1));
        return Rng(splitmix64(x));
    }

private:
    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_[4];
};

} // namespace forge
