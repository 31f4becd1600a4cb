#pragma once

// Portable random streams for reproducible trials.
//
// The generator is xoshiro256** seeded through SplitMix64, and normal
// variates come from the Box-Muller transform. Neither depends on the
// standard library's distribution implementations, so a seed produces the
// same stream on every platform and compiler.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "spi/core.hpp"

namespace spi {

inline std::uint64_t splitmix64(std::uint64_t& state)
{
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Mixes a base seed with stream coordinates into an independent seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0)
{
    std::uint64_t s = base;
    std::uint64_t h = splitmix64(s);
    for (std::uint64_t v : {a, b, c}) {
        s = h ^ (v + 0x632be59bd9b4e019ULL);
        h = splitmix64(s);
    }
    return h;
}

class Xoshiro256
{
public:
    explicit Xoshiro256(std::uint64_t seed)
    {
        std::uint64_t s = seed;
        for (auto& word : state_)
            word = splitmix64(s);
    }

    std::uint64_t next()
    {
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

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
};

/// Standard normal variates by Box-Muller; the second variate of each pair
/// is cached and returned on the following call.
class GaussianStream
{
public:
    explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}

    double next()
    {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - rng_.uniform(); // (0, 1]
        const double u2 = rng_.uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    Vec standard(Eigen::Index n)
    {
        Vec z(n);
        for (Eigen::Index i = 0; i < n; ++i)
            z[i] = next();
        return z;
    }

    Xoshiro256& engine() { return rng_; }

private:
    Xoshiro256 rng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace spi
