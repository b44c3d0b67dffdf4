#pragma once
#include <cmath>
#include <cstdint>

namespace qrouted {

// splitmix64; portable and byte-reproducible across platforms, unlike
// std::normal_distribution / std::exponential_distribution whose streams
// are implementation-defined.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and stream ids.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0) {
    std::uint64_t s = seed;
    splitmix64(s);
    s ^= 0xD6E8FEB86659FD93ULL * (a + 1);
    splitmix64(s);
    s ^= 0xCA5A826395121157ULL * (b + 1);
    splitmix64(s);
    s ^= 0x9E3779B97F4A7C15ULL * (c + 1);
    return splitmix64(s);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {
        // decorrelate trivially close seeds
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform in the open interval (0, 1); never returns an endpoint
    double uniform01() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // Box-Muller, one variate per pair of uniforms (no cached spare, so the
    // stream position is a pure function of the call count)
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
        return mean + stddev * z;
    }

    // exponential with the given mean; strictly positive
    double exponential(double mean) { return -mean * std::log(1.0 - uniform01()); }

private:
    std::uint64_t state_;
};

}  // namespace qrouted
