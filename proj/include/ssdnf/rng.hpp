#pragma once

#include "core.hpp"

#include <cmath>
#include <cstdint>

namespace ssdnf {

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t rotl64(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace detail

// Self-contained xoshiro256** generator. std::mt19937 is avoided so the
// sequence is fully specified here and seeded runs reproduce bit-for-bit.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = detail::splitmix64(sm);
        have_cached_gauss_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = detail::rotl64(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl64(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform over {lo, ..., hi} inclusive.
    int uniform_int(int lo, int hi) {
        uint64_t span = uint64_t(int64_t(hi) - int64_t(lo)) + 1;
        return lo + int(next_u64() % span);
    }

    // Standard normal via Box-Muller; second value of each pair is cached.
    double gaussian() {
        if (have_cached_gauss_) {
            have_cached_gauss_ = false;
            return cached_gauss_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        u1 = u1 <= 0.0 ? 0x1.0p-53 : u1;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_gauss_ = r * std::sin(a);
        have_cached_gauss_ = true;
        return r * std::cos(a);
    }

    // Derives an independent child stream; (seed, label) fully determines it.
    Rng fork(uint64_t label) const {
        uint64_t sm = s_[0] ^ detail::rotl64(s_[3], 13) ^ (label * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL);
        Rng child(0);
        for (auto& w : child.s_) w = detail::splitmix64(sm);
        child.have_cached_gauss_ = false;
        return child;
    }

private:
    uint64_t s_[4];
    double cached_gauss_ = 0.0;
    bool have_cached_gauss_ = false;
};

// Stateless hash stream: one value per (seed, a, b, c) tuple. Used for
// per-ray jitter so results do not depend on traversal order.
inline double hash_uniform(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t sm = seed;
    sm ^= detail::splitmix64(a);
    sm ^= detail::rotl64(detail::splitmix64(b), 21);
    sm ^= detail::rotl64(detail::splitmix64(c), 42);
    uint64_t z = detail::splitmix64(sm);
    return double(z >> 11) * 0x1.0p-53;
}

} // namespace ssdnf
