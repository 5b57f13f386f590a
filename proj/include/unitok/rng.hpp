#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace unitok {

// splitmix64; the whole project draws randomness through this so that runs
// are bit-identical across platforms (std:: distributions are not).
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t hash_u64(uint64_t x) {
    uint64_t s = x;
    return splitmix64(s);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return hash_u64(a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2) + hash_u64(b)));
}

inline uint64_t hash_str(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(hash_u64(seed ^ 0x5851f42d4c957f2dull)) {}

    // Derive an independent stream, e.g. Rng(seed).stream("init", param_idx).
    Rng stream(std::string_view tag, uint64_t idx = 0) const {
        Rng r(0);
        r.state_ = hash_combine(hash_combine(state_, hash_str(tag)), idx);
        return r;
    }

    uint64_t next_u64() { return splitmix64(state_); }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    uint64_t below(uint64_t n) {
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller without the cached spare, so the state is two u64 draws per
    // call and serialization stays trivial.
    double normal() {
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

  private:
    uint64_t state_;
};

template <typename It>
void shuffle_inplace(It first, It last, Rng& rng) {
    auto n = static_cast<uint64_t>(last - first);
    for (uint64_t i = n; i > 1; --i) {
        uint64_t j = rng.below(i);
        std::swap(first[i - 1], first[j]);
    }
}

}  // namespace unitok
