#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace xfusion {

// Splittable counter-style generator (splitmix64 core). Every stochastic call
// site takes an explicit Rng stream; child streams are derived by label so
// replays are bit-identical regardless of call order elsewhere.
class Rng {
public:
    Rng() : state_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x2545f4914f6cdd1dull)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // Child stream independent of this stream's future draws.
    Rng split(uint64_t label) const {
        Rng child;
        child.state_ = mix(state_ ^ mix(label + 0x9e3779b97f4a7c15ull));
        return child;
    }

    Rng split(std::string_view label) const { return split(hash_str(label)); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Box-Muller, no cached spare: two uniforms per draw, fully stateless
    // between calls so stream splitting stays exact.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    static uint64_t hash_str(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a 64
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t state_;
};

}  // namespace xfusion
