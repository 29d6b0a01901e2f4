#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace qrn {

// Deterministic generator used everywhere instead of std:: distributions,
// whose output is implementation-defined. splitmix64 state transition with
// explicit uniform/normal transforms keeps every draw reproducible across
// platforms and compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; draws two uniforms per call
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

private:
    uint64_t state_;
};

// FNV-1a over the role string folded into the master seed. Adding a new role
// never perturbs the sub-seed of any existing role.
inline uint64_t derive_seed(uint64_t master, std::string_view role) {
    uint64_t h = 0xcbf29ce484222325ull ^ master;
    for (unsigned char c : role) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace qrn
