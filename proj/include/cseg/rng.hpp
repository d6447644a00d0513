#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

namespace cseg::rng {

// SplitMix64 mixer, used to derive independent stream seeds from one
// master seed. Reference: Steele, Lea, Flood, "Fast splittable
// pseudorandom number generators" (the java.util.SplittableRandom mixer).
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
    return splitmix64(master ^ splitmix64(stream));
}

// All randomness in the library flows through this engine so that results
// are reproducible bit-for-bit for a fixed seed on any platform: mt19937_64
// has a standard-pinned output sequence, and the derived draws below avoid
// the implementation-defined std distributions.
class Engine {
public:
    explicit Engine(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, n) by rejection sampling (no modulo bias).
    uint64_t below(uint64_t n) {
        const uint64_t limit = ~uint64_t{0} - (~uint64_t{0} % n + 1) % n;
        uint64_t v;
        do {
            v = gen_();
        } while (v > limit);
        return v % n;
    }

    // Uniform double in (0, 1].
    double uniform_pos() { return static_cast<double>((gen_() >> 11) + 1) * 0x1.0p-53; }

    // Uniform double in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via the Box-Muller transform; the second value of
    // each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = uniform_pos();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // In-place Fisher-Yates shuffle.
    template <typename Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace cseg::rng
