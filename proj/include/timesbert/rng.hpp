#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <string_view>

namespace timesbert {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Order-sensitive seed mixing, e.g. derive_seed({run_seed, step, sample_id}).
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x243f6a8885a308d3ULL;
    for (auto p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

inline std::uint64_t hash_string(std::string_view s) {
    // FNV-1a
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic generator. The distributions are written out here rather than
// taken from <random> because the standard distributions are not
// reproducible across library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal truncated to [-2 stddev, 2 stddev] by resampling.
    double truncated_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (std::abs(z) <= 2.0) return z * stddev;
        }
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace timesbert
