// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace t4dg {

// Deterministic random source. std::mt19937_64 has a fully specified output
// sequence; the value mappings below are hand-rolled because the standard
// library distributions are not portable across implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    uint32_t next_u32() { return static_cast<uint32_t>(gen_() >> 32); }

    // Uniform in [0, 1), 53-bit mantissa path.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(uniform()) * (hi - lo);
    }

    // Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(uniform() * static_cast<double>(n));
    }

    // Standard normal via Box-Muller; one value per call, cached pair.
    float normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * M_PI * u2;
        spare_ = static_cast<float>(r * std::sin(t));
        has_spare_ = true;
        return static_cast<float>(r * std::cos(t));
    }

    float normal(float mean, float stddev) { return mean + stddev * normal(); }

    std::vector<float> normal_vec(size_t n, float mean = 0.0f, float stddev = 1.0f) {
        std::vector<float> out(n);
        for (auto& v : out) v = normal(mean, stddev);
        return out;
    }

    // Derive an independent stream; mixing constant from splitmix64.
    Rng fork(uint64_t stream) {
        return Rng(next_u64() ^ (stream * 0x9e3779b97f4a7c15ULL + 0xbf58476d1ce4e5b9ULL));
    }

private:
    std::mt19937_64 gen_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

} // namespace t4dg
