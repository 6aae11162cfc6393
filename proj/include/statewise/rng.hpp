#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace statewise {

// splitmix64 step; used to derive decorrelated child seeds from (base, stream).
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic RNG wrapper. Samplers are hand-rolled on top of the raw
// engine so streams do not depend on the standard library's distribution
// implementations (those are unspecified and may differ across releases).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // Uniform on (0, 1); rejects the single 0 outcome so log() is safe.
    double uniform_pos() {
        double u;
        do {
            u = uniform();
        } while (u <= 0.0);
        return u;
    }

    // Exponential with given rate; strictly positive by construction.
    double exponential(double rate) { return -std::log(uniform_pos()) / rate; }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Marsaglia polar; caches the spare deviate.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double m = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * m;
        have_spare_ = true;
        return u * m;
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // Index in [0, n) proportional to weights[i]; weights need not normalize.
    // Caller guarantees at least one strictly positive weight.
    template <class Vec>
    int pick(const Vec& weights, double total) {
        double u = uniform() * total;
        const int n = static_cast<int>(weights.size());
        for (int i = 0; i < n; ++i) {
            u -= weights[i];
            if (u < 0.0) return i;
        }
        // Floating-point slack: fall back to the last positive weight.
        for (int i = n - 1; i >= 0; --i) {
            if (weights[i] > 0.0) return i;
        }
        return n - 1;
    }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace statewise
