#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <utility>
#include <vector>

#include "fcil/errors.hpp"

namespace fcil {

// All randomness in the simulator flows through this header. Distributions
// are built from raw mt19937_64 words instead of std::*_distribution so that
// a given seed produces the same stream on every standard library.

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a) { return splitmix64(a); }

// Derive an independent stream id from a seed plus any number of tags.
template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
    return mix_seed(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ull + (splitmix64(a) << 6)), rest...);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double u01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

    // Box-Muller. Draws a fresh pair of uniforms per call; no cached spare.
    double normal(double mean = 0.0, double stddev = 1.0) {
        const double u1 = 1.0 - u01();  // (0, 1], keeps the log finite
        const double u2 = u01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        return mean + stddev * r * std::cos(two_pi * u2);
    }

    // Marsaglia-Tsang for shape >= 1, boosted for shape < 1.
    double gamma(double shape) {
        if (!(shape > 0.0)) {
            throw ArgumentError("rng: gamma shape must be > 0");
        }
        if (shape < 1.0) {
            const double u = 1.0 - u01();
            return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
        }
        const double d = shape - 1.0 / 3.0;
        const double c = 1.0 / std::sqrt(9.0 * d);
        for (;;) {
            const double x = normal();
            double v = 1.0 + c * x;
            if (v <= 0.0) {
                continue;
            }
            v = v * v * v;
            const double u = 1.0 - u01();
            if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) {
                return d * v;
            }
        }
    }

    // Symmetric Dirichlet via normalized gamma draws.
    std::vector<double> dirichlet(double concentration, std::size_t k) {
        if (k == 0) {
            throw ArgumentError("rng: dirichlet needs k >= 1");
        }
        std::vector<double> draws(k);
        double sum = 0.0;
        do {
            sum = 0.0;
            for (std::size_t i = 0; i < k; ++i) {
                draws[i] = gamma(concentration);
                sum += draws[i];
            }
        } while (!(sum > 0.0));  // guards underflow at tiny concentrations
        for (double& d : draws) {
            d /= sum;
        }
        return draws;
    }

    // Uniform integer in [0, n), rejection sampled to avoid modulo bias.
    std::size_t below(std::size_t n) {
        if (n == 0) {
            throw ArgumentError("rng: below(0) is undefined");
        }
        const std::uint64_t nn = static_cast<std::uint64_t>(n);
        const std::uint64_t limit =
            std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % nn;
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return static_cast<std::size_t>(x % nn);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

    // First k entries of a Fisher-Yates pass; consumes no randomness when
    // k == 0 and exactly k draws otherwise.
    std::vector<std::size_t> choose(std::size_t n, std::size_t k) {
        if (k > n) {
            throw ArgumentError("rng: cannot choose " + std::to_string(k) + " of " + std::to_string(n));
        }
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) {
            idx[i] = i;
        }
        for (std::size_t i = 0; i < k; ++i) {
            std::swap(idx[i], idx[i + below(n - i)]);
        }
        idx.resize(k);
        return idx;
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace fcil
