#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "hgm/ndarray.hpp"

namespace hgm {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

/// xoshiro256++ with splitmix64 seeding. Self-contained so that every stream
/// is bit-reproducible independent of the standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = detail::splitmix64(sm);
    }

    /// Independent substream keyed by (seed, k1, k2, ...); used to make
    /// per-(step, layer, sample) draws order- and shard-independent.
    static Rng derive(std::initializer_list<std::uint64_t> keys) {
        std::uint64_t h = 0x8c95e4a1d3f2b607ULL;
        for (std::uint64_t k : keys) {
            h ^= k + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
            h = detail::splitmix64(h);
        }
        return Rng(h);
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n), modulo-rejection for unbiasedness.
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Box-Muller, pairwise cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    std::vector<Index> randperm(Index n) {
        std::vector<Index> p(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        for (Index i = n - 1; i > 0; --i) {
            Index j = static_cast<Index>(uniform_int(static_cast<std::uint64_t>(i + 1)));
            std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
        }
        return p;
    }

    template <typename T>
    void fill_uniform(NdArray<T>& a, double lo, double hi) {
        for (Index i = 0; i < a.numel(); ++i) a[i] = static_cast<T>(uniform(lo, hi));
    }

    template <typename T>
    void fill_normal(NdArray<T>& a, double mean, double std) {
        for (Index i = 0; i < a.numel(); ++i) a[i] = static_cast<T>(mean + std * normal());
    }

private:
    std::uint64_t s_[4];
    double cached_ = 0.0;
    bool have_cached_ = false;
};

}  // namespace hgm
