#pragma once

#include "ttadapt/tensor.hpp"

#include <cstdint>
#include <random>

namespace ttadapt {

using Rng = std::mt19937_64;

inline void fill_normal(DenseTensor& t, Rng& rng, double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : t.values()) v = dist(rng);
}

inline DenseTensor random_normal(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    DenseTensor t(std::move(shape));
    fill_normal(t, rng, mean, stddev);
    return t;
}

/// Derives an independent stream seed from a base seed and a salt.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace ttadapt
