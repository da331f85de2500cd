#pragma once

#include <fnas/tensor.hpp>

#include <random>

namespace fnas {

using Rng = std::mt19937_64;

// Derives an independent stream seed from a base seed and a stream tag.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<real> v(numel_of(shape));
    for (auto& x : v) x = static_cast<real>(dist(rng));
    return Tensor(std::move(shape), std::move(v), true);
}

inline Tensor uniform_init(Shape shape, real bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<real> v(numel_of(shape));
    for (auto& x : v) x = static_cast<real>(dist(rng));
    return Tensor(std::move(shape), std::move(v), true);
}

// k distinct indices from [0, n), ascending.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, n - 1);
        std::swap(all[i], all[pick(rng)]);
    }
    all.resize(k);
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace fnas
