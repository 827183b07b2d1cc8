// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "psb/tensor.hpp"

namespace psb {

using Rng = std::mt19937_64;

/// Deterministically mixes a root seed with a path of integers (splitmix64
/// finalizer per component) so that sub-streams are independent of the order
/// in which they are requested.
inline std::uint64_t derive_seed(std::uint64_t root,
                                 std::initializer_list<std::uint64_t> path = {}) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(root);
  for (auto p : path) h = mix(h ^ mix(p + 0x632be59bd9b4e019ULL));
  return h;
}

template <class Real>
Tensor<Real> normal_tensor(Shape shape, Rng& rng, Real stddev = Real(1)) {
  Tensor<Real> out(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : out.data()) v = static_cast<Real>(dist(rng)) * stddev;
  return out;
}

template <class Real>
Tensor<Real> uniform_tensor(Shape shape, Rng& rng, Real lo, Real hi) {
  Tensor<Real> out(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : out.data()) v = static_cast<Real>(dist(rng));
  return out;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a [fan_in, fan_out] weight.
template <class Real>
Tensor<Real> fan_in_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const Real bound = Real(1) / std::sqrt(static_cast<Real>(fan_in));
  return uniform_tensor<Real>({fan_in, fan_out}, rng, -bound, bound);
}

}  // namespace psb
