// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "psb/grad_check.hpp"
#include "psb/ops.hpp"
#include "psb/random.hpp"
#include "psb/tape.hpp"

namespace psb::testing {

/// Finite-difference check of `f` with respect to freshly drawn inputs,
/// each registered as a parameter so grad_check perturbs them.
inline GradCheckReport check_inputs(
    const std::vector<Shape>& shapes, std::uint64_t seed,
    const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& f,
    double scale = 1.0) {
  ParamStore<double> store;
  Rng rng(seed);
  std::vector<ParamId> ids;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    ids.push_back(store.add("x" + std::to_string(i), normal_tensor<double>(shapes[i], rng, scale)));
  }
  // Random linear functional of the output so that every element matters.
  auto weights = std::make_shared<std::vector<double>>();
  auto loss = [&, ids, weights](Tape<double>& tape) {
    std::vector<Var<double>> xs;
    for (auto id : ids) xs.push_back(tape.param(id));
    auto y = f(tape, xs);
    if (weights->empty()) {
      Rng wr(seed ^ 0xabcdefULL);
      auto w = normal_tensor<double>(y.shape(), wr);
      weights->assign(w.data().begin(), w.data().end());
    }
    auto w = tape.constant(Tensor<double>(y.shape(), *weights));
    return sum(mul(y, w));
  };
  return grad_check(loss, store, 1e-5, 1e-4);
}

/// Adds Gaussian noise to every parameter so zero-initialized projections
/// and bias tables take part in a test.
template <class Real>
void perturb(ParamStore<Real>& store, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& p : store) {
    auto noise = normal_tensor<Real>(p.value.shape(), rng, static_cast<Real>(scale));
    for (std::size_t i = 0; i < noise.size(); ++i) p.value[i] += noise[i];
  }
}

}  // namespace psb::testing
