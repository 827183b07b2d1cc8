// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "psb/errors.hpp"
#include "psb/tape.hpp"

namespace psb {

struct Schedule {
  double peak = 3e-4;
  double warmup = 500;
  double half_life = 20000;
};

/// Linear warm-up from 0 to `peak`, then exponential decay with the given
/// half-life.
inline double lr_at(std::uint64_t step, const Schedule& s) {
  const double t = static_cast<double>(step);
  if (s.warmup > 0 && t < s.warmup) return s.peak * t / s.warmup;
  return s.peak * std::exp2(-(t - s.warmup) / s.half_life);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Moments are kept in double regardless of the parameter type.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;

  template <class Real>
  void ensure(const ParamStore<Real>& store) {
    if (m.size() == store.size()) return;
    m.clear();
    v.clear();
    for (const auto& p : store) {
      m.emplace_back(p.value.size(), 0.0);
      v.emplace_back(p.value.size(), 0.0);
    }
  }
};

/// One AdamW step using the grads held in `store`. The step counter is
/// incremented first; decoupled weight decay multiplies decaying params by
/// (1 - lr * wd) before the bias-corrected moment update.
template <class Real>
void adamw_update(ParamStore<Real>& store, AdamState& state, double lr,
                  const AdamWConfig& cfg = {}) {
  state.ensure(store);
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::size_t idx = 0;
  for (auto& p : store) {
    auto& m = state.m[idx];
    auto& v = state.v[idx];
    ++idx;
    const double shrink = p.decay ? 1.0 - lr * cfg.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = c1 > 0 ? m[i] / c1 : m[i];
      const double vhat = c2 > 0 ? v[i] / c2 : v[i];
      double x = static_cast<double>(p.value[i]) * shrink;
      x -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
      p.value[i] = static_cast<Real>(x);
    }
  }
}

template <class Real>
double global_grad_norm(const ParamStore<Real>& store) {
  double s = 0;
  for (const auto& p : store) {
    for (auto g : p.grad.data()) s += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(s);
}

/// Rescales all grads so their global norm is at most `max_norm`.
template <class Real>
double clip_grad_norm(ParamStore<Real>& store, double max_norm) {
  const double norm = global_grad_norm(store);
  if (norm > max_norm && norm > 0) {
    const auto f = static_cast<Real>(max_norm / norm);
    for (auto& p : store) {
      for (auto& g : p.grad.data()) g *= f;
    }
  }
  return norm;
}

}  // namespace psb
