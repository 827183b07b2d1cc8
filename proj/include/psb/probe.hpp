// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "psb/errors.hpp"
#include "psb/parallel.hpp"
#include "psb/tensor.hpp"

namespace psb {

/// One ground-truth factor of every object at every time-step. Continuous
/// factors store [T, M, width] values; categorical ones store [T, M] class
/// indices in [0, width).
struct FactorData {
  std::string name;
  bool categorical = false;
  std::size_t width = 1;
  std::vector<double> values;
};

struct ProbeProblem {
  Tensor<double> slots;  // [T, N, D]
  std::size_t objects = 0;
  std::vector<FactorData> factors;

  const FactorData& factor(const std::string& name) const {
    for (const auto& f : factors) {
      if (f.name == name) return f;
    }
    throw PreconditionError("probe: episode has no factor '" + name + "'");
  }
};

struct ProbeOptions {
  double ridge = 1e-4;
  std::size_t max_rounds = 20;
  double test_fraction = 0.2;
  std::string assign_factor = "position";
};

struct FactorScore {
  std::string factor;
  std::string metric;  // "r2" or "accuracy"
  double value = 0;
  std::size_t n_episodes = 0;
};

struct ProbeResult {
  std::vector<FactorScore> scores;
  std::vector<std::vector<std::size_t>> permutations;  // per episode: slot of object m
  std::vector<double> em_objective;                   // after every M-step
  std::size_t rounds = 0;
  std::vector<std::size_t> train, test;
};

/// Ridge least squares (X^T X + lambda I)^-1 X^T Y; the bias column is
/// penalized like every other coefficient.
inline Eigen::MatrixXd ridge_fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                 double lambda) {
  Eigen::MatrixXd a = x.transpose() * x;
  a.diagonal().array() += lambda;
  return a.ldlt().solve(x.transpose() * y);
}

/// Ordered M-subsets of {0..N-1} in lexicographic order.
inline std::vector<std::vector<std::size_t>> ordered_subsets(std::size_t n, std::size_t m) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::vector<bool> used(n, false);
  auto rec = [&](auto&& self) -> void {
    if (cur.size() == m) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      used[i] = true;
      cur.push_back(i);
      self(self);
      cur.pop_back();
      used[i] = false;
    }
  };
  rec(rec);
  return out;
}

namespace detail {

inline Eigen::RowVectorXd slot_row(const ProbeProblem& p, std::size_t t, std::size_t n) {
  const std::size_t slots = p.slots.dim(1), d = p.slots.dim(2);
  Eigen::RowVectorXd r(d + 1);
  for (std::size_t c = 0; c < d; ++c) r[c] = p.slots[(t * slots + n) * d + c];
  r[d] = 1.0;
  return r;
}

/// Target rows for one factor; categorical factors become one-hot rows.
inline Eigen::RowVectorXd target_row(const FactorData& f, std::size_t objects, std::size_t t,
                                     std::size_t m) {
  Eigen::RowVectorXd r = Eigen::RowVectorXd::Zero(f.width);
  if (f.categorical) {
    const auto cls = static_cast<std::size_t>(f.values[t * objects + m]);
    if (cls >= f.width) throw PreconditionError("probe: class index out of range in " + f.name);
    r[cls] = 1.0;
  } else {
    for (std::size_t c = 0; c < f.width; ++c) r[c] = f.values[(t * objects + m) * f.width + c];
  }
  return r;
}

inline void design(const std::vector<ProbeProblem>& problems, const std::vector<std::size_t>& eps,
                   const std::vector<std::vector<std::size_t>>& perms, const std::string& factor,
                   Eigen::MatrixXd& x, Eigen::MatrixXd& y) {
  std::size_t rows = 0;
  for (auto e : eps) rows += problems[e].slots.dim(0) * problems[e].objects;
  const std::size_t d = problems[eps.front()].slots.dim(2);
  const std::size_t width = problems[eps.front()].factor(factor).width;
  x.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(d + 1));
  y.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width));
  Eigen::Index r = 0;
  for (auto e : eps) {
    const auto& p = problems[e];
    const auto& f = p.factor(factor);
    for (std::size_t t = 0; t < p.slots.dim(0); ++t) {
      for (std::size_t m = 0; m < p.objects; ++m, ++r) {
        x.row(r) = slot_row(p, t, perms[e][m]);
        y.row(r) = target_row(f, p.objects, t, m);
      }
    }
  }
}

/// Best ordered subset for one episode under probe `w`, with its error.
inline std::pair<std::vector<std::size_t>, double> assign(
    const ProbeProblem& p, const Eigen::MatrixXd& w, const std::string& factor,
    const std::vector<std::vector<std::size_t>>& candidates) {
  const std::size_t steps = p.slots.dim(0), slots = p.slots.dim(1);
  const auto& f = p.factor(factor);
  // err[m][n]: squared error of predicting object m from slot n, summed over t.
  std::vector<double> err(p.objects * slots, 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t n = 0; n < slots; ++n) {
      const Eigen::RowVectorXd pred = slot_row(p, t, n) * w;
      for (std::size_t m = 0; m < p.objects; ++m) {
        err[m * slots + n] += (pred - target_row(f, p.objects, t, m)).squaredNorm();
      }
    }
  }
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_i = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double s = 0;
    for (std::size_t m = 0; m < p.objects; ++m) s += err[m * slots + candidates[i][m]];
    if (s < best) {
      best = s;
      best_i = i;
    }
  }
  return {candidates[best_i], best};
}

inline double r2_score(const Eigen::MatrixXd& y, const Eigen::MatrixXd& pred) {
  double total = 0;
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    const double mean = y.col(c).mean();
    const double ss_tot = (y.col(c).array() - mean).square().sum();
    const double ss_res = (y.col(c) - pred.col(c)).squaredNorm();
    total += ss_tot > 0 ? 1.0 - ss_res / ss_tot : (ss_res == 0 ? 1.0 : 0.0);
  }
  return total / static_cast<double>(y.cols());
}

inline double accuracy(const Eigen::MatrixXd& y, const Eigen::MatrixXd& pred) {
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    Eigen::Index a, b;
    y.row(r).maxCoeff(&a);
    pred.row(r).maxCoeff(&b);
    hits += a == b;
  }
  return static_cast<double>(hits) / static_cast<double>(y.rows());
}

}  // namespace detail

/// Permutation-invariant linear probing. An EM loop alternates a ridge
/// probe from assigned slots to object positions (E-step) with an
/// exhaustive per-episode search over slot assignments (M-step), starting
/// from the identity assignment. The converged assignment is then used to
/// fit one probe per factor on training episodes and score held-out ones.
inline ProbeResult perm_invariant_probe(const std::vector<ProbeProblem>& problems,
                                        const std::vector<std::string>& factors,
                                        const ProbeOptions& opt = {}) {
  if (problems.size() < 2) throw PreconditionError("probe: need at least 2 episodes");
  const std::size_t n = problems.front().slots.dim(1);
  for (const auto& p : problems) {
    if (p.slots.rank() != 3 || p.slots.dim(1) != n || p.slots.dim(2) != problems[0].slots.dim(2)) {
      throw ShapeError("probe: slot arrays must share N and D");
    }
    if (p.objects > n) {
      throw PreconditionError("probe: " + std::to_string(p.objects) + " objects but only " +
                              std::to_string(n) + " slots");
    }
    if (p.objects == 0) throw PreconditionError("probe: episode without objects");
  }
  ProbeResult res;
  const std::size_t b = problems.size();
  const auto n_test = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(opt.test_fraction * static_cast<double>(b))), 1, b - 1);
  for (std::size_t e = 0; e < b; ++e) (e < b - n_test ? res.train : res.test).push_back(e);

  res.permutations.resize(b);
  std::vector<std::vector<std::vector<std::size_t>>> candidates(b);
  for (std::size_t e = 0; e < b; ++e) {
    res.permutations[e].resize(problems[e].objects);
    std::iota(res.permutations[e].begin(), res.permutations[e].end(), std::size_t{0});
    candidates[e] = ordered_subsets(n, problems[e].objects);
  }

  Eigen::MatrixXd x, y, w;
  auto m_step = [&](const std::vector<std::size_t>& eps) {
    std::vector<double> errs(eps.size());
    parallel_for(eps.size(), [&](std::size_t i) {
      auto [perm, err] = detail::assign(problems[eps[i]], w, opt.assign_factor, candidates[eps[i]]);
      res.permutations[eps[i]] = std::move(perm);
      errs[i] = err;
    });
    return std::accumulate(errs.begin(), errs.end(), 0.0);
  };
  for (std::size_t round = 0; round < opt.max_rounds; ++round) {
    const auto before = res.permutations;
    detail::design(problems, res.train, res.permutations, opt.assign_factor, x, y);
    w = ridge_fit(x, y, opt.ridge);
    const double err = m_step(res.train);
    res.em_objective.push_back(err + opt.ridge * w.squaredNorm());
    res.rounds = round + 1;
    if (res.permutations == before) break;
  }
  // Held-out episodes are assigned with the converged position probe.
  detail::design(problems, res.train, res.permutations, opt.assign_factor, x, y);
  w = ridge_fit(x, y, opt.ridge);
  m_step(res.test);

  for (const auto& name : factors) {
    detail::design(problems, res.train, res.permutations, name, x, y);
    const Eigen::MatrixXd probe = ridge_fit(x, y, opt.ridge);
    Eigen::MatrixXd xt, yt;
    detail::design(problems, res.test, res.permutations, name, xt, yt);
    const Eigen::MatrixXd pred = xt * probe;
    const bool cat = problems[res.test.front()].factor(name).categorical;
    res.scores.push_back({name, cat ? "accuracy" : "r2",
                          cat ? detail::accuracy(yt, pred) : detail::r2_score(yt, pred),
                          res.test.size()});
  }
  return res;
}

}  // namespace psb
