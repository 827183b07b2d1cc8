// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "psb/tape.hpp"

namespace psb {

struct ParamCheck {
  std::string name;
  double max_rel_err = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_err = 0;
  double tol = 0;
  bool passed() const { return max_rel_err < tol; }

  /// Name of the parameter with the largest error.
  std::string worst_param() const {
    auto it = std::max_element(params.begin(), params.end(), [](const auto& a, const auto& b) {
      return a.max_rel_err < b.max_rel_err;
    });
    return it == params.end() ? std::string() : it->name;
  }
};

/// Relative error with a floor on the denominator so that near-zero
/// gradients are compared absolutely at the floor's scale.
inline double grad_rel_err(double analytic, double numeric, double floor = 1e-3) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares tape gradients of the scalar `loss` with central finite
/// differences (f(x+eps) - f(x-eps)) / (2 eps), one scalar at a time.
/// Failures are reported, not thrown.
inline GradCheckReport grad_check(
    const std::function<Var<double>(Tape<double>&)>& loss, ParamStore<double>& params,
    double eps = 1e-5, double tol = 1e-4) {
  auto analytic = params.zero_grads();
  {
    Tape<double> tape(&params);
    auto l = loss(tape);
    tape.backward(l, analytic);
  }
  auto eval = [&] {
    Tape<double> tape(&params);
    return loss(tape).value()[0];
  };
  GradCheckReport report;
  report.tol = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = params.at(p);
    ParamCheck check{param.name};
    for (std::size_t i = 0; i < param.value.size(); ++i) {
      const double saved = param.value[i];
      param.value[i] = saved + eps;
      const double up = eval();
      param.value[i] = saved - eps;
      const double down = eval();
      param.value[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double err = grad_rel_err(analytic[p][i], numeric);
      if (err >= check.max_rel_err) {
        check.max_rel_err = err;
        check.worst_analytic = analytic[p][i];
        check.worst_numeric = numeric;
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, check.max_rel_err);
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace psb
