// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "psb/errors.hpp"
#include "psb/tensor.hpp"

namespace psb {

/// Adjusted Rand index from the pair-counting contingency formula. Returns
/// 1 when the chance-adjusted denominator vanishes (e.g. one cluster in
/// both labelings).
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw ShapeError("adjusted_rand_index: length mismatch");
  if (a.size() < 2) throw PreconditionError("adjusted_rand_index: need at least 2 points");
  std::map<std::pair<int, int>, double> joint;
  std::unordered_map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    rows[a[i]] += 1;
    cols[b[i]] += 1;
  }
  auto pairs = [](double n) { return n * (n - 1) / 2; };
  double index = 0, sum_a = 0, sum_b = 0;
  for (const auto& [key, n] : joint) index += pairs(n);
  for (const auto& [key, n] : rows) sum_a += pairs(n);
  for (const auto& [key, n] : cols) sum_b += pairs(n);
  const double expected = sum_a * sum_b / pairs(static_cast<double>(a.size()));
  const double max_index = (sum_a + sum_b) / 2;
  const double denom = max_index - expected;
  if (denom == 0) return 1.0;
  return (index - expected) / denom;
}

/// ARI restricted to pixels whose ground truth is not `background`.
inline double fg_ari(const std::vector<int>& pred, const std::vector<int>& gt, int background = 0) {
  if (pred.size() != gt.size()) throw ShapeError("fg_ari: length mismatch");
  std::vector<int> p, g;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == background) continue;
    p.push_back(pred[i]);
    g.push_back(gt[i]);
  }
  if (g.empty()) throw PreconditionError("fg_ari: no foreground pixels");
  if (g.size() < 2) throw PreconditionError("fg_ari: fewer than 2 foreground pixels");
  return adjusted_rand_index(p, g);
}

enum class Grouping {
  per_frame,     // one camera, one time-step
  per_video,     // one camera, all time-steps
  per_camera,    // same axes as per_video: each camera's pixels across time
  cross_camera,  // all cameras, one time-step
  cross_all,     // all cameras and time-steps
};

inline Grouping parse_grouping(const std::string& s) {
  if (s == "per-frame") return Grouping::per_frame;
  if (s == "per-video") return Grouping::per_video;
  if (s == "per-camera") return Grouping::per_camera;
  if (s == "cross-camera") return Grouping::cross_camera;
  if (s == "cross-all") return Grouping::cross_all;
  throw ConfigError("unknown grouping '" + s + "'");
}

inline std::string to_string(Grouping g) {
  switch (g) {
    case Grouping::per_frame: return "per-frame";
    case Grouping::per_video: return "per-video";
    case Grouping::per_camera: return "per-camera";
    case Grouping::cross_camera: return "cross-camera";
    case Grouping::cross_all: return "cross-all";
  }
  return "?";
}

/// Label volume of one episode laid out [T, K, P] (K cameras, P pixels).
struct LabelVolume {
  std::vector<int> labels;
  std::size_t steps = 1, cameras = 1, pixels = 0;

  int at(std::size_t t, std::size_t k, std::size_t p) const {
    return labels[(t * cameras + k) * pixels + p];
  }
};

/// FG-ARI over pixel groups, averaged over groups. Groups without
/// foreground are skipped; an episode with no foreground at all is an error.
inline double grouped_fg_ari(const LabelVolume& pred, const LabelVolume& gt, Grouping grouping,
                             int background = 0) {
  if (pred.steps != gt.steps || pred.cameras != gt.cameras || pred.pixels != gt.pixels ||
      pred.labels.size() != gt.labels.size() ||
      gt.labels.size() != gt.steps * gt.cameras * gt.pixels) {
    throw ShapeError("grouped_fg_ari: label volumes disagree");
  }
  const bool split_time = grouping == Grouping::per_frame || grouping == Grouping::cross_camera;
  const bool split_camera = grouping == Grouping::per_frame || grouping == Grouping::per_video ||
                            grouping == Grouping::per_camera;
  const std::size_t t_groups = split_time ? gt.steps : 1;
  const std::size_t k_groups = split_camera ? gt.cameras : 1;
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t tg = 0; tg < t_groups; ++tg) {
    for (std::size_t kg = 0; kg < k_groups; ++kg) {
      std::vector<int> p, g;
      for (std::size_t t = 0; t < gt.steps; ++t) {
        if (split_time && t != tg) continue;
        for (std::size_t k = 0; k < gt.cameras; ++k) {
          if (split_camera && k != kg) continue;
          for (std::size_t i = 0; i < gt.pixels; ++i) {
            p.push_back(pred.at(t, k, i));
            g.push_back(gt.at(t, k, i));
          }
        }
      }
      std::size_t fg = 0;
      for (int v : g) fg += v != background;
      if (fg < 2) continue;
      total += fg_ari(p, g, background);
      ++counted;
    }
  }
  if (counted == 0) throw PreconditionError("grouped_fg_ari: no foreground pixels");
  return total / static_cast<double>(counted);
}

inline constexpr double kPsnrCeiling = 120.0;

/// 10 log10(peak^2 / MSE); MSE below 1e-12 reports the 120 dB ceiling.
inline double psnr_from_mse(double mse, double peak = 1.0) {
  if (mse < 1e-12) return kPsnrCeiling;
  return 10.0 * std::log10(peak * peak / mse);
}

template <class Real>
double psnr(const Tensor<Real>& pred, const Tensor<Real>& target, double peak = 1.0) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("psnr: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    s += d * d;
  }
  return psnr_from_mse(s / static_cast<double>(pred.size()), peak);
}

}  // namespace psb
