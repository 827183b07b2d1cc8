// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include "psb/errors.hpp"
#include "psb/tensor.hpp"

namespace psb {

using Color = std::array<double, 3>;

/// Sine-cosine features of a bounded scalar: [sin(g_i s), cos(g_i s)] for
/// g_i = pi * 2^(i-1) / max_value, i = 1..D/2.
inline Tensor<double> vectorize_scalar(double s, std::size_t dim = 16, double max_value = 1.0) {
  if (dim == 0 || dim % 2 != 0) throw PreconditionError("vectorize_scalar: D must be even");
  if (!(max_value > 0)) throw PreconditionError("vectorize_scalar: max_value must be positive");
  Tensor<double> out({dim});
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double g = std::numbers::pi * std::ldexp(1.0, static_cast<int>(i)) / max_value;
    out[2 * i] = std::sin(g * s);
    out[2 * i + 1] = std::cos(g * s);
  }
  return out;
}

struct DensityColor {
  double sigma = 0;
  Color color{0, 0, 0};
};

/// Combined density sigma = sum sigma_n and density-weighted color. A point
/// with zero total density gets color 0.
inline DensityColor composite_slots(const std::vector<double>& sigmas,
                                    const std::vector<Color>& colors,
                                    std::optional<DensityColor> static_part = std::nullopt) {
  if (sigmas.size() != colors.size()) throw ShapeError("composite_slots: size mismatch");
  DensityColor out;
  Color weighted{0, 0, 0};
  auto accumulate = [&](double s, const Color& c) {
    if (!(s >= 0)) throw PreconditionError("composite_slots: negative density");
    out.sigma += s;
    for (int k = 0; k < 3; ++k) weighted[k] += s * c[k];
  };
  for (std::size_t n = 0; n < sigmas.size(); ++n) accumulate(sigmas[n], colors[n]);
  if (static_part) accumulate(static_part->sigma, static_part->color);
  if (out.sigma > 0) {
    for (int k = 0; k < 3; ++k) out.color[k] = weighted[k] / out.sigma;
  }
  return out;
}

/// One sample along a ray: per-source densities and colors, the distance
/// to the next sample, and optional shadow coefficients.
struct RaySample {
  std::vector<double> sigmas;
  std::vector<Color> colors;
  std::optional<DensityColor> static_part;
  double length = 1.0;
  std::optional<double> rho_static;  // shadow factor of the static source
  std::vector<double> rho;           // per-source shadow factors, empty when unshadowed
};

struct Ray {
  std::vector<RaySample> samples;
  std::optional<Color> sky;
};

struct RayResult {
  Color color{0, 0, 0};
  std::vector<double> weights;  // T_i * alpha_i per sample
  double residual = 1.0;        // transmittance after the last sample
};

/// Alpha compositing sum_i T_i a_i c_i (+ T_last c_sky) with
/// a_i = 1 - exp(-sigma_i len_i) and T_i = prod_{j<i} (1 - a_j). Shadow
/// coefficients scale each sample's shadeless color by rho_static * prod rho_n.
inline RayResult render_ray(const Ray& ray) {
  RayResult out;
  out.weights.reserve(ray.samples.size());
  double transmittance = 1.0;
  for (const auto& s : ray.samples) {
    if (!(s.length > 0)) throw PreconditionError("render_ray: segment length must be positive");
    if (!s.rho.empty() && s.rho.size() != s.sigmas.size()) {
      throw ShapeError("render_ray: one shadow factor per source expected");
    }
    const auto point = composite_slots(s.sigmas, s.colors, s.static_part);
    Color c = point.color;
    if (s.rho_static || !s.rho.empty()) {
      double shade = s.rho_static.value_or(1.0);
      for (double r : s.rho) shade *= r;
      for (auto& v : c) v *= shade;
    }
    const double alpha = 1.0 - std::exp(-point.sigma * s.length);
    const double w = transmittance * alpha;
    for (int k = 0; k < 3; ++k) out.color[k] += w * c[k];
    out.weights.push_back(w);
    transmittance *= 1.0 - alpha;
  }
  out.residual = transmittance;
  if (ray.sky) {
    for (int k = 0; k < 3; ++k) out.color[k] += transmittance * (*ray.sky)[k];
  }
  return out;
}

}  // namespace psb
