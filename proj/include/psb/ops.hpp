// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include "psb/errors.hpp"
#include "psb/kernels.hpp"
#include "psb/parallel.hpp"
#include "psb/tape.hpp"
#include "psb/tensor.hpp"

// Differentiable tensor operations. Each op computes its forward value
// eagerly and records a backward closure on the tape of its inputs.

namespace psb {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

template <class Real>
void require_same_shape(const Var<Real>& a, const Var<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + to_string(a.shape()) +
                     " vs " + to_string(b.shape()));
  }
}

template <class Real>
void accumulate(Tensor<Real>* dst, const Tensor<Real>& src, Real scale = Real(1)) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += scale * src[i];
}

/// Splits `shape` around `axis` into (outer, extent, inner).
inline void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer,
                       std::size_t& extent, std::size_t& inner) {
  if (axis >= shape.size()) throw ShapeError("axis out of range");
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  detail::require_same_shape(a, b, "add");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape->record("add", std::move(out), {a, b},
                        [ai = a.id, bi = b.id](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.grad(self);
                          detail::accumulate(t.grad_sink(ai), g);
                          detail::accumulate(t.grad_sink(bi), g);
                        });
}

template <class Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->record("sub", std::move(out), {a, b},
                        [ai = a.id, bi = b.id](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.grad(self);
                          detail::accumulate(t.grad_sink(ai), g);
                          detail::accumulate(t.grad_sink(bi), g, Real(-1));
                        });
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record(
      "mul", std::move(out), {a, b},
      [ai = a.id, bi = b.id](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (auto* da = t.grad_sink(ai)) {
          const auto& bv = t.value(bi);
          for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
        }
        if (auto* db = t.grad_sink(bi)) {
          const auto& av = t.value(ai);
          for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
        }
      });
}

template <class Real>
Var<Real> scale(Var<Real> a, Real c) {
  Tensor<Real> out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.tape->record("scale", std::move(out), {a},
                        [ai = a.id, c](Tape<Real>& t, std::size_t self) {
                          detail::accumulate(t.grad_sink(ai), t.grad(self), c);
                        });
}

/// x[..., n] + b[n], broadcast over leading axes.
template <class Real>
Var<Real> add_bias(Var<Real> x, Var<Real> b) {
  const std::size_t n = b.size();
  if (b.value().rank() != 1 || x.shape().back() != n) {
    throw ShapeError("add_bias: " + to_string(x.shape()) + " + " + to_string(b.shape()));
  }
  Tensor<Real> out = x.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return x.tape->record("add_bias", std::move(out), {x, b},
                        [xi = x.id, bi = b.id, n](Tape<Real>& t, std::size_t self) {
                          const auto& g = t.grad(self);
                          detail::accumulate(t.grad_sink(xi), g);
                          if (auto* db = t.grad_sink(bi)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i % n] += g[i];
                          }
                        });
}

namespace detail {

template <class Real, class F, class DF>
Var<Real> unary(const char* name, Var<Real> x, F f, DF df) {
  Tensor<Real> out = x.value();
  for (auto& v : out.data()) v = f(v);
  return x.tape->record(name, std::move(out), {x},
                        [xi = x.id, df](Tape<Real>& t, std::size_t self) {
                          if (auto* dx = t.grad_sink(xi)) {
                            const auto& g = t.grad(self);
                            const auto& xv = t.value(xi);
                            const auto& yv = t.value(self);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*dx)[i] += g[i] * df(xv[i], yv[i]);
                            }
                          }
                        });
}

}  // namespace detail

template <class Real>
Real gelu_value(Real x) {
  return Real(0.5) * x * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
}

template <class Real>
Real gelu_derivative(Real x) {
  const Real cdf = Real(0.5) * (Real(1) + std::erf(x / std::numbers::sqrt2_v<Real>));
  const Real pdf = std::exp(Real(-0.5) * x * x) /
                   std::sqrt(Real(2) * std::numbers::pi_v<Real>);
  return cdf + x * pdf;
}

/// Exact Gaussian-CDF GELU, x * Phi(x).
template <class Real>
Var<Real> gelu(Var<Real> x) {
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Arr>;
  using CMap = Eigen::Map<const Arr>;
  const auto n = static_cast<Eigen::Index>(x.size());
  const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  Tensor<Real> out(x.shape());
  const CMap xv(x.value().data().data(), n);
  Map(out.data().data(), n) = Real(0.5) * xv * (Real(1) + (xv * inv_sqrt2).erf());
  return x.tape->record("gelu", std::move(out), {x},
                        [xi = x.id, n, inv_sqrt2](Tape<Real>& t, std::size_t self) {
                          auto* dx = t.grad_sink(xi);
                          if (!dx) return;
                          const Real inv_sqrt_2pi = inv_sqrt2 / std::sqrt(std::numbers::pi_v<Real>);
                          const CMap a(t.value(xi).data().data(), n);
                          const CMap g(t.grad(self).data().data(), n);
                          Map(dx->data().data(), n) +=
                              g * (Real(0.5) * (Real(1) + (a * inv_sqrt2).erf()) +
                                   a * (Real(-0.5) * a.square()).exp() * inv_sqrt_2pi);
                        });
}

template <class Real>
Var<Real> sigmoid(Var<Real> x) {
  return detail::unary<Real>(
      "sigmoid", x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Var<Real> tanh(Var<Real> x) {
  return detail::unary<Real>(
      "tanh", x, [](Real v) { return std::tanh(v); },
      [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
Var<Real> exp(Var<Real> x) {
  return detail::unary<Real>(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class Real>
Var<Real> sum(Var<Real> x) {
  Real s = 0;
  for (auto v : x.value().data()) s += v;
  return x.tape->record("sum", Tensor<Real>({1}, {s}), {x},
                        [xi = x.id](Tape<Real>& t, std::size_t self) {
                          if (auto* dx = t.grad_sink(xi)) {
                            const Real g = t.grad(self)[0];
                            for (auto& v : dx->data()) v += g;
                          }
                        });
}

template <class Real>
Var<Real> mean(Var<Real> x) {
  return scale(sum(x), Real(1) / static_cast<Real>(x.size()));
}

/// Mean squared error against a constant target of identical shape.
template <class Real>
Var<Real> mse(Var<Real> pred, const Tensor<Real>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  const auto& p = pred.value();
  Real s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Real d = p[i] - target[i];
    s += d * d;
  }
  const Real inv = Real(1) / static_cast<Real>(p.size());
  auto saved = std::make_shared<Tensor<Real>>(target);
  return pred.tape->record("mse", Tensor<Real>({1}, {s * inv}), {pred},
                           [pi = pred.id, saved, inv](Tape<Real>& t, std::size_t self) {
                             if (auto* dp = t.grad_sink(pi)) {
                               const Real g = t.grad(self)[0] * Real(2) * inv;
                               const auto& pv = t.value(pi);
                               for (std::size_t i = 0; i < pv.size(); ++i) {
                                 (*dp)[i] += g * (pv[i] - (*saved)[i]);
                               }
                             }
                           });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class Real>
Var<Real> reshape(Var<Real> x, Shape shape) {
  Tensor<Real> out = x.value().reshaped(std::move(shape));
  return x.tape->record("reshape", std::move(out), {x},
                        [xi = x.id](Tape<Real>& t, std::size_t self) {
                          detail::accumulate(t.grad_sink(xi), t.grad(self));
                        });
}

/// Rows [start, start+len) along axis 0.
template <class Real>
Var<Real> slice0(Var<Real> x, std::size_t start, std::size_t len) {
  const auto& shape = x.shape();
  if (start + len > shape.at(0) || len == 0) throw ShapeError("slice0: out of range");
  const std::size_t row = x.size() / shape[0];
  Shape out_shape = shape;
  out_shape[0] = len;
  std::vector<Real> data(x.value().data().begin() + start * row,
                         x.value().data().begin() + (start + len) * row);
  return x.tape->record("slice0", Tensor<Real>(out_shape, std::move(data)), {x},
                        [xi = x.id, start, row](Tape<Real>& t, std::size_t self) {
                          if (auto* dx = t.grad_sink(xi)) {
                            const auto& g = t.grad(self);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*dx)[start * row + i] += g[i];
                            }
                          }
                        });
}

/// Concatenation along axis 0; trailing extents must agree.
template <class Real>
Var<Real> concat0(const std::vector<Var<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat0: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<Real> data;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ShapeError("concat0: trailing shape mismatch");
    }
    rows += p.shape()[0];
    data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return parts[0].tape->record("concat0", Tensor<Real>(out_shape, std::move(data)), parts,
                               [ids](Tape<Real>& t, std::size_t self) {
                                 const auto& g = t.grad(self);
                                 std::size_t off = 0;
                                 for (auto id : ids) {
                                   const std::size_t n = t.value(id).size();
                                   if (auto* d = t.grad_sink(id)) {
                                     for (std::size_t i = 0; i < n; ++i) (*d)[i] += g[off + i];
                                   }
                                   off += n;
                                 }
                               });
}

/// Repeats x along a new leading axis: [..] -> [times, ..].
template <class Real>
Var<Real> repeat0(Var<Real> x, std::size_t times) {
  Shape out_shape{times};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  Tensor<Real> out(out_shape);
  const std::size_t n = x.size();
  for (std::size_t r = 0; r < times; ++r) {
    std::copy(x.value().data().begin(), x.value().data().end(), out.data().begin() + r * n);
  }
  return x.tape->record("repeat0", std::move(out), {x},
                        [xi = x.id, n, times](Tape<Real>& t, std::size_t self) {
                          if (auto* dx = t.grad_sink(xi)) {
                            const auto& g = t.grad(self);
                            for (std::size_t r = 0; r < times; ++r) {
                              for (std::size_t i = 0; i < n; ++i) (*dx)[i] += g[r * n + i];
                            }
                          }
                        });
}

/// Channels [start, start+len) of the last axis.
template <class Real>
Var<Real> narrow_last(Var<Real> x, std::size_t start, std::size_t len) {
  const std::size_t c = x.shape().back();
  if (start + len > c || len == 0) throw ShapeError("narrow_last: out of range");
  const std::size_t rows = x.size() / c;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor<Real> out(out_shape);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = xv[r * c + start + j];
  }
  return x.tape->record("narrow_last", std::move(out), {x},
                        [xi = x.id, c, start, len, rows](Tape<Real>& t, std::size_t self) {
                          if (auto* dx = t.grad_sink(xi)) {
                            const auto& g = t.grad(self);
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < len; ++j) {
                                (*dx)[r * c + start + j] += g[r * len + j];
                              }
                            }
                          }
                        });
}

/// out[a, b, k] = x[a, k] + y[b, k]; broadcasts a per-row term against a
/// per-column term without materializing either broadcast.
template <class Real>
Var<Real> outer_add(Var<Real> x, Var<Real> y) {
  if (x.value().rank() != 2 || y.value().rank() != 2 || x.dim(1) != y.dim(1)) {
    throw ShapeError("outer_add: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  }
  const std::size_t na = x.dim(0), nb = y.dim(0), k = x.dim(1);
  Tensor<Real> out({na, nb, k});
  const auto& xv = x.value();
  const auto& yv = y.value();
  for (std::size_t a = 0; a < na; ++a) {
    for (std::size_t b = 0; b < nb; ++b) {
      Real* o = out.data().data() + (a * nb + b) * k;
      for (std::size_t j = 0; j < k; ++j) o[j] = xv[a * k + j] + yv[b * k + j];
    }
  }
  return x.tape->record(
      "outer_add", std::move(out), {x, y},
      [xi = x.id, yi = y.id, na, nb, k](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (auto* dx = t.grad_sink(xi)) {
          for (std::size_t a = 0; a < na; ++a) {
            for (std::size_t b = 0; b < nb; ++b) {
              const Real* gp = g.data().data() + (a * nb + b) * k;
              for (std::size_t j = 0; j < k; ++j) (*dx)[a * k + j] += gp[j];
            }
          }
        }
        if (auto* dy = t.grad_sink(yi)) {
          for (std::size_t a = 0; a < na; ++a) {
            for (std::size_t b = 0; b < nb; ++b) {
              const Real* gp = g.data().data() + (a * nb + b) * k;
              for (std::size_t j = 0; j < k; ++j) (*dy)[b * k + j] += gp[j];
            }
          }
        }
      });
}

namespace detail {

template <class Real>
Tensor<Real> permute_raw(const Tensor<Real>& x, const std::vector<std::size_t>& axes) {
  const auto& in = x.shape();
  const std::size_t r = in.size();
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in.at(axes[i]);
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  Tensor<Real> out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_stride[axes[i]];
    out[flat] = x[src];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace detail

/// Axis permutation: out.shape[i] = x.shape[axes[i]].
template <class Real>
Var<Real> permute(Var<Real> x, std::vector<std::size_t> axes) {
  if (axes.size() != x.shape().size()) throw ShapeError("permute: rank mismatch");
  std::vector<std::size_t> inverse(axes.size());
  std::vector<bool> seen(axes.size(), false);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= axes.size() || seen[axes[i]]) throw ShapeError("permute: bad axes");
    seen[axes[i]] = true;
    inverse[axes[i]] = i;
  }
  return x.tape->record("permute", detail::permute_raw(x.value(), axes), {x},
                        [xi = x.id, inverse](Tape<Real>& t, std::size_t self) {
                          if (auto* dx = t.grad_sink(xi)) {
                            detail::accumulate(dx, detail::permute_raw(t.grad(self), inverse));
                          }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

struct MatmulPlan {
  Shape batch;  // broadcast batch shape
  std::size_t m = 0, k = 0, n = 0;
  std::vector<std::size_t> a_batch, b_batch;  // per output batch -> operand batch
  std::size_t a_batches = 0, b_batches = 0;
};

inline MatmulPlan plan_matmul(const Shape& as, const Shape& bs) {
  if (as.size() < 2 || bs.size() < 2) throw ShapeError("matmul: rank < 2");
  MatmulPlan p;
  p.m = as[as.size() - 2];
  p.k = as.back();
  p.n = bs.back();
  if (bs[bs.size() - 2] != p.k) {
    throw ShapeError("matmul: inner extents " + to_string(as) + " x " + to_string(bs));
  }
  Shape ab(as.begin(), as.end() - 2), bb(bs.begin(), bs.end() - 2);
  const std::size_t rank = std::max(ab.size(), bb.size());
  Shape ap(rank - ab.size(), 1), bp(rank - bb.size(), 1);
  ap.insert(ap.end(), ab.begin(), ab.end());
  bp.insert(bp.end(), bb.begin(), bb.end());
  p.batch.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw ShapeError("matmul: batch dims not broadcastable " + to_string(as) + " x " +
                       to_string(bs));
    }
    p.batch[i] = std::max(ap[i], bp[i]);
  }
  p.a_batches = numel(ab);
  p.b_batches = numel(bb);
  const std::size_t total = numel(p.batch);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rem = flat, ai = 0, bi = 0, astride = 1, bstride = 1;
    for (std::size_t d = rank; d-- > 0;) {
      const std::size_t idx = rem % p.batch[d];
      rem /= p.batch[d];
      ai += (ap[d] == 1 ? 0 : idx) * astride;
      bi += (bp[d] == 1 ? 0 : idx) * bstride;
      astride *= ap[d];
      bstride *= bp[d];
    }
    p.a_batch.push_back(ai);
    p.b_batch.push_back(bi);
  }
  return p;
}

}  // namespace detail

/// Batched matrix product with numpy-style broadcasting of batch axes.
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  const auto plan = detail::plan_matmul(a.shape(), b.shape());
  Shape out_shape = plan.batch;
  out_shape.push_back(plan.m);
  out_shape.push_back(plan.n);
  Tensor<Real> out(out_shape);
  for (std::size_t bi = 0; bi < plan.a_batch.size(); ++bi) {
    kernels::gemm_acc(plan.m, plan.n, plan.k,
                      a.data().data() + plan.a_batch[bi] * plan.m * plan.k,
                      b.data().data() + plan.b_batch[bi] * plan.k * plan.n,
                      out.data().data() + bi * plan.m * plan.n);
  }
  return out;
}

template <class Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
  auto plan = std::make_shared<detail::MatmulPlan>(
      detail::plan_matmul(a.shape(), b.shape()));
  Tensor<Real> out = matmul(a.value(), b.value());
  return a.tape->record(
      "matmul", std::move(out), {a, b},
      [ai = a.id, bi = b.id, plan](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& p = *plan;
        const std::size_t mk = p.m * p.k, kn = p.k * p.n, mn = p.m * p.n;
        if (auto* da = t.grad_sink(ai)) {
          const auto& bv = t.value(bi);
          // dA = dC B^T, output batches folded onto their operand batch in order.
          for (std::size_t ab = 0; ab < p.a_batches; ++ab) {
            for (std::size_t ob = 0; ob < p.a_batch.size(); ++ob) {
              if (p.a_batch[ob] != ab) continue;
              kernels::gemm_acc_bt(p.m, p.k, p.n, g.data().data() + ob * mn,
                                   bv.data().data() + p.b_batch[ob] * kn, da->data().data() + ab * mk);
            }
          }
        }
        if (auto* db = t.grad_sink(bi)) {
          const auto& av = t.value(ai);
          for (std::size_t bb = 0; bb < p.b_batches; ++bb) {
            for (std::size_t ob = 0; ob < p.b_batch.size(); ++ob) {
              if (p.b_batch[ob] != bb) continue;
              kernels::gemm_acc_at(p.k, p.n, p.m, av.data().data() + p.a_batch[ob] * mk,
                                   g.data().data() + ob * mn, db->data().data() + bb * kn);
            }
          }
        }
      });
}

/// y = x W (+ b) over the last axis of x; W is [in, out].
template <class Real>
Var<Real> linear(Var<Real> x, Var<Real> w, std::optional<Var<Real>> b = std::nullopt) {
  if (w.value().rank() != 2 || x.shape().back() != w.dim(0)) {
    throw ShapeError("linear: " + to_string(x.shape()) + " x " + to_string(w.shape()));
  }
  const std::size_t in = w.dim(0), outd = w.dim(1), rows = x.size() / in;
  if (b && (b->value().rank() != 1 || b->size() != outd)) {
    throw ShapeError("linear: bias shape " + to_string(b->shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor<Real> out(out_shape);
  if (b) {
    const auto& bv = b->value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(bv.data().begin(), bv.data().end(), out.data().begin() + r * outd);
    }
  }
  kernels::gemm_acc(rows, outd, in, x.value().data().data(), w.value().data().data(),
                    out.data().data());
  std::vector<Var<Real>> inputs{x, w};
  if (b) inputs.push_back(*b);
  const std::optional<std::size_t> bias_id = b ? std::optional<std::size_t>(b->id) : std::nullopt;
  return x.tape->record(
      "linear", std::move(out), inputs,
      [xi = x.id, wi = w.id, bias_id, in, outd, rows](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (auto* dx = t.grad_sink(xi)) {
          kernels::gemm_acc_bt(rows, in, outd, g.data().data(), t.value(wi).data().data(),
                               dx->data().data());
        }
        if (auto* dw = t.grad_sink(wi)) {
          kernels::gemm_acc_at(in, outd, rows, t.value(xi).data().data(), g.data().data(),
                               dw->data().data());
        }
        if (bias_id) {
          if (auto* db = t.grad_sink(*bias_id)) {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < outd; ++j) (*db)[j] += g[r * outd + j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Numerically stable softmax along `axis`. An all -inf slice is an error
/// (it signals a fully masked row).
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::axis_split(x.shape(), axis, outer, extent, inner);
  Tensor<Real> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, x[base + e * inner]);
      if (mx == -std::numeric_limits<Real>::infinity()) {
        throw NumericError("softmax: fully masked slice");
      }
      Real s = 0;
      for (std::size_t e = 0; e < extent; ++e) {
        const Real v = std::exp(x[base + e * inner] - mx);
        out[base + e * inner] = v;
        s += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= s;
    }
  }
  return out;
}

template <class Real>
Var<Real> softmax(Var<Real> x, std::size_t axis) {
  std::size_t outer, extent, inner;
  detail::axis_split(x.shape(), axis, outer, extent, inner);
  return x.tape->record(
      "softmax", softmax(x.value(), axis), {x},
      [xi = x.id, outer, extent, inner](Tape<Real>& t, std::size_t self) {
        auto* dx = t.grad_sink(xi);
        if (!dx) return;
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * extent * inner + i;
            Real s = 0;
            for (std::size_t e = 0; e < extent; ++e) {
              s += g[base + e * inner] * y[base + e * inner];
            }
            for (std::size_t e = 0; e < extent; ++e) {
              const std::size_t k = base + e * inner;
              (*dx)[k] += y[k] * (g[k] - s);
            }
          }
        }
      });
}

/// Standardizes the last axis (population variance, eps 1e-5), then applies
/// gain and bias.
template <class Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> bias) {
  const std::size_t d = x.shape().back();
  if (d < 2) throw ShapeError("layer_norm: last axis must be >= 2");
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: affine shape");
  const std::size_t rows = x.size() / d;
  Tensor<Real> out(x.shape());
  auto xhat = std::make_shared<std::vector<Real>>(x.size());
  auto inv_std = std::make_shared<std::vector<Real>>(rows);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data().data() + r * d;
    Real mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<Real>(d);
    const Real is = Real(1) / std::sqrt(var + Real(kLayerNormEps));
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (xr[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [xi = x.id, gi = gain.id, bi = bias.id, d, rows, xhat, inv_std](Tape<Real>& t,
                                                                       std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(gi);
        if (auto* dg = t.grad_sink(gi)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) (*dg)[j] += g[r * d + j] * (*xhat)[r * d + j];
          }
        }
        if (auto* db = t.grad_sink(bi)) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) (*db)[j] += g[r * d + j];
          }
        }
        if (auto* dx = t.grad_sink(xi)) {
          const Real invd = Real(1) / static_cast<Real>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            Real m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const Real dh = g[r * d + j] * gv[j];
              m1 += dh;
              m2 += dh * (*xhat)[r * d + j];
            }
            m1 *= invd;
            m2 *= invd;
            for (std::size_t j = 0; j < d; ++j) {
              const Real dh = g[r * d + j] * gv[j];
              (*dx)[r * d + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
            }
          }
        }
      });
}

/// sum_n w[.., n, p] * x[.., n, p, c] -> [.., p, c]. Mixes per-slot images
/// with per-slot weights.
template <class Real>
Var<Real> weighted_sum_slots(Var<Real> x, Var<Real> w) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 3 || xs[0] != ws[0] || xs[1] != ws[1] || xs[2] != ws[2]) {
    throw ShapeError("weighted_sum_slots: " + to_string(xs) + " with " + to_string(ws));
  }
  const std::size_t b = xs[0], n = xs[1], p = xs[2], c = xs[3];
  Tensor<Real> out({b, p, c});
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ni = 0; ni < n; ++ni) {
      for (std::size_t pi = 0; pi < p; ++pi) {
        const Real wt = wv[(bi * n + ni) * p + pi];
        for (std::size_t ci = 0; ci < c; ++ci) {
          out[(bi * p + pi) * c + ci] += wt * xv[((bi * n + ni) * p + pi) * c + ci];
        }
      }
    }
  }
  return x.tape->record(
      "weighted_sum_slots", std::move(out), {x, w},
      [xi = x.id, wi = w.id, b, n, p, c](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& xv = t.value(xi);
        const auto& wv = t.value(wi);
        auto* dx = t.grad_sink(xi);
        auto* dw = t.grad_sink(wi);
        for (std::size_t bi = 0; bi < b; ++bi) {
          for (std::size_t ni = 0; ni < n; ++ni) {
            for (std::size_t pi = 0; pi < p; ++pi) {
              const std::size_t wk = (bi * n + ni) * p + pi;
              Real acc = 0;
              for (std::size_t ci = 0; ci < c; ++ci) {
                const Real gv = g[(bi * p + pi) * c + ci];
                if (dx) (*dx)[wk * c + ci] += wv[wk] * gv;
                acc += gv * xv[wk * c + ci];
              }
              if (dw) (*dw)[wk] += acc;
            }
          }
        }
      });
}

}  // namespace psb
