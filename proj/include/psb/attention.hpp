// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "psb/errors.hpp"
#include "psb/ops.hpp"
#include "psb/parallel.hpp"
#include "psb/tape.hpp"
#include "psb/tensor.hpp"

namespace psb {

/// Dense boolean visibility matrix; (q, k) true means query q may see key k.
class Mask {
 public:
  Mask() = default;
  Mask(std::size_t rows, std::size_t cols, bool value = true)
      : rows_(rows), cols_(cols), cells_(rows * cols, value ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool operator()(std::size_t q, std::size_t k) const { return cells_[q * cols_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool v) { cells_[q * cols_ + k] = v ? 1 : 0; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), 1));
  }

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> cells_;
};

/// alpha[tq][tk] = 1 iff tk <= tq.
inline Mask causal_mask(std::size_t steps) {
  Mask m(steps, steps, false);
  for (std::size_t q = 0; q < steps; ++q) {
    for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
  }
  return m;
}

/// Block-broadcast of a time mask to per-(t, row) x per-(t', col) tokens:
/// entry ((t,i),(t',j)) = alpha[t][t'].
inline Mask expand_time_mask(const Mask& alpha, std::size_t rows_per_t,
                             std::size_t cols_per_t) {
  Mask out(alpha.rows() * rows_per_t, alpha.cols() * cols_per_t, false);
  for (std::size_t q = 0; q < out.rows(); ++q) {
    for (std::size_t k = 0; k < out.cols(); ++k) {
      out.set(q, k, alpha(q / rows_per_t, k / cols_per_t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Relative positional bias

/// Index of offset (tq - tk) in a table of 2*horizon-1 buckets; offsets
/// beyond +-(horizon-1) share the edge bucket.
inline std::size_t rel_bucket(long long tq, long long tk, std::size_t horizon) {
  const long long lim = static_cast<long long>(horizon) - 1;
  const long long off = std::clamp(tq - tk, -lim, lim);
  return static_cast<std::size_t>(off + lim);
}

/// Per-head bias table [h, 2*horizon-1] gathered into [h, Tq, Tk]. Only the
/// difference of positions is used.
template <class Real>
Tensor<Real> rel_bias_lookup(const Tensor<Real>& table, std::size_t tq_count,
                             std::size_t tk_count, long long q_start = 0,
                             long long k_start = 0) {
  const std::size_t heads = table.dim(0);
  const std::size_t horizon = (table.dim(1) + 1) / 2;
  Tensor<Real> out({heads, tq_count, tk_count});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t q = 0; q < tq_count; ++q) {
      for (std::size_t k = 0; k < tk_count; ++k) {
        const auto b = rel_bucket(q_start + static_cast<long long>(q),
                                  k_start + static_cast<long long>(k), horizon);
        out[(h * tq_count + q) * tk_count + k] = table[h * table.dim(1) + b];
      }
    }
  }
  return out;
}

template <class Real>
Var<Real> rel_bias_lookup(Var<Real> table, std::size_t tq_count, std::size_t tk_count,
                          long long q_start = 0, long long k_start = 0) {
  if (table.value().rank() != 2 || table.dim(1) % 2 == 0) {
    throw ShapeError("rel_bias_lookup: table must be [h, 2*T_max-1]");
  }
  return table.tape->record(
      "rel_bias_lookup", rel_bias_lookup(table.value(), tq_count, tk_count, q_start, k_start),
      {table},
      [ti = table.id, tq_count, tk_count, q_start, k_start](Tape<Real>& t, std::size_t self) {
        auto* dt = t.grad_sink(ti);
        if (!dt) return;
        const auto& g = t.grad(self);
        const std::size_t heads = dt->dim(0), width = dt->dim(1);
        const std::size_t horizon = (width + 1) / 2;
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t q = 0; q < tq_count; ++q) {
            for (std::size_t k = 0; k < tk_count; ++k) {
              const auto b = rel_bucket(q_start + static_cast<long long>(q),
                                        k_start + static_cast<long long>(k), horizon);
              (*dt)[h * width + b] += g[(h * tq_count + q) * tk_count + k];
            }
          }
        }
      });
}

/// [h, Tq, Tk] -> [h, Tq*rq, Tk*rk] with each entry repeated over its block.
template <class Real>
Var<Real> expand_blocks(Var<Real> x, std::size_t rq, std::size_t rk) {
  const std::size_t h = x.dim(0), tq = x.dim(1), tk = x.dim(2);
  const std::size_t nq = tq * rq, nk = tk * rk;
  Tensor<Real> out({h, nq, nk});
  const auto& xv = x.value();
  for (std::size_t hh = 0; hh < h; ++hh) {
    for (std::size_t q = 0; q < nq; ++q) {
      for (std::size_t k = 0; k < nk; ++k) {
        out[(hh * nq + q) * nk + k] = xv[(hh * tq + q / rq) * tk + k / rk];
      }
    }
  }
  return x.tape->record("expand_blocks", std::move(out), {x},
                        [xi = x.id, h, tq, tk, rq, rk, nq, nk](Tape<Real>& t,
                                                               std::size_t self) {
                          auto* dx = t.grad_sink(xi);
                          if (!dx) return;
                          const auto& g = t.grad(self);
                          for (std::size_t hh = 0; hh < h; ++hh) {
                            for (std::size_t q = 0; q < nq; ++q) {
                              for (std::size_t k = 0; k < nk; ++k) {
                                (*dx)[(hh * tq + q / rq) * tk + k / rk] +=
                                    g[(hh * nq + q) * nk + k];
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Attention kernels

enum class AttentionKind {
  dot,       // softmax over keys per query
  inverted,  // softmax over (queries x heads) per key, then renormalize per query
};

/// Starved-slot threshold on the renormalization denominator.
inline constexpr double kStarvedSlotMass = 1e-30;

namespace detail {

struct AttentionDims {
  std::size_t batch = 1, heads = 1, nq = 0, nk = 0, d = 0, dv = 0;
  std::size_t group = 0;  // queries per competition group (inverted only)
};

/// Saved forward state of one attention call.
template <class Real>
struct AttentionState {
  AttentionDims dims;
  AttentionKind kind = AttentionKind::dot;
  std::shared_ptr<const Mask> mask;
  std::vector<Real> weights;     // final weights A [B,h,Nq,Nk]
  std::vector<Real> pre;         // inverted: column-softmax weights before renormalization
  std::vector<Real> row_mass;    // inverted: renormalization denominators [B,h,Nq]
  std::vector<std::size_t> lo, hi;  // per-query visible key range
};

inline AttentionDims attention_dims(const Shape& q, const Shape& k, const Shape& v) {
  if (q.size() != 4 || k.size() != 4 || v.size() != 4) {
    throw ShapeError("attention: expected [B,h,N,d] operands");
  }
  if (q[0] != k[0] || q[1] != k[1] || q[3] != k[3] || v[0] != k[0] || v[1] != k[1] ||
      v[2] != k[2]) {
    throw ShapeError("attention: q " + to_string(q) + " k " + to_string(k) + " v " +
                     to_string(v));
  }
  return {q[0], q[1], q[2], k[2], q[3], v[3], 0};
}

template <class Real>
void visible_ranges(const Mask* mask, std::size_t nq, std::size_t nk,
                    AttentionState<Real>& st) {
  st.lo.assign(nq, 0);
  st.hi.assign(nq, nk);
  if (!mask) return;
  for (std::size_t q = 0; q < nq; ++q) {
    std::size_t lo = nk, hi = 0;
    for (std::size_t k = 0; k < nk; ++k) {
      if ((*mask)(q, k)) {
        lo = std::min(lo, k);
        hi = k + 1;
      }
    }
    st.lo[q] = lo < hi ? lo : 0;
    st.hi[q] = lo < hi ? hi : 0;
  }
}

/// Forward pass. Writes the output [B,h,Nq,dv] and fills `st`.
template <class Real>
Tensor<Real> attention_forward(const Tensor<Real>& q, const Tensor<Real>& k,
                               const Tensor<Real>& v, const Tensor<Real>* bias,
                               AttentionState<Real>& st) {
  const auto& dm = st.dims;
  const std::size_t B = dm.batch, H = dm.heads, NQ = dm.nq, NK = dm.nk, D = dm.d;
  const Mask* mask = st.mask.get();
  if (mask && (mask->rows() != NQ || mask->cols() != NK)) {
    throw ShapeError("attention: mask is " + std::to_string(mask->rows()) + "x" +
                     std::to_string(mask->cols()));
  }
  if (bias && bias->shape() != Shape{H, NQ, NK}) {
    throw ShapeError("attention: bias must be [h,Nq,Nk], got " + to_string(bias->shape()));
  }
  visible_ranges(mask, NQ, NK, st);
  const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(D));
  const Real neg_inf = -std::numeric_limits<Real>::infinity();
  const std::size_t plane = NQ * NK;
  std::vector<Real> logits(B * H * plane, neg_inf);

  // Logits q.k^T / sqrt(d) + bias, visible cells only.
  parallel_for(
      B * H,
      [&](std::size_t bh) {
        const std::size_t h = bh % H;
        const Real* kb = k.data().data() + bh * NK * D;
        std::vector<Real> kt(D * NK);
        kernels::transpose(NK, D, kb, kt.data());
        std::vector<Real> row(NK);
        for (std::size_t i = 0; i < NQ; ++i) {
          const std::size_t lo = st.lo[i], hi = st.hi[i];
          if (lo >= hi) continue;
          const Real* qi = q.data().data() + (bh * NQ + i) * D;
          std::fill(row.begin() + lo, row.begin() + hi, Real(0));
          for (std::size_t p = 0; p < D; ++p) {
            const Real qp = qi[p];
            const Real* kp = kt.data() + p * NK;
            for (std::size_t j = lo; j < hi; ++j) row[j] += qp * kp[j];
          }
          Real* out = logits.data() + bh * plane + i * NK;
          for (std::size_t j = lo; j < hi; ++j) {
            if (mask && !(*mask)(i, j)) continue;
            Real s = row[j] * inv_sqrt_d;
            if (bias) s += (*bias)[(h * NQ + i) * NK + j];
            out[j] = s;
          }
        }
      },
      NQ * NK * D);

  st.weights.assign(B * H * plane, Real(0));
  if (st.kind == AttentionKind::dot) {
    parallel_for(
        B * H * NQ,
        [&](std::size_t r) {
          const Real* s = logits.data() + r * NK;
          Real* a = st.weights.data() + r * NK;
          const std::size_t i = r % NQ;
          Real mx = neg_inf;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) mx = std::max(mx, s[j]);
          if (mx == neg_inf) throw NumericError("dot_attention: fully masked query row");
          Real sum = 0;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) {
            if (s[j] == neg_inf) continue;
            a[j] = std::exp(s[j] - mx);
            sum += a[j];
          }
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) a[j] /= sum;
        },
        NK);
  } else {
    const std::size_t G = dm.group == 0 ? NQ : dm.group;
    if (NQ % G != 0) throw ShapeError("inverted_attention: queries not divisible by group");
    const std::size_t groups = NQ / G;
    st.pre.assign(B * H * plane, Real(0));
    // Softmax over (heads x queries of one group) for every key column. A
    // column with no visible query in the group carries no mass.
    parallel_for(
        B * groups * NK,
        [&](std::size_t c) {
          const std::size_t j = c % NK;
          const std::size_t g = (c / NK) % groups;
          const std::size_t b = c / (NK * groups);
          Real mx = neg_inf;
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = g * G; i < (g + 1) * G; ++i) {
              mx = std::max(mx, logits[((b * H + h) * NQ + i) * NK + j]);
            }
          }
          if (mx == neg_inf) return;
          Real sum = 0;
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = g * G; i < (g + 1) * G; ++i) {
              const std::size_t cell = ((b * H + h) * NQ + i) * NK + j;
              if (logits[cell] == neg_inf) continue;
              st.pre[cell] = std::exp(logits[cell] - mx);
              sum += st.pre[cell];
            }
          }
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = g * G; i < (g + 1) * G; ++i) {
              st.pre[((b * H + h) * NQ + i) * NK + j] /= sum;
            }
          }
        },
        H * G);
    st.row_mass.assign(B * H * NQ, Real(0));
    parallel_for(
        B * H * NQ,
        [&](std::size_t r) {
          const std::size_t i = r % NQ;
          const Real* p = st.pre.data() + r * NK;
          Real mass = 0;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) mass += p[j];
          if (!(mass >= Real(kStarvedSlotMass))) {
            throw NumericError("inverted_attention: starved query row " + std::to_string(i) +
                               " (renormalization mass below 1e-30)");
          }
          st.row_mass[r] = mass;
          Real* a = st.weights.data() + r * NK;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) a[j] = p[j] / mass;
        },
        NK);
  }

  const std::size_t DV = dm.dv;
  Tensor<Real> out({B, H, NQ, DV});
  parallel_for(
      B * H * NQ,
      [&](std::size_t r) {
        const std::size_t i = r % NQ;
        const std::size_t bh = r / NQ;
        const Real* a = st.weights.data() + r * NK;
        Real* o = out.data().data() + r * DV;
        for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) {
          const Real w = a[j];
          if (w == Real(0)) continue;
          const Real* vj = v.data().data() + (bh * NK + j) * DV;
          for (std::size_t p = 0; p < DV; ++p) o[p] += w * vj[p];
        }
      },
      NK * DV);
  return out;
}

/// Reverse pass; any of dq/dk/dv/dbias may be null.
template <class Real>
void attention_backward(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                        const Tensor<Real>& dout, const AttentionState<Real>& st,
                        Tensor<Real>* dq, Tensor<Real>* dk, Tensor<Real>* dv,
                        Tensor<Real>* dbias) {
  const auto& dm = st.dims;
  const std::size_t B = dm.batch, H = dm.heads, NQ = dm.nq, NK = dm.nk, D = dm.d;
  const std::size_t DV = dm.dv;
  const std::size_t plane = NQ * NK;
  const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(D));

  // dA = dO V^T on visible cells.
  std::vector<Real> da(B * H * plane, Real(0));
  parallel_for(
      B * H,
      [&](std::size_t bh) {
        std::vector<Real> vt(DV * NK);
        kernels::transpose(NK, DV, v.data().data() + bh * NK * DV, vt.data());
        for (std::size_t i = 0; i < NQ; ++i) {
          const Real* go = dout.data().data() + (bh * NQ + i) * DV;
          Real* row = da.data() + bh * plane + i * NK;
          for (std::size_t p = 0; p < DV; ++p) {
            const Real g = go[p];
            const Real* vp = vt.data() + p * NK;
            for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) row[j] += g * vp[j];
          }
        }
      },
      NQ * NK * DV);

  if (dv) {
    parallel_for(
        B * H * NK,
        [&](std::size_t r) {
          const std::size_t j = r % NK;
          const std::size_t bh = r / NK;
          Real* dvj = dv->data().data() + r * DV;
          for (std::size_t i = 0; i < NQ; ++i) {
            const Real w = st.weights[bh * plane + i * NK + j];
            if (w == Real(0)) continue;
            const Real* go = dout.data().data() + (bh * NQ + i) * DV;
            for (std::size_t p = 0; p < DV; ++p) dvj[p] += w * go[p];
          }
        },
        NQ * DV);
  }

  // dS: gradient w.r.t. the masked, biased logits.
  std::vector<Real> ds(B * H * plane, Real(0));
  if (st.kind == AttentionKind::dot) {
    parallel_for(
        B * H * NQ,
        [&](std::size_t r) {
          const std::size_t i = r % NQ;
          const Real* a = st.weights.data() + r * NK;
          const Real* g = da.data() + r * NK;
          Real s = 0;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) s += a[j] * g[j];
          Real* out = ds.data() + r * NK;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) out[j] = a[j] * (g[j] - s);
        },
        NK);
  } else {
    // Through the per-query renormalization A = P / r.
    std::vector<Real> dp(B * H * plane, Real(0));
    parallel_for(
        B * H * NQ,
        [&](std::size_t r) {
          const std::size_t i = r % NQ;
          const Real* a = st.weights.data() + r * NK;
          const Real* g = da.data() + r * NK;
          Real s = 0;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) s += a[j] * g[j];
          const Real inv = Real(1) / st.row_mass[r];
          Real* out = dp.data() + r * NK;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) out[j] = (g[j] - s) * inv;
        },
        NK);
    // Through the column softmax over (heads x group queries).
    const std::size_t G = dm.group == 0 ? NQ : dm.group;
    const std::size_t groups = NQ / G;
    parallel_for(
        B * groups * NK,
        [&](std::size_t c) {
          const std::size_t j = c % NK;
          const std::size_t g = (c / NK) % groups;
          const std::size_t b = c / (NK * groups);
          Real s = 0;
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = g * G; i < (g + 1) * G; ++i) {
              const std::size_t cell = ((b * H + h) * NQ + i) * NK + j;
              s += st.pre[cell] * dp[cell];
            }
          }
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = g * G; i < (g + 1) * G; ++i) {
              const std::size_t cell = ((b * H + h) * NQ + i) * NK + j;
              ds[cell] = st.pre[cell] * (dp[cell] - s);
            }
          }
        },
        H * G);
  }

  if (dbias) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < H; ++h) {
        const Real* src = ds.data() + (b * H + h) * plane;
        Real* dst = dbias->data().data() + h * plane;
        for (std::size_t c = 0; c < plane; ++c) dst[c] += src[c];
      }
    }
  }
  if (dq) {
    parallel_for(
        B * H * NQ,
        [&](std::size_t r) {
          const std::size_t i = r % NQ;
          const std::size_t bh = r / NQ;
          const Real* g = ds.data() + r * NK;
          Real* out = dq->data().data() + r * D;
          for (std::size_t j = st.lo[i]; j < st.hi[i]; ++j) {
            const Real w = g[j] * inv_sqrt_d;
            if (w == Real(0)) continue;
            const Real* kj = k.data().data() + (bh * NK + j) * D;
            for (std::size_t p = 0; p < D; ++p) out[p] += w * kj[p];
          }
        },
        NK * D);
  }
  if (dk) {
    parallel_for(
        B * H * NK,
        [&](std::size_t r) {
          const std::size_t j = r % NK;
          const std::size_t bh = r / NK;
          Real* out = dk->data().data() + r * D;
          for (std::size_t i = 0; i < NQ; ++i) {
            const Real w = ds[bh * plane + i * NK + j] * inv_sqrt_d;
            if (w == Real(0)) continue;
            const Real* qi = q.data().data() + (bh * NQ + i) * D;
            for (std::size_t p = 0; p < D; ++p) out[p] += w * qi[p];
          }
        },
        NQ * D);
  }
}

}  // namespace detail

/// Attention weights of one call, for inspection and invariant checks.
template <class Real>
struct AttentionWeights {
  Tensor<Real> weights;         // [B,h,Nq,Nk] final (row-normalized) weights
  std::optional<Tensor<Real>> pre_renorm;  // inverted only: column-softmax weights
};

/// Differentiable attention over [B,h,N,d] operands. `mask` is shared across
/// batch and heads, `bias` ([h,Nq,Nk]) across batch. For the inverted kind,
/// `group` is the number of consecutive queries that compete for each key
/// (0 means all queries form one group).
template <class Real>
Var<Real> attention(Var<Real> q, Var<Real> k, Var<Real> v, AttentionKind kind,
                    std::shared_ptr<const Mask> mask = nullptr,
                    std::optional<std::type_identity_t<Var<Real>>> bias = std::nullopt,
                    std::size_t group = 0,
                    std::type_identity_t<AttentionWeights<Real>>* inspect = nullptr) {
  auto st = std::make_shared<detail::AttentionState<Real>>();
  st->dims = detail::attention_dims(q.shape(), k.shape(), v.shape());
  st->dims.group = group;
  st->kind = kind;
  st->mask = std::move(mask);
  Tensor<Real> out = detail::attention_forward(q.value(), k.value(), v.value(),
                                               bias ? &bias->value() : nullptr, *st);
  if (inspect) {
    const auto& dm = st->dims;
    const Shape ws{dm.batch, dm.heads, dm.nq, dm.nk};
    inspect->weights = Tensor<Real>(ws, st->weights);
    if (kind == AttentionKind::inverted) inspect->pre_renorm = Tensor<Real>(ws, st->pre);
  }
  std::vector<Var<Real>> inputs{q, k, v};
  if (bias) inputs.push_back(*bias);
  const std::optional<std::size_t> bias_id =
      bias ? std::optional<std::size_t>(bias->id) : std::nullopt;
  return q.tape->record(
      kind == AttentionKind::dot ? "dot_attention" : "inverted_attention", std::move(out),
      inputs, [qi = q.id, ki = k.id, vi = v.id, bias_id, st](Tape<Real>& t, std::size_t self) {
        detail::attention_backward(t.value(qi), t.value(ki), t.value(vi), t.grad(self), *st,
                                   t.grad_sink(qi), t.grad_sink(ki), t.grad_sink(vi),
                                   bias_id ? t.grad_sink(*bias_id) : nullptr);
      });
}

namespace detail {

template <class Real>
Tensor<Real> attention_value(const Tensor<Real>& q, const Tensor<Real>& k,
                             const Tensor<Real>& v, AttentionKind kind, const Mask* mask,
                             const std::type_identity_t<Tensor<Real>>* bias, std::size_t group,
                             std::type_identity_t<AttentionWeights<Real>>* inspect) {
  auto lift = [](const Tensor<Real>& x) {
    if (x.rank() != 3) throw ShapeError("attention: expected [h,N,d], got " + to_string(x.shape()));
    return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  };
  Tape<Real> tape;
  std::shared_ptr<const Mask> m = mask ? std::make_shared<Mask>(*mask) : nullptr;
  std::optional<Var<Real>> b;
  if (bias) b = tape.constant(*bias);
  auto out = attention(tape.constant(lift(q)), tape.constant(lift(k)), tape.constant(lift(v)),
                       kind, m, b, group, inspect);
  return out.value().reshaped({q.dim(0), q.dim(1), v.dim(2)});
}

}  // namespace detail

/// Standard multi-head dot-product attention on [h,N,d] operands.
template <class Real>
Tensor<Real> dot_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                           const Tensor<Real>& v, const Mask* mask = nullptr,
                           const std::type_identity_t<Tensor<Real>>* bias = nullptr,
                           std::type_identity_t<AttentionWeights<Real>>* inspect = nullptr) {
  return detail::attention_value(q, k, v, AttentionKind::dot, mask, bias, 0, inspect);
}

/// Inverted attention on [h,N,d] operands: softmax over queries and heads
/// jointly for each key, then renormalization across keys per query. Returns
/// the per-head readout A V (the output projection lives in the module).
template <class Real>
Tensor<Real> inverted_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                const Tensor<Real>& v, const Mask* mask = nullptr,
                                const std::type_identity_t<Tensor<Real>>* bias = nullptr,
                                std::size_t group = 0,
                                std::type_identity_t<AttentionWeights<Real>>* inspect = nullptr) {
  return detail::attention_value(q, k, v, AttentionKind::inverted, mask, bias, group, inspect);
}

}  // namespace psb
