// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "psb/attention.hpp"
#include "support.hpp"

using psb::AttentionKind;
using psb::Mask;
using psb::Shape;
using psb::Tape;
using psb::Tensor;
using psb::Var;
using Catch::Approx;

namespace {

std::size_t draw(psb::Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Plain loop reference. Returns the readout and writes the final weights.
Tensor<double> reference(const Tensor<double>& q, const Tensor<double>& k,
                         const Tensor<double>& v, AttentionKind kind, const Mask* mask,
                         const Tensor<double>* bias, std::size_t group,
                         Tensor<double>* weights_out = nullptr,
                         Tensor<double>* pre_out = nullptr) {
  const std::size_t h = q.dim(0), nq = q.dim(1), nk = k.dim(1), d = q.dim(2), dv = v.dim(2);
  const double ninf = -std::numeric_limits<double>::infinity();
  Tensor<double> logit({h, nq, nk});
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t j = 0; j < nk; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += q.at({a, i, c}) * k.at({a, j, c});
        s /= std::sqrt(static_cast<double>(d));
        if (bias) s += bias->at({a, i, j});
        if (mask && !(*mask)(i, j)) s = ninf;
        logit[(a * nq + i) * nk + j] = s;
      }
    }
  }
  Tensor<double> w({h, nq, nk});
  Tensor<double> pre({h, nq, nk});
  if (kind == AttentionKind::dot) {
    for (std::size_t a = 0; a < h; ++a) {
      for (std::size_t i = 0; i < nq; ++i) {
        double m = ninf;
        for (std::size_t j = 0; j < nk; ++j) m = std::max(m, logit[(a * nq + i) * nk + j]);
        double z = 0;
        for (std::size_t j = 0; j < nk; ++j) z += std::exp(logit[(a * nq + i) * nk + j] - m);
        for (std::size_t j = 0; j < nk; ++j) {
          w[(a * nq + i) * nk + j] = std::exp(logit[(a * nq + i) * nk + j] - m) / z;
        }
      }
    }
  } else {
    const std::size_t g = group == 0 ? nq : group;
    for (std::size_t g0 = 0; g0 < nq; g0 += g) {
      for (std::size_t j = 0; j < nk; ++j) {
        double m = ninf;
        for (std::size_t a = 0; a < h; ++a) {
          for (std::size_t i = g0; i < g0 + g; ++i) m = std::max(m, logit[(a * nq + i) * nk + j]);
        }
        if (m == ninf) continue;
        double z = 0;
        for (std::size_t a = 0; a < h; ++a) {
          for (std::size_t i = g0; i < g0 + g; ++i) z += std::exp(logit[(a * nq + i) * nk + j] - m);
        }
        for (std::size_t a = 0; a < h; ++a) {
          for (std::size_t i = g0; i < g0 + g; ++i) {
            pre[(a * nq + i) * nk + j] = std::exp(logit[(a * nq + i) * nk + j] - m) / z;
          }
        }
      }
    }
    for (std::size_t a = 0; a < h; ++a) {
      for (std::size_t i = 0; i < nq; ++i) {
        double z = 0;
        for (std::size_t j = 0; j < nk; ++j) z += pre[(a * nq + i) * nk + j];
        for (std::size_t j = 0; j < nk; ++j) {
          w[(a * nq + i) * nk + j] = pre[(a * nq + i) * nk + j] / z;
        }
      }
    }
  }
  Tensor<double> out({h, nq, dv});
  for (std::size_t a = 0; a < h; ++a) {
    for (std::size_t i = 0; i < nq; ++i) {
      for (std::size_t c = 0; c < dv; ++c) {
        double s = 0;
        for (std::size_t j = 0; j < nk; ++j) s += w[(a * nq + i) * nk + j] * v.at({a, j, c});
        out[(a * nq + i) * dv + c] = s;
      }
    }
  }
  if (weights_out) *weights_out = w;
  if (pre_out) *pre_out = pre;
  return out;
}

Mask random_causal_blocks(psb::Rng& rng, std::size_t& nq, std::size_t& nk, std::size_t& group) {
  const std::size_t steps = draw(rng, 1, 3);
  group = draw(rng, 1, 2);
  const std::size_t per_k = draw(rng, 1, 2);
  nq = steps * group;
  nk = steps * per_k;
  return psb::expand_time_mask(psb::causal_mask(steps), group, per_k);
}

}  // namespace

TEST_CASE("masks and relative bias", "[attention][mask]") {
  auto alpha = psb::causal_mask(3);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t k = 0; k < 3; ++k) CHECK(alpha(q, k) == (k <= q));
  }
  CHECK(psb::expand_time_mask(psb::causal_mask(1), 2, 3) == Mask(2, 3, true));
  CHECK(psb::expand_time_mask(alpha, 1, 1) == alpha);

  auto e = psb::expand_time_mask(psb::causal_mask(2), 1, 2);
  REQUIRE(e.rows() == 2);
  REQUIRE(e.cols() == 4);
  const bool row0[] = {true, true, false, false};
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(e(0, k) == row0[k]);
    CHECK(e(1, k));
  }
}

TEST_CASE("relative bias depends only on offsets", "[attention][bias]") {
  psb::Rng rng(4);
  const std::size_t horizon = 6;
  auto table = psb::normal_tensor<double>({2, 2 * horizon - 1}, rng);
  CHECK(psb::rel_bias_lookup(Tensor<double>({2, 11}), 3, 3) == Tensor<double>({2, 3, 3}));

  auto b = psb::rel_bias_lookup(table, 3, 3);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t q = 1; q < 3; ++q) {
      for (std::size_t k = 1; k < 3; ++k) CHECK(b.at({h, q, k}) == b.at({h, q - 1, k - 1}));
    }
  }
  CHECK(psb::rel_bias_lookup(table, 6, 6, 0, 0) == psb::rel_bias_lookup(table, 6, 6, 7, 7));

  // Offsets beyond the horizon share the edge bucket.
  auto wide = psb::rel_bias_lookup(table, 20, 1);
  for (std::size_t q = horizon - 1; q < 20; ++q) CHECK(wide.at({0, q, 0}) == wide.at({0, horizon - 1, 0}));
}

TEST_CASE("dot attention examples", "[attention][dot]") {
  psb::Rng rng(8);
  auto q = psb::normal_tensor<double>({2, 3, 4}, rng);
  auto k1 = psb::normal_tensor<double>({2, 1, 4}, rng);
  auto v1 = psb::normal_tensor<double>({2, 1, 5}, rng);
  auto single = psb::dot_attention(q, k1, v1);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < 5; ++c) CHECK(single.at({h, i, c}) == Approx(v1.at({h, 0, c})).epsilon(1e-15));
    }
  }

  auto k = psb::normal_tensor<double>({2, 3, 4}, rng);
  auto v = psb::normal_tensor<double>({2, 3, 5}, rng);
  Mask diag(3, 3, false);
  for (std::size_t i = 0; i < 3; ++i) diag.set(i, i, true);
  auto picked = psb::dot_attention(q, k, v, &diag);
  CHECK(psb::max_abs_diff(picked, v) == 0.0);

  // d=1, q=1: logits are k itself. k = [0, ln 3] gives weights [1/4, 3/4].
  Tensor<double> qs({1, 1, 1}, {1.0});
  Tensor<double> ks({1, 2, 1}, {0.0, std::log(3.0)});
  Tensor<double> vs({1, 2, 1}, {4.0, 8.0});
  psb::AttentionWeights<double> w;
  auto out = psb::dot_attention(qs, ks, vs, nullptr, nullptr, &w);
  CHECK(w.weights[0] == Approx(0.25).epsilon(1e-14));
  CHECK(w.weights[1] == Approx(0.75).epsilon(1e-14));
  CHECK(out[0] == Approx(7.0).epsilon(1e-14));

  Mask blind(3, 3, true);
  for (std::size_t j = 0; j < 3; ++j) blind.set(1, j, false);
  CHECK_THROWS_AS(psb::dot_attention(q, k, v, &blind), psb::NumericError);
}

TEST_CASE("inverted attention examples", "[attention][inverted]") {
  psb::Rng rng(9);
  for (std::size_t nk = 1; nk <= 7; ++nk) {
    auto q = psb::normal_tensor<double>({1, 1, 3}, rng);
    auto k = psb::normal_tensor<double>({1, nk, 3}, rng);
    auto v = psb::normal_tensor<double>({1, nk, 2}, rng);
    auto out = psb::inverted_attention(q, k, v);
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0;
      for (std::size_t j = 0; j < nk; ++j) mean += v.at({0, j, c}) / static_cast<double>(nk);
      CHECK(out.at({0, 0, c}) == Approx(mean).epsilon(1e-13));
    }
  }

  // One query per competition group: every slot averages uniformly.
  auto q1 = psb::normal_tensor<double>({1, 4, 3}, rng);
  auto k1 = psb::normal_tensor<double>({1, 5, 3}, rng);
  auto v1 = psb::normal_tensor<double>({1, 5, 2}, rng);
  auto grouped = psb::inverted_attention(q1, k1, v1, nullptr, nullptr, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0;
      for (std::size_t j = 0; j < 5; ++j) mean += v1.at({0, j, c}) / 5.0;
      CHECK(grouped.at({0, i, c}) == Approx(mean).epsilon(1e-13));
    }
  }

  // Identical queries receive identical mixtures.
  Tensor<double> same({1, 3, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 3; ++c) same[i * 3 + c] = 0.3 * static_cast<double>(c) - 0.2;
  }
  auto sym = psb::inverted_attention(same, k1, v1);
  for (std::size_t i = 1; i < 3; ++i) {
    for (std::size_t c = 0; c < 2; ++c) CHECK(sym.at({0, i, c}) == sym.at({0, 0, c}));
  }

  // Hand-sized logits [[0,0],[0,ln 3]] with d=1 (q*k/1 = logit).
  Tensor<double> qq({1, 2, 1}, {1.0, 1.0});
  Tensor<double> kk({1, 2, 1}, {0.0, 0.0});
  Tensor<double> bias({1, 2, 2}, {0.0, 0.0, 0.0, std::log(3.0)});
  Tensor<double> vv({1, 2, 1}, {1.0, 2.0});
  psb::AttentionWeights<double> w;
  auto out = psb::inverted_attention(qq, kk, vv, nullptr, &bias, 0, &w);
  // Column 0: [1/2, 1/2]; column 1: [1/4, 3/4]. Row 0: [1/2, 1/4] -> [2/3, 1/3];
  // row 1: [1/2, 3/4] -> [2/5, 3/5].
  CHECK(w.pre_renorm->at({0, 0, 0, 1}) == Approx(0.25).epsilon(1e-14));
  CHECK(w.weights.at({0, 0, 0, 0}) == Approx(2.0 / 3).epsilon(1e-14));
  CHECK(w.weights.at({0, 0, 1, 1}) == Approx(0.6).epsilon(1e-14));
  CHECK(out[0] == Approx(4.0 / 3).epsilon(1e-14));
  CHECK(out[1] == Approx(1.6).epsilon(1e-14));
}

TEST_CASE("starved slots are reported", "[attention][inverted]") {
  // A query whose logits are far below its competitor's gets no mass at all.
  Tensor<double> q({1, 2, 1}, {1.0, 1.0});
  Tensor<double> k({1, 1, 1}, {0.0});
  Tensor<double> v({1, 1, 1}, {1.0});
  Tensor<double> bias({1, 2, 1}, {0.0, -1000.0});
  CHECK_THROWS_AS(psb::inverted_attention(q, k, v, nullptr, &bias), psb::NumericError);
}

TEST_CASE("attention equals the loop reference on random shapes", "[attention][oracle][property]") {
  psb::Rng rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t h = draw(rng, 1, 2), d = draw(rng, 1, 3), dv = draw(rng, 1, 3);
    std::size_t nq = draw(rng, 1, 5), nk = draw(rng, 1, 7), group = 0;
    std::optional<Mask> mask;
    if (trial % 3 == 1) mask = random_causal_blocks(rng, nq, nk, group);
    auto q = psb::normal_tensor<double>({h, nq, d}, rng);
    auto k = psb::normal_tensor<double>({h, nk, d}, rng);
    auto v = psb::normal_tensor<double>({h, nk, dv}, rng);
    auto bias = psb::normal_tensor<double>({h, nq, nk}, rng, 0.5);
    const Tensor<double>* b = trial % 2 ? &bias : nullptr;
    const Mask* m = mask ? &*mask : nullptr;
    INFO("trial " << trial);
    CHECK(psb::max_abs_diff(psb::dot_attention(q, k, v, m, b),
                            reference(q, k, v, AttentionKind::dot, m, b, 0)) <= 1e-12);
    CHECK(psb::max_abs_diff(psb::inverted_attention(q, k, v, m, b, group),
                            reference(q, k, v, AttentionKind::inverted, m, b, group)) <= 1e-12);
  }
}

TEST_CASE("attention rows are convex combinations of values", "[attention][property]") {
  psb::Rng rng(31);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = draw(rng, 1, 3), nq = draw(rng, 1, 6), nk = draw(rng, 1, 6);
    auto q = psb::normal_tensor<double>({h, nq, 2}, rng, 2.0);
    auto k = psb::normal_tensor<double>({h, nk, 2}, rng, 2.0);
    auto v = psb::normal_tensor<double>({h, nk, 3}, rng);
    for (auto kind : {AttentionKind::dot, AttentionKind::inverted}) {
      auto out = kind == AttentionKind::dot ? psb::dot_attention(q, k, v)
                                            : psb::inverted_attention(q, k, v);
      for (std::size_t a = 0; a < h; ++a) {
        for (std::size_t c = 0; c < 3; ++c) {
          double lo = v.at({a, 0, c}), hi = lo;
          for (std::size_t j = 1; j < nk; ++j) {
            lo = std::min(lo, v.at({a, j, c}));
            hi = std::max(hi, v.at({a, j, c}));
          }
          for (std::size_t i = 0; i < nq; ++i) {
            CHECK(out.at({a, i, c}) >= lo - 1e-12);
            CHECK(out.at({a, i, c}) <= hi + 1e-12);
          }
        }
      }
    }
  }
}

TEST_CASE("inverted attention normalization", "[attention][inverted][property]") {
  psb::Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = draw(rng, 1, 4), d = draw(rng, 1, 4);
    std::size_t nq = draw(rng, 1, 6), nk = draw(rng, 1, 8), group = 0;
    std::optional<Mask> mask;
    if (trial % 2) mask = random_causal_blocks(rng, nq, nk, group);
    auto q = psb::normal_tensor<double>({h, nq, d}, rng);
    auto k = psb::normal_tensor<double>({h, nk, d}, rng);
    auto v = psb::normal_tensor<double>({h, nk, 2}, rng);
    psb::AttentionWeights<double> w;
    psb::inverted_attention(q, k, v, mask ? &*mask : nullptr, nullptr, group, &w);
    const std::size_t g = group == 0 ? nq : group;
    for (std::size_t g0 = 0; g0 < nq; g0 += g) {
      for (std::size_t j = 0; j < nk; ++j) {
        if (mask && !(*mask)(g0, j)) continue;
        double col = 0;
        for (std::size_t a = 0; a < h; ++a) {
          for (std::size_t i = g0; i < g0 + g; ++i) col += w.pre_renorm->at({0, a, i, j});
        }
        CHECK(std::abs(col - 1.0) <= 1e-12);
      }
    }
    for (std::size_t a = 0; a < h; ++a) {
      for (std::size_t i = 0; i < nq; ++i) {
        double row = 0;
        for (std::size_t j = 0; j < nk; ++j) row += w.weights.at({0, a, i, j});
        CHECK(std::abs(row - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("causal mask hides future keys and values", "[attention][causal][property]") {
  psb::Rng rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t steps = draw(rng, 2, 4), per_q = draw(rng, 1, 3), per_k = draw(rng, 1, 3);
    const std::size_t nq = steps * per_q, nk = steps * per_k;
    auto mask = psb::expand_time_mask(psb::causal_mask(steps), per_q, per_k);
    auto q = psb::normal_tensor<double>({2, nq, 2}, rng);
    auto k = psb::normal_tensor<double>({2, nk, 2}, rng);
    auto v = psb::normal_tensor<double>({2, nk, 2}, rng);
    const std::size_t cut = draw(rng, 1, steps - 1);
    auto k2 = k, v2 = v;
    for (std::size_t a = 0; a < 2; ++a) {
      for (std::size_t j = cut * per_k; j < nk; ++j) {
        for (std::size_t c = 0; c < 2; ++c) {
          k2[(a * nk + j) * 2 + c] += 3.0;
          v2[(a * nk + j) * 2 + c] -= 5.0;
        }
      }
    }
    for (auto kind : {AttentionKind::dot, AttentionKind::inverted}) {
      const std::size_t group = kind == AttentionKind::inverted ? per_q : 0;
      auto before = psb::detail::attention_value<double>(q, k, v, kind, &mask, nullptr, group, nullptr);
      auto after = psb::detail::attention_value<double>(q, k2, v2, kind, &mask, nullptr, group, nullptr);
      for (std::size_t a = 0; a < 2; ++a) {
        for (std::size_t i = 0; i < cut * per_q; ++i) {
          for (std::size_t c = 0; c < 2; ++c) {
            CHECK(std::abs(before.at({a, i, c}) - after.at({a, i, c})) < 1e-12);
          }
        }
      }
    }
  }
}

TEST_CASE("attention gradients match finite differences", "[attention][grad][property]") {
  using psb::testing::check_inputs;
  using Vs = std::vector<Var<double>>;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    psb::Rng rng(500 + seed);
    const std::size_t b = draw(rng, 1, 2), h = draw(rng, 1, 2), d = draw(rng, 1, 3);
    const std::size_t steps = draw(rng, 1, 3), per_q = draw(rng, 1, 2), per_k = draw(rng, 1, 2);
    const std::size_t nq = steps * per_q, nk = steps * per_k;
    auto mask = std::make_shared<const Mask>(
        psb::expand_time_mask(psb::causal_mask(steps), per_q, per_k));
    INFO("seed " << seed);
    for (auto kind : {AttentionKind::dot, AttentionKind::inverted}) {
      const std::size_t group = kind == AttentionKind::inverted ? per_q : 0;
      auto report = check_inputs(
          {{b, h, nq, d}, {b, h, nk, d}, {b, h, nk, d}, {h, 2 * steps - 1}}, seed,
          [&](Tape<double>&, const Vs& x) {
            auto bias = psb::expand_blocks(psb::rel_bias_lookup(x[3], steps, steps), per_q, per_k);
            return psb::attention(x[0], x[1], x[2], kind, mask, bias, group);
          });
      CHECK(report.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("attention is worker-count invariant", "[attention][determinism]") {
  psb::Rng rng(61);
  auto q = psb::normal_tensor<double>({4, 48, 16}, rng);
  auto k = psb::normal_tensor<double>({4, 96, 16}, rng);
  auto v = psb::normal_tensor<double>({4, 96, 16}, rng);
  auto mask = psb::expand_time_mask(psb::causal_mask(6), 8, 16);
  Tensor<double> one, four;
  {
    psb::WorkerScope s(1);
    one = psb::inverted_attention(q, k, v, &mask, nullptr, 8);
  }
  {
    psb::WorkerScope s(4);
    four = psb::inverted_attention(q, k, v, &mask, nullptr, 8);
  }
  CHECK(one == four);
}
