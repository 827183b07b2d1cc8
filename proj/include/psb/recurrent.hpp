// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psb/attention.hpp"
#include "psb/errors.hpp"
#include "psb/modules.hpp"
#include "psb/ops.hpp"

namespace psb {

/// Gated recurrent unit: gates z, r and candidate n computed from both the
/// input and the hidden state; h' = (1 - z) * h + z * n.
struct GruRef {
  LinearRef input;   // D_in -> 3D, order [z | r | n]
  LinearRef hidden;  // D -> 3D, same order
  std::size_t dim = 0;
};

template <class Real>
GruRef make_gru(ParamStore<Real>& store, const std::string& name, std::size_t in,
                std::size_t dim, Rng& rng) {
  return {make_linear(store, name + ".input", in, 3 * dim, true, rng),
          make_linear(store, name + ".hidden", dim, 3 * dim, true, rng), dim};
}

template <class Real>
Var<Real> gru_cell(Tape<Real>& tape, const GruRef& ref, Var<Real> h, Var<Real> x) {
  const std::size_t d = ref.dim;
  auto gi = apply(tape, ref.input, x);
  auto gh = apply(tape, ref.hidden, h);
  auto z = sigmoid(add(narrow_last(gi, 0, d), narrow_last(gh, 0, d)));
  auto r = sigmoid(add(narrow_last(gi, d, d), narrow_last(gh, d, d)));
  auto n = tanh(add(narrow_last(gi, 2 * d, d), mul(r, narrow_last(gh, 2 * d, d))));
  return add(h, mul(z, sub(n, h)));
}

template <class Real>
Tensor<Real> gru_cell(const ParamStore<Real>& store, const GruRef& ref, const Tensor<Real>& h,
                      const Tensor<Real>& x) {
  Tape<Real> tape(&store);
  return gru_cell(tape, ref, tape.constant(h), tape.constant(x)).value();
}

struct RecurrentConfig {
  std::size_t slots = 4;
  std::size_t dim = 192;
  std::size_t iterations = 2;
  std::size_t mlp_hidden = 768;
  std::size_t heads = 1;
};

/// SAVi-style baseline: per frame, a few rounds of slot attention starting
/// from the previous frame's slots, each followed by a GRU and an MLP.
template <class Real>
class RecurrentEncoder {
 public:
  RecurrentEncoder(const RecurrentConfig& cfg, ParamStore<Real>& store, Rng& rng,
                   const std::string& prefix = "savi")
      : cfg_(cfg) {
    if (cfg.iterations == 0) throw ConfigError("recurrent encoder: iterations must be >= 1");
    if (cfg.slots == 0 || cfg.dim < 2) throw ConfigError("recurrent encoder: bad slots/dim");
    if (cfg.heads == 0 || cfg.dim % cfg.heads != 0) {
      throw ConfigError("recurrent encoder: dim must be divisible by heads");
    }
    const std::size_t d = cfg.dim;
    init_ = store.add(prefix + ".init.slots", normal_tensor<Real>({cfg.slots, d}, rng), false);
    ln_q_ = make_layer_norm(store, prefix + ".ln_q", d);
    ln_kv_ = make_layer_norm(store, prefix + ".ln_kv", d);
    attn_ = make_attention(store, prefix + ".attn", d, cfg.heads, rng, InitStyle::fan_in);
    gru_ = make_gru(store, prefix + ".gru", d, d, rng);
    ln_mlp_ = make_layer_norm(store, prefix + ".mlp.ln", d);
    mlp_ = make_mlp(store, prefix + ".mlp", d, cfg.mlp_hidden, d, rng, InitStyle::zero);
  }

  const RecurrentConfig& config() const { return cfg_; }
  ParamId learned_init() const { return init_; }
  const GruRef& gru() const { return gru_; }
  const AttentionRef& attention_ref() const { return attn_; }
  const LayerNormRef& ln_features() const { return ln_kv_; }

  /// Refines slots [N, D] against one frame's features [L, D].
  Var<Real> frame(Tape<Real>& tape, Var<Real> slots, Var<Real> e_t) const {
    const std::size_t l = e_t.dim(0), d = cfg_.dim;
    auto x = reshape(apply(tape, ln_kv_, e_t), {1, l, d});
    auto k = project_heads(x, tape.param(attn_.w_k), cfg_.heads, false);
    auto v = project_heads(x, tape.param(attn_.w_v), cfg_.heads, false);
    for (std::size_t it = 0; it < cfg_.iterations; ++it) slots = iterate(tape, slots, k, v);
    return slots;
  }

  Tensor<Real> frame(const ParamStore<Real>& store, const Tensor<Real>& slots,
                     const Tensor<Real>& e_t) const {
    Tape<Real> tape(&store);
    return frame(tape, tape.constant(slots), tape.constant(e_t)).value();
  }

  /// Features [T, L, D] -> slots [T, N, D], strictly sequential in t.
  Var<Real> encode_from(Tape<Real>& tape, Var<Real> init, Var<Real> e) const {
    if (e.value().rank() != 3 || e.dim(2) != cfg_.dim) {
      throw ShapeError("recurrent encode: features must be [T, L, " + std::to_string(cfg_.dim) +
                       "], got " + to_string(e.shape()));
    }
    const std::size_t steps = e.dim(0), l = e.dim(1);
    std::vector<Var<Real>> out;
    out.reserve(steps);
    Var<Real> s = init;
    for (std::size_t t = 0; t < steps; ++t) {
      s = frame(tape, s, reshape(slice0(e, t, 1), {l, cfg_.dim}));
      out.push_back(reshape(s, {1, cfg_.slots, cfg_.dim}));
    }
    return concat0(out);
  }

  Var<Real> encode(Tape<Real>& tape, Var<Real> e, std::uint64_t = 0, long long = 0) const {
    return encode_from(tape, tape.param(init_), e);
  }

  Tensor<Real> encode(const ParamStore<Real>& store, const Tensor<Real>& e) const {
    Tape<Real> tape(&store);
    return encode(tape, tape.constant(e)).value();
  }

 private:
  Var<Real> iterate(Tape<Real>& tape, Var<Real> slots, Var<Real> k, Var<Real> v) const {
    const std::size_t n = cfg_.slots, d = cfg_.dim;
    auto xq = reshape(apply(tape, ln_q_, slots), {1, n, d});
    auto q = project_heads(xq, tape.param(attn_.w_q), cfg_.heads, false);
    auto o = attention(q, k, v, AttentionKind::inverted);
    auto update = reshape(apply(tape, attn_.out, merge_heads(o, false)), {n, d});
    slots = gru_cell(tape, gru_, slots, update);
    return add(slots, apply(tape, mlp_, apply(tape, ln_mlp_, slots)));
  }

  RecurrentConfig cfg_;
  ParamId init_;
  LayerNormRef ln_q_, ln_kv_;
  AttentionRef attn_;
  GruRef gru_;
  LayerNormRef ln_mlp_;
  MlpRef mlp_;
};

}  // namespace psb
