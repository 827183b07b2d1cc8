// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>

#include "psb/ops.hpp"
#include "psb/random.hpp"
#include "psb/tape.hpp"

// Parameter bundles shared by the encoders and decoders. A bundle only holds
// ParamIds; values live in a ParamStore and are read through the Tape.

namespace psb {

struct LinearRef {
  ParamId w;
  std::optional<ParamId> b;
  std::size_t in = 0, out = 0;
};

struct LayerNormRef {
  ParamId gain, bias;
};

struct MlpRef {
  LinearRef fc1, fc2;
};

/// Multi-head projections. W_Q, W_K, W_V are bias-free; W_O carries a bias.
struct AttentionRef {
  ParamId w_q, w_k, w_v;
  LinearRef out;
  std::size_t heads = 1;
};

enum class InitStyle { fan_in, zero };

template <class Real>
LinearRef make_linear(ParamStore<Real>& store, const std::string& name, std::size_t in,
                      std::size_t out, bool bias, Rng& rng,
                      InitStyle style = InitStyle::fan_in) {
  LinearRef ref;
  ref.in = in;
  ref.out = out;
  ref.w = store.add(name + ".w", style == InitStyle::zero ? Tensor<Real>({in, out})
                                                          : fan_in_uniform<Real>(in, out, rng));
  if (bias) ref.b = store.add(name + ".b", Tensor<Real>({out}));
  return ref;
}

template <class Real>
LayerNormRef make_layer_norm(ParamStore<Real>& store, const std::string& name, std::size_t d) {
  return {store.add(name + ".gain", Tensor<Real>({d}, Real(1)), false),
          store.add(name + ".bias", Tensor<Real>({d}), false)};
}

template <class Real>
MlpRef make_mlp(ParamStore<Real>& store, const std::string& name, std::size_t in,
                std::size_t hidden, std::size_t out, Rng& rng,
                InitStyle last = InitStyle::fan_in) {
  return {make_linear(store, name + ".fc1", in, hidden, true, rng),
          make_linear(store, name + ".fc2", hidden, out, true, rng, last)};
}

template <class Real>
AttentionRef make_attention(ParamStore<Real>& store, const std::string& name, std::size_t d,
                            std::size_t heads, Rng& rng, InitStyle out_style) {
  if (heads == 0 || d % heads != 0) {
    throw ShapeError(name + ": model dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  AttentionRef ref;
  ref.heads = heads;
  ref.w_q = store.add(name + ".w_q", fan_in_uniform<Real>(d, d, rng));
  ref.w_k = store.add(name + ".w_k", fan_in_uniform<Real>(d, d, rng));
  ref.w_v = store.add(name + ".w_v", fan_in_uniform<Real>(d, d, rng));
  ref.out = make_linear(store, name + ".w_o", d, d, true, rng, out_style);
  return ref;
}

template <class Real>
Var<Real> apply(Tape<Real>& tape, const LinearRef& ref, Var<Real> x) {
  std::optional<Var<Real>> b;
  if (ref.b) b = tape.param(*ref.b);
  return linear(x, tape.param(ref.w), b);
}

template <class Real>
Var<Real> apply(Tape<Real>& tape, const LayerNormRef& ref, Var<Real> x) {
  return layer_norm(x, tape.param(ref.gain), tape.param(ref.bias));
}

/// Two-layer MLP with a GELU in between.
template <class Real>
Var<Real> apply(Tape<Real>& tape, const MlpRef& ref, Var<Real> x) {
  return apply(tape, ref.fc2, gelu(apply(tape, ref.fc1, x)));
}

/// Projects x [A, B, D] and splits heads. Without `swap` the result is
/// [A, h, B, d] (tokens along B); with `swap` it is [B, h, A, d].
template <class Real>
Var<Real> project_heads(Var<Real> x, Var<Real> w, std::size_t heads, bool swap) {
  const std::size_t a = x.dim(0), b = x.dim(1), d = x.dim(2);
  auto y = reshape(linear(x, w), {a, b, heads, d / heads});
  return swap ? permute(y, {1, 2, 0, 3}) : permute(y, {0, 2, 1, 3});
}

/// Inverse of project_heads' split: [X, h, Y, d] -> [A, B, h*d].
template <class Real>
Var<Real> merge_heads(Var<Real> y, bool swap) {
  const std::size_t h = y.dim(1), d = y.dim(3);
  auto p = swap ? permute(y, {2, 0, 1, 3}) : permute(y, {0, 2, 1, 3});
  return reshape(p, {p.dim(0), p.dim(1), h * d});
}

}  // namespace psb
