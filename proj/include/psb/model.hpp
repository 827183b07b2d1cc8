// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "psb/autoenc.hpp"
#include "psb/config.hpp"
#include "psb/psb_encoder.hpp"
#include "psb/recurrent.hpp"

namespace psb {

/// Patch embedder, slot encoder (PSB or recurrent) and broadcast decoder
/// sharing one parameter store.
template <class Real>
class AutoEncoder {
 public:
  struct Forward {
    Var<Real> features, slots;
    DecoderVars<Real> decoded;
    Var<Real> loss;
  };

  AutoEncoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(derive_seed(seed, {0x1417}));
    const std::size_t d = cfg.psb.dim;
    embed_.emplace(PatchEmbedConfig{3, cfg.patch, d}, store_, rng);
    if (cfg.encoder == EncoderKind::psb) {
      psb_.emplace(cfg.psb, store_, rng);
    } else {
      recurrent_.emplace(recurrent_config(cfg), store_, rng);
    }
    decoder_.emplace(DecoderConfig{d, cfg.decoder_hidden}, store_, rng);
  }

  AutoEncoder(const AutoEncoder&) = default;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<Real>& store() { return store_; }
  const ParamStore<Real>& store() const { return store_; }
  const PatchEmbed<Real>& embed() const { return *embed_; }
  const BroadcastDecoder<Real>& decoder() const { return *decoder_; }
  const PsbEncoder<Real>* psb() const { return psb_ ? &*psb_ : nullptr; }
  const RecurrentEncoder<Real>* recurrent() const { return recurrent_ ? &*recurrent_ : nullptr; }

  /// Features [T, L, D] -> slots [T, N, D]. PSB sequences longer than its
  /// horizon are encoded with the sliding window.
  Var<Real> encode(Tape<Real>& tape, Var<Real> features, std::uint64_t seed) const {
    if (recurrent_) return recurrent_->encode(tape, features);
    if (features.dim(0) > cfg_.psb.t_max) return psb_->encode_sliding(tape, features, seed);
    return psb_->encode(tape, features, seed);
  }

  /// Frames [T, 3, H, W] through the whole autoencoder; the loss is the MSE
  /// of the mixture against the frames.
  Forward forward(Tape<Real>& tape, const Tensor<Real>& frames, std::uint64_t seed) const {
    Forward f;
    f.features = (*embed_)(tape, frames);
    f.slots = encode(tape, f.features, seed);
    f.decoded = decoder_->decode(tape, f.slots, frames.dim(2), frames.dim(3));
    f.loss = recon_loss(f.decoded.mixture, frames_to_pixels(frames));
    return f;
  }

 private:
  ModelConfig cfg_;
  ParamStore<Real> store_;
  std::optional<PatchEmbed<Real>> embed_;
  std::optional<PsbEncoder<Real>> psb_;
  std::optional<RecurrentEncoder<Real>> recurrent_;
  std::optional<BroadcastDecoder<Real>> decoder_;
};

}  // namespace psb
