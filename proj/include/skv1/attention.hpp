// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "skv1/config.hpp"
#include "skv1/tape.hpp"

namespace skv1 {

/// Tape handles for one layer's attention weights; unused entries stay invalid.
struct AttnParams {
  ad::Var wq, wk, wv, wo;
  ad::Var wqr, wdkv, wuk, wuv, wkr;
};

/// Tensors that a layer may read from earlier layers.
struct AttnSources {
  ad::Var k;       // full keys of the key-source layer
  ad::Var v;       // full values of the value-source layer (the value bank)
  ad::Var latent;  // layer 1 latent for spliced latent attention
};

/// Everything a layer exposes to later layers and to analysis.
struct AttnTrace {
  ad::Var k;       // keys as consumed, kv_heads × qk_dim rows
  ad::Var v;       // values as consumed, kv_heads × v_dim rows
  ad::Var k_own;   // locally projected keys (post rotary)
  ad::Var v_own;   // locally projected values
  ad::Var latent;  // locally projected latent
  ad::Var heads;   // per-head attention outputs, q_heads × v_dim rows
  ad::Var out;     // W_O applied to heads, d rows
};

/// Records one attention sublayer on a tape. `xn` is the normalized input
/// (d × N, N a multiple of seg_len). The residual is not added.
template <typename T>
AttnTrace attention_layer(ad::Tape<T>& tape, const LayerRole& role, const AttnParams& w, ad::Var xn,
                          const AttnSources& src, size_t seg_len, bool rotary);

// ---- Single-sequence reference API (d × n input, no normalization, residual included).

struct AttnWeights {
  int heads = 1;
  Tensor32 wq, wk, wv, wo;
  // Latent attention only.
  Tensor32 wqr, wdkv, wuk, wuv, wkr;
};

struct MhaResult {
  Tensor32 y;
  Tensor32 v_heads;  // H·d_H × n, head h in rows [h·d_H, (h+1)·d_H)
};

struct MlaResult {
  Tensor32 y;
  Tensor32 latent;  // locally computed latent
};

MhaResult attn_mha(const Tensor32& x, const AttnWeights& w);

Tensor32 attn_skipv1(const Tensor32& x, const Tensor32& bank, const AttnWeights& w,
                     HeadInjection injection = HeadInjection::SecondHalf, double ratio = 0.5, int layer = 2);

Tensor32 attn_resformer(const Tensor32& x, const Tensor32& bank, const AttnWeights& w, double lambda);

/// w.wk holds `groups` key heads; w.wv holds `groups` value heads, or only the
/// local groups when `skip` is set.
Tensor32 attn_gqa(const Tensor32& x, const AttnWeights& w, int groups, bool skip,
                  const std::optional<Tensor32>& bank = std::nullopt, double ratio = 0.5);

MlaResult attn_mla(const Tensor32& x, const AttnWeights& w, bool skip,
                   const std::optional<Tensor32>& latent_bank = std::nullopt, double ratio = 0.5);

/// Attention whose keys and values are supplied by other layers (H·d_H × n each).
Tensor32 attn_cross_kv(const Tensor32& x, const AttnWeights& w, const Tensor32& k_source, const Tensor32& v_source);

}  // namespace skv1
