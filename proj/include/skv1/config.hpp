// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "skv1/tape.hpp"

namespace skv1 {

enum class VariantKind { MHA, SkipV1, ResFormer, GQA, SkipV1GQA, MLA, SkipV1MLA, YOCOV, CLAV, SkipKV1, SkipV1YOCO };
enum class HeadInjection { SecondHalf, Pooling, Dynamic, OddEven, SkipV1PlusRes };
enum class Positional { Learned, Rotary };
/// How a skip-MLA model's layer-1 latent is charged in byte accounting.
enum class MlaAccounting { Uniform, Layer1Full };

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Line-oriented `key=value` text; `#` starts a comment. Throws ConfigError on a
/// line without '='.
KeyValues parse_key_values(const std::string& text);
int parse_int(const std::string& key, const std::string& value);
double parse_real(const std::string& key, const std::string& value);
/// Decimal form that parses back to the same double.
std::string format_real(double v);
std::string trim(const std::string& s);

const std::vector<VariantKind>& all_variants();
std::string to_string(VariantKind v);
std::string to_string(HeadInjection v);
std::string to_string(Positional v);
std::string to_string(MlaAccounting v);
VariantKind parse_variant(const std::string& s);
HeadInjection parse_injection(const std::string& s);
Positional parse_positional(const std::string& s);
MlaAccounting parse_mla_accounting(const std::string& s);

struct ModelConfig {
  int L = 2;
  int d = 16;
  int H = 2;
  int r = 64;
  int V = 256;
  int n_max = 64;
  VariantKind variant = VariantKind::MHA;
  double ratio = 0.5;
  HeadInjection injection = HeadInjection::SecondHalf;
  Positional positional = Positional::Learned;
  int elem_bytes = 2;
  double lambda = 0.5;  // ResFormer: weight of the layer's own value
  int groups = 1;       // GQA key/value heads
  int d_c = 0;          // MLA latent width
  int d_r = 0;          // MLA decoupled rotary key width
  int cla_period = 2;
  MlaAccounting mla_accounting = MlaAccounting::Uniform;
  double ln_eps = 1e-5;

  int d_head() const { return d / H; }
  bool is_mla() const { return variant == VariantKind::MLA || variant == VariantKind::SkipV1MLA; }
  bool is_gqa() const { return variant == VariantKind::GQA || variant == VariantKind::SkipV1GQA; }
  /// Key/value heads per layer before any skipping.
  int kv_heads() const { return is_gqa() ? groups : H; }
  /// Layer whose keys (YOCO) or values (YOCO-V) the upper half reuses.
  int mid_layer() const { return L / 2 > 0 ? L / 2 : 1; }
  /// Rows of the layer's own latent for layers that splice in layer 1's latent.
  int latent_local() const;

  void validate() const;
  std::string to_text() const;
  static ModelConfig parse(const std::string& text);
  /// Applies one key=value assignment; unknown keys raise ConfigError.
  void set(const std::string& key, const std::string& value);
  bool operator==(const ModelConfig&) const = default;
};

/// Number of locally computed heads out of `heads` for a skip ratio.
int local_head_count(int heads, double ratio);

/// Head slots of a layer ≥ 2 as weighted sums of local heads (indexed 0..local-1)
/// and bank heads from layer 1.
struct SkipPlan {
  int local = 0;
  ad::HeadMix mix;
};

SkipPlan select_skip_heads(int heads, double ratio, int layer, HeadInjection injection);

/// Where one layer's attention inputs come from. Layers are 1-based.
struct LayerRole {
  int layer = 1;
  int q_heads = 1;
  int kv_heads = 1;
  int qk_dim = 1;
  int v_dim = 1;
  std::vector<int> kv_of_query;  // kv slot read by each query head

  // Keys: k_local heads are projected here. With k_source > 0, slots are
  // assembled by k_mix from local heads and layer k_source's keys (an empty
  // mix means all slots are layer k_source's).
  int k_local = 0;
  int k_source = 0;
  ad::HeadMix k_mix;

  int v_local = 0;
  int v_source = 0;
  ad::HeadMix v_mix;

  // Latent attention: own latent rows, optionally followed by rows
  // [latent_local, d_c) of layer latent_source's latent.
  bool mla = false;
  int latent_local = 0;
  int latent_source = 0;

  /// Cached scalars per token for this layer's own state.
  long cached_k() const;
  long cached_v() const;
  int d_r = 0;
  int d_head = 1;
};

LayerRole layer_role(const ModelConfig& cfg, int layer);

}  // namespace skv1
