// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "skv1/model.hpp"

namespace skv1 {

/// Cached scalars per token, per layer, as charged by the accounting mode.
struct CacheSpec {
  struct Layer {
    long k = 0;  // keys, or latent plus rotary key for latent attention
    long v = 0;
  };
  VariantKind variant = VariantKind::MHA;
  std::vector<Layer> layers;
  int elem_bytes = 2;
  MlaAccounting accounting = MlaAccounting::Uniform;
};

CacheSpec cache_spec(const ModelConfig& cfg);
long elements_per_token(const CacheSpec& spec);
long bytes_per_token(const CacheSpec& spec);
inline long bytes_per_token(const ModelConfig& cfg) { return bytes_per_token(cache_spec(cfg)); }

/// Growable token-major buffer with a logical length separate from capacity.
class CacheBuffer {
 public:
  CacheBuffer() = default;
  explicit CacheBuffer(size_t width) : width_(width) {}

  size_t width() const { return width_; }
  size_t length() const { return length_; }
  size_t capacity() const { return width_ == 0 ? 0 : data_.size() / width_; }
  const float* row(size_t i) const { return data_.data() + i * width_; }
  void append(const float* row);
  /// FNV-1a over the logical contents.
  uint64_t checksum() const;
  bool operator==(const CacheBuffer& o) const;

 private:
  size_t width_ = 0;
  size_t length_ = 0;
  std::vector<float> data_;
};

/// Per-layer decoding state. Each layer stores only what it computes itself:
/// keys for its local key heads, values for its local value heads, or its own
/// latent and rotary key. Layer 1's value buffer doubles as the value bank that
/// later layers read; it exists once regardless of depth.
class DecodeCache {
 public:
  struct LayerState {
    CacheBuffer k, v, latent, rope_k;
  };

  explicit DecodeCache(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  size_t length() const { return length_; }
  const LayerState& layer(int l) const { return layers_.at(static_cast<size_t>(l - 1)); }
  LayerState& layer(int l) { return layers_.at(static_cast<size_t>(l - 1)); }

  /// Scalars physically stored per token across all buffers.
  long stored_elements_per_token() const;
  /// length() × stored scalars × element width.
  long logical_bytes() const;
  /// Checksum of layer 1's own cached state (the value bank, or the latent).
  uint64_t bank_checksum() const;

  bool operator==(const DecodeCache& o) const;

 private:
  friend Tensor32 decode_step(const Checkpoint&, DecodeCache&, TokenId, const std::function<void(int, const DecodeCache&)>&);
  ModelConfig cfg_;
  std::vector<LayerState> layers_;
  size_t length_ = 0;
};

using LayerHook = std::function<void(int layer, const DecodeCache&)>;

/// Appends one token and returns its next-token logits (length V). `hook`, if
/// set, runs after each layer has updated its buffers.
Tensor32 decode_step(const Checkpoint& ck, DecodeCache& cache, TokenId token, const LayerHook& hook = {});

/// Logits V × n from decoding tokens one at a time into a fresh cache.
Tensor32 decode_sequence(const Checkpoint& ck, const std::vector<TokenId>& tokens);

struct CacheRow {
  std::string variant;
  int L = 0, d = 0, H = 0, elem_bytes = 0;
  long seq_len = 0;
  long kv_bytes_total = 0;
  long kv_bytes_per_token = 0;
};

std::vector<CacheRow> cache_report(const std::vector<ModelConfig>& configs, const std::vector<long>& seq_lens);

inline constexpr const char* kCacheCsvHeader = "variant,L,d,H,elem_bytes,seq_len,kv_bytes_total,kv_bytes_per_token";
void write_cache_csv(std::ostream& os, const std::vector<CacheRow>& rows);

/// Named configuration sets: table3-gqa, table3-mla, slope.
std::vector<ModelConfig> cache_preset(const std::string& name);

}  // namespace skv1
