// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "skv1/attention.hpp"
#include "skv1/config.hpp"
#include "skv1/ops.hpp"
#include "skv1/tape.hpp"

namespace skv1 {

template <typename T>
using Weights = std::map<std::string, Tensor<T>>;

/// Named weights plus the configuration that gives them meaning.
struct Checkpoint {
  ModelConfig config;
  Weights<float> tensors;

  const Tensor32& at(const std::string& name) const;
  Tensor32& at(const std::string& name);
};

struct ParamSpec {
  std::string name;
  std::vector<size_t> shape;
  double init_std = 0.0;  // 0 marks norm tensors (gain 1, bias 0)
  bool is_gain = false;
};

std::string layer_prefix(int layer);

/// Every trainable tensor in a fixed order. Layers are numbered from 1.
std::vector<ParamSpec> parameter_specs(const ModelConfig& cfg, double std = 0.02);

/// Throws ConfigError unless `w` holds exactly the tensors the config needs.
template <typename T>
void check_weights(const ModelConfig& cfg, const Weights<T>& w);

/// Gaussian init; output projections (attn.wo, ffn.w2) use std/√(2L).
Checkpoint init_weights(const ModelConfig& cfg, uint64_t seed, double std = 0.02);

/// Parameter breakdown. Embeddings are tied and counted once; no biases except
/// norm bias. `delta_vs_mha` is the number of parameters saved relative to the
/// non-skip counterpart (SkipV1-GQA vs GQA, SkipV1-MLA vs MLA, everything else vs MHA).
struct ParamBreakdown {
  long embedding = 0;
  long attention = 0;
  long ffn = 0;
  long norm = 0;
  long total = 0;
  long delta_vs_mha = 0;
};

ParamBreakdown param_count(const ModelConfig& cfg);

/// Non-skip counterpart used for delta accounting.
ModelConfig counterpart(const ModelConfig& cfg);

struct LayerTrace {
  AttnTrace attn;
  ad::Var input;   // residual stream entering the layer
  ad::Var output;  // residual stream leaving the layer
};

template <typename T>
struct ForwardGraph {
  ad::Tape<T> tape;
  std::map<std::string, ad::Var> params;
  std::vector<LayerTrace> layers;
  ad::Var embedded;
  ad::Var hidden;  // final normalized stream
  ad::Var logits;  // V × N
  ad::Var loss;
};

/// Records the forward pass over sequences of length seg_len laid side by side.
template <typename T>
void build_forward(ForwardGraph<T>& g, const ModelConfig& cfg, const Weights<T>& w, const std::vector<TokenId>& tokens,
                   size_t seg_len, bool track_grad);

/// Appends mean cross-entropy against targets.
template <typename T>
ad::Var attach_loss(ForwardGraph<T>& g, const std::vector<TokenId>& targets);

/// Logits V × n for one sequence.
Tensor32 forward(const Checkpoint& ck, const std::vector<TokenId>& tokens);

template <typename T>
Weights<T> cast_weights(const Weights<float>& w) {
  Weights<T> out;
  for (const auto& [k, v] : w) out.emplace(k, v.template cast<T>());
  return out;
}

}  // namespace skv1
