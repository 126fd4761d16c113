// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "skv1/model.hpp"
#include "skv1/rng.hpp"

namespace skv1::testing {

/// 2-layer d=16 model small enough for exhaustive finite differences.
inline ModelConfig small_config(VariantKind v) {
  ModelConfig c;
  c.L = 2;
  c.d = 16;
  c.H = 4;
  c.r = 32;
  c.V = 32;
  c.n_max = 16;
  c.variant = v;
  c.groups = 2;
  c.d_c = 8;
  c.d_r = 2;
  return c;
}

inline std::vector<TokenId> random_tokens(Rng& rng, size_t n, int vocab) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(static_cast<uint64_t>(vocab)));
  return t;
}

/// Norm gains and biases are perturbed away from 1 and 0 so their gradients are generic.
inline Checkpoint generic_weights(const ModelConfig& cfg, uint64_t seed, double std) {
  Checkpoint ck = init_weights(cfg, seed, std);
  Rng rng(seed ^ 0x5eedULL);
  for (auto& [name, t] : ck.tensors)
    if (t.rank() == 1)
      for (size_t i = 0; i < t.size(); ++i) t[i] += static_cast<float>(rng.normal() * 0.1);
  return ck;
}

template <typename T>
struct LossProblem {
  ModelConfig cfg;
  std::vector<TokenId> tokens, targets;
  size_t seg_len;

  T loss(const Weights<T>& w) const {
    ForwardGraph<T> g;
    build_forward(g, cfg, w, tokens, seg_len, false);
    return g.tape.value(attach_loss(g, targets))[0];
  }

  Weights<T> gradient(const Weights<T>& w) const {
    ForwardGraph<T> g;
    build_forward(g, cfg, w, tokens, seg_len, true);
    g.tape.backward(attach_loss(g, targets));
    Weights<T> out;
    for (const auto& [name, v] : g.params) {
      const auto& gr = g.tape.grad(v);
      out.emplace(name, gr.empty() ? Tensor<T>(w.at(name).shape()) : gr);
    }
    return out;
  }

  /// Central difference for entries `idx` of tensor `name`.
  Tensor<T> finite_diff(Weights<T> w, const std::string& name, const std::vector<size_t>& idx, T h) const {
    Tensor<T> out({idx.size()});
    for (size_t k = 0; k < idx.size(); ++k) {
      T& x = w.at(name)[idx[k]];
      const T x0 = x;
      x = x0 + h;
      const T fp = loss(w);
      x = x0 - h;
      const T fm = loss(w);
      x = x0;
      out[k] = (fp - fm) / (2 * h);
    }
    return out;
  }
};

struct GradReport {
  std::string worst_tensor;
  double worst = 0;
  size_t tensors = 0;
};

/// Norm-wise relative error per tensor between a reverse-mode gradient and
/// 64-bit central differences, over every stride-th entry.
template <typename T>
GradReport compare_to_finite_diff(const Weights<T>& grads, const LossProblem<double>& p, const Weights<double>& w,
                                  double h, size_t stride = 1) {
  GradReport rep;
  for (const auto& [name, t] : w) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < t.size(); i += stride) idx.push_back(i);
    const Tensor64 fd = p.finite_diff(w, name, idx, h);
    Tensor64 ad({idx.size()});
    for (size_t k = 0; k < idx.size(); ++k) ad[k] = static_cast<double>(grads.at(name)[idx[k]]);
    const double err = relative_error(ad, fd, 1e-6);
    ++rep.tensors;
    if (err >= rep.worst) {
      rep.worst = err;
      rep.worst_tensor = name;
    }
  }
  return rep;
}

/// Checks 64-bit and 32-bit reverse mode at the same (32-bit representable)
/// weights. Central differences are taken in 64 bits for both: 32-bit
/// differences of a full model lose more than three digits to rounding.
struct GradPair {
  GradReport r64, r32;
};

inline GradPair check_model_gradient(const ModelConfig& cfg, const Checkpoint& ck, const std::vector<TokenId>& tokens,
                                     const std::vector<TokenId>& targets, size_t seg_len, size_t stride) {
  LossProblem<double> p64{cfg, tokens, targets, seg_len};
  LossProblem<float> p32{cfg, tokens, targets, seg_len};
  const auto w64 = cast_weights<double>(ck.tensors);
  return {compare_to_finite_diff(p64.gradient(w64), p64, w64, 1e-5, stride),
          compare_to_finite_diff(p32.gradient(ck.tensors), p64, w64, 1e-5, stride)};
}

}  // namespace skv1::testing
