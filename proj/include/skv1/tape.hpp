// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "skv1/ops.hpp"
#include "skv1/tensor.hpp"

namespace skv1::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode recorder. Nodes are appended in evaluation order; every
/// non-leaf node keeps the closure that produced its value so the whole
/// forward pass can be replayed.
template <typename T>
class Tape {
 public:
  using Forward = std::function<Tensor<T>(const Tape&)>;
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Var leaf(Tensor<T> value, bool requires_grad = false);
  Var record(std::initializer_list<Var> inputs, Forward forward, Backward backward);
  Var record(const std::vector<Var>& inputs, Forward forward, Backward backward);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return v.valid() && nodes_.at(v.id).requires_grad; }

  /// Accumulated gradient; empty when nothing flowed into the node.
  const Tensor<T>& grad(Var v) const { return nodes_.at(v.id).grad; }

  /// Gradient accumulator, zero-initialized on first access.
  Tensor<T>& grad_buffer(Var v);

  /// Seeds d(root)/d(root) = 1 and propagates to every node that requires grad.
  void backward(Var root);

  /// Recomputes every non-leaf value in recording order. Returns true when each
  /// recomputed value equals the recorded one bit-for-bit.
  bool replay();

  void zero_grad();
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Forward forward;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

/// One weighted contribution to an assembled head slot.
struct HeadTerm {
  bool from_bank = false;
  int head = 0;
  double weight = 1.0;
};
using HeadMix = std::vector<std::vector<HeadTerm>>;

/// Per-query-head routing for the fused causal attention.
struct AttentionLayout {
  int heads = 1;
  int qk_dim = 1;
  int v_dim = 1;
  std::vector<int> k_head;  // K head read by each query head
  std::vector<int> v_head;  // V head read by each query head
  int seg_len = 1;          // columns are independent sequences of this length
  double scale = 1.0;
};

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b);
template <typename T>
Var add(Tape<T>& t, Var a, Var b);
template <typename T>
Var scale(Tape<T>& t, Var a, T s);
template <typename T>
Var relu(Tape<T>& t, Var a);
template <typename T>
Var slice_rows(Tape<T>& t, Var a, size_t r0, size_t count);
template <typename T>
Var concat_rows(Tape<T>& t, const std::vector<Var>& parts);
template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps);
/// Gathers rows of a V×d table into a d×N matrix.
template <typename T>
Var embed(Tape<T>& t, Var table, const std::vector<TokenId>& ids);
/// Column j receives row (j mod seg_len) of an n_max×d table.
template <typename T>
Var positions(Tape<T>& t, Var table, size_t seg_len, size_t cols);
template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, const std::vector<TokenId>& targets);
template <typename T>
Var causal_softmax(Tape<T>& t, Var scores, T scale);
/// Rotary rotation applied per head block; position is the column index within its segment.
template <typename T>
Var rope(Tape<T>& t, Var x, int heads, int dim, size_t seg_len);
/// Per head h, stacks rows of a's h-th block over b's h-th block (or b's only block when shared).
template <typename T>
Var interleave_heads(Tape<T>& t, Var a, int a_dim, Var b, int b_dim, int heads, bool b_shared);
/// Builds head slots as weighted sums of local and bank heads.
template <typename T>
Var assemble_heads(Tape<T>& t, Var local, Var bank, const HeadMix& mix, int head_dim);
template <typename T>
Var causal_attention(Tape<T>& t, Var q, Var k, Var v, const AttentionLayout& layout);
template <typename T>
Var transpose(Tape<T>& t, Var a);
/// out[j·|n| + k, i] = p[i, j] · n_flat[k], i.e. pᵀ ⊗ vec(n) with n read row-major.
template <typename T>
Var transposed_kron(Tape<T>& t, Var p, Var n);
/// Σ a ⊙ b as a 1-element tensor.
template <typename T>
Var frobenius_dot(Tape<T>& t, Var a, Var b);
/// Σ w ⊙ a, a fixed probe used by gradient checks.
template <typename T>
Var weighted_sum(Tape<T>& t, Var a, const Tensor<T>& w);

}  // namespace skv1::ad
