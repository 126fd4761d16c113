// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <string>

#include "skv1/kernels.hpp"

namespace skv1::ad {

template <typename T>
Var Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::record(std::initializer_list<Var> inputs, Forward forward, Backward backward) {
  return record(std::vector<Var>(inputs), std::move(forward), std::move(backward));
}

template <typename T>
Var Tape<T>::record(const std::vector<Var>& inputs, Forward forward, Backward backward) {
  Node n;
  for (Var v : inputs) n.requires_grad = n.requires_grad || requires_grad(v);
  n.value = forward(*this);
  n.forward = std::move(forward);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var root) {
  if (value(root).size() != 1) throw DimensionError("backward: root must be a scalar, got " + value(root).shape_str());
  grad_buffer(root)[0] += T(1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

template <typename T>
bool Tape<T>::replay() {
  bool same = true;
  for (auto& n : nodes_) {
    if (!n.forward) continue;
    Tensor<T> v = n.forward(*this);
    if (v.shape() != n.value.shape() ||
        !std::equal(v.storage().begin(), v.storage().end(), n.value.storage().begin(),
                    [](T a, T b) { return std::memcmp(&a, &b, sizeof(T)) == 0; })) {
      same = false;
    }
    n.value = std::move(v);
  }
  return same;
}

template <typename T>
void Tape<T>::zero_grad() {
  for (auto& n : nodes_) n.grad = Tensor<T>();
}

namespace {

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void copy_block(const Tensor<T>& src, size_t r0, size_t rows, size_t c0, size_t cols, T* dst) {
  for (size_t i = 0; i < rows; ++i) std::copy(src.row(r0 + i) + c0, src.row(r0 + i) + c0 + cols, dst + i * cols);
}

template <typename T>
void add_block(Tensor<T>& dst, size_t r0, size_t rows, size_t c0, size_t cols, const T* src) {
  for (size_t i = 0; i < rows; ++i) {
    T* d = dst.row(r0 + i) + c0;
    const T* s = src + i * cols;
    for (size_t j = 0; j < cols; ++j) d[j] += s[j];
  }
}

}  // namespace

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  return t.record(
      {a, b}, [a, b](const Tape<T>& tp) { return skv1::matmul(tp.value(a), tp.value(b)); },
      [a, b](Tape<T>& tp, const Tensor<T>& g) {
        if (tp.requires_grad(a)) accumulate(tp.grad_buffer(a), skv1::matmul_nt(g, tp.value(b)));
        if (tp.requires_grad(b)) accumulate(tp.grad_buffer(b), skv1::matmul_tn(tp.value(a), g));
      });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  return t.record(
      {a, b}, [a, b](const Tape<T>& tp) { return skv1::add(tp.value(a), tp.value(b)); },
      [a, b](Tape<T>& tp, const Tensor<T>& g) {
        if (tp.requires_grad(a)) accumulate(tp.grad_buffer(a), g);
        if (tp.requires_grad(b)) accumulate(tp.grad_buffer(b), g);
      });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  return t.record(
      {a}, [a, s](const Tape<T>& tp) { return skv1::scaled(tp.value(a), s); },
      [a, s](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T>& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
      });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
  return t.record(
      {a},
      [a](const Tape<T>& tp) {
        Tensor<T> out = tp.value(a);
        for (auto& v : out.storage()) v = v > T(0) ? v : T(0);
        return out;
      },
      [a](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& x = tp.value(a);
        Tensor<T>& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < g.size(); ++i)
          if (x[i] > T(0)) ga[i] += g[i];
      });
}

template <typename T>
Var slice_rows(Tape<T>& t, Var a, size_t r0, size_t count) {
  return t.record(
      {a}, [a, r0, count](const Tape<T>& tp) { return skv1::slice_rows(tp.value(a), r0, count); },
      [a, r0](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T>& ga = tp.grad_buffer(a);
        T* dst = ga.row(r0);
        for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      });
}

template <typename T>
Var concat_rows(Tape<T>& t, const std::vector<Var>& parts) {
  return t.record(
      parts,
      [parts](const Tape<T>& tp) {
        std::vector<Tensor<T>> vals;
        vals.reserve(parts.size());
        for (Var p : parts) vals.push_back(tp.value(p));
        return skv1::concat_rows(vals);
      },
      [parts](Tape<T>& tp, const Tensor<T>& g) {
        size_t offset = 0;
        for (Var p : parts) {
          const size_t n = tp.value(p).size();
          if (tp.requires_grad(p)) {
            Tensor<T>& gp = tp.grad_buffer(p);
            for (size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
          }
          offset += n;
        }
      });
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T eps) {
  return t.record(
      {x, gain, bias},
      [x, gain, bias, eps](const Tape<T>& tp) {
        return skv1::layer_norm_cols(tp.value(x), tp.value(gain), tp.value(bias), eps);
      },
      [x, gain, bias, eps](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& xv = tp.value(x);
        const Tensor<T>& gv = tp.value(gain);
        const size_t d = xv.rows(), n = xv.cols();
        std::vector<T> mean(n, T(0)), rstd(n, T(0));
        for (size_t i = 0; i < d; ++i)
          for (size_t j = 0; j < n; ++j) mean[j] += xv(i, j);
        for (size_t j = 0; j < n; ++j) mean[j] /= static_cast<T>(d);
        for (size_t i = 0; i < d; ++i)
          for (size_t j = 0; j < n; ++j) {
            const T c = xv(i, j) - mean[j];
            rstd[j] += c * c;
          }
        for (size_t j = 0; j < n; ++j) rstd[j] = T(1) / std::sqrt(rstd[j] / static_cast<T>(d) + eps);
        if (tp.requires_grad(gain) || tp.requires_grad(bias)) {
          Tensor<T>* gg = tp.requires_grad(gain) ? &tp.grad_buffer(gain) : nullptr;
          Tensor<T>* gb = tp.requires_grad(bias) ? &tp.grad_buffer(bias) : nullptr;
          for (size_t i = 0; i < d; ++i) {
            T sg = T(0), sb = T(0);
            for (size_t j = 0; j < n; ++j) {
              sg += g(i, j) * (xv(i, j) - mean[j]) * rstd[j];
              sb += g(i, j);
            }
            if (gg) (*gg)[i] += sg;
            if (gb) (*gb)[i] += sb;
          }
        }
        if (tp.requires_grad(x)) {
          Tensor<T>& gx = tp.grad_buffer(x);
          std::vector<T> m1(n, T(0)), m2(n, T(0));
          for (size_t i = 0; i < d; ++i)
            for (size_t j = 0; j < n; ++j) {
              const T dxh = g(i, j) * gv[i];
              m1[j] += dxh;
              m2[j] += dxh * (xv(i, j) - mean[j]) * rstd[j];
            }
          for (size_t j = 0; j < n; ++j) {
            m1[j] /= static_cast<T>(d);
            m2[j] /= static_cast<T>(d);
          }
          for (size_t i = 0; i < d; ++i)
            for (size_t j = 0; j < n; ++j) {
              const T xh = (xv(i, j) - mean[j]) * rstd[j];
              gx(i, j) += rstd[j] * (g(i, j) * gv[i] - m1[j] - xh * m2[j]);
            }
        }
      });
}

template <typename T>
Var embed(Tape<T>& t, Var table, const std::vector<TokenId>& ids) {
  const size_t vocab = t.value(table).rows();
  for (size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] < 0 || static_cast<size_t>(ids[j]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[j]) + " at position " + std::to_string(j) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
  }
  return t.record(
      {table},
      [table, ids](const Tape<T>& tp) {
        const Tensor<T>& w = tp.value(table);
        const size_t d = w.cols(), n = ids.size();
        Tensor<T> out = Tensor<T>::matrix(d, n);
        for (size_t j = 0; j < n; ++j) {
          const T* src = w.row(static_cast<size_t>(ids[j]));
          for (size_t c = 0; c < d; ++c) out(c, j) = src[c];
        }
        return out;
      },
      [table, ids](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T>& gw = tp.grad_buffer(table);
        const size_t d = gw.cols();
        for (size_t j = 0; j < ids.size(); ++j) {
          T* dst = gw.row(static_cast<size_t>(ids[j]));
          for (size_t c = 0; c < d; ++c) dst[c] += g(c, j);
        }
      });
}

template <typename T>
Var positions(Tape<T>& t, Var table, size_t seg_len, size_t cols) {
  if (seg_len == 0 || cols % seg_len != 0) throw DimensionError("positions: columns must be whole segments");
  if (seg_len > t.value(table).rows()) {
    throw LengthError("sequence length " + std::to_string(seg_len) + " exceeds positional table of " +
                      std::to_string(t.value(table).rows()));
  }
  return t.record(
      {table},
      [table, seg_len, cols](const Tape<T>& tp) {
        const Tensor<T>& w = tp.value(table);
        const size_t d = w.cols();
        Tensor<T> out = Tensor<T>::matrix(d, cols);
        for (size_t j = 0; j < cols; ++j) {
          const T* src = w.row(j % seg_len);
          for (size_t c = 0; c < d; ++c) out(c, j) = src[c];
        }
        return out;
      },
      [table, seg_len, cols](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T>& gw = tp.grad_buffer(table);
        const size_t d = gw.cols();
        for (size_t j = 0; j < cols; ++j) {
          T* dst = gw.row(j % seg_len);
          for (size_t c = 0; c < d; ++c) dst[c] += g(c, j);
        }
      });
}

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, const std::vector<TokenId>& targets) {
  return t.record(
      {logits},
      [logits, targets](const Tape<T>& tp) {
        return Tensor<T>({1}, std::vector<T>{skv1::cross_entropy(tp.value(logits), targets)});
      },
      [logits, targets](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& z = tp.value(logits);
        Tensor<T>& gz = tp.grad_buffer(logits);
        const size_t v = z.rows(), n = z.cols();
        const T coef = g[0] / static_cast<T>(n);
        std::vector<T> mx(n, -std::numeric_limits<T>::infinity()), sum(n, T(0));
        for (size_t i = 0; i < v; ++i)
          for (size_t j = 0; j < n; ++j) mx[j] = std::max(mx[j], z(i, j));
        for (size_t i = 0; i < v; ++i)
          for (size_t j = 0; j < n; ++j) sum[j] += std::exp(z(i, j) - mx[j]);
        for (size_t i = 0; i < v; ++i)
          for (size_t j = 0; j < n; ++j) gz(i, j) += coef * (std::exp(z(i, j) - mx[j]) / sum[j]);
        for (size_t j = 0; j < n; ++j) gz(static_cast<size_t>(targets[j]), j) -= coef;
      });
}

template <typename T>
Var causal_softmax(Tape<T>& t, Var scores, T scale) {
  return t.record(
      {scores}, [scores, scale](const Tape<T>& tp) { return skv1::causal_softmax(tp.value(scores), scale); },
      [scores, scale](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T> p = skv1::causal_softmax(tp.value(scores), scale);
        Tensor<T>& gs = tp.grad_buffer(scores);
        const size_t n = p.rows();
        for (size_t j = 0; j < n; ++j) {
          T dot = T(0);
          for (size_t i = 0; i <= j; ++i) dot += p(i, j) * g(i, j);
          for (size_t i = 0; i <= j; ++i) gs(i, j) += scale * p(i, j) * (g(i, j) - dot);
        }
      });
}

template <typename T>
Var rope(Tape<T>& t, Var x, int heads, int dim, size_t seg_len) {
  if (static_cast<size_t>(heads * dim) != t.value(x).rows()) {
    throw DimensionError("rope: " + std::to_string(heads) + " heads of " + std::to_string(dim) +
                         " rows do not tile " + t.value(x).shape_str());
  }
  auto apply = [heads, dim, seg_len](Tensor<T>& m, T sign) {
    const size_t n = m.cols();
    for (int h = 0; h < heads; ++h)
      for (size_t j = 0; j < n; ++j)
        rope_rotate(m.data() + static_cast<size_t>(h * dim) * n + j, n, static_cast<size_t>(dim), j % seg_len, sign);
  };
  return t.record(
      {x},
      [x, apply](const Tape<T>& tp) {
        Tensor<T> out = tp.value(x);
        apply(out, T(1));
        return out;
      },
      [x, apply](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> back = g;
        apply(back, T(-1));
        accumulate(tp.grad_buffer(x), back);
      });
}

template <typename T>
Var interleave_heads(Tape<T>& t, Var a, int a_dim, Var b, int b_dim, int heads, bool b_shared) {
  const size_t n = t.value(a).cols();
  if (t.value(a).rows() != static_cast<size_t>(heads * a_dim) ||
      t.value(b).rows() != static_cast<size_t>((b_shared ? 1 : heads) * b_dim) || t.value(b).cols() != n) {
    throw DimensionError("interleave_heads: " + t.value(a).shape_str() + " and " + t.value(b).shape_str());
  }
  const size_t ad = static_cast<size_t>(a_dim), bd = static_cast<size_t>(b_dim);
  return t.record(
      {a, b},
      [=](const Tape<T>& tp) {
        const Tensor<T>& av = tp.value(a);
        const Tensor<T>& bv = tp.value(b);
        Tensor<T> out = Tensor<T>::matrix(static_cast<size_t>(heads) * (ad + bd), n);
        for (size_t h = 0; h < static_cast<size_t>(heads); ++h) {
          copy_block(av, h * ad, ad, 0, n, out.row(h * (ad + bd)));
          copy_block(bv, b_shared ? 0 : h * bd, bd, 0, n, out.row(h * (ad + bd) + ad));
        }
        return out;
      },
      [=](Tape<T>& tp, const Tensor<T>& g) {
        for (size_t h = 0; h < static_cast<size_t>(heads); ++h) {
          if (tp.requires_grad(a)) add_block(tp.grad_buffer(a), h * ad, ad, 0, n, g.row(h * (ad + bd)));
          if (tp.requires_grad(b)) add_block(tp.grad_buffer(b), b_shared ? 0 : h * bd, bd, 0, n, g.row(h * (ad + bd) + ad));
        }
      });
}

template <typename T>
Var assemble_heads(Tape<T>& t, Var local, Var bank, const HeadMix& mix, int head_dim) {
  const size_t hd = static_cast<size_t>(head_dim);
  size_t n = 0;
  for (const auto& slot : mix) {
    for (const auto& term : slot) {
      const Var src = term.from_bank ? bank : local;
      if (!src.valid()) throw ConfigError("assemble_heads: slot reads a missing value source");
      const Tensor<T>& sv = t.value(src);
      if (static_cast<size_t>(term.head + 1) * hd > sv.rows() || term.head < 0) {
        throw ConfigError("assemble_heads: head " + std::to_string(term.head) + " outside source " + sv.shape_str());
      }
      if (n != 0 && sv.cols() != n) throw DimensionError("assemble_heads: sources differ in sequence length");
      n = sv.cols();
    }
  }
  std::vector<Var> inputs;
  if (local.valid()) inputs.push_back(local);
  if (bank.valid()) inputs.push_back(bank);
  return t.record(
      inputs,
      [=](const Tape<T>& tp) {
        Tensor<T> out = Tensor<T>::matrix(mix.size() * hd, n);
        for (size_t s = 0; s < mix.size(); ++s) {
          for (const auto& term : mix[s]) {
            const Tensor<T>& sv = tp.value(term.from_bank ? bank : local);
            const T w = static_cast<T>(term.weight);
            const T* src = sv.row(static_cast<size_t>(term.head) * hd);
            T* dst = out.row(s * hd);
            for (size_t i = 0; i < hd * n; ++i) dst[i] += w * src[i];
          }
        }
        return out;
      },
      [=](Tape<T>& tp, const Tensor<T>& g) {
        for (size_t s = 0; s < mix.size(); ++s) {
          for (const auto& term : mix[s]) {
            const Var src = term.from_bank ? bank : local;
            if (!tp.requires_grad(src)) continue;
            const T w = static_cast<T>(term.weight);
            T* dst = tp.grad_buffer(src).row(static_cast<size_t>(term.head) * hd);
            const T* gs = g.row(s * hd);
            for (size_t i = 0; i < hd * n; ++i) dst[i] += w * gs[i];
          }
        }
      });
}

template <typename T>
Var causal_attention(Tape<T>& t, Var q, Var k, Var v, const AttentionLayout& lay) {
  const Tensor<T>& qv = t.value(q);
  const Tensor<T>& kv = t.value(k);
  const Tensor<T>& vv = t.value(v);
  const size_t N = qv.cols();
  const size_t H = static_cast<size_t>(lay.heads), dq = static_cast<size_t>(lay.qk_dim),
               dv = static_cast<size_t>(lay.v_dim), n = static_cast<size_t>(lay.seg_len);
  if (qv.rows() != H * dq) throw DimensionError("attention: query rows " + qv.shape_str() + " do not match layout");
  if (kv.cols() != N || vv.cols() != N) {
    throw DimensionError("attention: source sequence length differs: q " + qv.shape_str() + ", k " + kv.shape_str() +
                         ", v " + vv.shape_str());
  }
  if (n == 0 || N % n != 0) throw DimensionError("attention: columns are not whole segments");
  if (lay.k_head.size() != H || lay.v_head.size() != H) throw ConfigError("attention: head routing size mismatch");
  for (size_t h = 0; h < H; ++h) {
    if (lay.k_head[h] < 0 || static_cast<size_t>(lay.k_head[h] + 1) * dq > kv.rows())
      throw ConfigError("attention: key head out of range for head " + std::to_string(h));
    if (lay.v_head[h] < 0 || static_cast<size_t>(lay.v_head[h] + 1) * dv > vv.rows())
      throw ConfigError("attention: value head out of range for head " + std::to_string(h));
  }
  const size_t segs = N / n;
  // Attention probabilities, one n×n block per (segment, head); refreshed by every forward.
  auto probs = std::make_shared<std::vector<T>>(segs * H * n * n);
  const T sc = static_cast<T>(lay.scale);

  auto forward = [=](const Tape<T>& tp) {
    const Tensor<T>& Q = tp.value(q);
    const Tensor<T>& K = tp.value(k);
    const Tensor<T>& V = tp.value(v);
    Tensor<T> out = Tensor<T>::matrix(H * dv, N);
#pragma omp parallel for schedule(static)
    for (long sl = 0; sl < static_cast<long>(segs); ++sl) {
      const size_t s = static_cast<size_t>(sl);
      std::vector<T> qb(dq * n), kb(dq * n), vb(dv * n), S(n * n), ob(dv * n);
      for (size_t h = 0; h < H; ++h) {
        copy_block(Q, h * dq, dq, s * n, n, qb.data());
        copy_block(K, static_cast<size_t>(lay.k_head[h]) * dq, dq, s * n, n, kb.data());
        copy_block(V, static_cast<size_t>(lay.v_head[h]) * dv, dv, s * n, n, vb.data());
        kernels::gemm_tn(n, dq, n, kb.data(), qb.data(), S.data());
        T* P = probs->data() + (s * H + h) * n * n;
        for (size_t j = 0; j < n; ++j) {
          T mx = -std::numeric_limits<T>::infinity();
          for (size_t i = 0; i <= j; ++i) mx = std::max(mx, sc * S[i * n + j]);
          T sum = T(0);
          for (size_t i = 0; i <= j; ++i) {
            const T e = std::exp(sc * S[i * n + j] - mx);
            P[i * n + j] = e;
            sum += e;
          }
          for (size_t i = 0; i <= j; ++i) P[i * n + j] /= sum;
          for (size_t i = j + 1; i < n; ++i) P[i * n + j] = T(0);
        }
        kernels::gemm_nn(dv, n, n, vb.data(), P, ob.data());
        for (size_t r = 0; r < dv; ++r) std::copy(ob.data() + r * n, ob.data() + (r + 1) * n, out.row(h * dv + r) + s * n);
      }
    }
    return out;
  };

  auto backward = [=](Tape<T>& tp, const Tensor<T>& g) {
    const Tensor<T>& Q = tp.value(q);
    const Tensor<T>& K = tp.value(k);
    const Tensor<T>& V = tp.value(v);
    const bool need_q = tp.requires_grad(q), need_k = tp.requires_grad(k), need_v = tp.requires_grad(v);
    Tensor<T>* gq = need_q ? &tp.grad_buffer(q) : nullptr;
    Tensor<T>* gk = need_k ? &tp.grad_buffer(k) : nullptr;
    Tensor<T>* gv = need_v ? &tp.grad_buffer(v) : nullptr;
    // Segments own disjoint columns, so per-segment accumulation is race free and
    // the order of additions within a column does not depend on the thread count.
#pragma omp parallel for schedule(static)
    for (long sl = 0; sl < static_cast<long>(segs); ++sl) {
      const size_t s = static_cast<size_t>(sl);
      std::vector<T> qb(dq * n), kb(dq * n), vb(dv * n), gb(dv * n), dP(n * n), tmp(std::max(dq, dv) * n);
      for (size_t h = 0; h < H; ++h) {
        const T* P = probs->data() + (s * H + h) * n * n;
        copy_block(Q, h * dq, dq, s * n, n, qb.data());
        copy_block(K, static_cast<size_t>(lay.k_head[h]) * dq, dq, s * n, n, kb.data());
        copy_block(V, static_cast<size_t>(lay.v_head[h]) * dv, dv, s * n, n, vb.data());
        copy_block(g, h * dv, dv, s * n, n, gb.data());
        if (gv) {
          kernels::gemm_nt(dv, n, n, gb.data(), P, tmp.data());
          add_block(*gv, static_cast<size_t>(lay.v_head[h]) * dv, dv, s * n, n, tmp.data());
        }
        if (!gq && !gk) continue;
        kernels::gemm_tn(n, dv, n, vb.data(), gb.data(), dP.data());
        // dP becomes the gradient of the pre-softmax scores (including the scale).
        for (size_t j = 0; j < n; ++j) {
          T dot = T(0);
          for (size_t i = 0; i <= j; ++i) dot += P[i * n + j] * dP[i * n + j];
          for (size_t i = 0; i <= j; ++i) dP[i * n + j] = sc * P[i * n + j] * (dP[i * n + j] - dot);
          for (size_t i = j + 1; i < n; ++i) dP[i * n + j] = T(0);
        }
        if (gq) {
          kernels::gemm_nn(dq, n, n, kb.data(), dP.data(), tmp.data());
          add_block(*gq, h * dq, dq, s * n, n, tmp.data());
        }
        if (gk) {
          kernels::gemm_nt(dq, n, n, qb.data(), dP.data(), tmp.data());
          add_block(*gk, static_cast<size_t>(lay.k_head[h]) * dq, dq, s * n, n, tmp.data());
        }
      }
    }
  };
  return t.record({q, k, v}, forward, backward);
}

template <typename T>
Var weighted_sum(Tape<T>& t, Var a, const Tensor<T>& w) {
  if (t.value(a).size() != w.size()) throw DimensionError("weighted_sum: weight shape " + w.shape_str());
  return t.record(
      {a},
      [a, w](const Tape<T>& tp) {
        const Tensor<T>& x = tp.value(a);
        T s = T(0);
        for (size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
        return Tensor<T>({1}, std::vector<T>{s});
      },
      [a, w](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T>& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * w[i];
      });
}

template <typename T>
Var transpose(Tape<T>& t, Var a) {
  return t.record(
      {a}, [a](const Tape<T>& tp) { return skv1::transpose(tp.value(a)); },
      [a](Tape<T>& tp, const Tensor<T>& g) { accumulate(tp.grad_buffer(a), skv1::transpose(g)); });
}

template <typename T>
Var transposed_kron(Tape<T>& t, Var p, Var n) {
  return t.record(
      {p, n},
      [p, n](const Tape<T>& tp) {
        const Tensor<T>& pv = tp.value(p);
        const Tensor<T>& nv = tp.value(n);
        const size_t k = nv.size();
        Tensor<T> out = Tensor<T>::matrix(pv.cols() * k, pv.rows());
        for (size_t j = 0; j < pv.cols(); ++j)
          for (size_t m = 0; m < k; ++m)
            for (size_t i = 0; i < pv.rows(); ++i) out(j * k + m, i) = pv(i, j) * nv[m];
        return out;
      },
      [p, n](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& pv = tp.value(p);
        const Tensor<T>& nv = tp.value(n);
        const size_t k = nv.size();
        if (tp.requires_grad(p)) {
          Tensor<T>& gp = tp.grad_buffer(p);
          for (size_t i = 0; i < pv.rows(); ++i)
            for (size_t j = 0; j < pv.cols(); ++j) {
              T s = T(0);
              for (size_t m = 0; m < k; ++m) s += g(j * k + m, i) * nv[m];
              gp(i, j) += s;
            }
        }
        if (tp.requires_grad(n)) {
          Tensor<T>& gn = tp.grad_buffer(n);
          for (size_t m = 0; m < k; ++m) {
            T s = T(0);
            for (size_t j = 0; j < pv.cols(); ++j)
              for (size_t i = 0; i < pv.rows(); ++i) s += g(j * k + m, i) * pv(i, j);
            gn[m] += s;
          }
        }
      });
}

template <typename T>
Var frobenius_dot(Tape<T>& t, Var a, Var b) {
  if (t.value(a).shape() != t.value(b).shape()) {
    throw DimensionError("frobenius_dot: " + t.value(a).shape_str() + " vs " + t.value(b).shape_str());
  }
  return t.record(
      {a, b},
      [a, b](const Tape<T>& tp) {
        const Tensor<T>& x = tp.value(a);
        const Tensor<T>& y = tp.value(b);
        T s = T(0);
        for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
        return Tensor<T>({1}, std::vector<T>{s});
      },
      [a, b](Tape<T>& tp, const Tensor<T>& g) {
        if (tp.requires_grad(a)) {
          Tensor<T>& ga = tp.grad_buffer(a);
          const Tensor<T>& y = tp.value(b);
          for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * y[i];
        }
        if (tp.requires_grad(b)) {
          Tensor<T>& gb = tp.grad_buffer(b);
          const Tensor<T>& x = tp.value(a);
          for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * x[i];
        }
      });
}

#define SKV1_INSTANTIATE(T)                                                                       \
  template class Tape<T>;                                                                        \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                    \
  template Var add<T>(Tape<T>&, Var, Var);                                                       \
  template Var scale<T>(Tape<T>&, Var, T);                                                       \
  template Var relu<T>(Tape<T>&, Var);                                                           \
  template Var slice_rows<T>(Tape<T>&, Var, size_t, size_t);                                     \
  template Var concat_rows<T>(Tape<T>&, const std::vector<Var>&);                                \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, T);                                        \
  template Var embed<T>(Tape<T>&, Var, const std::vector<TokenId>&);                             \
  template Var positions<T>(Tape<T>&, Var, size_t, size_t);                                      \
  template Var cross_entropy<T>(Tape<T>&, Var, const std::vector<TokenId>&);                     \
  template Var causal_softmax<T>(Tape<T>&, Var, T);                                              \
  template Var rope<T>(Tape<T>&, Var, int, int, size_t);                                         \
  template Var interleave_heads<T>(Tape<T>&, Var, int, Var, int, int, bool);                     \
  template Var assemble_heads<T>(Tape<T>&, Var, Var, const HeadMix&, int);                       \
  template Var causal_attention<T>(Tape<T>&, Var, Var, Var, const AttentionLayout&);             \
  template Var weighted_sum<T>(Tape<T>&, Var, const Tensor<T>&);                                \
  template Var transpose<T>(Tape<T>&, Var);                                                      \
  template Var transposed_kron<T>(Tape<T>&, Var, Var);                                           \
  template Var frobenius_dot<T>(Tape<T>&, Var, Var);

SKV1_INSTANTIATE(float)
SKV1_INSTANTIATE(double)
#undef SKV1_INSTANTIATE

}  // namespace skv1::ad
