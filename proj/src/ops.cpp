// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "skv1/kernels.hpp"

namespace skv1 {

namespace {

template <typename T>
void require_matrix(const Tensor<T>& a, const char* what) {
  if (a.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + a.shape_str());
}

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) throw DimensionError(std::string(what) + ": shapes " + a.shape_str() + " and " + b.shape_str());
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ for " + a.shape_str() + " x " + b.shape_str());
  }
  Tensor<T> c = Tensor<T>::matrix(a.rows(), b.cols());
  kernels::gemm_nn(a.rows(), a.cols(), b.cols(), a.data(), b.data(), c.data());
  return c;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: inner extents differ for " + a.shape_str() + "^T x " + b.shape_str());
  }
  Tensor<T> c = Tensor<T>::matrix(a.cols(), b.cols());
  kernels::gemm_tn(a.cols(), a.rows(), b.cols(), a.data(), b.data(), c.data());
  return c;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: inner extents differ for " + a.shape_str() + " x " + b.shape_str() + "^T");
  }
  Tensor<T> c = Tensor<T>::matrix(a.rows(), b.rows());
  kernels::gemm_nt(a.rows(), a.cols(), b.rows(), a.data(), b.data(), c.data());
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  Tensor<T> out = Tensor<T>::matrix(a.cols(), a.rows());
  kernels::transpose(a.rows(), a.cols(), a.data(), out.data());
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  Tensor<T> out = a;
  for (size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  Tensor<T> out = a;
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
Tensor<T> scaled(const Tensor<T>& a, T s) {
  Tensor<T> out = a;
  for (auto& v : out.storage()) v *= s;
  return out;
}

template <typename T>
void axpy(Tensor<T>& a, T s, const Tensor<T>& b) {
  require_same(a, b, "axpy");
  for (size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t r0, size_t count) {
  require_matrix(a, "slice_rows");
  if (r0 + count > a.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(r0) + ", " + std::to_string(r0 + count) +
                         ") out of " + a.shape_str());
  }
  Tensor<T> out = Tensor<T>::matrix(count, a.cols());
  std::copy(a.row(r0), a.row(r0) + count * a.cols(), out.data());
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t c0, size_t count) {
  require_matrix(a, "slice_cols");
  if (c0 + count > a.cols()) {
    throw DimensionError("slice_cols: cols [" + std::to_string(c0) + ", " + std::to_string(c0 + count) +
                         ") out of " + a.shape_str());
  }
  Tensor<T> out = Tensor<T>::matrix(a.rows(), count);
  for (size_t i = 0; i < a.rows(); ++i) std::copy(a.row(i) + c0, a.row(i) + c0 + count, out.row(i));
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) return {};
  const size_t cols = parts.front().cols();
  size_t rows = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Tensor<T> out = Tensor<T>::matrix(rows, cols);
  T* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.size(), dst);
  return out;
}

template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& scores, T scale) {
  require_matrix(scores, "causal_softmax");
  const size_t n = scores.rows();
  if (scores.cols() != n) throw DimensionError("causal_softmax: non-square scores " + scores.shape_str());
  Tensor<T> out = Tensor<T>::matrix(n, n);
  for (size_t j = 0; j < n; ++j) {
    T mx = -std::numeric_limits<T>::infinity();
    for (size_t i = 0; i <= j; ++i) mx = std::max(mx, scale * scores(i, j));
    T sum = T(0);
    for (size_t i = 0; i <= j; ++i) {
      const T e = std::exp(scale * scores(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    for (size_t i = 0; i <= j; ++i) out(i, j) /= sum;
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.size() == 0) throw DimensionError("layer_norm: empty input");
  Tensor<T> col({x.size(), 1}, x.storage());
  Tensor<T> out = layer_norm_cols(col, gain, bias, eps);
  return Tensor<T>(x.shape(), out.storage());
}

template <typename T>
Tensor<T> layer_norm_cols(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_matrix(x, "layer_norm_cols");
  const size_t d = x.rows(), n = x.cols();
  if (d == 0) throw DimensionError("layer_norm: empty input");
  if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm: gain/bias length differs from " + x.shape_str());
  Tensor<T> out = Tensor<T>::matrix(d, n);
  std::vector<T> mean(n, T(0)), var(n, T(0));
  for (size_t i = 0; i < d; ++i)
    for (size_t j = 0; j < n; ++j) mean[j] += x(i, j);
  for (size_t j = 0; j < n; ++j) mean[j] /= static_cast<T>(d);
  for (size_t i = 0; i < d; ++i)
    for (size_t j = 0; j < n; ++j) {
      const T c = x(i, j) - mean[j];
      var[j] += c * c;
    }
  for (size_t j = 0; j < n; ++j) var[j] = T(1) / std::sqrt(var[j] / static_cast<T>(d) + eps);
  for (size_t i = 0; i < d; ++i)
    for (size_t j = 0; j < n; ++j) out(i, j) = gain[i] * ((x(i, j) - mean[j]) * var[j]) + bias[i];
  return out;
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, const std::vector<TokenId>& targets) {
  require_matrix(logits, "cross_entropy");
  const size_t v = logits.rows(), n = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                                                " targets for logits " + logits.shape_str());
  if (n == 0) return T(0);
  T total = T(0);
  for (size_t j = 0; j < n; ++j) {
    const TokenId t = targets[j];
    if (t < 0 || static_cast<size_t>(t) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " at position " + std::to_string(j) +
                       " outside vocabulary of " + std::to_string(v));
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (size_t i = 0; i < v; ++i) mx = std::max(mx, logits(i, j));
    T sum = T(0);
    for (size_t i = 0; i < v; ++i) sum += std::exp(logits(i, j) - mx);
    total += std::log(sum) + mx - logits(static_cast<size_t>(t), j);
  }
  return total / static_cast<T>(n);
}

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h) {
  if (!(h > T(0))) throw NumericError("finite_diff_grad: step must be positive");
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const T fp = f(probe);
    probe[i] = orig - h;
    const T fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i),
                         static_cast<long>(i));
    }
    g[i] = (fp - fm) / (T(2) * h);
  }
  return g;
}

template <typename T>
void rope_rotate(T* x, size_t stride, size_t dim, size_t pos, T sign, double base) {
  for (size_t i = 0; i + 1 < dim; i += 2) {
    const double theta = static_cast<double>(pos) * std::pow(base, -static_cast<double>(i) / static_cast<double>(dim));
    const T c = static_cast<T>(std::cos(theta));
    const T s = sign * static_cast<T>(std::sin(theta));
    T& a = x[i * stride];
    T& b = x[(i + 1) * stride];
    const T a0 = a, b0 = b;
    a = a0 * c - b0 * s;
    b = a0 * s + b0 * c;
  }
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.storage().begin(), a.storage().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "max_abs_diff");
  T m = T(0);
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor) {
  require_same(a, b, "relative_error");
  double num = 0, den = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    num += d * d;
    den += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  return std::sqrt(num) / std::max(std::sqrt(den), floor);
}

#define SKV1_INSTANTIATE(T)                                                                            \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> matmul_tn<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scaled<T>(const Tensor<T>&, T);                                                  \
  template void axpy<T>(Tensor<T>&, T, const Tensor<T>&);                                             \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, size_t, size_t);                                 \
  template Tensor<T> slice_cols<T>(const Tensor<T>&, size_t, size_t);                                 \
  template Tensor<T> concat_rows<T>(const std::vector<Tensor<T>>&);                                   \
  template Tensor<T> causal_softmax<T>(const Tensor<T>&, T);                                          \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> layer_norm_cols<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template T cross_entropy<T>(const Tensor<T>&, const std::vector<TokenId>&);                         \
  template Tensor<T> finite_diff_grad<T>(const std::function<T(const Tensor<T>&)>&, const Tensor<T>&, T); \
  template void rope_rotate<T>(T*, size_t, size_t, size_t, T, double);                                \
  template bool all_finite<T>(const Tensor<T>&);                                                      \
  template T max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template double relative_error<T>(const Tensor<T>&, const Tensor<T>&, double);

SKV1_INSTANTIATE(float)
SKV1_INSTANTIATE(double)
#undef SKV1_INSTANTIATE

}  // namespace skv1
