// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "skv1/tensor.hpp"

namespace skv1 {

using TokenId = int32_t;

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// aᵀ·b without materializing the transpose.
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

/// a·bᵀ.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scaled(const Tensor<T>& a, T s);

/// a += s·b
template <typename T>
void axpy(Tensor<T>& a, T s, const Tensor<T>& b);

/// Rows [r0, r0+count) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, size_t r0, size_t count);

/// Columns [c0, c0+count) of a matrix.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t c0, size_t count);

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

/// Column-wise softmax of scale·scores with rows i > j masked to exactly 0.
/// Rows index keys and columns index queries.
template <typename T>
Tensor<T> causal_softmax(const Tensor<T>& scores, T scale);

/// Normalizes a single vector.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

/// Normalizes every column of a d×N matrix.
template <typename T>
Tensor<T> layer_norm_cols(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

/// Mean over columns of -log softmax(logits[:, j])[targets[j]].
template <typename T>
T cross_entropy(const Tensor<T>& logits, const std::vector<TokenId>& targets);

/// Central differences of a scalar function.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T h);

/// Rotates consecutive pairs of a `dim`-long strided vector by position-dependent
/// angles pos·base^(-2i/dim). `sign` = -1 applies the inverse rotation.
template <typename T>
void rope_rotate(T* x, size_t stride, size_t dim, size_t pos, T sign, double base = 10000.0);

template <typename T>
bool all_finite(const Tensor<T>& a);

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

/// ‖a-b‖ / max(‖b‖, floor)
template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12);

}  // namespace skv1
