// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "skv1/errors.hpp"

namespace skv1 {

/// Dense row-major array. Matrices are rank 2 with shape {rows, cols};
/// activations are stored feature-major, one token per column.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::vector<size_t> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                           shape_string(shape_));
    }
  }

  static Tensor matrix(size_t rows, size_t cols, T fill = T(0)) { return Tensor({rows, cols}, fill); }
  static Tensor vector(size_t n, T fill = T(0)) { return Tensor({n}, fill); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const size_t r = rows.size();
    const size_t c = r ? rows.begin()->size() : 0;
    Tensor out = matrix(r, c);
    size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
      size_t j = 0;
      for (T v : row) out(i, j++) = v;
      ++i;
    }
    return out;
  }

  static Tensor identity(size_t n) {
    Tensor out = matrix(n, n);
    for (size_t i = 0; i < n; ++i) out(i, i) = T(1);
    return out;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-1 tensors behave as column vectors.
  size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  size_t cols() const { return shape_.size() >= 2 ? shape_[1] : (shape_.empty() ? 0 : 1); }

  T& operator()(size_t i, size_t j) { return data_[i * cols() + j]; }
  const T& operator()(size_t i, size_t j) const { return data_[i * cols() + j]; }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  T* row(size_t i) { return data_.data() + i * cols(); }
  const T* row(size_t i) const { return data_.data() + i * cols(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool operator==(const Tensor& o) const = default;

  std::string shape_str() const { return shape_string(shape_); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  static size_t count(const std::vector<size_t>& s) {
    return std::accumulate(s.begin(), s.end(), size_t{1}, std::multiplies<>());
  }

  static std::string shape_string(const std::vector<size_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

 private:
  std::vector<size_t> shape_;
  std::vector<T> data_;
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace skv1
