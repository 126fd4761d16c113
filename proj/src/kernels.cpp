// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#include "skv1/kernels.hpp"

#include <algorithm>
#include <vector>

namespace skv1::kernels {

namespace {
constexpr size_t kRowBlock = 4;
constexpr size_t kColBlock = 512;
// Below this many multiply-adds the thread fork costs more than it saves.
constexpr size_t kParallelWork = size_t{1} << 15;
}  // namespace

namespace serial {

template <typename T>
void gemm_nn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c) {
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      T s = T(0);
      for (size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

template <typename T>
void gemm_tn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c) {
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      T s = T(0);
      for (size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

template <typename T>
void gemm_nt(size_t m, size_t k, size_t n, const T* a, const T* b, T* c) {
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) {
      T s = T(0);
      for (size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = s;
    }
  }
}

}  // namespace serial

namespace parallel {

namespace {

// Computes rows [i0, i0+rb) of C. `a_at(r, p)` returns A's coefficient for
// output row i0+r and reduction index p.
template <typename T, typename AAt>
inline void row_block(size_t rb, size_t k, size_t n, AAt a_at, const T* b, T* c_rows) {
  for (size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const size_t j1 = std::min(n, j0 + kColBlock);
    for (size_t r = 0; r < rb; ++r) std::fill(c_rows + r * n + j0, c_rows + r * n + j1, T(0));
    if (rb == kRowBlock) {
      T* c0 = c_rows;
      T* c1 = c_rows + n;
      T* c2 = c_rows + 2 * n;
      T* c3 = c_rows + 3 * n;
      for (size_t p = 0; p < k; ++p) {
        const T a0 = a_at(0, p), a1 = a_at(1, p), a2 = a_at(2, p), a3 = a_at(3, p);
        const T* bp = b + p * n;
        for (size_t j = j0; j < j1; ++j) {
          const T bv = bp[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    } else {
      for (size_t r = 0; r < rb; ++r) {
        T* cr = c_rows + r * n;
        for (size_t p = 0; p < k; ++p) {
          const T av = a_at(r, p);
          const T* bp = b + p * n;
          for (size_t j = j0; j < j1; ++j) cr[j] += av * bp[j];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_nn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c) {
  const long blocks = static_cast<long>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (long blk = 0; blk < blocks; ++blk) {
    const size_t i0 = static_cast<size_t>(blk) * kRowBlock;
    const size_t rb = std::min(kRowBlock, m - i0);
    auto a_at = [&](size_t r, size_t p) { return a[(i0 + r) * k + p]; };
    row_block<T>(rb, k, n, a_at, b, c + i0 * n);
  }
}

template <typename T>
void gemm_tn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c) {
  const long blocks = static_cast<long>((m + kRowBlock - 1) / kRowBlock);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (long blk = 0; blk < blocks; ++blk) {
    const size_t i0 = static_cast<size_t>(blk) * kRowBlock;
    const size_t rb = std::min(kRowBlock, m - i0);
    auto a_at = [&](size_t r, size_t p) { return a[p * m + i0 + r]; };
    row_block<T>(rb, k, n, a_at, b, c + i0 * n);
  }
}

template <typename T>
void gemm_nt(size_t m, size_t k, size_t n, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);
  transpose(n, k, b, bt.data());
  gemm_nn(m, k, n, a, bt.data(), c);
}

}  // namespace parallel

template <typename T>
void transpose(size_t rows, size_t cols, const T* src, T* dst) {
  constexpr size_t tile = 32;
  for (size_t i0 = 0; i0 < rows; i0 += tile) {
    const size_t i1 = std::min(rows, i0 + tile);
    for (size_t j0 = 0; j0 < cols; j0 += tile) {
      const size_t j1 = std::min(cols, j0 + tile);
      for (size_t i = i0; i < i1; ++i)
        for (size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

#define SKV1_INSTANTIATE(T)                                                      \
  template void serial::gemm_nn<T>(size_t, size_t, size_t, const T*, const T*, T*);   \
  template void serial::gemm_tn<T>(size_t, size_t, size_t, const T*, const T*, T*);   \
  template void serial::gemm_nt<T>(size_t, size_t, size_t, const T*, const T*, T*);   \
  template void parallel::gemm_nn<T>(size_t, size_t, size_t, const T*, const T*, T*); \
  template void parallel::gemm_tn<T>(size_t, size_t, size_t, const T*, const T*, T*); \
  template void parallel::gemm_nt<T>(size_t, size_t, size_t, const T*, const T*, T*); \
  template void transpose<T>(size_t, size_t, const T*, T*);

SKV1_INSTANTIATE(float)
SKV1_INSTANTIATE(double)
#undef SKV1_INSTANTIATE

}  // namespace skv1::kernels
