// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace skv1::kernels {

// All kernels write C (overwrite, never accumulate into it) and sum each output
// element over the shared index in increasing order starting from zero. The
// serial and parallel variants therefore produce bit-identical results.
//
// gemm_nn: C[m×n] = A[m×k] · B[k×n]
// gemm_tn: C[m×n] = A[k×m]ᵀ · B[k×n]
// gemm_nt: C[m×n] = A[m×k] · B[n×k]ᵀ

namespace serial {

template <typename T>
void gemm_nn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c);
template <typename T>
void gemm_tn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c);
template <typename T>
void gemm_nt(size_t m, size_t k, size_t n, const T* a, const T* b, T* c);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm_nn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c);
template <typename T>
void gemm_tn(size_t m, size_t k, size_t n, const T* a, const T* b, T* c);
template <typename T>
void gemm_nt(size_t m, size_t k, size_t n, const T* a, const T* b, T* c);

}  // namespace parallel

// Default dispatch used by the library.
using parallel::gemm_nn;
using parallel::gemm_nt;
using parallel::gemm_tn;

template <typename T>
void transpose(size_t rows, size_t cols, const T* src, T* dst);

}  // namespace skv1::kernels
