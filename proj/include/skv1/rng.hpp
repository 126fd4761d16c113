// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

#include "skv1/tensor.hpp"

namespace skv1 {

/// Seeded generator shared by initialization, sampling and tests.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  uint64_t next() { return engine_(); }
  /// Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return std::uniform_int_distribution<uint64_t>(0, n - 1)(engine_); }

  template <typename T>
  Tensor<T> normal_tensor(std::vector<size_t> shape, double std = 1.0) {
    Tensor<T> out(std::move(shape));
    for (auto& v : out.storage()) v = static_cast<T>(std * normal());
    return out;
  }

  /// Derives an independent stream, used to give each Monte-Carlo chunk its own generator.
  static uint64_t stream_seed(uint64_t seed, uint64_t stream) {
    std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(stream),
                      static_cast<uint32_t>(stream >> 32), 0x5eedu};
    uint32_t parts[2];
    seq.generate(parts, parts + 2);
    return (static_cast<uint64_t>(parts[0]) << 32) | parts[1];
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace skv1
