// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "skv1/model.hpp"

namespace skv1 {

enum class ConversionStrategy { MeanV, MeanVO, TopV, TopVO, SVD };

std::string to_string(ConversionStrategy s);
ConversionStrategy parse_strategy(const std::string& s);
const std::vector<ConversionStrategy>& all_strategies();

/// Turns a multi-head checkpoint into a second-half value-skip checkpoint.
/// Layer 1 and every non-attention tensor are copied verbatim. In layers
/// 2..L the H' local value heads are built from the original heads:
///   MeanV   local head j = mean of heads 2j and 2j+1; W_O unchanged.
///   MeanVO  as MeanV, local W_O column blocks are the matching pair means and
///           the column blocks of slots fed by layer 1 are zeroed.
///   TopV    the H' heads of largest Frobenius norm, in index order.
///   TopVO   TopV for W_V; local W_O column blocks are the H' blocks of
///           largest Frobenius norm, in index order.
///   SVD     local W_O columns and W_V rows factor the best rank H'·d_H
///           approximation of the original W_O·W_V, split as U√Σ and √ΣVᵀ.
/// Slots fed by layer 1 keep their original W_O columns except under MeanVO.
Checkpoint convert(const Checkpoint& mha, ConversionStrategy strategy, double ratio = 0.5);

}  // namespace skv1
