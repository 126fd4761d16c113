// Copyright (C) 2026 The skv1 authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "skv1/model.hpp"

namespace skv1 {

// Layout, all integers little-endian:
//   "SKV1" | u32 version | u32 config bytes | config text (key=value lines)
//   u32 tensor count | per tensor: u32 name bytes | name | u32 rank | u64 extents[rank] | f32 data
inline constexpr uint32_t kCheckpointVersion = 1;

std::vector<char> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace skv1
