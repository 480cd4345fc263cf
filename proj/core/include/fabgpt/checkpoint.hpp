// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fabgpt/tensor.hpp"
#include "json.hpp"

namespace fabgpt {

// A self-contained training snapshot: the effective config, the vocabulary
// word list, and every named tensor (parameters, optimizer moments, frozen
// encoder weights). Values are stored as little-endian f32, matching the
// in-memory quantization, so a save/load round trip is bit-exact.
struct Checkpoint {
  std::uint64_t step = 0;
  nlohmann::json config;
  std::vector<std::string> vocab_tokens;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

// Writes to a temporary sibling and renames, so readers never observe a
// partial file. Throws IoError on filesystem failure.
void save_checkpoint(const std::string& path, const Checkpoint& c);

// Throws IoError when unreadable and FormatError on a damaged or
// version-mismatched file (bad magic, truncation, malformed header).
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fabgpt
