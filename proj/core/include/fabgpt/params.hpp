// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fabgpt/autograd.hpp"

namespace fabgpt {

// Ordered registry of trainable parameters. Values are snapped to the
// float32 grid on insertion and after every optimizer step, so checkpoints
// (stored as float32) restore the exact training state.
class ParamStore {
 public:
  ag::Var add(const std::string& name, Tensor init);
  ag::Var get(const std::string& name) const;  // throws on unknown name
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t total_size() const;
  void zero_grads();

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, ag::Var> index_;
};

}  // namespace fabgpt
