// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/params.hpp"

#include "fabgpt/errors.hpp"

namespace fabgpt {

ag::Var ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  init.quantize_f32();
  ag::Var v = ag::make_param(std::move(init));
  names_.push_back(name);
  index_.emplace(name, v);
  return v;
}

ag::Var ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter name: " + name);
  return it->second;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& name : names_) n += index_.at(name)->value.size();
  return n;
}

void ParamStore::zero_grads() {
  for (const auto& name : names_) {
    auto& node = *index_.at(name);
    if (node.grad_alloc) node.grad.fill(0.0);
  }
}

}  // namespace fabgpt
