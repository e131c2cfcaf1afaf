#pragma once

#include <map>
#include <string>
#include <vector>

#include "uasr/tensor.hpp"

namespace uasr {

// Named parameter tensors, iterated in name order so that every walk over
// the store (init, optimizer, serialization) is deterministic.
class ParamStore {
 public:
  void add(const std::string& name, Tensor t) {
    if (!by_name_.emplace(name, std::move(t)).second)
      throw ContractError("duplicate parameter name: " + name);
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end())
      throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end())
      throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  std::size_t size() const { return by_name_.size(); }

  auto begin() { return by_name_.begin(); }
  auto end() { return by_name_.end(); }
  auto begin() const { return by_name_.begin(); }
  auto end() const { return by_name_.end(); }

  void zero_all_grads() {
    for (auto& [name, t] : by_name_) t.zero_grad();
  }

 private:
  std::map<std::string, Tensor> by_name_;
};

}  // namespace uasr
