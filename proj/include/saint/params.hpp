/*
 * Copyright (c) 2026 The saintcpp Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "saint/rng.hpp"
#include "saint/tensor.hpp"

namespace saint {

/// Registry of named leaf tensors. Iteration order is creation order, which
/// makes initialization, optimizer sweeps and serialization deterministic.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  Tensor<T>& create(const std::string& name, Shape shape) {
    if (index_.count(name)) {
      throw ContractError("parameter '" + name + "' already registered");
    }
    entries_.push_back({name, Tensor<T>::zeros(std::move(shape), true)});
    index_[name] = entries_.size() - 1;
    return entries_.back().tensor;
  }

  Tensor<T>& create_truncated_normal(const std::string& name, Shape shape,
                                     Rng& rng, double stddev = 0.02) {
    Tensor<T>& t = create(name, std::move(shape));
    for (T& v : t.raw_values()) v = static_cast<T>(rng.truncated_normal(stddev));
    return t;
  }

  Tensor<T>& create_full(const std::string& name, Shape shape, T value) {
    Tensor<T>& t = create(name, std::move(shape));
    for (T& v : t.raw_values()) v = value;
    return t;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractError("unknown parameter '" + name + "'");
    }
    return entries_[it->second].tensor;
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContractError("unknown parameter '" + name + "'");
    }
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// Deep copy of all parameter values, e.g. for best-epoch snapshots.
  std::vector<std::pair<std::string, std::vector<T>>> snapshot() const {
    std::vector<std::pair<std::string, std::vector<T>>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) {
      auto v = e.tensor.values();
      out.emplace_back(e.name, std::vector<T>(v.begin(), v.end()));
    }
    return out;
  }

  void restore(const std::vector<std::pair<std::string, std::vector<T>>>& snap) {
    for (const auto& [name, values] : snap) {
      Tensor<T>& t = get(name);
      if (static_cast<std::int64_t>(values.size()) != t.numel()) {
        throw ContractError("restore: size mismatch for parameter '" + name + "'");
      }
      std::copy(values.begin(), values.end(), t.raw_values().begin());
    }
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace saint
