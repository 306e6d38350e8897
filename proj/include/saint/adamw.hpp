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

#include <cmath>
#include <vector>

#include "saint/params.hpp"

namespace saint {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.01;
  double epsilon = 1e-8;
};

/// AdamW with decoupled weight decay: the decay term is applied to the
/// parameter directly and never enters the moment estimates.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<ParameterStore<T>*> stores, AdamWConfig cfg = {})
      : stores_(std::move(stores)), cfg_(cfg) {
    for (ParameterStore<T>* store : stores_) {
      for (auto& e : store->entries()) {
        moments_.push_back(Slot{&e.tensor,
                                std::vector<T>(static_cast<std::size_t>(e.tensor.numel()), T(0)),
                                std::vector<T>(static_cast<std::size_t>(e.tensor.numel()), T(0))});
      }
    }
  }

  explicit AdamW(ParameterStore<T>& store, AdamWConfig cfg = {})
      : AdamW(std::vector<ParameterStore<T>*>{&store}, cfg) {}

  std::int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Slot& slot : moments_) {
      auto w = slot.param->raw_values();
      auto g = slot.param->grad();
      if (g.size() != w.size()) {
        throw ContractError("adamw: gradient/parameter size mismatch");
      }
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        double m = cfg_.beta1 * static_cast<double>(slot.m[i]) + (1.0 - cfg_.beta1) * gi;
        double v = cfg_.beta2 * static_cast<double>(slot.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        slot.m[i] = static_cast<T>(m);
        slot.v[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        const double update = mhat / (std::sqrt(vhat) + cfg_.epsilon) +
                              cfg_.weight_decay * static_cast<double>(w[i]);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg_.lr * update);
      }
    }
  }

  void zero_grad() {
    for (ParameterStore<T>* store : stores_) store->zero_grad();
  }

 private:
  struct Slot {
    Tensor<T>* param;
    std::vector<T> m;
    std::vector<T> v;
  };
  std::vector<ParameterStore<T>*> stores_;
  AdamWConfig cfg_;
  std::vector<Slot> moments_;
  std::int64_t t_ = 0;
};

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
/// A no-op when max_norm <= 0.
template <typename T>
double clip_grad_norm(std::vector<ParameterStore<T>*> stores, double max_norm) {
  double sq = 0.0;
  for (ParameterStore<T>* store : stores) {
    for (auto& e : store->entries()) {
      for (T g : e.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (ParameterStore<T>* store : stores) {
      for (auto& e : store->entries()) {
        for (T& g : e.tensor.raw_grad()) g *= s;
      }
    }
  }
  return norm;
}

}  // namespace saint
