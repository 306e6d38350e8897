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

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "saint/common.hpp"

namespace saint {

template <typename T>
class Tape;

namespace detail {

/// Shared value/gradient block behind a Tensor. Gradients live next to the
/// values so that backward closures only need to capture storage handles.
template <typename T>
struct Storage {
  std::vector<T> values;
  std::vector<T> grad;  // empty until first needed
  bool requires_grad = false;
  const void* tape = nullptr;  // tape that recorded the producing op
  std::int64_t node = -1;      // record index on that tape

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
};

}  // namespace detail

/// Dense n-dimensional array of a real scalar type, optionally participating
/// in reverse-mode differentiation on the active Tape. Copies are shallow:
/// they alias the same storage.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad, /*fill*/ T(0));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    return Tensor(std::move(shape), {}, requires_grad, value);
  }

  static Tensor from_values(Shape shape, std::vector<T> values,
                            bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
      throw ShapeError("Tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->values = std::move(values);
    t.st_->requires_grad = requires_grad;
    if (requires_grad) t.st_->ensure_grad();
    return t;
  }

  static Tensor scalar(T value) { return full({}, value); }

  /// A tensor aliasing `other`'s storage under a different shape; gradients
  /// flow through the shared buffer without a tape record.
  static Tensor view_as(const Tensor& other, Shape new_shape) {
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.st_ = other.st_;
    return t;
  }

  bool defined() const { return static_cast<bool>(st_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }

  std::int64_t dim(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank()) {
      throw IndexError("Tensor::dim: axis out of range for " +
                       shape_str(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
  }

  std::int64_t numel() const {
    return st_ ? static_cast<std::int64_t>(st_->values.size()) : 0;
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }

  std::span<const T> values() const { return {st_->values}; }

  /// Mutable access to raw values; used by the optimizer and loaders.
  /// Mutating a tensor that is already recorded on a live tape invalidates
  /// that tape's saved activations.
  std::span<T> raw_values() { return {st_->values}; }

  std::span<const T> grad() const {
    st_->ensure_grad();
    return {st_->grad};
  }

  std::span<T> raw_grad() {
    st_->ensure_grad();
    return {st_->grad};
  }

  void zero_grad() {
    if (st_ && !st_->grad.empty()) st_->grad.assign(st_->values.size(), T(0));
  }

  T item() const {
    if (numel() != 1) {
      throw ContractError("Tensor::item: tensor has " +
                          std::to_string(numel()) + " elements");
    }
    return st_->values[0];
  }

  T at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
      throw IndexError("Tensor::at: rank mismatch");
    }
    std::int64_t flat = 0;
    int axis = 0;
    for (std::int64_t i : idx) {
      if (i < 0 || i >= shape_[static_cast<std::size_t>(axis)]) {
        throw IndexError("Tensor::at: index out of range");
      }
      flat = flat * shape_[static_cast<std::size_t>(axis)] + i;
      ++axis;
    }
    return st_->values[static_cast<std::size_t>(flat)];
  }

  // Internal: shared storage handle, used by ops and the tape.
  const std::shared_ptr<detail::Storage<T>>& storage() const { return st_; }

 private:
  Tensor(Shape shape, std::vector<T>, bool requires_grad, T fill) {
    shape_ = std::move(shape);
    st_ = std::make_shared<detail::Storage<T>>();
    st_->values.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
    st_->requires_grad = requires_grad;
    if (requires_grad) st_->ensure_grad();
  }

  Shape shape_;
  std::shared_ptr<detail::Storage<T>> st_;
};

/// Ordered record of forward ops for one define-by-run pass. Records are
/// appended in execution order, so topological order holds by construction;
/// backward() walks them in reverse exactly once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::int64_t size() const {
    return static_cast<std::int64_t>(records_.size());
  }

  std::int64_t push_record(const char* op, std::function<void()> fn) {
    records_.push_back({op, std::move(fn)});
    return static_cast<std::int64_t>(records_.size()) - 1;
  }

  /// Populates gradients of everything reachable from `loss`. Leaves that
  /// require grad but are unreachable keep their zero buffers.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward: loss must be a defined scalar tensor");
    }
    if (loss.storage()->tape != this) {
      throw ContractError("backward: loss was not produced on this tape");
    }
    if (ran_) {
      throw ContractError("backward: tape already consumed");
    }
    ran_ = true;
    loss.storage()->ensure_grad();
    loss.storage()->grad[0] = T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      it->fn();
    }
  }

 private:
  struct Record {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Record> records_;
  bool ran_ = false;
};

namespace detail {

template <typename T>
inline Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace detail

template <typename T>
inline Tape<T>* active_tape() {
  return detail::active_tape_slot<T>();
}

/// RAII guard making a tape the active one for the current thread. Ops
/// executed while a tape is active record themselves onto it; with no active
/// tape, ops run in pure inference mode.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace saint
