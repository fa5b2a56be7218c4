/* Copyright 2026 The fwmark Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fwmark/errors.hpp"

namespace fwmark {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Dense row-major array. A BasicTensor is a handle: copies share storage,
// clone() makes a deep copy. Gradient participation is opt-in through
// set_requires_grad(); tensors that do not require grad never hold a
// gradient buffer.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  BasicTensor(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<Impl>()) {
    check_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, value); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) {
      throw DimensionError("axis " + std::to_string(i) +
                           " out of range for shape " + shape_str(shape()));
    }
    return impl().shape[i];
  }
  std::size_t numel() const { return impl().data.size(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  T* ptr() { return impl().data.data(); }
  const T* ptr() const { return impl().data.data(); }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl().data[0];
  }

  bool requires_grad() const { return impl().requires_grad; }

  BasicTensor& set_requires_grad(bool on) {
    impl().requires_grad = on;
    if (!on) clear_grad();
    return *this;
  }

  bool has_grad() const { return !impl().grad.empty(); }

  std::span<const T> grad() const { return impl().grad; }

  // Zero-initialized on first use. Gradient state is bookkeeping, so it is
  // reachable through const handles.
  std::span<T> grad_buffer() const {
    Impl& im = impl();
    if (!im.requires_grad) {
      throw ContractError("gradient requested for tensor that does not "
                          "require grad");
    }
    if (im.grad.empty()) im.grad.assign(im.data.size(), T(0));
    return im.grad;
  }

  void zero_grad() const {
    std::fill(impl().grad.begin(), impl().grad.end(), T(0));
  }

  void clear_grad() const {
    impl().grad.clear();
    impl().grad.shrink_to_fit();
  }

  // Deep copy of values and the requires_grad flag; the gradient is not
  // copied.
  BasicTensor clone() const {
    BasicTensor out(shape(), std::vector<T>(data().begin(), data().end()));
    out.impl_->requires_grad = requires_grad();
    return out;
  }

  BasicTensor detach() const {
    return BasicTensor(shape(), std::vector<T>(data().begin(), data().end()));
  }

  bool is_same(const BasicTensor& other) const { return impl_ == other.impl_; }
  const void* id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  static void check_shape(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) {
        throw ShapeError("zero-sized dimension in shape " + shape_str(shape));
      }
    }
  }

  Impl& impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

// Records differentiable operations executed while a Recording guard for
// this tape is alive on the current thread. backward() replays the record
// in reverse.
template <typename T>
class BasicTape {
 public:
  using Tensor = BasicTensor<T>;
  using Rule = std::function<void()>;

  class Recording {
   public:
    explicit Recording(BasicTape* tape) : previous_(active_) {
      active_ = tape;
    }
    ~Recording() { active_ = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    BasicTape* previous_;
  };

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  [[nodiscard]] Recording record() { return Recording(this); }

  static BasicTape* active() { return active_; }

  // Any input requiring grad marks the output as requiring grad and the
  // op is recorded.
  static bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (active_ == nullptr) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) {
      return t != nullptr && t->defined() && t->requires_grad();
    });
  }

  void push(std::vector<Tensor> inputs, Tensor output, Rule rule) {
    output.set_requires_grad(true);
    entries_.push_back({std::move(inputs), std::move(output), std::move(rule)});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Gradients of leaves accumulate across calls; gradients of recorded
  // intermediates are recomputed from scratch on every call. Each call
  // computes leaf gradients into fresh buffers and adds them to the previous
  // values once at the end, so calling twice yields exactly twice the
  // gradient.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " +
                          shape_str(loss.shape()));
    }
    std::size_t end = 0;
    for (std::size_t i = entries_.size(); i-- > 0;) {
      if (entries_[i].output.is_same(loss)) {
        end = i + 1;
        break;
      }
    }
    if (end == 0) throw ContractError("loss was not recorded on this tape");
    std::unordered_set<const void*> produced;
    for (auto& e : entries_) {
      e.output.clear_grad();
      produced.insert(e.output.id());
    }
    std::vector<std::pair<Tensor, std::vector<T>>> stash;
    std::unordered_set<const void*> seen;
    for (std::size_t i = 0; i < end; ++i) {
      for (const Tensor& in : entries_[i].inputs) {
        if (!in.defined() || !in.requires_grad() || !in.has_grad()) continue;
        if (produced.count(in.id()) || !seen.insert(in.id()).second) continue;
        auto g = in.grad();
        stash.emplace_back(in, std::vector<T>(g.begin(), g.end()));
        in.clear_grad();
      }
    }
    Tensor seed = loss;
    seed.grad_buffer()[0] = T(1);
    for (std::size_t i = end; i-- > 0;) {
      if (entries_[i].output.has_grad()) entries_[i].rule();
    }
    for (auto& [leaf, previous] : stash) {
      auto g = leaf.grad_buffer();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] = previous[j] + g[j];
    }
  }

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    Rule rule;
  };

  std::vector<Entry> entries_;
  inline static thread_local BasicTape* active_ = nullptr;
};

template <typename T>
void backward(const BasicTensor<T>& loss, BasicTape<T>& tape) {
  tape.backward(loss);
}

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;

}  // namespace fwmark
