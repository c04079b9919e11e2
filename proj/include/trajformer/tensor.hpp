// Copyright 2026 The Trajformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "trajformer/errors.hpp"

namespace trajformer::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Allocator with a fixed 64-byte alignment. Vectorized kernels peel loops
/// according to the data address, so a fixed alignment keeps results
/// bit-reproducible from run to run.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = AlignedAllocator<U, Align>;
  };

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{Align})); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{Align}); }

  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

/**
 * N-dimensional array of doubles in row-major order with an optional gradient
 * buffer.
 *
 * Tensor is a shared handle: copies refer to the same storage, which is how the
 * tape keeps the operands of recorded operations alive. The shape never changes
 * after construction; reshape() in ops.hpp creates a new tensor.
 */
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, Buffer values, bool requires_grad = false) : impl_(std::make_shared<Storage>()) {
    if (std::any_of(shape.begin(), shape.end(), [](std::size_t d) { return d == 0; })) {
      throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
    }
    if (element_count(shape) != values.size()) {
      throw ShapeError("shape " + to_string(shape) + " needs " +
                       std::to_string(element_count(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->value = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}

  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = element_count(shape);
    return Tensor(std::move(shape), Buffer(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value) {
    const std::size_t n = element_count(shape);
    return Tensor(std::move(shape), Buffer(n, value));
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->value.size(); }

  std::span<const double> values() const { return impl_->value; }
  /// In-place access; meant for optimizers and initializers, never for tensors on a live tape.
  std::span<double> mutable_values() { return impl_->value; }
  double value(std::size_t i) const { return impl_->value[i]; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }

  /// Gradient buffer, zero-initialized on first use. Backward rules accumulate into it.
  std::span<double> grad_buffer() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), 0.0);
    return impl_->grad;
  }

  void zero_grad() const { impl_->grad.clear(); }

  /// Deep copy of shape and values; the copy has no gradient.
  Tensor clone() const { return Tensor(shape(), impl_->value, requires_grad()); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Storage {
    Shape shape;
    Buffer value;
    Buffer grad;
    bool requires_grad = false;
  };

  std::shared_ptr<Storage> impl_;
};

/**
 * Ordered record of primitive operations for reverse-mode differentiation.
 *
 * Operations append themselves as they execute, so the record is topologically
 * ordered by construction. backward() replays it in reverse; each entry reads
 * the gradient of its output and accumulates into its inputs.
 */
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward) {
    entries_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  std::span<const Entry> entries() const { return entries_; }
  void clear() { entries_.clear(); }

  void backward(Tensor loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    loss.grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

 private:
  std::vector<Entry> entries_;
};

/// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every reachable tensor.
inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

}  // namespace trajformer::ad
