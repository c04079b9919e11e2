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

// Differentiable primitives. Every function takes an optional Tape*; when the
// tape is null, or no input requires a gradient, nothing is recorded and the
// result is a plain value.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "trajformer/errors.hpp"
#include "trajformer/random.hpp"
#include "trajformer/tensor.hpp"

namespace trajformer::ad {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using ConstRowVectorMap = Eigen::Map<const Eigen::RowVectorXd>;
using RowVectorMap = Eigen::Map<Eigen::RowVectorXd>;

inline ConstMatrixMap matrix(std::span<const double> s, std::size_t rows, std::size_t cols,
                             std::size_t offset = 0) {
  return {s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

inline MatrixMap matrix(std::span<double> s, std::size_t rows, std::size_t cols,
                        std::size_t offset = 0) {
  return {s.data() + offset, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

inline bool tracks(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + to_string(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_axis(const Tensor& t, std::size_t axis, const char* op) {
  if (axis >= t.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + to_string(t.shape()));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Forward>
Tensor elementwise_unary(const Tensor& a, Tape* tape, Forward f) {
  Buffer out(a.size());
  const auto x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor(a.shape(), std::move(out), tracks(tape, {&a}));
}

}  // namespace detail

/// [m,k] x [k,n] -> [m,n].
inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  detail::matrix(std::span<double>(out), m, n).noalias() =
      detail::matrix(a.values(), m, k) * detail::matrix(b.values(), k, n);
  Tensor y({m, n}, std::move(out), detail::tracks(tape, {&a, &b}));
  if (y.requires_grad()) {
    tape->record("matmul", {a, b}, y, [a, b, y, m, k, n]() mutable {
      const auto dy = detail::matrix(y.grad(), m, n);
      if (a.requires_grad()) {
        detail::matrix(a.grad_buffer(), m, k).noalias() += dy * detail::matrix(b.values(), k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::matrix(b.grad_buffer(), k, n).noalias() += detail::matrix(a.values(), m, k).transpose() * dy;
      }
    });
  }
  return y;
}

/// Affine map applied to each row: x[m,k] * w[k,n] + bias[n]. `bias` may be undefined.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias, Tape* tape = nullptr) {
  detail::require_rank(x, 2, "linear");
  detail::require_rank(w, 2, "linear");
  if (x.dim(1) != w.dim(0)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not match weight " +
                     to_string(w.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                     to_string(w.shape()));
  }
  Buffer out(m * n);
  auto ym = detail::matrix(std::span<double>(out), m, n);
  ym.noalias() = detail::matrix(x.values(), m, k) * detail::matrix(w.values(), k, n);
  if (bias.defined()) {
    ym.rowwise() += detail::ConstRowVectorMap(bias.values().data(), static_cast<Eigen::Index>(n));
  }
  Tensor y({m, n}, std::move(out), detail::tracks(tape, {&x, &w, &bias}));
  if (y.requires_grad()) {
    std::vector<Tensor> inputs{x, w};
    if (bias.defined()) inputs.push_back(bias);
    tape->record("linear", std::move(inputs), y, [x, w, bias, y, m, k, n]() mutable {
      const auto dy = detail::matrix(y.grad(), m, n);
      if (x.requires_grad()) {
        detail::matrix(x.grad_buffer(), m, k).noalias() += dy * detail::matrix(w.values(), k, n).transpose();
      }
      if (w.requires_grad()) {
        detail::matrix(w.grad_buffer(), k, n).noalias() += detail::matrix(x.values(), m, k).transpose() * dy;
      }
      if (bias.defined() && bias.requires_grad()) {
        auto db = bias.grad_buffer();
        detail::RowVectorMap(db.data(), static_cast<Eigen::Index>(n)) += dy.colwise().sum();
      }
    });
  }
  return y;
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) + b.value(i);
  Tensor y(a.shape(), std::move(out), detail::tracks(tape, {&a, &b}));
  if (y.requires_grad()) {
    tape->record("add", {a, b}, y, [a, b, y]() mutable {
      const auto dy = y.grad();
      for (const Tensor* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto g = t->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
    });
  }
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::require_same_shape(a, b, "sub");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) - b.value(i);
  Tensor y(a.shape(), std::move(out), detail::tracks(tape, {&a, &b}));
  if (y.requires_grad()) {
    tape->record("sub", {a, b}, y, [a, b, y]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= dy[i];
      }
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value(i) * b.value(i);
  Tensor y(a.shape(), std::move(out), detail::tracks(tape, {&a, &b}));
  if (y.requires_grad()) {
    tape->record("mul", {a, b}, y, [a, b, y]() mutable {
      const auto dy = y.grad();
      if (a.requires_grad()) {
        auto g = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * b.value(i);
      }
      if (b.requires_grad()) {
        auto g = b.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * a.value(i);
      }
    });
  }
  return y;
}

inline Tensor scale(const Tensor& a, double factor, Tape* tape = nullptr) {
  Tensor y = detail::elementwise_unary(a, tape, [factor](double v) { return v * factor; });
  if (y.requires_grad()) {
    tape->record("scale", {a}, y, [a, y, factor]() mutable {
      const auto dy = y.grad();
      auto g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * dy[i];
    });
  }
  return y;
}

/// max(x, 0); the derivative at exactly 0 is taken as 0.
inline Tensor relu(const Tensor& a, Tape* tape = nullptr) {
  Tensor y = detail::elementwise_unary(a, tape, [](double v) { return v > 0.0 ? v : 0.0; });
  if (y.requires_grad()) {
    tape->record("relu", {a}, y, [a, y]() mutable {
      const auto dy = y.grad();
      auto g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a.value(i) > 0.0) g[i] += dy[i];
      }
    });
  }
  return y;
}

/// Elementwise square root of non-negative values; the derivative at 0 is taken as 0.
inline Tensor sqrt(const Tensor& a, Tape* tape = nullptr) {
  Tensor y = detail::elementwise_unary(a, tape, [](double v) { return std::sqrt(v); });
  if (y.requires_grad()) {
    tape->record("sqrt", {a}, y, [a, y]() mutable {
      const auto dy = y.grad();
      auto g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double r = y.value(i);
        if (r > 0.0) g[i] += dy[i] * 0.5 / r;
      }
    });
  }
  return y;
}

inline Tensor sum(const Tensor& a, Tape* tape = nullptr) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  Tensor y({1}, {total}, detail::tracks(tape, {&a}));
  if (y.requires_grad()) {
    tape->record("sum", {a}, y, [a, y]() mutable {
      const double dy = y.grad()[0];
      for (double& g : a.grad_buffer()) g += dy;
    });
  }
  return y;
}

inline Tensor mean(const Tensor& a, Tape* tape = nullptr) {
  return scale(sum(a, tape), 1.0 / static_cast<double>(a.size()), tape);
}

/// Numerically stable softmax along `axis` (max subtracted before exp).
inline Tensor softmax(const Tensor& a, std::size_t axis, Tape* tape = nullptr) {
  detail::require_axis(a, axis, "softmax");
  const auto s = detail::split_at(a.shape(), axis);
  const auto x = a.values();
  Buffer out(a.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.inner; ++j) {
      const std::size_t base = o * s.extent * s.inner + j;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.extent; ++i) peak = std::max(peak, x[base + i * s.inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < s.extent; ++i) {
        const double e = std::exp(x[base + i * s.inner] - peak);
        out[base + i * s.inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < s.extent; ++i) out[base + i * s.inner] /= total;
    }
  }
  Tensor y(a.shape(), std::move(out), detail::tracks(tape, {&a}));
  if (y.requires_grad()) {
    tape->record("softmax", {a}, y, [a, y, s]() mutable {
      const auto dy = y.grad();
      const auto p = y.values();
      auto g = a.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.inner; ++j) {
          const std::size_t base = o * s.extent * s.inner + j;
          double dot = 0.0;
          for (std::size_t i = 0; i < s.extent; ++i) {
            const std::size_t k = base + i * s.inner;
            dot += dy[k] * p[k];
          }
          for (std::size_t i = 0; i < s.extent; ++i) {
            const std::size_t k = base + i * s.inner;
            g[k] += p[k] * (dy[k] - dot);
          }
        }
      }
    });
  }
  return y;
}

/// Standardizes over the last axis with population variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps,
                         Tape* tape = nullptr) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain " + to_string(gain.shape()) + " / bias " +
                     to_string(bias.shape()) + " must be [" + std::to_string(d) + "]");
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  const auto in = x.values();
  Buffer normalized(x.size());
  Buffer inv_std(rows);
  Buffer out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    inv_std[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const double n = (row[i] - mu) * rs;
      normalized[r * d + i] = n;
      out[r * d + i] = n * gain.value(i) + bias.value(i);
    }
  }
  Tensor y(x.shape(), std::move(out), detail::tracks(tape, {&x, &gain, &bias}));
  if (y.requires_grad()) {
    tape->record("layer_norm", {x, gain, bias}, y,
                 [x, gain, bias, y, normalized = std::move(normalized),
                  inv_std = std::move(inv_std), rows, d]() mutable {
                   const auto dy = y.grad();
                   if (gain.requires_grad() || bias.requires_grad()) {
                     std::span<double> dg, db;
                     if (gain.requires_grad()) dg = gain.grad_buffer();
                     if (bias.requires_grad()) db = bias.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       for (std::size_t i = 0; i < d; ++i) {
                         if (!dg.empty()) dg[i] += dy[r * d + i] * normalized[r * d + i];
                         if (!db.empty()) db[i] += dy[r * d + i];
                       }
                     }
                   }
                   if (!x.requires_grad()) return;
                   auto dx = x.grad_buffer();
                   const double inv_d = 1.0 / static_cast<double>(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double mean_dn = 0.0, mean_dn_n = 0.0;
                     for (std::size_t i = 0; i < d; ++i) {
                       const double dn = dy[r * d + i] * gain.value(i);
                       mean_dn += dn;
                       mean_dn_n += dn * normalized[r * d + i];
                     }
                     mean_dn *= inv_d;
                     mean_dn_n *= inv_d;
                     for (std::size_t i = 0; i < d; ++i) {
                       const double dn = dy[r * d + i] * gain.value(i);
                       dx[r * d + i] +=
                           inv_std[r] * (dn - mean_dn - normalized[r * d + i] * mean_dn_n);
                     }
                   }
                 });
  }
  return y;
}

/// Joins tensors along `axis`; all other dimensions must agree.
inline Tensor concat(std::span<const Tensor> parts, std::size_t axis, Tape* tape = nullptr) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts.front();
  detail::require_axis(first, axis, "concat");
  Shape shape = first.shape();
  shape[axis] = 0;
  for (const Tensor& p : parts) {
    bool compatible = p.rank() == first.rank();
    for (std::size_t i = 0; compatible && i < p.rank(); ++i) {
      if (i != axis && p.dim(i) != first.dim(i)) compatible = false;
    }
    if (!compatible) {
      throw ShapeError("concat: incompatible shapes " + to_string(first.shape()) + " and " +
                       to_string(p.shape()) + " along axis " + std::to_string(axis));
    }
    shape[axis] += p.dim(axis);
  }
  const auto outer_split = detail::split_at(shape, axis);
  const std::size_t out_stride = outer_split.extent * outer_split.inner;
  Buffer out(element_count(shape));
  bool any_grad = false;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.dim(axis) * outer_split.inner;
    const auto v = p.values();
    for (std::size_t o = 0; o < outer_split.outer; ++o) {
      std::copy_n(v.data() + o * chunk, chunk, out.data() + o * out_stride + offset);
    }
    offset += chunk;
    any_grad = any_grad || (tape != nullptr && p.requires_grad());
  }
  Tensor y(shape, std::move(out), any_grad);
  if (y.requires_grad()) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    tape->record("concat", inputs, y, [inputs, y, axis, outer_split, out_stride]() mutable {
      const auto dy = y.grad();
      std::size_t off = 0;
      for (Tensor& p : inputs) {
        const std::size_t chunk = p.dim(axis) * outer_split.inner;
        if (p.requires_grad()) {
          auto g = p.grad_buffer();
          for (std::size_t o = 0; o < outer_split.outer; ++o) {
            for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += dy[o * out_stride + off + i];
          }
        }
        off += chunk;
      }
    });
  }
  return y;
}

inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis, Tape* tape = nullptr) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis, tape);
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end,
                    Tape* tape = nullptr) {
  detail::require_axis(a, axis, "slice");
  if (begin >= end || end > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + to_string(a.shape()));
  }
  const auto s = detail::split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * s.inner;
  const std::size_t in_stride = s.extent * s.inner;
  const std::size_t offset = begin * s.inner;
  Buffer out(s.outer * chunk);
  const auto v = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(v.data() + o * in_stride + offset, chunk, out.data() + o * chunk);
  }
  Tensor y(shape, std::move(out), detail::tracks(tape, {&a}));
  if (y.requires_grad()) {
    tape->record("slice", {a}, y, [a, y, s, chunk, in_stride, offset]() mutable {
      const auto dy = y.grad();
      auto g = a.grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < chunk; ++i) g[o * in_stride + offset + i] += dy[o * chunk + i];
      }
    });
  }
  return y;
}

/// Inverse of concat: cuts `a` along `axis` into pieces of the given sizes.
inline std::vector<Tensor> split(const Tensor& a, std::size_t axis,
                                 std::span<const std::size_t> sizes, Tape* tape = nullptr) {
  detail::require_axis(a, axis, "split");
  std::size_t total = 0;
  for (std::size_t n : sizes) total += n;
  if (total != a.dim(axis)) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis " +
                     std::to_string(axis) + " of " + to_string(a.shape()) + " has " +
                     std::to_string(a.dim(axis)));
  }
  std::vector<Tensor> pieces;
  std::size_t begin = 0;
  for (std::size_t n : sizes) {
    pieces.push_back(slice(a, axis, begin, begin + n, tape));
    begin += n;
  }
  return pieces;
}

inline Tensor reshape(const Tensor& a, Shape shape, Tape* tape = nullptr) {
  if (element_count(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor y(std::move(shape), Buffer(a.values().begin(), a.values().end()),
           detail::tracks(tape, {&a}));
  if (y.requires_grad()) {
    tape->record("reshape", {a}, y, [a, y]() mutable {
      const auto dy = y.grad();
      auto g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    });
  }
  return y;
}

/// Row lookup: table[V,d], indices in [0,V) -> [n,d].
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices,
                          Tape* tape = nullptr) {
  detail::require_rank(table, 2, "gather_rows");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  Buffer out(indices.size() * d);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= vocab) {
      throw InputError("gather_rows: index " + std::to_string(indices[r]) +
                       " out of range for table with " + std::to_string(vocab) + " rows");
    }
    std::copy_n(table.values().data() + indices[r] * d, d, out.data() + r * d);
  }
  Tensor y({indices.size(), d}, std::move(out), detail::tracks(tape, {&table}));
  if (y.requires_grad()) {
    tape->record("gather_rows", {table}, y,
                 [table, y, idx = std::vector<std::size_t>(indices.begin(), indices.end()), d]() mutable {
                   const auto dy = y.grad();
                   auto g = table.grad_buffer();
                   for (std::size_t r = 0; r < idx.size(); ++r) {
                     for (std::size_t i = 0; i < d; ++i) g[idx[r] * d + i] += dy[r * d + i];
                   }
                 });
  }
  return y;
}

namespace detail {

// Index permutation shared by split_heads / merge_heads:
// packed[(b*H + h), l, j] <-> rows[b*L + l, h*dh + j].
template <typename Visit>
void for_each_head_element(std::size_t batch, std::size_t heads, std::size_t len,
                           std::size_t head_dim, Visit visit) {
  const std::size_t width = heads * head_dim;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t l = 0; l < len; ++l) {
        const std::size_t packed = ((b * heads + h) * len + l) * head_dim;
        const std::size_t rows = (b * len + l) * width + h * head_dim;
        for (std::size_t j = 0; j < head_dim; ++j) visit(packed + j, rows + j);
      }
    }
  }
}

}  // namespace detail

/// [batch*len, heads*head_dim] -> [batch*heads, len, head_dim].
inline Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t heads,
                          Tape* tape = nullptr) {
  detail::require_rank(x, 2, "split_heads");
  if (batch == 0 || heads == 0 || x.dim(0) % batch != 0 || x.dim(1) % heads != 0) {
    throw ShapeError("split_heads: " + to_string(x.shape()) + " not divisible into batch " +
                     std::to_string(batch) + " x heads " + std::to_string(heads));
  }
  const std::size_t len = x.dim(0) / batch, head_dim = x.dim(1) / heads;
  Buffer out(x.size());
  const auto in = x.values();
  detail::for_each_head_element(batch, heads, len, head_dim,
                                [&](std::size_t p, std::size_t r) { out[p] = in[r]; });
  Tensor y({batch * heads, len, head_dim}, std::move(out), detail::tracks(tape, {&x}));
  if (y.requires_grad()) {
    tape->record("split_heads", {x}, y, [x, y, batch, heads, len, head_dim]() mutable {
      const auto dy = y.grad();
      auto g = x.grad_buffer();
      detail::for_each_head_element(batch, heads, len, head_dim,
                                    [&](std::size_t p, std::size_t r) { g[r] += dy[p]; });
    });
  }
  return y;
}

/// [batch*heads, len, head_dim] -> [batch*len, heads*head_dim].
inline Tensor merge_heads(const Tensor& x, std::size_t batch, Tape* tape = nullptr) {
  detail::require_rank(x, 3, "merge_heads");
  if (batch == 0 || x.dim(0) % batch != 0) {
    throw ShapeError("merge_heads: " + to_string(x.shape()) + " not divisible by batch " +
                     std::to_string(batch));
  }
  const std::size_t heads = x.dim(0) / batch, len = x.dim(1), head_dim = x.dim(2);
  Buffer out(x.size());
  const auto in = x.values();
  detail::for_each_head_element(batch, heads, len, head_dim,
                                [&](std::size_t p, std::size_t r) { out[r] = in[p]; });
  Tensor y({batch * len, heads * head_dim}, std::move(out), detail::tracks(tape, {&x}));
  if (y.requires_grad()) {
    tape->record("merge_heads", {x}, y, [x, y, batch, heads, len, head_dim]() mutable {
      const auto dy = y.grad();
      auto g = x.grad_buffer();
      detail::for_each_head_element(batch, heads, len, head_dim,
                                    [&](std::size_t p, std::size_t r) { g[p] += dy[r]; });
    });
  }
  return y;
}

/**
 * Batched matrix product over the leading axis.
 *   transpose_b == false: a[n,m,k] x b[n,k,p] -> [n,m,p]
 *   transpose_b == true:  a[n,m,k] x b[n,p,k]^T -> [n,m,p]
 */
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b, Tape* tape = nullptr) {
  detail::require_rank(a, 3, "bmm");
  detail::require_rank(b, 3, "bmm");
  const std::size_t n = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t p = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != n || bk != k) {
    throw ShapeError("bmm: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t b_rows = transpose_b ? p : k, b_cols = transpose_b ? k : p;
  Buffer out(n * m * p);
  for (std::size_t i = 0; i < n; ++i) {
    auto am = detail::matrix(a.values(), m, k, i * m * k);
    auto bm = detail::matrix(b.values(), b_rows, b_cols, i * k * p);
    auto ym = detail::matrix(std::span<double>(out), m, p, i * m * p);
    if (transpose_b) {
      ym.noalias() = am * bm.transpose();
    } else {
      ym.noalias() = am * bm;
    }
  }
  Tensor y({n, m, p}, std::move(out), detail::tracks(tape, {&a, &b}));
  if (y.requires_grad()) {
    tape->record("bmm", {a, b}, y, [a, b, y, n, m, k, p, b_rows, b_cols, transpose_b]() mutable {
      const auto dy_all = y.grad();
      std::span<double> ga, gb;
      if (a.requires_grad()) ga = a.grad_buffer();
      if (b.requires_grad()) gb = b.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        auto dy = detail::matrix(dy_all, m, p, i * m * p);
        auto am = detail::matrix(a.values(), m, k, i * m * k);
        auto bm = detail::matrix(b.values(), b_rows, b_cols, i * k * p);
        if (!ga.empty()) {
          auto da = detail::matrix(ga, m, k, i * m * k);
          if (transpose_b) {
            da.noalias() += dy * bm;
          } else {
            da.noalias() += dy * bm.transpose();
          }
        }
        if (!gb.empty()) {
          auto db = detail::matrix(gb, b_rows, b_cols, i * k * p);
          if (transpose_b) {
            db.noalias() += dy.transpose() * am;
          } else {
            db.noalias() += am.transpose() * dy;
          }
        }
      }
    });
  }
  return y;
}

/// Sets scores[.., i, j] = -inf for j > i on a [n, L, L] score tensor.
inline Tensor causal_mask(const Tensor& scores, Tape* tape = nullptr) {
  detail::require_rank(scores, 3, "causal_mask");
  const std::size_t n = scores.dim(0), rows = scores.dim(1), cols = scores.dim(2);
  if (rows != cols) throw ShapeError("causal_mask: scores must be square, got " + to_string(scores.shape()));
  Buffer out(scores.values().begin(), scores.values().end());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = i + 1; j < cols; ++j) {
        out[(s * rows + i) * cols + j] = -std::numeric_limits<double>::infinity();
      }
    }
  }
  Tensor y(scores.shape(), std::move(out), detail::tracks(tape, {&scores}));
  if (y.requires_grad()) {
    tape->record("causal_mask", {scores}, y, [scores, y, n, rows, cols]() mutable {
      const auto dy = y.grad();
      auto g = scores.grad_buffer();
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j <= i; ++j) {
            const std::size_t k = (s * rows + i) * cols + j;
            g[k] += dy[k];
          }
        }
      }
    });
  }
  return y;
}

/// Inverted dropout: zeroes each element with probability `rate`, scales survivors by 1/(1-rate).
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, Tape* tape = nullptr) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  Buffer mask(x.size());
  for (double& m : mask) m = uniform01(rng) < rate ? 0.0 : keep_scale;
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value(i) * mask[i];
  Tensor y(x.shape(), std::move(out), detail::tracks(tape, {&x}));
  if (y.requires_grad()) {
    tape->record("dropout", {x}, y, [x, y, mask = std::move(mask)]() mutable {
      const auto dy = y.grad();
      auto g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * mask[i];
    });
  }
  return y;
}

}  // namespace trajformer::ad
