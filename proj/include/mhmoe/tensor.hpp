// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mhmoe {

// ---------------------------------------------------------------------------
// Error taxonomy. Every failure surfaced by the library is one of these.
// ---------------------------------------------------------------------------

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Storage {
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major float64 array. A Tensor is a handle: copies alias the same
// storage, which is what lets graph nodes refer back to their inputs.
// reshape() returns a view over the same storage (values and gradient).
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : storage_(std::make_shared<detail::Storage>()), shape_(std::move(shape)) {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (auto e : shape_) {
      if (e == 0) throw DimensionError("tensor extents must be >= 1, got " + to_string(shape_));
    }
    if (numel(shape_) != values.size()) {
      throw DimensionError("shape " + to_string(shape_) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    storage_->values = std::move(values);
    storage_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<double> flat;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat));
  }

  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return storage_->values.size(); }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return shape_.size() == 1 ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() == 1 ? shape_[0] : size() / shape_[0]; }

  std::span<double> values() { return storage_->values; }
  std::span<const double> values() const { return storage_->values; }
  double* data() { return storage_->values.data(); }
  const double* data() const { return storage_->values.data(); }

  double& operator[](std::size_t i) { return storage_->values[i]; }
  double operator[](std::size_t i) const { return storage_->values[i]; }
  double& at(std::size_t r, std::size_t c) { return storage_->values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return storage_->values[r * cols() + c]; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape_));
    return storage_->values[0];
  }

  bool requires_grad() const { return storage_ && storage_->requires_grad; }
  void set_requires_grad(bool on) { storage_->requires_grad = on; }

  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<double> grad() {
    ensure_grad();
    return storage_->grad;
  }
  std::span<const double> grad() const { return storage_->grad; }
  void ensure_grad() {
    if (storage_->grad.empty()) storage_->grad.assign(size(), 0.0);
  }
  void zero_grad() {
    if (!storage_->grad.empty()) std::fill(storage_->grad.begin(), storage_->grad.end(), 0.0);
  }
  void clear_grad() { std::vector<double>().swap(storage_->grad); }

  // Metadata-only: the view shares values and gradient with *this.
  Tensor reshape(Shape shape) const {
    if (numel(shape) != size()) {
      throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    Tensor v = *this;
    v.shape_ = std::move(shape);
    return v;
  }

  // Deep copy of the values; no gradient, no graph identity.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape_, storage_->values, requires_grad);
  }

  bool same_storage(const Tensor& o) const { return storage_ == o.storage_; }

 private:
  std::shared_ptr<detail::Storage> storage_;
  Shape shape_;
};

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " + to_string(t.shape()));
  }
}

inline void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

}  // namespace mhmoe
