// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kdcal {

/// Dense row-major array of doubles. Images use NCHW, logits use N x classes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 element access.
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  /// Number of elements per leading-axis slice.
  std::size_t row_size() const;
  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  /// Releases the storage, leaving the tensor empty.
  std::vector<double> take_values() && {
    shape_.clear();
    return std::move(data_);
  }

  void fill(double v);
  bool all_finite() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const std::vector<std::size_t>& shape);
std::string shape_string(const std::vector<std::size_t>& shape);

/// Exact bit-pattern comparison of shapes and values.
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Gathers leading-axis slices: out[k] = t[indices[k]].
Tensor take_rows(const Tensor& t, std::span<const std::size_t> indices);

}  // namespace kdcal
