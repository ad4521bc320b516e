// Copyright 2026 The Titanlab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace titanlab {

using Shape = std::vector<int64_t>;

enum class DType { kF64, kF32, kF8E4M3 };

const char* dtype_name(DType dtype);
DType dtype_from_name(const std::string& name);
// Bytes per element in the storage encoding (checkpoints, ledgers).
int64_t dtype_size(DType dtype);

// Rounds a double to the nearest value representable in `dtype`.
double round_to(DType dtype, double value);

int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense row-major n-D array. Values are held as doubles; the dtype decides
// the rounding applied whenever a value is written by an operation.
class Tensor {
 public:
  Tensor() : shape_{0} {}
  explicit Tensor(Shape shape, DType dtype = DType::kF64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::kF64);

  static Tensor zeros(Shape shape, DType dtype = DType::kF64) { return Tensor(std::move(shape), dtype); }
  static Tensor full(Shape shape, double value, DType dtype = DType::kF64);
  static Tensor scalar(double value, DType dtype = DType::kF64) { return Tensor({1}, {value}, dtype); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  int64_t nbytes() const { return numel() * dtype_size(dtype_); }
  DType dtype() const { return dtype_; }

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double item() const;

  // Returns a copy converted (and rounded) to `dtype`.
  Tensor to(DType dtype) const;
  Tensor reshape(Shape shape) const;
  // Re-applies dtype rounding in place; used by kernels after accumulation.
  void round_in_place();
  // Throws NonFiniteError naming `what` if any element is NaN or infinite.
  void check_finite(const char* what) const;

  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  DType dtype_ = DType::kF64;
  std::vector<double> data_;
};

// Largest |a-b| / max(|b|, floor) over elements; shapes must match.
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-300);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace titanlab
