#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace facetalk {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major double array. Rank 0 is a scalar holding one value.
class Array {
 public:
  Array() : values_(1, 0.0) {}
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);

  static Array scalar(double value) { return Array(Shape{}, {value}); }
  static Array vector(std::initializer_list<double> values);
  static Array matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values);
  static Array identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }

  // Rank-2 view helpers. A rank-1 array is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return values_[r * cols() + c];
  }

  double item() const;
  void fill(double value);
  Array reshaped(Shape shape) const;

  bool operator==(const Array& other) const = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

// Throws NumericError naming `what` when any value is NaN or infinite.
void require_finite(const Array& a, std::string_view what);

Array relu6(const Array& x);
Array sigmoid(const Array& x);
double sigmoid(double x);
double relu6(double x);

// Standard matrix product of rank-2 (or rank-1 row) arrays.
Array matmul(const Array& a, const Array& b);

// Raw GEMM kernels over row-major buffers, shared with the tape.
// out(m x n) += a(m x k) * b(k x n), with optional transposes of a or b.
void gemm_accumulate(const double* a, const double* b, double* out,
                     std::size_t m, std::size_t k, std::size_t n,
                     bool transpose_a, bool transpose_b);

}  // namespace facetalk
