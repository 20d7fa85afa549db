#include "facetalk/array.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "facetalk/error.hpp"

namespace facetalk {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Array::Array(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != shape_size(shape_)) {
    throw ShapeError("array of shape " + shape_string(shape_) + " given " +
                     std::to_string(values_.size()) + " values");
  }
}

Array Array::vector(std::initializer_list<double> values) {
  return Array(Shape{values.size()}, std::vector<double>(values));
}

Array Array::matrix(std::size_t rows, std::size_t cols,
                    std::initializer_list<double> values) {
  return Array(Shape{rows, cols}, std::vector<double>(values));
}

Array Array::identity(std::size_t n) {
  Array out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) out.at(i, i) = 1.0;
  return out;
}

std::size_t Array::rows() const {
  if (rank() == 2) return shape_[0];
  if (rank() <= 1) return 1;
  throw ShapeError("rows() on array of shape " + shape_string(shape_));
}

std::size_t Array::cols() const {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  if (rank() == 0) return 1;
  throw ShapeError("cols() on array of shape " + shape_string(shape_));
}

double Array::item() const {
  if (values_.size() != 1) {
    throw ShapeError("item() on non-scalar array of shape " +
                     shape_string(shape_));
  }
  return values_[0];
}

void Array::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

Array Array::reshaped(Shape shape) const {
  return Array(std::move(shape), values_);
}

void require_finite(const Array& a, std::string_view what) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i])) {
      std::ostringstream msg;
      msg << what << ": non-finite value " << a[i] << " at index " << i;
      throw NumericError(msg.str());
    }
  }
}

double relu6(double x) { return std::min(std::max(x, 0.0), 6.0); }

double sigmoid(double x) {
  // Split by sign so exp never overflows.
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Array relu6(const Array& x) {
  require_finite(x, "relu6");
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = relu6(x[i]);
  return out;
}

Array sigmoid(const Array& x) {
  require_finite(x, "sigmoid");
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

namespace {

using RowMajor =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

}  // namespace

void gemm_accumulate(const double* a, const double* b, double* out,
                     std::size_t m, std::size_t k, std::size_t n,
                     bool transpose_a, bool transpose_b) {
  const auto M = static_cast<Eigen::Index>(m);
  const auto K = static_cast<Eigen::Index>(k);
  const auto N = static_cast<Eigen::Index>(n);
  MutMap c(out, M, N);
  if (!transpose_a && !transpose_b) {
    c.noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
  } else if (!transpose_a && transpose_b) {
    c.noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
  } else if (transpose_a && !transpose_b) {
    c.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
  } else {
    c.noalias() +=
        ConstMap(a, K, M).transpose() * ConstMap(b, N, K).transpose();
  }
}

Array matmul(const Array& a, const Array& b) {
  if (a.rank() > 2 || b.rank() > 2 || a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch: " + shape_string(a.shape()) +
                     " x " + shape_string(b.shape()));
  }
  require_finite(a, "matmul lhs");
  require_finite(b, "matmul rhs");
  Array out(Shape{a.rows(), b.cols()});
  gemm_accumulate(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols(),
                  false, false);
  return out;
}

}  // namespace facetalk
