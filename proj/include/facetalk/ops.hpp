#pragma once

#include <span>
#include <vector>

#include "facetalk/tape.hpp"

// Differentiable operations on tape values. Matrices are [rows x cols] with
// one batch element per row; biases are rank-1 and broadcast over rows.
namespace facetalk::ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
// a[B x N] + row[N], broadcast over rows.
Var add_row(Var a, Var row);

Var matmul(Var a, Var b);
// x[B x in] * W^T + b with W[out x in] and b[out].
Var linear(Var x, Var weight, Var bias);

Var sigmoid(Var a);
// Subgradient 0 at both kinks (x = 0 and x = 6).
Var relu6(Var a);
Var relu(Var a);
// Natural log; the input must be strictly positive.
Var log(Var a);
Var abs(Var a);
Var square(Var a);
// |a|^p for p in {1, 2}.
Var pow_abs(Var a, int exponent);

Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t begin, std::size_t count);

Var sum(Var a);
Var mean(Var a);
// Row-wise weighted sum: a[B x N] . w[N] -> [B x 1]; w is a fixed array.
Var weighted_row_sum(Var a, const Array& weights);
// Row-wise Euclidean norm [B x N] -> [B x 1]; gradient 0 at the origin.
Var row_norm(Var a);
// Element-wise maximum across same-shaped inputs. Ties go to the first.
Var max_of(std::span<const Var> parts);

// Gathers rows of table[V x E]. When `freeze_row0` is set, row 0 receives no
// gradient.
Var embedding(Var table, std::span<const std::size_t> indices,
              bool freeze_row0);

// 3x3 convolution with zero padding and a fixed kernel bank
// [out_channels x in_channels x 3 x 3]; x rows hold C*H*W planar images.
Var conv3x3(Var x, const Array& kernels, std::size_t in_channels,
            std::size_t height, std::size_t width);
// 2x2 average pooling over planar C*H*W rows; H and W must be even.
Var avg_pool2(Var x, std::size_t channels, std::size_t height,
              std::size_t width);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace facetalk::ops
