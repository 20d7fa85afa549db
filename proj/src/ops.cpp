#include "facetalk/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "facetalk/error.hpp"

namespace facetalk::ops {
namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw Error("operands recorded on different tapes");
  return tape_of(a);
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + " shape mismatch: " +
                     shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

// Applies f elementwise and records df/dx * upstream as the backward rule.
template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tape& t = tape_of(a);
  const Array& x = a.value();
  Array out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia}, [ia, df](Tape& tp, std::size_t self) {
    const Array& g = tp.grad(self);
    const Array& xv = tp.value(ia);
    const Array& yv = tp.value(self);
    Array& ga = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "add");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Array& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      Array& ga = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      Array& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "sub");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Array& g = tp.grad(self);
    if (tp.requires_grad(ia)) {
      Array& ga = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      Array& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "mul");
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Array& g = tp.grad(self);
    const Array& av = tp.value(ia);
    const Array& bv2 = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Array& ga = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(ib)) {
      Array& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  return unary(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Var add_scalar(Var a, double offset) {
  return unary(
      a, [offset](double x) { return x + offset; },
      [](double, double) { return 1.0; });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  const std::size_t n = a.cols();
  if (row.value().size() != n) {
    throw ShapeError("add_row shape mismatch: " + shape_string(a.shape()) +
                     " + " + shape_string(row.shape()));
  }
  Array out = a.value();
  const Array& rv = row.value();
  const std::size_t rows = a.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += rv[c];
  const std::size_t ia = a.id(), ir = row.id();
  return t.record(std::move(out), {ia, ir},
                  [ia, ir, rows, n](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    if (tp.requires_grad(ia)) {
                      Array& ga = tp.grad(ia);
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (tp.requires_grad(ir)) {
                      Array& gr = tp.grad(ir);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c];
                    }
                  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() > 2 || bv.rank() > 2 || av.cols() != bv.rows()) {
    throw ShapeError("matmul shape mismatch: " + shape_string(av.shape()) +
                     " x " + shape_string(bv.shape()));
  }
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Array out(Shape{m, n});
  gemm_accumulate(av.data(), bv.data(), out.data(), m, k, n, false, false);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), {ia, ib},
                  [ia, ib, m, k, n](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    if (tp.requires_grad(ia)) {
                      // dA = G * B^T
                      gemm_accumulate(g.data(), tp.value(ib).data(),
                                      tp.grad(ia).data(), m, n, k, false, true);
                    }
                    if (tp.requires_grad(ib)) {
                      // dB = A^T * G
                      gemm_accumulate(tp.value(ia).data(), g.data(),
                                      tp.grad(ib).data(), k, m, n, true, false);
                    }
                  });
}

Var linear(Var x, Var weight, Var bias) {
  Tape& t = tape_of(x, weight);
  tape_of(x, bias);
  const Array& xv = x.value();
  const Array& wv = weight.value();
  const Array& bv = bias.value();
  if (wv.rank() != 2 || xv.cols() != wv.cols() || bv.size() != wv.rows()) {
    throw ShapeError("linear shape mismatch: x " + shape_string(xv.shape()) +
                     ", W " + shape_string(wv.shape()) + ", b " +
                     shape_string(bv.shape()));
  }
  const std::size_t batch = xv.rows(), in = xv.cols(), out_dim = wv.rows();
  Array out(Shape{batch, out_dim});
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] = bv[c];
  gemm_accumulate(xv.data(), wv.data(), out.data(), batch, in, out_dim, false,
                  true);
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return t.record(
      std::move(out), {ix, iw, ib},
      [ix, iw, ib, batch, in, out_dim](Tape& tp, std::size_t self) {
        const Array& g = tp.grad(self);
        if (tp.requires_grad(ix)) {
          gemm_accumulate(g.data(), tp.value(iw).data(), tp.grad(ix).data(),
                          batch, out_dim, in, false, false);
        }
        if (tp.requires_grad(iw)) {
          gemm_accumulate(g.data(), tp.value(ix).data(), tp.grad(iw).data(),
                          out_dim, batch, in, true, false);
        }
        if (tp.requires_grad(ib)) {
          Array& gb = tp.grad(ib);
          for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
        }
      });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return facetalk::sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Var relu6(Var a) {
  Tape& t = tape_of(a);
  const Array& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    t.note_branch(x[i] <= 0.0 ? 0 : (x[i] >= 6.0 ? 2 : 1));
  }
  return unary(
      a, [](double v) { return facetalk::relu6(v); },
      [](double v, double) { return (v > 0.0 && v < 6.0) ? 1.0 : 0.0; });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  const Array& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) t.note_branch(x[i] > 0.0);
  return unary(
      a, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var log(Var a) {
  const Array& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw NumericError("log of non-positive value " + std::to_string(x[i]));
    }
  }
  return unary(
      a, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Var abs(Var a) {
  Tape& t = tape_of(a);
  const Array& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) t.note_branch(x[i] >= 0.0);
  return unary(
      a, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary(
      a, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Var pow_abs(Var a, int exponent) {
  if (exponent == 2) return square(a);
  if (exponent == 1) return abs(a);
  throw ConfigError("exponent must be 1 or 2, got " + std::to_string(exponent));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero parts");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    if (p.rows() != rows) {
      throw ShapeError("concat_cols row mismatch: " + shape_string(p.shape()) +
                       " vs " + std::to_string(rows) + " rows");
    }
    widths.push_back(p.cols());
    ids.push_back(p.id());
    total += p.cols();
  }
  Array out(Shape{rows, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Array& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[k], widths[k],
                  out.data() + r * total + offset);
    offset += widths[k];
  }
  return t.record(std::move(out), ids,
                  [ids, widths, rows, total](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (tp.requires_grad(ids[k])) {
                        Array& gk = tp.grad(ids[k]);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < widths[k]; ++c)
                            gk[r * widths[k] + c] += g[r * total + off + c];
                      }
                      off += widths[k];
                    }
                  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(a);
  const std::size_t rows = a.rows(), cols = a.cols();
  if (begin + count > cols) {
    throw ShapeError("slice_cols [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " +
                     shape_string(a.shape()));
  }
  Array out(Shape{rows, count});
  const Array& v = a.value();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(v.data() + r * cols + begin, count, out.data() + r * count);
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia},
                  [ia, rows, cols, begin, count](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    Array& ga = tp.grad(ia);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < count; ++c)
                        ga[r * cols + begin + c] += g[r * count + c];
                  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return t.record(Array::scalar(s), {ia}, [ia](Tape& tp, std::size_t self) {
    const double g = tp.grad(self)[0];
    Array& ga = tp.grad(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var weighted_row_sum(Var a, const Array& weights) {
  Tape& t = tape_of(a);
  const std::size_t rows = a.rows(), cols = a.cols();
  if (weights.size() != cols) {
    throw ShapeError("weighted_row_sum: " + std::to_string(weights.size()) +
                     " weights for " + shape_string(a.shape()));
  }
  Array out(Shape{rows, 1});
  const Array& v = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += v[r * cols + c] * weights[c];
    out[r] = s;
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia},
                  [ia, rows, cols, weights](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    Array& ga = tp.grad(ia);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c)
                        ga[r * cols + c] += g[r] * weights[c];
                  });
}

Var row_norm(Var a) {
  Tape& t = tape_of(a);
  const std::size_t rows = a.rows(), cols = a.cols();
  const Array& v = a.value();
  Array out(Shape{rows, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += v[r * cols + c] * v[r * cols + c];
    out[r] = std::sqrt(s);
    t.note_branch(out[r] > 0.0);
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), {ia},
                  [ia, rows, cols](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    const Array& y = tp.value(self);
                    const Array& x = tp.value(ia);
                    Array& ga = tp.grad(ia);
                    for (std::size_t r = 0; r < rows; ++r) {
                      if (y[r] == 0.0) continue;
                      const double f = g[r] / y[r];
                      for (std::size_t c = 0; c < cols; ++c)
                        ga[r * cols + c] += f * x[r * cols + c];
                    }
                  });
}

Var max_of(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("max_of of zero parts");
  Tape& t = tape_of(parts[0]);
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    require_same_shape(parts[0], p, "max_of");
    ids.push_back(p.id());
  }
  const std::size_t n = parts[0].value().size();
  Array out = parts[0].value();
  std::vector<std::size_t> winner(n, 0);
  for (std::size_t k = 1; k < parts.size(); ++k) {
    const Array& v = parts[k].value();
    for (std::size_t i = 0; i < n; ++i) {
      if (v[i] > out[i]) {
        out[i] = v[i];
        winner[i] = k;
      }
    }
  }
  for (std::size_t w : winner) t.note_branch(w);
  return t.record(std::move(out), ids,
                  [ids, winner](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    for (std::size_t i = 0; i < winner.size(); ++i) {
                      const std::size_t id = ids[winner[i]];
                      if (tp.requires_grad(id)) tp.grad(id)[i] += g[i];
                    }
                  });
}

Var embedding(Var table, std::span<const std::size_t> indices,
              bool freeze_row0) {
  Tape& t = tape_of(table);
  const Array& tv = table.value();
  if (tv.rank() != 2) {
    throw ShapeError("embedding table must be rank 2, got " +
                     shape_string(tv.shape()));
  }
  const std::size_t vocab = tv.rows(), dim = tv.cols();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  Array out(Shape{idx.size(), dim});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab) {
      throw ShapeError("embedding index " + std::to_string(idx[r]) +
                       " out of range for vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + idx[r] * dim, dim, out.data() + r * dim);
  }
  const std::size_t it = table.id();
  return t.record(std::move(out), {it},
                  [it, idx, dim, freeze_row0](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    Array& gt = tp.grad(it);
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                      if (freeze_row0 && idx[r] == 0) continue;
                      for (std::size_t c = 0; c < dim; ++c)
                        gt[idx[r] * dim + c] += g[r * dim + c];
                    }
                  });
}

Var conv3x3(Var x, const Array& kernels, std::size_t in_channels,
            std::size_t height, std::size_t width) {
  Tape& t = tape_of(x);
  if (kernels.rank() != 4 || kernels.shape()[1] != in_channels ||
      kernels.shape()[2] != 3 || kernels.shape()[3] != 3) {
    throw ShapeError("conv3x3 kernel bank must be [out x " +
                     std::to_string(in_channels) + " x 3 x 3], got " +
                     shape_string(kernels.shape()));
  }
  const std::size_t plane = height * width;
  if (x.cols() != in_channels * plane) {
    throw ShapeError("conv3x3 input " + shape_string(x.shape()) +
                     " does not hold " + std::to_string(in_channels) + "x" +
                     std::to_string(height) + "x" + std::to_string(width) +
                     " images");
  }
  const std::size_t out_channels = kernels.shape()[0];
  const std::size_t batch = x.rows();
  const auto H = static_cast<long>(height), W = static_cast<long>(width);
  // Visits every (output pixel, input pixel, weight) triple once.
  auto for_each_tap = [=](auto&& visit) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t oc = 0; oc < out_channels; ++oc)
        for (std::size_t ic = 0; ic < in_channels; ++ic)
          for (long ky = 0; ky < 3; ++ky)
            for (long kx = 0; kx < 3; ++kx) {
              const double w =
                  kernels[((oc * in_channels + ic) * 3 + ky) * 3 + kx];
              for (long y = 0; y < H; ++y) {
                const long sy = y + ky - 1;
                if (sy < 0 || sy >= H) continue;
                for (long xx = 0; xx < W; ++xx) {
                  const long sx = xx + kx - 1;
                  if (sx < 0 || sx >= W) continue;
                  visit(b * out_channels * plane + oc * plane + y * W + xx,
                        b * in_channels * plane + ic * plane + sy * W + sx, w);
                }
              }
            }
  };
  Array out(Shape{batch, out_channels * plane});
  const Array& xv = x.value();
  for_each_tap([&](std::size_t o, std::size_t i, double w) { out[o] += w * xv[i]; });
  const std::size_t ix = x.id();
  return t.record(std::move(out), {ix},
                  [ix, for_each_tap](Tape& tp, std::size_t self) {
                    const Array& g = tp.grad(self);
                    Array& gx = tp.grad(ix);
                    for_each_tap([&](std::size_t o, std::size_t i, double w) {
                      gx[i] += w * g[o];
                    });
                  });
}

Var avg_pool2(Var x, std::size_t channels, std::size_t height,
              std::size_t width) {
  Tape& t = tape_of(x);
  if (height % 2 || width % 2 || x.cols() != channels * height * width) {
    throw ShapeError("avg_pool2 needs even planes matching the input, got " +
                     shape_string(x.shape()));
  }
  const std::size_t batch = x.rows(), oh = height / 2, ow = width / 2;
  const std::size_t in_cols = channels * height * width;
  const std::size_t out_cols = channels * oh * ow;
  Array out(Shape{batch, out_cols});
  const Array& xv = x.value();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const double* base =
              xv.data() + b * in_cols + c * height * width + 2 * y * width + 2 * xx;
          out[b * out_cols + c * oh * ow + y * ow + xx] =
              0.25 * (base[0] + base[1] + base[width] + base[width + 1]);
        }
  const std::size_t ix = x.id();
  return t.record(
      std::move(out), {ix},
      [=](Tape& tp, std::size_t self) {
        const Array& g = tp.grad(self);
        Array& gx = tp.grad(ix);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < oh; ++y)
              for (std::size_t xx = 0; xx < ow; ++xx) {
                const double gv = 0.25 * g[b * out_cols + c * oh * ow + y * ow + xx];
                double* base = gx.data() + b * in_cols + c * height * width +
                               2 * y * width + 2 * xx;
                base[0] += gv;
                base[1] += gv;
                base[width] += gv;
                base[width + 1] += gv;
              }
      });
}

}  // namespace facetalk::ops
