#include "safecast/numeric/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace safecast::ops {

namespace {

Tape &tape_of(const Var &a) {
  if (!a.valid()) throw std::logic_error("operation on an empty Var");
  return *a.tape();
}

Tape &tape_of(const Var &a, const Var &b) {
  if (a.tape() != b.tape()) throw std::logic_error("operands recorded on different tapes");
  return tape_of(a);
}

void require_same_shape(const char *op, const Matrix &a, const Matrix &b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

template <typename Forward, typename Derivative>
Var unary(const Var &x, Forward f, Derivative df) {
  Tape &t = tape_of(x);
  const int xi = x.id();
  Matrix y = x.value().unaryExpr(f);
  const bool rg = t.requires_grad(x);
  return t.record(std::move(y), rg, [&t, xi, df](const Matrix &g) {
    const Matrix &xv = t.value(xi);
    Matrix d = xv.unaryExpr(df);
    t.accumulate(xi, g.cwiseProduct(d));
  });
}

// Shared backward for column standardization over a subset of rows.
Matrix standardize_backward(const Matrix &g, const Matrix &y, const RowVector &inv_std,
                            const Vector &row_mask, double count) {
  Matrix dx = g.array().rowwise() * inv_std.array();
  if (count <= 0) return dx;
  const RowVector d_mean = -(g.colwise().sum().array() * inv_std.array()).matrix();
  const RowVector d_std =
      -((g.cwiseProduct(y)).colwise().sum().array() * inv_std.array()).matrix();
  for (Index r = 0; r < g.rows(); ++r) {
    if (row_mask(r) == 0.0) continue;
    // (x - m) / s == y, so (x - m) / (N s) == y / N.
    dx.row(r) += (d_mean.array() / count + d_std.array() * y.row(r).array() / count).matrix();
  }
  return dx;
}

}  // namespace

Var matmul(const Var &a, const Var &b) {
  Tape &t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents disagree " + shape_string(a.value()) + " x " +
                         shape_string(b.value()));
  }
  const int ai = a.id(), bi = b.id();
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(a.value() * b.value(), rg, [&t, ai, bi](const Matrix &g) {
    if (t.requires_grad(Var(&t, ai))) t.accumulate(ai, g * t.value(bi).transpose());
    if (t.requires_grad(Var(&t, bi))) t.accumulate(bi, t.value(ai).transpose() * g);
  });
}

Var add(const Var &a, const Var &b) {
  Tape &t = tape_of(a, b);
  require_same_shape("add", a.value(), b.value());
  const int ai = a.id(), bi = b.id();
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(a.value() + b.value(), rg, [&t, ai, bi](const Matrix &g) {
    t.accumulate(ai, g);
    t.accumulate(bi, g);
  });
}

Var sub(const Var &a, const Var &b) {
  Tape &t = tape_of(a, b);
  require_same_shape("sub", a.value(), b.value());
  const int ai = a.id(), bi = b.id();
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(a.value() - b.value(), rg, [&t, ai, bi](const Matrix &g) {
    t.accumulate(ai, g);
    t.accumulate(bi, -g);
  });
}

Var mul(const Var &a, const Var &b) {
  Tape &t = tape_of(a, b);
  require_same_shape("mul", a.value(), b.value());
  const int ai = a.id(), bi = b.id();
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(a.value().cwiseProduct(b.value()), rg, [&t, ai, bi](const Matrix &g) {
    t.accumulate(ai, g.cwiseProduct(t.value(bi)));
    t.accumulate(bi, g.cwiseProduct(t.value(ai)));
  });
}

Var div(const Var &a, const Var &b) {
  Tape &t = tape_of(a, b);
  require_same_shape("div", a.value(), b.value());
  const int ai = a.id(), bi = b.id();
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(a.value().cwiseQuotient(b.value()), rg, [&t, ai, bi](const Matrix &g) {
    const Matrix &av = t.value(ai);
    const Matrix &bv = t.value(bi);
    t.accumulate(ai, g.cwiseQuotient(bv));
    t.accumulate(bi, -(g.cwiseProduct(av)).cwiseQuotient(bv.cwiseProduct(bv)));
  });
}

Var scale(const Var &a, double s) {
  Tape &t = tape_of(a);
  const int ai = a.id();
  return t.record(a.value() * s, t.requires_grad(a),
                  [&t, ai, s](const Matrix &g) { t.accumulate(ai, g * s); });
}

Var add_scalar(const Var &a, double s) {
  Tape &t = tape_of(a);
  const int ai = a.id();
  return t.record(a.value().array() + s, t.requires_grad(a),
                  [&t, ai](const Matrix &g) { t.accumulate(ai, g); });
}

Var add_row(const Var &x, const Var &row) {
  Tape &t = tape_of(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw DimensionError("add_row: expected 1x" + std::to_string(x.cols()) + " row, got " +
                         shape_string(row.value()) + " for " + shape_string(x.value()));
  }
  const int xi = x.id(), ri = row.id();
  Matrix y = x.value().rowwise() + row.value().row(0);
  const bool rg = t.requires_grad(x) || t.requires_grad(row);
  return t.record(std::move(y), rg, [&t, xi, ri](const Matrix &g) {
    t.accumulate(xi, g);
    t.accumulate(ri, g.colwise().sum());
  });
}

Var mul_row(const Var &x, const Var &row) {
  Tape &t = tape_of(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw DimensionError("mul_row: expected 1x" + std::to_string(x.cols()) + " row, got " +
                         shape_string(row.value()));
  }
  const int xi = x.id(), ri = row.id();
  Matrix y = x.value().array().rowwise() * row.value().row(0).array();
  const bool rg = t.requires_grad(x) || t.requires_grad(row);
  return t.record(std::move(y), rg, [&t, xi, ri](const Matrix &g) {
    const Matrix &xv = t.value(xi);
    const Matrix &rv = t.value(ri);
    t.accumulate(xi, g.array().rowwise() * rv.row(0).array());
    t.accumulate(ri, g.cwiseProduct(xv).colwise().sum());
  });
}

Var mul_col(const Var &x, const Var &col) {
  Tape &t = tape_of(x, col);
  if (col.cols() != 1 || col.rows() != x.rows()) {
    throw DimensionError("mul_col: expected " + std::to_string(x.rows()) + "x1 column, got " +
                         shape_string(col.value()));
  }
  const int xi = x.id(), ci = col.id();
  Matrix y = x.value().array().colwise() * col.value().col(0).array();
  const bool rg = t.requires_grad(x) || t.requires_grad(col);
  return t.record(std::move(y), rg, [&t, xi, ci](const Matrix &g) {
    const Matrix &xv = t.value(xi);
    const Matrix &cv = t.value(ci);
    t.accumulate(xi, g.array().colwise() * cv.col(0).array());
    t.accumulate(ci, g.cwiseProduct(xv).rowwise().sum());
  });
}

Var mul_const(const Var &x, const Matrix &c) {
  Tape &t = tape_of(x);
  require_same_shape("mul_const", x.value(), c);
  const int xi = x.id();
  return t.record(x.value().cwiseProduct(c), t.requires_grad(x),
                  [&t, xi, c](const Matrix &g) { t.accumulate(xi, g.cwiseProduct(c)); });
}

Var matmul_const(const Matrix &c, const Var &x) {
  Tape &t = tape_of(x);
  if (c.cols() != x.rows()) {
    throw DimensionError("matmul_const: inner extents disagree " + shape_string(c) + " x " +
                         shape_string(x.value()));
  }
  const int xi = x.id();
  return t.record(c * x.value(), t.requires_grad(x),
                  [&t, xi, c](const Matrix &g) { t.accumulate(xi, c.transpose() * g); });
}

Var transpose(const Var &x) {
  Tape &t = tape_of(x);
  const int xi = x.id();
  return t.record(x.value().transpose(), t.requires_grad(x),
                  [&t, xi](const Matrix &g) { t.accumulate(xi, g.transpose()); });
}

Var concat_cols(const std::vector<Var> &xs) {
  if (xs.empty()) throw DimensionError("concat_cols: no operands");
  Tape &t = tape_of(xs.front());
  const Index rows = xs.front().rows();
  Index cols = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Index> widths;
  for (const Var &x : xs) {
    tape_of(xs.front(), x);
    if (x.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(xs.front().value()) +
                           " vs " + shape_string(x.value()));
    }
    cols += x.cols();
    rg = rg || t.requires_grad(x);
    ids.push_back(x.id());
    widths.push_back(x.cols());
  }
  Matrix y(rows, cols);
  Index off = 0;
  for (const Var &x : xs) {
    y.middleCols(off, x.cols()) = x.value();
    off += x.cols();
  }
  return t.record(std::move(y), rg, [&t, ids, widths](const Matrix &g) {
    Index o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      t.accumulate(ids[k], g.middleCols(o, widths[k]));
      o += widths[k];
    }
  });
}

Var concat_rows(const std::vector<Var> &xs) {
  if (xs.empty()) throw DimensionError("concat_rows: no operands");
  Tape &t = tape_of(xs.front());
  const Index cols = xs.front().cols();
  Index rows = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<Index> heights;
  for (const Var &x : xs) {
    tape_of(xs.front(), x);
    if (x.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(xs.front().value()) +
                           " vs " + shape_string(x.value()));
    }
    rows += x.rows();
    rg = rg || t.requires_grad(x);
    ids.push_back(x.id());
    heights.push_back(x.rows());
  }
  Matrix y(rows, cols);
  Index off = 0;
  for (const Var &x : xs) {
    y.middleRows(off, x.rows()) = x.value();
    off += x.rows();
  }
  return t.record(std::move(y), rg, [&t, ids, heights](const Matrix &g) {
    Index o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      t.accumulate(ids[k], g.middleRows(o, heights[k]));
      o += heights[k];
    }
  });
}

Var slice_rows(const Var &x, Index start, Index count) {
  Tape &t = tape_of(x);
  if (start < 0 || count < 0 || start + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" +
                         std::to_string(count) + ") out of " + shape_string(x.value()));
  }
  const int xi = x.id();
  const Index rows = x.rows(), cols = x.cols();
  return t.record(x.value().middleRows(start, count), t.requires_grad(x),
                  [&t, xi, start, count, rows, cols](const Matrix &g) {
                    Matrix d = Matrix::Zero(rows, cols);
                    d.middleRows(start, count) = g;
                    t.accumulate(xi, d);
                  });
}

Var slice_cols(const Var &x, Index start, Index count) {
  Tape &t = tape_of(x);
  if (start < 0 || count < 0 || start + count > x.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" +
                         std::to_string(count) + ") out of " + shape_string(x.value()));
  }
  const int xi = x.id();
  const Index rows = x.rows(), cols = x.cols();
  return t.record(x.value().middleCols(start, count), t.requires_grad(x),
                  [&t, xi, start, count, rows, cols](const Matrix &g) {
                    Matrix d = Matrix::Zero(rows, cols);
                    d.middleCols(start, count) = g;
                    t.accumulate(xi, d);
                  });
}

Var sum(const Var &x) {
  Tape &t = tape_of(x);
  const int xi = x.id();
  const Index rows = x.rows(), cols = x.cols();
  Matrix y(1, 1);
  y(0, 0) = x.value().sum();
  return t.record(std::move(y), t.requires_grad(x), [&t, xi, rows, cols](const Matrix &g) {
    t.accumulate(xi, Matrix::Constant(rows, cols, g(0, 0)));
  });
}

Var mean(const Var &x) {
  if (x.value().size() == 0) throw DimensionError("mean of empty array");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var sum_rows(const Var &x) {
  Tape &t = tape_of(x);
  const int xi = x.id();
  const Index rows = x.rows();
  return t.record(x.value().colwise().sum(), t.requires_grad(x),
                  [&t, xi, rows](const Matrix &g) {
                    t.accumulate(xi, g.replicate(rows, 1));
                  });
}

Var elu(const Var &x, double alpha) {
  return unary(
      x, [alpha](double v) { return v > 0 ? v : alpha * std::expm1(v); },
      [alpha](double v) { return v > 0 ? 1.0 : alpha * std::exp(v); });
}

Var leaky_relu(const Var &x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0 ? v : slope * v; },
      [slope](double v) { return v > 0 ? 1.0 : slope; });
}

Var relu(const Var &x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; }, [](double v) { return v > 0 ? 1.0 : 0.0; });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var &x) {
  Tape &t = tape_of(x);
  const int xi = x.id();
  Matrix y = x.value().unaryExpr([](double v) { return stable_sigmoid(v); });
  Matrix d = y.array() * (1.0 - y.array());
  return t.record(std::move(y), t.requires_grad(x),
                  [&t, xi, d](const Matrix &g) { t.accumulate(xi, g.cwiseProduct(d)); });
}

Var tanh(const Var &x) {
  Tape &t = tape_of(x);
  const int xi = x.id();
  Matrix y = x.value().array().tanh();
  Matrix d = 1.0 - y.array().square();
  return t.record(std::move(y), t.requires_grad(x),
                  [&t, xi, d](const Matrix &g) { t.accumulate(xi, g.cwiseProduct(d)); });
}

Var exp(const Var &x) {
  Tape &t = tape_of(x);
  const int xi = x.id();
  Matrix y = x.value().array().exp();
  Matrix d = y;
  return t.record(std::move(y), t.requires_grad(x),
                  [&t, xi, d](const Matrix &g) { t.accumulate(xi, g.cwiseProduct(d)); });
}

Var log(const Var &x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Var square(const Var &x) {
  return unary(
      x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Var clamp_min(const Var &x, double lo) {
  return unary(
      x, [lo](double v) { return v > lo ? v : lo; },
      [lo](double v) { return v > lo ? 1.0 : 0.0; });
}

Var masked_softmax_rows(const Var &x, const Matrix &mask) {
  Tape &t = tape_of(x);
  require_same_shape("masked_softmax_rows", x.value(), mask);
  const Matrix &xv = x.value();
  Matrix y = Matrix::Zero(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < xv.cols(); ++c) {
      if (mask(r, c) != 0.0) peak = std::max(peak, xv(r, c));
    }
    if (!std::isfinite(peak)) continue;
    double total = 0.0;
    for (Index c = 0; c < xv.cols(); ++c) {
      if (mask(r, c) != 0.0) {
        y(r, c) = std::exp(xv(r, c) - peak);
        total += y(r, c);
      }
    }
    y.row(r) /= total;
  }
  const int xi = x.id();
  Matrix saved = y;
  return t.record(std::move(y), t.requires_grad(x), [&t, xi, saved](const Matrix &g) {
    const Vector dot = g.cwiseProduct(saved).rowwise().sum();
    Matrix d = saved.cwiseProduct(g.colwise() - dot);
    t.accumulate(xi, d);
  });
}

Var softmax_rows(const Var &x) {
  return masked_softmax_rows(x, Matrix::Ones(x.rows(), x.cols()));
}

Var glu(const Var &x) {
  if (x.cols() % 2 != 0) {
    throw DimensionError("glu: channel extent must be even, got " + shape_string(x.value()));
  }
  const Index half = x.cols() / 2;
  return mul(slice_cols(x, 0, half), sigmoid(slice_cols(x, half, half)));
}

Var standardize_rows(const Var &x, double eps) {
  return transpose(standardize_cols(transpose(x), Vector::Ones(x.cols()), eps));
}

Var standardize_cols(const Var &x, const Vector &row_mask, double eps) {
  Tape &t = tape_of(x);
  const Matrix &xv = x.value();
  if (row_mask.size() != xv.rows()) {
    throw DimensionError("standardize_cols: mask of " + std::to_string(row_mask.size()) +
                         " rows for " + shape_string(xv));
  }
  const double count = row_mask.sum();
  RowVector m = RowVector::Zero(xv.cols());
  RowVector var = RowVector::Zero(xv.cols());
  if (count > 0) {
    for (Index r = 0; r < xv.rows(); ++r) {
      if (row_mask(r) != 0.0) m += xv.row(r);
    }
    m /= count;
    for (Index r = 0; r < xv.rows(); ++r) {
      if (row_mask(r) != 0.0) var += (xv.row(r) - m).array().square().matrix();
    }
    var /= count;
  }
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix y = (xv.rowwise() - m).array().rowwise() * inv_std.array();
  const int xi = x.id();
  Matrix saved = y;
  return t.record(std::move(y), t.requires_grad(x),
                  [&t, xi, saved, inv_std, row_mask, count](const Matrix &g) {
                    t.accumulate(xi, standardize_backward(g, saved, inv_std, row_mask, count));
                  });
}

Var standardize_cols_fixed(const Var &x, const RowVector &mean, const RowVector &var,
                           double eps) {
  Tape &t = tape_of(x);
  if (mean.size() != x.cols() || var.size() != x.cols()) {
    throw DimensionError("standardize_cols_fixed: statistics of width " +
                         std::to_string(mean.size()) + " for " + shape_string(x.value()));
  }
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix y = (x.value().rowwise() - mean).array().rowwise() * inv_std.array();
  const int xi = x.id();
  return t.record(std::move(y), t.requires_grad(x), [&t, xi, inv_std](const Matrix &g) {
    t.accumulate(xi, g.array().rowwise() * inv_std.array());
  });
}

Var im2col(const Var &x, Index height, Index width, Index kernel, Index padding) {
  Tape &t = tape_of(x);
  if (kernel % 2 == 0) throw DimensionError("im2col: kernel size must be odd");
  if (x.cols() != height * width) {
    throw DimensionError("im2col: grid " + std::to_string(height) + "x" +
                         std::to_string(width) + " does not match " + shape_string(x.value()));
  }
  const Index channels = x.rows();
  const Index kk = kernel * kernel;
  const Matrix &xv = x.value();
  Matrix cols = Matrix::Zero(channels * kk, height * width);
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx) {
        const Index row = c * kk + ky * kernel + kx;
        for (Index h = 0; h < height; ++h) {
          const Index sh = h + ky - padding;
          if (sh < 0 || sh >= height) continue;
          for (Index w = 0; w < width; ++w) {
            const Index sw = w + kx - padding;
            if (sw < 0 || sw >= width) continue;
            cols(row, h * width + w) = xv(c, sh * width + sw);
          }
        }
      }
    }
  }
  const int xi = x.id();
  return t.record(std::move(cols), t.requires_grad(x),
                  [&t, xi, channels, height, width, kernel, padding, kk](const Matrix &g) {
                    Matrix d = Matrix::Zero(channels, height * width);
                    for (Index c = 0; c < channels; ++c) {
                      for (Index ky = 0; ky < kernel; ++ky) {
                        for (Index kx = 0; kx < kernel; ++kx) {
                          const Index row = c * kk + ky * kernel + kx;
                          for (Index h = 0; h < height; ++h) {
                            const Index sh = h + ky - padding;
                            if (sh < 0 || sh >= height) continue;
                            for (Index w = 0; w < width; ++w) {
                              const Index sw = w + kx - padding;
                              if (sw < 0 || sw >= width) continue;
                              d(c, sh * width + sw) += g(row, h * width + w);
                            }
                          }
                        }
                      }
                    }
                    t.accumulate(xi, d);
                  });
}

Var dropout(const Var &x, double rate, bool training, std::mt19937_64 &rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix m(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - rate);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? s : 0.0;
  return mul_const(x, m);
}

}  // namespace safecast::ops

namespace safecast::ops {

Var gather_rows(const Var &x, const std::vector<Index> &rows) {
  Tape &t = tape_of(x);
  const Matrix &xv = x.value();
  Matrix y(static_cast<Index>(rows.size()), xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= xv.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " outside " +
                           shape_string(xv));
    }
    y.row(static_cast<Index>(r)) = xv.row(rows[r]);
  }
  const int xi = x.id();
  const Index n = xv.rows(), c = xv.cols();
  return t.record(std::move(y), t.requires_grad(x), [&t, xi, rows, n, c](const Matrix &g) {
    Matrix d = Matrix::Zero(n, c);
    for (std::size_t r = 0; r < rows.size(); ++r) d.row(rows[r]) += g.row(static_cast<Index>(r));
    t.accumulate(xi, d);
  });
}

namespace {

void check_block_inputs(const Matrix &s_src, const Matrix &s_dst, const Matrix &adjacency,
                        Index block) {
  const Index n = s_src.rows();
  if (block <= 0 || n % block != 0) {
    throw DimensionError("block_graph_attention: " + std::to_string(n) +
                         " nodes do not split into blocks of " + std::to_string(block));
  }
  if (s_src.cols() != 1 || s_dst.cols() != 1 || s_dst.rows() != n) {
    throw DimensionError("block_graph_attention: scores must be N x 1, got " +
                         shape_string(s_src) + " and " + shape_string(s_dst));
  }
  if (adjacency.rows() != n || adjacency.cols() != block) {
    throw DimensionError("block_graph_attention: adjacency " + shape_string(adjacency) +
                         " does not match " + std::to_string(n) + " x " +
                         std::to_string(block));
  }
}

// Pre-activation logits e(i, j) = s_src(i) + s_dst(block start + j).
Matrix block_logits(const Matrix &s_src, const Matrix &s_dst, Index block) {
  const Index n = s_src.rows();
  Matrix e(n, block);
  for (Index b = 0; b < n; b += block) {
    e.middleRows(b, block) =
        s_src.middleRows(b, block).replicate(1, block) +
        s_dst.middleRows(b, block).transpose().replicate(block, 1);
  }
  return e;
}

}  // namespace

Matrix block_attention_coefficients(const Matrix &s_src, const Matrix &s_dst,
                                    const Matrix &adjacency, Index block, double slope) {
  check_block_inputs(s_src, s_dst, adjacency, block);
  const Matrix e = block_logits(s_src, s_dst, block);
  Matrix alpha = Matrix::Zero(e.rows(), block);
  for (Index r = 0; r < e.rows(); ++r) {
    double peak = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < block; ++c) {
      if (adjacency(r, c) != 0.0) {
        const double g = e(r, c) > 0 ? e(r, c) : slope * e(r, c);
        peak = std::max(peak, g);
      }
    }
    if (!std::isfinite(peak)) continue;
    double total = 0.0;
    for (Index c = 0; c < block; ++c) {
      if (adjacency(r, c) != 0.0) {
        const double g = e(r, c) > 0 ? e(r, c) : slope * e(r, c);
        alpha(r, c) = std::exp(g - peak);
        total += alpha(r, c);
      }
    }
    alpha.row(r) /= total;
  }
  return alpha;
}

Var block_graph_attention(const Var &h, const Var &s_src, const Var &s_dst,
                          const Matrix &adjacency, Index block, double slope) {
  Tape &t = tape_of(h, s_src);
  tape_of(h, s_dst);
  check_block_inputs(s_src.value(), s_dst.value(), adjacency, block);
  if (h.rows() != s_src.rows()) {
    throw DimensionError("block_graph_attention: features " + shape_string(h.value()) +
                         " vs scores " + shape_string(s_src.value()));
  }
  Matrix alpha =
      block_attention_coefficients(s_src.value(), s_dst.value(), adjacency, block, slope);
  const Index n = h.rows();
  Matrix y(n, h.cols());
  for (Index b = 0; b < n; b += block) {
    y.middleRows(b, block).noalias() = alpha.middleRows(b, block) * h.value().middleRows(b, block);
  }
  const int hi = h.id(), si = s_src.id(), di = s_dst.id();
  const bool rg = t.requires_grad(h) || t.requires_grad(s_src) || t.requires_grad(s_dst);
  return t.record(std::move(y), rg, [&t, hi, si, di, alpha, block, slope](const Matrix &g) {
    const Matrix &hv = t.value(hi);
    const Matrix e = block_logits(t.value(si), t.value(di), block);
    const Index n = hv.rows();
    Matrix dh(n, hv.cols());
    Matrix de(n, block);
    for (Index b = 0; b < n; b += block) {
      const auto a = alpha.middleRows(b, block);
      dh.middleRows(b, block).noalias() = a.transpose() * g.middleRows(b, block);
      const Matrix da = g.middleRows(b, block) * hv.middleRows(b, block).transpose();
      const Vector dot = da.cwiseProduct(a).rowwise().sum();
      de.middleRows(b, block) = a.cwiseProduct(da.colwise() - dot);
    }
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < block; ++c) {
        if (e(r, c) <= 0) de(r, c) *= slope;
      }
    }
    t.accumulate(hi, dh);
    t.accumulate(si, de.rowwise().sum());
    Matrix ds(n, 1);
    for (Index b = 0; b < n; b += block) {
      ds.middleRows(b, block) = de.middleRows(b, block).colwise().sum().transpose();
    }
    t.accumulate(di, ds);
  });
}

}  // namespace safecast::ops
