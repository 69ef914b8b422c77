#pragma once

#include "safecast/numeric/tape.hpp"

#include <random>
#include <vector>

namespace safecast::ops {

// Arithmetic. Operands must share a tape.
Var matmul(const Var &a, const Var &b);
Var add(const Var &a, const Var &b);
Var sub(const Var &a, const Var &b);
Var mul(const Var &a, const Var &b);  // elementwise
Var div(const Var &a, const Var &b);  // elementwise
Var scale(const Var &a, double s);
Var add_scalar(const Var &a, double s);
/// x (n x d) plus a 1 x d row added to every row.
Var add_row(const Var &x, const Var &row);
/// x (n x d) times a 1 x d row, elementwise per row.
Var mul_row(const Var &x, const Var &row);
/// x (n x d) times an n x 1 column, elementwise per column.
Var mul_col(const Var &x, const Var &col);
/// Elementwise product with a constant of matching shape.
Var mul_const(const Var &x, const Matrix &c);
/// c * x for a constant left factor.
Var matmul_const(const Matrix &c, const Var &x);

// Structure.
Var transpose(const Var &x);
Var concat_cols(const std::vector<Var> &xs);
Var concat_rows(const std::vector<Var> &xs);
Var slice_rows(const Var &x, Index start, Index count);
Var slice_cols(const Var &x, Index start, Index count);
Var sum(const Var &x);
Var mean(const Var &x);
Var sum_rows(const Var &x);  // 1 x d column sums

// Elementwise nonlinearities.
Var elu(const Var &x, double alpha = 1.0);
Var leaky_relu(const Var &x, double slope);
Var relu(const Var &x);
Var sigmoid(const Var &x);
Var tanh(const Var &x);
Var exp(const Var &x);
Var log(const Var &x);
Var square(const Var &x);
/// max(x, lo) elementwise; the gradient passes only where x > lo.
Var clamp_min(const Var &x, double lo);

/// Row-wise softmax. Entries with mask(i,j) == 0 get probability 0; a row
/// with no unmasked entries is all zero.
Var softmax_rows(const Var &x);
Var masked_softmax_rows(const Var &x, const Matrix &mask);

/// Splits columns into halves [a | b] and returns a * sigmoid(b).
Var glu(const Var &x);

/// Per-row standardization (no affine); eps added to the variance.
Var standardize_rows(const Var &x, double eps = 1e-5);
/// Per-column standardization over rows with row_mask == 1, using the
/// given statistics source. Rows outside the mask are transformed with
/// the same statistics but do not contribute to them.
Var standardize_cols(const Var &x, const Vector &row_mask, double eps = 1e-5);
/// Column affine transform with fixed statistics (inference batch norm).
Var standardize_cols_fixed(const Var &x, const RowVector &mean, const RowVector &var,
                           double eps = 1e-5);

/// im2col for a (channels x H*W) row-major grid with square odd kernel
/// and zero padding; result is (channels*k*k) x (H*W).
Var im2col(const Var &x, Index height, Index width, Index kernel, Index padding);

/// Rows of x in the given order (repeats allowed); backward scatter-adds.
Var gather_rows(const Var &x, const std::vector<Index> &rows);

/// Graph attention restricted to consecutive blocks of `block` nodes.
///
/// h is N x d, s_src and s_dst are N x 1 attention scores and adjacency
/// is N x block, where adjacency(i, j) links node i to node j of its own
/// block. Returns alpha * h per block with
/// alpha = masked_softmax(leaky_relu(s_src_i + s_dst_j)); nodes without
/// neighbors aggregate to zero.
Var block_graph_attention(const Var &h, const Var &s_src, const Var &s_dst,
                          const Matrix &adjacency, Index block, double slope);

/// Attention coefficients of block_graph_attention, N x block.
Matrix block_attention_coefficients(const Matrix &s_src, const Matrix &s_dst,
                                    const Matrix &adjacency, Index block, double slope);

/// Dropout with inverted scaling. Identity when !training or rate == 0.
Var dropout(const Var &x, double rate, bool training, std::mt19937_64 &rng);

}  // namespace safecast::ops
