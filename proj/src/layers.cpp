#include "safecast/numeric/layers.hpp"

#include <cmath>

namespace safecast {

Var activate(const Var &x, const Activation &act) {
  switch (act.kind) {
    case Activation::Kind::Elu:
      return ops::elu(x);
    case Activation::Kind::LeakyRelu:
      return ops::leaky_relu(x, act.slope);
    case Activation::Kind::Relu:
      return ops::relu(x);
    case Activation::Kind::Glu:
      return ops::glu(x);
    case Activation::Kind::Softmax:
      if (act.axis == 1) return ops::softmax_rows(x);
      if (act.axis == 0) return ops::transpose(ops::softmax_rows(ops::transpose(x)));
      throw DimensionError("softmax: axis must be 0 or 1, got " + std::to_string(act.axis));
    case Activation::Kind::Sigmoid:
      return ops::sigmoid(x);
    case Activation::Kind::Tanh:
      return ops::tanh(x);
  }
  throw std::logic_error("unknown activation");
}

Matrix init_uniform(Index rows, Index cols, Index fan_in, std::mt19937_64 &rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Linear::Linear(std::string name, Index in, Index out, std::mt19937_64 &rng, bool bias)
    : weight_(name + ".weight", init_uniform(in, out, in, rng)),
      bias_(name + ".bias", Matrix::Zero(1, out)),
      has_bias_(bias) {}

Var Linear::operator()(Tape &t, const Var &x) {
  if (x.cols() != weight_.value.rows()) {
    throw DimensionError("linear " + weight_.name + ": input " + shape_string(x.value()) +
                         " vs weight " + shape_string(weight_.value));
  }
  Var y = ops::matmul(x, t.param(weight_));
  return has_bias_ ? ops::add_row(y, t.param(bias_)) : y;
}

void Linear::collect(std::vector<Parameter *> &out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

LayerNorm::LayerNorm(std::string name, Index features, double eps)
    : gain_(name + ".gain", Matrix::Ones(1, features)),
      bias_(name + ".bias", Matrix::Zero(1, features)),
      eps_(eps) {}

Var LayerNorm::operator()(Tape &t, const Var &x) {
  Var n = ops::standardize_rows(x, eps_);
  return ops::add_row(ops::mul_row(n, t.param(gain_)), t.param(bias_));
}

void LayerNorm::collect(std::vector<Parameter *> &out) {
  out.push_back(&gain_);
  out.push_back(&bias_);
}

BatchNorm::BatchNorm(std::string name, Index features, double momentum, double eps)
    : gain_(name + ".gain", Matrix::Ones(1, features)),
      bias_(name + ".bias", Matrix::Zero(1, features)),
      running_mean_(name + ".running_mean", Matrix::Zero(1, features)),
      running_var_(name + ".running_var", Matrix::Ones(1, features)),
      momentum_(momentum),
      eps_(eps) {
  running_mean_.trainable = false;
  running_var_.trainable = false;
}

Var BatchNorm::operator()(Tape &t, const Var &x, const Vector &row_mask, bool training) {
  if (x.cols() != gain_.value.cols()) {
    throw DimensionError("batch norm " + gain_.name + ": input " + shape_string(x.value()) +
                         " vs " + std::to_string(gain_.value.cols()) + " features");
  }
  Var n;
  const double count = row_mask.sum();
  if (training && count > 0) {
    n = ops::standardize_cols(x, row_mask, eps_);
    RowVector m = RowVector::Zero(x.cols());
    RowVector v = RowVector::Zero(x.cols());
    const Matrix &xv = x.value();
    for (Index r = 0; r < xv.rows(); ++r) {
      if (row_mask(r) != 0.0) m += xv.row(r);
    }
    m /= count;
    for (Index r = 0; r < xv.rows(); ++r) {
      if (row_mask(r) != 0.0) v += (xv.row(r) - m).array().square().matrix();
    }
    v /= count;
    running_mean_.value = (1.0 - momentum_) * running_mean_.value + momentum_ * m;
    running_var_.value = (1.0 - momentum_) * running_var_.value + momentum_ * v;
  } else {
    n = ops::standardize_cols_fixed(x, running_mean_.value.row(0), running_var_.value.row(0),
                                    eps_);
  }
  return ops::add_row(ops::mul_row(n, t.param(gain_)), t.param(bias_));
}

void BatchNorm::collect(std::vector<Parameter *> &out) {
  out.push_back(&gain_);
  out.push_back(&bias_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

LstmCell::LstmCell(std::string name, Index input, Index hidden, std::mt19937_64 &rng)
    : w_x_(name + ".w_input", init_uniform(input, 4 * hidden, input, rng)),
      w_h_(name + ".w_hidden", init_uniform(hidden, 4 * hidden, hidden, rng)),
      b_(name + ".bias", Matrix::Zero(1, 4 * hidden)),
      hidden_(hidden) {}

LstmState LstmCell::zero_state(Tape &t, Index rows) const {
  return {t.constant(Matrix::Zero(rows, hidden_)), t.constant(Matrix::Zero(rows, hidden_))};
}

LstmState LstmCell::operator()(Tape &t, const Var &x, const LstmState &prev) {
  if (prev.h.cols() != hidden_ || prev.c.cols() != hidden_) {
    throw DimensionError("lstm " + w_x_.name + ": state width " +
                         std::to_string(prev.h.cols()) + " vs hidden size " +
                         std::to_string(hidden_));
  }
  if (x.cols() != w_x_.value.rows()) {
    throw DimensionError("lstm " + w_x_.name + ": input " + shape_string(x.value()) +
                         " vs weight " + shape_string(w_x_.value));
  }
  Var z = ops::add_row(
      ops::add(ops::matmul(x, t.param(w_x_)), ops::matmul(prev.h, t.param(w_h_))),
      t.param(b_));
  Var i = ops::sigmoid(ops::slice_cols(z, 0, hidden_));
  Var f = ops::sigmoid(ops::slice_cols(z, hidden_, hidden_));
  Var g = ops::tanh(ops::slice_cols(z, 2 * hidden_, hidden_));
  Var o = ops::sigmoid(ops::slice_cols(z, 3 * hidden_, hidden_));
  Var c = ops::add(ops::mul(f, prev.c), ops::mul(i, g));
  Var h = ops::mul(o, ops::tanh(c));
  return {h, c};
}

void LstmCell::collect(std::vector<Parameter *> &out) {
  out.push_back(&w_x_);
  out.push_back(&w_h_);
  out.push_back(&b_);
}

Conv2d::Conv2d(std::string name, Index in_channels, Index out_channels, std::mt19937_64 &rng,
               Index kernel, Index padding)
    : kernel_(name + ".kernel", init_uniform(out_channels, in_channels * kernel * kernel,
                                              in_channels * kernel * kernel, rng)),
      bias_(name + ".bias", Matrix::Zero(1, out_channels)),
      in_channels_(in_channels),
      kernel_size_(kernel),
      padding_(padding) {
  if (kernel % 2 == 0) throw DimensionError("conv2d: kernel size must be odd");
  if (2 * padding != kernel - 1) {
    throw DimensionError("conv2d: padding " + std::to_string(padding) +
                         " does not preserve extents for kernel " + std::to_string(kernel));
  }
}

Var Conv2d::operator()(Tape &t, const Var &x, Index height, Index width) {
  if (x.cols() != in_channels_) {
    throw DimensionError("conv2d " + kernel_.name + ": expected " +
                         std::to_string(in_channels_) + " input channels, got " +
                         shape_string(x.value()));
  }
  Var cols = ops::im2col(ops::transpose(x), height, width, kernel_size_, padding_);
  Var y = ops::matmul(ops::transpose(cols), ops::transpose(t.param(kernel_)));
  return ops::add_row(y, t.param(bias_));
}

void Conv2d::collect(std::vector<Parameter *> &out) {
  out.push_back(&kernel_);
  out.push_back(&bias_);
}

}  // namespace safecast
