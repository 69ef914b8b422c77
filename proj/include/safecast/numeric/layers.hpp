#pragma once

#include "safecast/numeric/ops.hpp"

#include <random>
#include <utility>
#include <vector>

namespace safecast {

/// Nonlinearity selector for activate().
struct Activation {
  enum class Kind { Elu, LeakyRelu, Relu, Glu, Softmax, Sigmoid, Tanh };
  Kind kind = Kind::Elu;
  double slope = 0.2;  // LeakyRelu only
  int axis = 1;        // Softmax only: 0 normalizes columns, 1 rows

  static Activation elu() { return {Kind::Elu}; }
  static Activation leaky_relu(double s) { return {Kind::LeakyRelu, s}; }
  static Activation relu() { return {Kind::Relu}; }
  static Activation glu() { return {Kind::Glu}; }
  static Activation softmax(int axis) { return {Kind::Softmax, 0.0, axis}; }
  static Activation sigmoid() { return {Kind::Sigmoid}; }
  static Activation tanh() { return {Kind::Tanh}; }
};

Var activate(const Var &x, const Activation &act);

/// Uniform in +-1/sqrt(fan_in).
Matrix init_uniform(Index rows, Index cols, Index fan_in, std::mt19937_64 &rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, Index in, Index out, std::mt19937_64 &rng, bool bias = true);

  /// x (n x in) -> n x out.
  Var operator()(Tape &t, const Var &x);
  void collect(std::vector<Parameter *> &out);

  Index in_features() const { return weight_.value.rows(); }
  Index out_features() const { return weight_.value.cols(); }
  Parameter &weight() { return weight_; }
  Parameter &bias() { return bias_; }

 private:
  Parameter weight_;
  Parameter bias_;
  bool has_bias_ = true;
};

/// Normalizes each row over the last axis, then applies gain and bias.
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(std::string name, Index features, double eps = 1e-5);

  Var operator()(Tape &t, const Var &x);
  void collect(std::vector<Parameter *> &out);

 private:
  Parameter gain_;
  Parameter bias_;
  double eps_ = 1e-5;
};

/// Feature-wise normalization over the rows of one forward call. Running
/// statistics are stored as non-trainable parameters so they checkpoint.
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(std::string name, Index features, double momentum = 0.1, double eps = 1e-5);

  /// Rows with row_mask == 0 are transformed but excluded from statistics.
  Var operator()(Tape &t, const Var &x, const Vector &row_mask, bool training);
  void collect(std::vector<Parameter *> &out);

  double momentum() const { return momentum_; }
  void set_momentum(double m) { momentum_ = m; }

 private:
  Parameter gain_;
  Parameter bias_;
  Parameter running_mean_;
  Parameter running_var_;
  double momentum_ = 0.1;
  double eps_ = 1e-5;
};

struct LstmState {
  Var h;
  Var c;
};

/// Gate layout along columns: input, forget, candidate, output.
class LstmCell {
 public:
  LstmCell() = default;
  LstmCell(std::string name, Index input, Index hidden, std::mt19937_64 &rng);

  /// x (n x input), state rows n -> next state.
  LstmState operator()(Tape &t, const Var &x, const LstmState &prev);
  LstmState zero_state(Tape &t, Index rows) const;
  void collect(std::vector<Parameter *> &out);

  Index hidden() const { return hidden_; }
  Parameter &input_weight() { return w_x_; }
  Parameter &recurrent_weight() { return w_h_; }
  Parameter &bias() { return b_; }

 private:
  Parameter w_x_;
  Parameter w_h_;
  Parameter b_;
  Index hidden_ = 0;
};

/// Same-size 2D cross-correlation with zero padding.
///
/// Inputs and outputs are laid out positions x channels, where position
/// index is h * width + w.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, Index in_channels, Index out_channels, std::mt19937_64 &rng,
         Index kernel = 3, Index padding = 1);

  Var operator()(Tape &t, const Var &x, Index height, Index width);
  void collect(std::vector<Parameter *> &out);

  Parameter &kernel() { return kernel_; }
  Parameter &bias() { return bias_; }
  Index in_channels() const { return in_channels_; }

 private:
  Parameter kernel_;  // out x (in * k * k)
  Parameter bias_;
  Index in_channels_ = 0;
  Index kernel_size_ = 3;
  Index padding_ = 1;
};

}  // namespace safecast
