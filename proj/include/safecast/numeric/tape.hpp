#pragma once

#include <Eigen/Core>

#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace safecast {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

/// Raised when operand extents do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string shape_string(const Matrix &m);

/// A named trainable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape *tape, int id) : tape_(tape), id_(id) {}

  const Matrix &value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const;

  Tape *tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape *tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of primitive operations.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the
/// node list is a reverse topological order and visits each node once.
class Tape {
 public:
  using Backward = std::function<void(const Matrix &upstream)>;

  Tape() = default;
  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var constant(Matrix value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter &p);

  /// Records a derived node. `backward` receives dL/d(value) and must
  /// route contributions to parents through accumulate().
  Var record(Matrix value, bool requires_grad, Backward backward);

  bool requires_grad(const Var &v) const { return nodes_[v.id()].requires_grad; }
  const Matrix &value(int id) const { return nodes_[id].value; }
  void accumulate(int id, const Matrix &contribution);

  /// Seeds d(root)/d(root) = 1 and sweeps back. Parameter gradients are
  /// added to Parameter::grad (not overwritten).
  void backward(const Var &root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
    Parameter *param = nullptr;
  };
  std::deque<Node> nodes_;
  std::unordered_map<Parameter *, int> param_nodes_;
};

}  // namespace safecast
