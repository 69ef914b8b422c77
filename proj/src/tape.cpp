#include "safecast/numeric/tape.hpp"

#include <sstream>

namespace safecast {

std::string shape_string(const Matrix &m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

const Matrix &Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix &v = value();
  if (v.size() != 1) {
    throw DimensionError("scalar() on non-scalar " + shape_string(v));
  }
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), Matrix(), false, nullptr, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter &p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, Matrix(), p.trainable, nullptr, &p});
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), requires_grad,
                        requires_grad ? std::move(backward) : nullptr, nullptr});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Matrix &contribution) {
  Node &n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = contribution;
  } else {
    n.grad += contribution;
  }
}

void Tape::backward(const Var &root) {
  if (root.tape() != this) throw std::logic_error("backward on foreign tape");
  Node &r = nodes_[root.id()];
  if (r.value.size() != 1) {
    throw DimensionError("backward root must be scalar, got " + shape_string(r.value));
  }
  if (!r.requires_grad) return;
  r.grad = Matrix::Ones(1, 1);
  for (int id = root.id(); id >= 0; --id) {
    Node &n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(n.grad);
    if (n.param != nullptr) n.param->grad += n.grad;
    // Interior gradients are dead after propagation.
    if (n.param == nullptr && id != root.id()) n.grad.resize(0, 0);
  }
}

}  // namespace safecast
