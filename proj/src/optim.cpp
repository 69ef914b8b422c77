#include "safecast/numeric/optim.hpp"

#include <cmath>
#include <numbers>

namespace safecast {

void Adam::step(const std::vector<Parameter *> &params, double lr) {
  for (const Parameter *p : params) {
    if (p->trainable && !p->grad.allFinite()) {
      throw TrainingError("non-finite gradient in parameter '" + p->name + "'");
    }
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (Parameter *p : params) {
    if (!p->trainable) continue;
    auto [it, fresh] = moments_.try_emplace(p->name);
    Moments &mo = it->second;
    if (fresh || mo.m.rows() != p->value.rows() || mo.m.cols() != p->value.cols()) {
      mo.m = Matrix::Zero(p->value.rows(), p->value.cols());
      mo.v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    mo.m = cfg_.beta1 * mo.m + (1.0 - cfg_.beta1) * p->grad;
    mo.v = cfg_.beta2 * mo.v + (1.0 - cfg_.beta2) * p->grad.cwiseAbs2();
    p->value.array() -=
        lr * (mo.m.array() / c1) / ((mo.v.array() / c2).sqrt() + cfg_.eps);
  }
}

double cosine_warm_restarts(double lr0, double period, double growth, double epoch) {
  if (!(lr0 > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(period > 0.0) || !(growth >= 1.0)) {
    throw std::invalid_argument("restart period must be positive and growth >= 1");
  }
  double t = std::max(epoch, 0.0);
  double len = period;
  // Tolerate accumulated rounding right at a boundary.
  while (t >= len - 1e-12 * len) {
    t -= len;
    len *= growth;
  }
  t = std::max(t, 0.0);
  return lr0 * (1.0 + std::cos(std::numbers::pi * t / len)) / 2.0;
}

}  // namespace safecast
