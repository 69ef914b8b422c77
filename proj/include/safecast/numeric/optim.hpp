#pragma once

#include "safecast/numeric/tape.hpp"

#include <map>
#include <string>
#include <vector>

namespace safecast {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are keyed by parameter name so the
/// optimizer survives model copies and checkpoint round-trips.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update using each parameter's accumulated gradient.
  /// Throws TrainingError naming the first parameter with a non-finite
  /// gradient; no parameter is modified in that case.
  void step(const std::vector<Parameter *> &params, double lr);

  long steps() const { return steps_; }
  void set_steps(long s) { steps_ = s; }

  struct Moments {
    Matrix m;
    Matrix v;
  };
  std::map<std::string, Moments> &moments() { return moments_; }
  const std::map<std::string, Moments> &moments() const { return moments_; }

 private:
  AdamConfig cfg_;
  long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Cosine annealing with warm restarts evaluated at fractional epoch
/// `epoch`. Cycle i has length period * growth^i; the rate is
/// lr0 * (1 + cos(pi * t_i / T_i)) / 2 within a cycle and lr0 at every
/// cycle start.
double cosine_warm_restarts(double lr0, double period, double growth, double epoch);

}  // namespace safecast
