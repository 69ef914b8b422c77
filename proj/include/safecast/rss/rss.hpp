#pragma once

#include "safecast/io/trajectory.hpp"

#include <algorithm>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace safecast {

/// Kinematic bounds for responsibility-sensitive safe distances.
struct RssParameters {
  double rho = 0.8;        // reaction time, s
  double a_max = 2.0;      // max longitudinal acceleration during reaction, m/s^2
  double b_min = 4.0;      // min braking of the rear vehicle, m/s^2
  double b_max = 6.0;      // max braking of the front vehicle, m/s^2
  double alpha_max = 0.5;  // max lateral acceleration, m/s^2
  double beta_min = 1.0;   // min lateral deceleration, m/s^2
  double mu = 1.0;         // lateral fluctuation margin, m
  Context context = Context::Highway;

  /// Throws std::invalid_argument unless all bounds are positive and
  /// b_min <= b_max.
  void validate() const;
  static RssParameters defaults(Context context);
};

/// [v_r rho + a_max rho^2 / 2 + (v_r + rho a_max)^2 / (2 b_min) - v_f^2 / (2 b_max)]_+
template <typename Scalar>
Scalar safe_longitudinal_distance(Scalar v_rear, Scalar v_front, const RssParameters &p) {
  if (v_rear < Scalar(0) || v_front < Scalar(0)) {
    throw std::invalid_argument("longitudinal speeds must be non-negative");
  }
  const Scalar rho(p.rho), a_max(p.a_max), b_min(p.b_min), b_max(p.b_max);
  const Scalar reach = v_rear + rho * a_max;
  const Scalar d = v_rear * rho + Scalar(0.5) * a_max * rho * rho +
                   reach * reach / (Scalar(2) * b_min) - v_front * v_front / (Scalar(2) * b_max);
  return std::max(d, Scalar(0));
}

/// mu + [ (v1 + v1r) rho / 2 + v1r^2 / (2 beta_min) - ((v2 + v2r) rho / 2 - v2r^2 / (2 beta_min)) ]_+
/// with v1r = v1 + alpha_max rho and v2r = v2 + alpha_max rho. v1 is the
/// right vehicle's lateral speed, v2 the left vehicle's.
template <typename Scalar>
Scalar safe_lateral_distance(Scalar v_right, Scalar v_left, const RssParameters &p) {
  const Scalar rho(p.rho), alpha(p.alpha_max), beta(p.beta_min);
  const Scalar v1r = v_right + alpha * rho;
  // Same sign as v1r: the left vehicle's term adds alpha_max rho rather
  // than subtracting it.
  const Scalar v2r = v_left + alpha * rho;
  const Scalar right_reach = (v_right + v1r) / Scalar(2) * rho + v1r * v1r / (Scalar(2) * beta);
  const Scalar left_reach = (v_left + v2r) / Scalar(2) * rho - v2r * v2r / (Scalar(2) * beta);
  return Scalar(p.mu) + std::max(right_reach - left_reach, Scalar(0));
}

struct SafetyEnvelope {
  double d_lon = 0.0;
  double d_lat = 0.0;
  std::optional<int> leader_id;
  std::optional<int> lateral_id;
};

/// Lane of an agent: its lane_id when present, else lateral binning.
int lane_of(const AgentState &s, double lane_width = 3.5);

/// d_lon against the nearest same-lane agent ahead (0 if none); d_lat
/// against the nearest adjacent-lane agent (mu if none). Ties on
/// distance break by agent id.
SafetyEnvelope safety_envelope(const AgentState &ego, std::span<const AgentState> others,
                               const RssParameters &params, double lane_width = 3.5);

struct RssEstimate {
  RssParameters params;
  bool fallback = false;  // some bound fell back to the context default
  std::vector<std::string> warnings;
};

/// Nearest-rank percentile: the ceil(pct/100 * n)-th smallest sample.
double percentile(std::vector<double> samples, double pct);

/// Percentile estimates from recorded accelerations (x longitudinal, y
/// lateral): a_max and alpha_max from the 99th percentile of non-negative
/// samples, b_max and b_min from the 99th and 50th percentiles of
/// decelerations, beta_min from the 50th percentile of lateral
/// decelerations. rho and mu come from the context defaults.
RssEstimate estimate_parameters(const std::vector<Track> &tracks, Context context);

}  // namespace safecast
