#include "safecast/rss/rss.hpp"

#include <cmath>
#include <limits>

namespace safecast {

namespace {

constexpr double kFloorAMax = 0.5;
constexpr double kFloorBMin = 1.0;
constexpr double kFloorAlphaMax = 0.2;
constexpr double kFloorBetaMin = 0.5;

}  // namespace

void RssParameters::validate() const {
  auto positive = [](double v, const char *name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw std::invalid_argument(std::string("RSS parameter ") + name +
                                  " must be positive and finite");
    }
  };
  positive(rho, "rho");
  positive(a_max, "a_max");
  positive(b_min, "b_min");
  positive(b_max, "b_max");
  positive(alpha_max, "alpha_max");
  positive(beta_min, "beta_min");
  positive(mu, "mu");
  if (b_min > b_max) throw std::invalid_argument("RSS parameter b_min exceeds b_max");
}

RssParameters RssParameters::defaults(Context context) {
  RssParameters p;
  p.context = context;
  if (context == Context::Urban) {
    p.a_max = 1.5;
    p.b_min = 3.0;
    p.b_max = 5.0;
    p.mu = 2.5;
  }
  return p;
}

int lane_of(const AgentState &s, double lane_width) {
  if (s.lane_id) return *s.lane_id;
  return static_cast<int>(std::floor(s.p.y() / lane_width + 0.5));
}

SafetyEnvelope safety_envelope(const AgentState &ego, std::span<const AgentState> others,
                               const RssParameters &params, double lane_width) {
  SafetyEnvelope env;
  env.d_lat = params.mu;
  const int ego_lane = lane_of(ego, lane_width);

  double best_gap = std::numeric_limits<double>::infinity();
  const AgentState *leader = nullptr;
  double best_lat = std::numeric_limits<double>::infinity();
  const AgentState *side = nullptr;
  for (const AgentState &o : others) {
    if (o.agent_id == ego.agent_id) continue;
    const int lane = lane_of(o, lane_width);
    if (lane == ego_lane) {
      const double gap = o.p.x() - ego.p.x();
      if (gap <= 0.0) continue;
      if (gap < best_gap || (gap == best_gap && leader && o.agent_id < leader->agent_id)) {
        best_gap = gap;
        leader = &o;
      }
    } else if (std::abs(lane - ego_lane) == 1) {
      const double dist = (o.p - ego.p).norm();
      if (dist < best_lat || (dist == best_lat && side && o.agent_id < side->agent_id)) {
        best_lat = dist;
        side = &o;
      }
    }
  }
  if (leader) {
    env.leader_id = leader->agent_id;
    env.d_lon = safe_longitudinal_distance(std::max(ego.v.x(), 0.0),
                                           std::max(leader->v.x(), 0.0), params);
  }
  if (side) {
    env.lateral_id = side->agent_id;
    const bool ego_is_right = lane_of(*side, lane_width) > ego_lane;
    const double v_right = ego_is_right ? ego.v.y() : side->v.y();
    const double v_left = ego_is_right ? side->v.y() : ego.v.y();
    env.d_lat = safe_lateral_distance(v_right, v_left, params);
  }
  return env;
}

double percentile(std::vector<double> samples, double pct) {
  if (samples.empty()) throw std::invalid_argument("percentile of empty sample");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, samples.size());
  return samples[rank - 1];
}

RssEstimate estimate_parameters(const std::vector<Track> &tracks, Context context) {
  RssEstimate est;
  const RssParameters defaults = RssParameters::defaults(context);
  est.params = defaults;

  bool usable = false;
  for (const Track &t : tracks) usable = usable || t.size() >= 3;
  if (!usable) {
    est.fallback = true;
    est.warnings.push_back("no track with at least 3 frames; using context defaults");
    return est;
  }

  std::vector<double> lon_acc, lon_dec, lat_acc, lat_dec;
  for (const Track &t : tracks) {
    for (const AgentState &s : t) {
      if (s.a.x() >= 0.0) lon_acc.push_back(s.a.x());
      if (s.a.x() <= 0.0) lon_dec.push_back(-s.a.x());
      if (s.a.y() >= 0.0) lat_acc.push_back(s.a.y());
      if (s.a.y() <= 0.0) lat_dec.push_back(-s.a.y());
    }
  }
  auto fallback = [&](const char *what) {
    est.fallback = true;
    est.warnings.push_back(std::string("no ") + what + " samples; using context default");
  };

  RssParameters &p = est.params;
  if (lon_acc.empty()) {
    fallback("longitudinal acceleration");
  } else {
    p.a_max = std::max(percentile(lon_acc, 99.0), kFloorAMax);
  }
  if (lon_dec.empty()) {
    fallback("longitudinal deceleration");
  } else {
    p.b_max = percentile(lon_dec, 99.0);
    p.b_min = std::max(percentile(lon_dec, 50.0), kFloorBMin);
    p.b_max = std::max(p.b_max, p.b_min);
  }
  if (lat_acc.empty()) {
    fallback("lateral acceleration");
  } else {
    p.alpha_max = std::max(percentile(lat_acc, 99.0), kFloorAlphaMax);
  }
  if (lat_dec.empty()) {
    fallback("lateral deceleration");
  } else {
    p.beta_min = std::max(percentile(lat_dec, 50.0), kFloorBetaMin);
  }
  p.rho = defaults.rho;
  p.mu = defaults.mu;
  p.context = context;
  p.validate();
  return est;
}

}  // namespace safecast
