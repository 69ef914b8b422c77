#include "safecast/io/trajectory.hpp"

#include "safecast/rss/rss.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

namespace safecast {

std::string to_string(AgentType t) {
  switch (t) {
    case AgentType::Vehicle:
      return "vehicle";
    case AgentType::Pedestrian:
      return "pedestrian";
    case AgentType::Bicycle:
      return "bicycle";
  }
  return "vehicle";
}

std::string to_string(Context c) { return c == Context::Urban ? "urban" : "highway"; }

AgentType parse_agent_type(const std::string &s) {
  if (s == "vehicle" || s == "0") return AgentType::Vehicle;
  if (s == "pedestrian" || s == "1") return AgentType::Pedestrian;
  if (s == "bicycle" || s == "2") return AgentType::Bicycle;
  throw FormatError("unknown agent type '" + s + "'");
}

Context parse_context(const std::string &s) {
  if (s == "highway") return Context::Highway;
  if (s == "urban") return Context::Urban;
  throw std::invalid_argument("unknown context '" + s + "' (expected highway or urban)");
}

TrajectoryFormat parse_format(const std::string &s) {
  if (s == "ngsim_csv") return TrajectoryFormat::NgsimCsv;
  if (s == "apollo_txt") return TrajectoryFormat::ApolloTxt;
  throw std::invalid_argument("unknown trajectory format '" + s + "'");
}

namespace {

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string &line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, sep)) out.push_back(trim(field));
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

std::optional<double> parse_double(const std::string &s) {
  double v = 0.0;
  const char *end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::optional<int> parse_int(const std::string &s) {
  int v = 0;
  const char *end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return v;
}

// Groups states by agent, sorts by frame and drops repeated frames.
std::vector<Track> group_tracks(std::vector<AgentState> &states, std::size_t &skipped) {
  std::stable_sort(states.begin(), states.end(), [](const AgentState &a, const AgentState &b) {
    return std::tie(a.agent_id, a.frame) < std::tie(b.agent_id, b.frame);
  });
  std::vector<Track> tracks;
  for (const AgentState &s : states) {
    if (tracks.empty() || tracks.back().front().agent_id != s.agent_id) {
      tracks.push_back({s});
    } else if (tracks.back().back().frame == s.frame) {
      ++skipped;
    } else {
      tracks.back().push_back(s);
    }
  }
  return tracks;
}

AgentType apollo_type(int code) {
  switch (code) {
    case 3:
      return AgentType::Pedestrian;
    case 4:
      return AgentType::Bicycle;
    default:
      return AgentType::Vehicle;
  }
}

}  // namespace

void derive_kinematics(Track &track, double frame_rate_hz) {
  const std::size_t n = track.size();
  if (n < 2) return;
  auto diff = [&](auto field, std::size_t lo, std::size_t hi) -> Vec2 {
    const double dt = (track[hi].frame - track[lo].frame) / frame_rate_hz;
    return (field(track[hi]) - field(track[lo])) / dt;
  };
  auto pos = [](const AgentState &s) { return s.p; };
  auto vel = [](const AgentState &s) { return s.v; };
  for (std::size_t i = 0; i < n; ++i) {
    track[i].v = diff(pos, i == 0 ? 0 : i - 1, i + 1 == n ? n - 1 : i + 1);
  }
  for (std::size_t i = 0; i < n; ++i) {
    track[i].a = diff(vel, i == 0 ? 0 : i - 1, i + 1 == n ? n - 1 : i + 1);
  }
}

LoadResult load_trajectories(const std::filesystem::path &path, TrajectoryFormat format,
                             double frame_rate_hz) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open trajectory file " + path.string());
  LoadResult res;
  std::vector<AgentState> states;
  std::string line;
  bool any_content = false;

  if (format == TrajectoryFormat::NgsimCsv) {
    std::string header;
    while (std::getline(is, header) && trim(header).empty()) {
    }
    if (trim(header).empty()) throw EmptyInputError("empty trajectory file " + path.string());
    any_content = true;
    const std::vector<std::string> cols = split(header, ',');
    const char *required[] = {"frame", "agent_id", "x",    "y",    "vx",
                              "vy",    "ax",       "ay",   "type", "lane_id"};
    std::map<std::string, std::size_t> at;
    for (const char *name : required) {
      auto it = std::find(cols.begin(), cols.end(), name);
      if (it == cols.end()) {
        throw FormatError(path.string() + ": missing required column '" + name + "'");
      }
      at[name] = static_cast<std::size_t>(it - cols.begin());
    }
    while (std::getline(is, line)) {
      if (trim(line).empty()) continue;
      const std::vector<std::string> f = split(line, ',');
      if (f.size() < cols.size()) {
        ++res.skipped_rows;
        continue;
      }
      auto num = [&](const char *name) { return parse_double(f[at[name]]); };
      const auto frame = parse_int(f[at["frame"]]);
      const auto id = parse_int(f[at["agent_id"]]);
      const auto x = num("x"), y = num("y"), vx = num("vx"), vy = num("vy"), ax = num("ax"),
                 ay = num("ay");
      if (!frame || !id || !x || !y || !vx || !vy || !ax || !ay) {
        ++res.skipped_rows;
        continue;
      }
      AgentState s;
      s.frame = *frame;
      s.agent_id = *id;
      s.p = {*x, *y};
      s.v = {*vx, *vy};
      s.a = {*ax, *ay};
      try {
        s.type = parse_agent_type(f[at["type"]]);
      } catch (const FormatError &) {
        ++res.skipped_rows;
        continue;
      }
      const std::string &lane = f[at["lane_id"]];
      if (!lane.empty()) {
        const auto l = parse_int(lane);
        if (!l) {
          ++res.skipped_rows;
          continue;
        }
        s.lane_id = *l;
      }
      states.push_back(s);
    }
    res.tracks = group_tracks(states, res.skipped_rows);
    for (const Track &t : res.tracks) {
      for (std::size_t i = 1; i + 1 < t.size(); ++i) {
        const double dt = (t[i + 1].frame - t[i - 1].frame) / frame_rate_hz;
        const Vec2 v = (t[i + 1].p - t[i - 1].p) / dt;
        if ((v - t[i].v).norm() > 0.5) ++res.velocity_warnings;
      }
    }
  } else {
    while (std::getline(is, line)) {
      if (trim(line).empty()) continue;
      any_content = true;
      std::istringstream ls(line);
      std::vector<std::string> f;
      std::string tok;
      while (ls >> tok) f.push_back(tok);
      if (f.size() < 5) {
        ++res.skipped_rows;
        continue;
      }
      const auto frame = parse_int(f[0]);
      const auto id = parse_int(f[1]);
      const auto type = parse_int(f[2]);
      const auto x = parse_double(f[3]);
      const auto y = parse_double(f[4]);
      if (!frame || !id || !type || !x || !y) {
        ++res.skipped_rows;
        continue;
      }
      AgentState s;
      s.frame = *frame;
      s.agent_id = *id;
      s.type = apollo_type(*type);
      s.p = {*x, *y};
      states.push_back(s);
    }
    if (!any_content) throw EmptyInputError("empty trajectory file " + path.string());
    res.tracks = group_tracks(states, res.skipped_rows);
    for (Track &t : res.tracks) derive_kinematics(t, frame_rate_hz);
  }
  return res;
}

void write_ngsim_csv(const std::filesystem::path &path, const std::vector<Track> &tracks) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "frame,agent_id,x,y,vx,vy,ax,ay,type,lane_id\n";
  os.precision(17);
  for (const Track &t : tracks) {
    for (const AgentState &s : t) {
      os << s.frame << ',' << s.agent_id << ',' << s.p.x() << ',' << s.p.y() << ',' << s.v.x()
         << ',' << s.v.y() << ',' << s.a.x() << ',' << s.a.y() << ',' << to_string(s.type)
         << ',';
      if (s.lane_id) os << *s.lane_id;
      os << '\n';
    }
  }
}

int WindowConfig::history_steps() const {
  return static_cast<int>(std::lround(history_s * frame_rate_hz / downsample));
}

int WindowConfig::future_steps() const {
  return static_cast<int>(std::lround(future_s * frame_rate_hz / downsample));
}

namespace {

const AgentState *state_at(const Track &t, int frame) {
  auto it = std::lower_bound(t.begin(), t.end(), frame,
                             [](const AgentState &s, int f) { return s.frame < f; });
  return (it != t.end() && it->frame == frame) ? &*it : nullptr;
}

std::optional<SceneWindow> make_window(const std::vector<Track> &tracks, std::size_t ego_index,
                                       int anchor, const WindowConfig &cfg,
                                       const std::string &source) {
  const Track &ego = tracks[ego_index];
  const int th = cfg.history_steps();
  const int tf = cfg.future_steps();
  const int ds = cfg.downsample;

  SceneWindow w;
  w.source = source;
  w.ego_id = ego.front().agent_id;
  w.anchor_frame = anchor;
  w.frame_rate_hz = cfg.step_rate_hz();
  w.context = cfg.context;

  std::vector<AgentState> ego_hist;
  for (int k = th - 1; k >= 0; --k) {
    const AgentState *s = state_at(ego, anchor - k * ds);
    if (!s) return std::nullopt;
    ego_hist.push_back(*s);
  }
  for (int k = 1; k <= tf; ++k) {
    const AgentState *s = state_at(ego, anchor + k * ds);
    if (!s) return std::nullopt;
    w.future.push_back(*s);
  }

  const Vec2 here = ego_hist.back().p;
  std::vector<std::pair<double, std::size_t>> near;
  for (std::size_t j = 0; j < tracks.size(); ++j) {
    if (j == ego_index) continue;
    const AgentState *s = state_at(tracks[j], anchor);
    if (!s) continue;
    const double d = (s->p - here).norm();
    if (d <= cfg.d_close) near.emplace_back(d, j);
  }
  std::sort(near.begin(), near.end(), [&](const auto &a, const auto &b) {
    if (a.first != b.first) return a.first < b.first;
    return tracks[a.second].front().agent_id < tracks[b.second].front().agent_id;
  });
  if (static_cast<int>(near.size()) > cfg.n_max) near.resize(cfg.n_max);

  w.agent_ids.push_back(w.ego_id);
  w.history.push_back(ego_hist);
  w.valid.emplace_back(th, 1);
  for (const auto &[d, j] : near) {
    std::vector<AgentState> hist(th);
    std::vector<std::uint8_t> ok(th, 0);
    for (int k = 0; k < th; ++k) {
      const int frame = anchor - (th - 1 - k) * ds;
      if (const AgentState *s = state_at(tracks[j], frame)) {
        hist[k] = *s;
        ok[k] = 1;
      } else {
        hist[k].agent_id = tracks[j].front().agent_id;
        hist[k].frame = frame;
        hist[k].type = tracks[j].front().type;
      }
    }
    w.agent_ids.push_back(tracks[j].front().agent_id);
    w.history.push_back(std::move(hist));
    w.valid.push_back(std::move(ok));
  }
  return w;
}

}  // namespace

std::vector<SceneWindow> window_scenes(const std::vector<Track> &tracks,
                                       const WindowConfig &cfg, const std::string &source) {
  if (cfg.downsample < 1 || cfg.stride < 1 || cfg.history_steps() < 1 ||
      cfg.future_steps() < 1) {
    throw std::invalid_argument("window config needs positive downsample, stride and spans");
  }
  std::vector<SceneWindow> out;
  const int span_back = (cfg.history_steps() - 1) * cfg.downsample;
  for (std::size_t i = 0; i < tracks.size(); ++i) {
    const Track &t = tracks[i];
    if (t.empty()) continue;
    for (int anchor = t.front().frame + span_back; anchor <= t.back().frame;
         anchor += cfg.stride) {
      if (auto w = make_window(tracks, i, anchor, cfg, source)) out.push_back(std::move(*w));
    }
  }
  return out;
}

ManeuverLabel ManeuverLabel::from_mode(int mode) {
  if (mode < 0 || mode >= kModes) throw std::out_of_range("maneuver mode out of range");
  return {static_cast<LateralManeuver>(mode / 3), static_cast<LongitudinalManeuver>(mode % 3)};
}

char to_char(LateralManeuver m) {
  switch (m) {
    case LateralManeuver::Straight:
      return 'S';
    case LateralManeuver::Right:
      return 'R';
    case LateralManeuver::Left:
      return 'L';
  }
  return 'S';
}

char to_char(LongitudinalManeuver m) {
  switch (m) {
    case LongitudinalManeuver::Accelerate:
      return 'A';
    case LongitudinalManeuver::Decelerate:
      return 'D';
    case LongitudinalManeuver::Constant:
      return 'C';
  }
  return 'C';
}

ManeuverLabel extract_maneuver_labels(const SceneWindow &w, const LabelThresholds &th) {
  if (w.future.empty()) throw std::invalid_argument("maneuver labels need a non-empty future");
  ManeuverLabel label;
  const double lateral = w.future.back().p.y() - w.origin().y();
  if (lateral > th.lateral_m) {
    label.lateral = LateralManeuver::Left;
  } else if (lateral < -th.lateral_m) {
    label.lateral = LateralManeuver::Right;
  }

  auto mean_speed = [](const std::vector<AgentState> &states) {
    double s = 0.0;
    for (const AgentState &a : states) s += a.v.norm();
    return s / static_cast<double>(states.size());
  };
  const double past = mean_speed(w.history[0]);
  const double future = mean_speed(w.future);
  if (past < 1e-9) {
    label.longitudinal =
        future > 1e-9 ? LongitudinalManeuver::Accelerate : LongitudinalManeuver::Constant;
  } else if (future > past * (1.0 + th.speed_ratio)) {
    label.longitudinal = LongitudinalManeuver::Accelerate;
  } else if (future < past * (1.0 - th.speed_ratio)) {
    label.longitudinal = LongitudinalManeuver::Decelerate;
  }
  return label;
}

WindowConfig SynthSpec::window_config() const {
  WindowConfig c;
  c.history_s = history_s;
  c.future_s = future_s;
  c.frame_rate_hz = frame_rate_hz;
  c.downsample = downsample;
  c.d_close = d_close;
  c.n_max = n_max;
  c.context = context;
  return c;
}

namespace {

template <typename Key>
Key draw(const std::map<Key, double> &mix, std::mt19937_64 &rng) {
  std::vector<Key> keys;
  std::vector<double> weights;
  for (const auto &[k, w] : mix) {
    if (w < 0.0) throw std::invalid_argument("maneuver mix weights must be non-negative");
    keys.push_back(k);
    weights.push_back(w);
  }
  if (keys.empty() || std::accumulate(weights.begin(), weights.end(), 0.0) <= 0.0) {
    throw std::invalid_argument("maneuver mix must have positive total weight");
  }
  std::discrete_distribution<std::size_t> d(weights.begin(), weights.end());
  return keys[d(rng)];
}

// Piecewise-constant acceleration profile sampled per raw frame interval.
struct Profile {
  std::vector<Vec2> accel;  // accel[k] acts on interval [k, k+1)
};

Track integrate(int agent_id, AgentType type, Vec2 p, Vec2 v, const Profile &prof,
                double dt, double lane_width) {
  Track t;
  const std::size_t n = prof.accel.size();
  for (std::size_t k = 0; k <= n; ++k) {
    AgentState s;
    s.agent_id = agent_id;
    s.frame = static_cast<int>(k);
    s.p = p;
    s.v = v;
    s.a = k < n ? prof.accel[k] : (n > 0 ? prof.accel[n - 1] : Vec2::Zero());
    s.type = type;
    s.lane_id = static_cast<int>(std::floor(p.y() / lane_width + 0.5));
    t.push_back(s);
    if (k == n) break;
    Vec2 a = prof.accel[k];
    // Braking stops at standstill instead of reversing.
    if (a.x() < 0.0 && v.x() + a.x() * dt < 0.0) {
      const double tau = v.x() / -a.x();
      p.x() += v.x() * tau / 2.0;
      v.x() = 0.0;
      a.x() = 0.0;
      t.back().a.x() = 0.0;
      p.y() += v.y() * dt + 0.5 * a.y() * dt * dt;
      v.y() += a.y() * dt;
      continue;
    }
    p += v * dt + 0.5 * a * dt * dt;
    v += a * dt;
  }
  return t;
}

double type_speed(AgentType type, Context ctx, std::mt19937_64 &rng) {
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<>(lo, hi)(rng); };
  switch (type) {
    case AgentType::Pedestrian:
      return u(1.0, 2.0);
    case AgentType::Bicycle:
      return u(4.0, 6.0);
    case AgentType::Vehicle:
      break;
  }
  return ctx == Context::Urban ? u(8.0, 14.0) : u(22.0, 30.0);
}

}  // namespace

std::vector<std::vector<Track>> synthesize_tracks(const SynthSpec &spec) {
  if (spec.n_agents < 1) throw std::invalid_argument("synthetic scenes need n_agents >= 1");
  if (spec.n_scenes < 0) throw std::invalid_argument("n_scenes must be non-negative");
  std::mt19937_64 rng(spec.seed);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<>(lo, hi)(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double dt = 1.0 / spec.frame_rate_hz;
  const int n_frames = static_cast<int>(std::lround((spec.history_s + spec.future_s) *
                                                    spec.frame_rate_hz));
  const int anchor =
      static_cast<int>(std::lround((spec.history_s * spec.frame_rate_hz / spec.downsample) - 1) *
                       spec.downsample);
  const double W = spec.lane_width;
  const RssParameters rss = RssParameters::defaults(spec.context);

  std::map<AgentType, double> types;
  for (const auto &[name, w] : spec.type_mix) types[parse_agent_type(name)] = w;

  std::vector<std::vector<Track>> scenes;
  for (int sc = 0; sc < spec.n_scenes; ++sc) {
    std::vector<Track> tracks;
    const AgentType ego_type = draw(types, rng);
    const double v0 = type_speed(ego_type, spec.context, rng);
    const bool braking_leader =
        spec.n_agents >= 2 && u(0.0, 1.0) < spec.braking_leader_fraction;
    const char lat = braking_leader ? 'S' : draw(spec.lateral_mix, rng);
    const char lon = braking_leader ? 'D' : draw(spec.longitudinal_mix, rng);

    Profile ego{std::vector<Vec2>(n_frames, Vec2::Zero())};
    const int lon_onset = anchor - static_cast<int>(std::lround(u(0.4, 1.0) * spec.frame_rate_hz));
    Vec2 leader_p = Vec2::Zero(), leader_v = Vec2::Zero();
    Profile leader{std::vector<Vec2>(n_frames, Vec2::Zero())};

    if (braking_leader) {
      const double gap = u(12.0, 22.0);
      const double v_lead = std::max(v0 + u(-1.0, 0.5), 0.5);
      const double b_lead = u(2.0, 5.0);
      const int lead_onset =
          anchor - static_cast<int>(std::lround(u(0.3, 1.0) * spec.frame_rate_hz));
      for (int k = std::max(lead_onset, 0); k < n_frames; ++k) leader.accel[k].x() = -b_lead;
      // The follower brakes harder the further the gap falls short of the
      // RSS-required distance at the leader's braking onset.
      const double required = safe_longitudinal_distance(v0, v_lead, rss);
      const double decel = std::clamp(b_lead * (0.6 + 0.1 * required / gap), 1.0, 6.0);
      const int react = lead_onset + static_cast<int>(std::lround(rss.rho * spec.frame_rate_hz));
      for (int k = std::max(react, 0); k < n_frames; ++k) ego.accel[k].x() = -decel;
      leader_p = {gap, W};
      leader_v = {v_lead, 0.0};
    } else {
      double along = 0.0;
      if (lon == 'A') along = u(1.0, 2.0);
      if (lon == 'D') along = -u(1.5, 3.0);
      if (ego_type != AgentType::Vehicle) along *= 0.3;
      for (int k = std::max(lon_onset, 0); k < n_frames; ++k) ego.accel[k].x() = along;
      if (lat != 'S') {
        const double duration = u(3.5, 4.5);
        // Even step count so the accelerate and decelerate halves cancel.
        const int steps = 2 * static_cast<int>(std::lround(duration * spec.frame_rate_hz / 2.0));
        const double T = steps * dt;
        const double alpha = 4.0 * W / (T * T) * (lat == 'L' ? 1.0 : -1.0);
        const int onset =
            anchor - static_cast<int>(std::lround(u(0.4, 1.0) * spec.frame_rate_hz));
        // Short histories can place the onset before the first frame.
        for (int k = std::max(-onset, 0); k < steps && onset + k < n_frames; ++k) {
          ego.accel[onset + k].y() = k < steps / 2 ? alpha : -alpha;
        }
      }
    }
    const int base_id = sc * 100;
    tracks.push_back(integrate(base_id, ego_type, {0.0, W}, {v0, 0.0}, ego, dt, W));

    int next = 1;
    if (braking_leader) {
      tracks.push_back(integrate(base_id + next++, AgentType::Vehicle, leader_p, leader_v,
                                 leader, dt, W));
    }
    while (next < spec.n_agents) {
      const int lane = static_cast<int>(std::floor(u(0.0, 3.0)));
      double offset = u(-40.0, 40.0);
      if (lane == 1 && std::abs(offset) < 10.0) offset += offset < 0 ? -10.0 : 10.0;
      if (braking_leader && lane == 1 && offset > 0.0) offset = -std::abs(offset) - 10.0;
      const double v = type_speed(AgentType::Vehicle, spec.context, rng);
      Profile prof{std::vector<Vec2>(n_frames, Vec2(u(-0.3, 0.3), 0.0))};
      tracks.push_back(integrate(base_id + next++, AgentType::Vehicle,
                                 {offset, lane * W}, {v, 0.0}, prof, dt, W));
    }
    if (spec.noise > 0.0) {
      for (Track &t : tracks) {
        for (AgentState &s : t) {
          s.p += spec.noise * Vec2(gauss(rng), gauss(rng));
          s.v += spec.noise * Vec2(gauss(rng), gauss(rng));
          s.a += spec.noise * Vec2(gauss(rng), gauss(rng));
        }
      }
    }
    scenes.push_back(std::move(tracks));
  }
  return scenes;
}

std::vector<SceneWindow> synthesize_scenes(const SynthSpec &spec) {
  const WindowConfig cfg = spec.window_config();
  const int anchor = (cfg.history_steps() - 1) * cfg.downsample;
  std::vector<SceneWindow> out;
  const auto scenes = synthesize_tracks(spec);
  for (std::size_t sc = 0; sc < scenes.size(); ++sc) {
    auto w = make_window(scenes[sc], 0, anchor, cfg, "synthetic/" + std::to_string(sc));
    if (!w) throw std::logic_error("synthetic scene shorter than its window");
    out.push_back(std::move(*w));
  }
  return out;
}

DatasetSplit split_dataset(std::vector<SceneWindow> windows, double train_fraction,
                           double val_fraction, std::uint64_t seed) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0 + 1e-12) {
    throw std::invalid_argument("split fractions must be non-negative and sum to at most 1");
  }
  using Key = std::tuple<std::string, int, int>;
  std::map<Key, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    groups[{windows[i].source, windows[i].ego_id, windows[i].anchor_frame}].push_back(i);
  }
  std::vector<const std::vector<std::size_t> *> order;
  for (const auto &[k, idx] : groups) order.push_back(&idx);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplit split;
  split.seed = seed;
  const double n = static_cast<double>(order.size());
  const std::size_t n_train = static_cast<std::size_t>(std::lround(train_fraction * n));
  const std::size_t n_val =
      std::min(order.size() - n_train, static_cast<std::size_t>(std::lround(val_fraction * n)));
  for (std::size_t g = 0; g < order.size(); ++g) {
    auto &dst = g < n_train ? split.train : (g < n_train + n_val ? split.val : split.test);
    for (std::size_t i : *order[g]) dst.push_back(windows[i]);
  }
  return split;
}

}  // namespace safecast
