#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace safecast {

using Vec2 = Eigen::Vector2d;

enum class AgentType { Vehicle = 0, Pedestrian = 1, Bicycle = 2 };
inline constexpr int kAgentTypes = 3;

enum class Context { Highway, Urban };

std::string to_string(AgentType t);
std::string to_string(Context c);
AgentType parse_agent_type(const std::string &s);
Context parse_context(const std::string &s);

/// One agent at one frame. x is longitudinal, y lateral with left
/// positive; SI units throughout.
struct AgentState {
  int agent_id = 0;
  int frame = 0;
  Vec2 p = Vec2::Zero();
  Vec2 v = Vec2::Zero();
  Vec2 a = Vec2::Zero();
  AgentType type = AgentType::Vehicle;
  std::optional<int> lane_id;
};

/// Frame-sorted states of a single agent.
using Track = std::vector<AgentState>;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TrajectoryFormat { NgsimCsv, ApolloTxt };
TrajectoryFormat parse_format(const std::string &s);

struct LoadResult {
  std::vector<Track> tracks;  // sorted by agent_id
  std::size_t skipped_rows = 0;
  /// Rows whose stated velocity disagrees with position differences by
  /// more than 0.5 m/s. Informational only.
  std::size_t velocity_warnings = 0;
};

/// ngsim_csv: header `frame,agent_id,x,y,vx,vy,ax,ay,type,lane_id` (any
/// column order). apollo_txt: whitespace separated `frame agent_id type x
/// y`; velocity and acceleration come from central differences.
LoadResult load_trajectories(const std::filesystem::path &path, TrajectoryFormat format,
                             double frame_rate_hz = 10.0);

void write_ngsim_csv(const std::filesystem::path &path, const std::vector<Track> &tracks);

/// Fills v and a of a frame-sorted track by central differences of
/// position (one-sided at the ends).
void derive_kinematics(Track &track, double frame_rate_hz);

struct WindowConfig {
  double history_s = 3.0;
  double future_s = 5.0;
  double frame_rate_hz = 10.0;  // raw rate of the source frames
  int downsample = 2;
  int stride = 10;  // raw frames between consecutive anchors of one ego
  double d_close = 25.0;
  int n_max = 8;
  Context context = Context::Highway;

  int history_steps() const;
  int future_steps() const;
  double step_rate_hz() const { return frame_rate_hz / downsample; }
};

/// Aligned history and future around one anchor frame. Slot 0 is the ego;
/// positions are in the source frame and origin() gives the ego anchor
/// position used to express model inputs relative to the ego.
struct SceneWindow {
  std::string source;
  int ego_id = 0;
  int anchor_frame = 0;
  double frame_rate_hz = 5.0;  // after downsampling
  Context context = Context::Highway;

  std::vector<int> agent_ids;                    // per slot
  std::vector<std::vector<AgentState>> history;  // [slot][step], oldest first
  std::vector<std::vector<std::uint8_t>> valid;  // [slot][step]
  std::vector<AgentState> future;                // ego, [step]

  int num_slots() const { return static_cast<int>(history.size()); }
  int history_steps() const { return history.empty() ? 0 : static_cast<int>(history[0].size()); }
  int future_steps() const { return static_cast<int>(future.size()); }
  Vec2 origin() const { return history.at(0).back().p; }
  const AgentState &ego_now() const { return history.at(0).back(); }
};

std::vector<SceneWindow> window_scenes(const std::vector<Track> &tracks,
                                       const WindowConfig &cfg,
                                       const std::string &source = "");

enum class LateralManeuver { Straight = 0, Right = 1, Left = 2 };
enum class LongitudinalManeuver { Accelerate = 0, Decelerate = 1, Constant = 2 };
inline constexpr int kLateralModes = 3;
inline constexpr int kLongitudinalModes = 3;
inline constexpr int kModes = kLateralModes * kLongitudinalModes;

struct ManeuverLabel {
  LateralManeuver lateral = LateralManeuver::Straight;
  LongitudinalManeuver longitudinal = LongitudinalManeuver::Constant;

  /// lateral * 3 + longitudinal.
  int mode() const { return static_cast<int>(lateral) * 3 + static_cast<int>(longitudinal); }
  static ManeuverLabel from_mode(int mode);
};

char to_char(LateralManeuver m);
char to_char(LongitudinalManeuver m);

struct LabelThresholds {
  double lateral_m = 1.75;
  double speed_ratio = 0.05;
};

/// Lateral: net ego displacement over the horizon beyond +-lateral_m
/// (left positive). Longitudinal: mean future speed vs mean history speed
/// beyond +-speed_ratio.
ManeuverLabel extract_maneuver_labels(const SceneWindow &w, const LabelThresholds &th = {});

struct SynthSpec {
  int n_scenes = 32;
  int n_agents = 4;  // including the ego
  std::map<char, double> lateral_mix{{'S', 0.6}, {'L', 0.2}, {'R', 0.2}};
  std::map<char, double> longitudinal_mix{{'A', 0.3}, {'D', 0.3}, {'C', 0.4}};
  std::map<std::string, double> type_mix{{"vehicle", 1.0}};
  double braking_leader_fraction = 0.0;
  double noise = 0.0;
  std::uint64_t seed = 1;
  double frame_rate_hz = 10.0;
  double history_s = 3.0;
  double future_s = 5.0;
  double lane_width = 3.5;
  Context context = Context::Highway;
  int downsample = 2;
  double d_close = 25.0;
  int n_max = 8;

  WindowConfig window_config() const;
};

/// One list of tracks per scene. Agent ids are scene * 100 + k with the
/// ego at k = 0.
std::vector<std::vector<Track>> synthesize_tracks(const SynthSpec &spec);

/// One window per scene, anchored at the end of the history span.
std::vector<SceneWindow> synthesize_scenes(const SynthSpec &spec);

struct DatasetSplit {
  std::vector<SceneWindow> train;
  std::vector<SceneWindow> val;
  std::vector<SceneWindow> test;
  std::uint64_t seed = 0;
};

/// Shuffles by seed and partitions; identical (source, ego, anchor) keys
/// always land in the same part.
DatasetSplit split_dataset(std::vector<SceneWindow> windows, double train_fraction,
                           double val_fraction, std::uint64_t seed);

}  // namespace safecast
