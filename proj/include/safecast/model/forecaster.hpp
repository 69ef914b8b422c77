#pragma once

#include "safecast/graph/scene_graph.hpp"
#include "safecast/model/uncertainty_gat.hpp"
#include "safecast/numeric/checkpoint.hpp"
#include "safecast/numeric/layers.hpp"

#include <array>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace safecast {

enum class Variant { Full, Small };

std::string to_string(Variant v);
Variant parse_variant(const std::string &s);

/// Component switches. Letters follow the usual ablation table: A drops
/// the intention encoder, B the safety spatial encoder, C swaps the
/// temporal LSTM for an MLP, D removes maneuver prediction, E replaces
/// fusion attention with a convolution, F disables the feature noise.
/// no_rss zeroes every RSS distance input.
struct Ablation {
  bool no_intention = false;       // A
  bool no_safety_spatial = false;  // B
  bool no_temporal = false;        // C
  bool no_maneuver = false;        // D
  bool conv_fusion = false;        // E
  bool no_guf = false;             // F
  bool no_rss = false;

  /// "G" for the full model, else the concatenated letters (plus "+rss").
  std::string label() const;
  /// Parses "A".."G" and "RSS" (case-insensitive).
  static Ablation from_letter(const std::string &letter);
};

struct ModelConfig {
  Variant variant = Variant::Full;
  Index hidden = 64;
  int fusion_heads = 4;
  int gat_heads = 2;
  int second_gat_heads = 1;
  double dropout = 0.1;
  double leaky_slope = 0.2;
  double guf_init_log_sigma = -5.0;
  bool guf_at_inference = false;
  double bn_momentum = 0.1;
  double d_close = 25.0;
  double d_close_lon = 2.0;
  double lane_width = 3.5;
  int n_max = 8;
  int history_steps = 15;
  int future_steps = 25;
  /// Meters per unit of the raw decoder outputs: per-step mean offsets
  /// and deviations.
  double position_scale = 10.0;
  RssParameters rss;
  Ablation ablation;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  int num_slots() const { return n_max + 1; }
  GraphConfig graph_config() const;

  std::map<std::string, std::string> to_meta() const;
  static ModelConfig from_meta(const std::map<std::string, std::string> &meta);
};

/// Ego temporal input: d_lon, d_lat, relative p, v, a.
inline constexpr Index kTemporalFeatures = 8;

/// Model-ready tensors of one window, built once and reused per epoch.
struct PreparedScene {
  std::vector<SceneGraph> dig;     // full variant
  std::vector<SceneGraph> dsg;     // full variant
  std::vector<SceneGraph> merged;  // small variant
  Matrix temporal;                 // t_h x kTemporalFeatures, scaled
  Matrix future;                   // t_f x 2, meters relative to origin
  ManeuverLabel label;
  AgentType ego_type = AgentType::Vehicle;
  std::string source;
  Vec2 origin = Vec2::Zero();
};

PreparedScene prepare_scene(const SceneWindow &w, const ModelConfig &cfg);
std::vector<PreparedScene> prepare_scenes(const std::vector<SceneWindow> &windows,
                                          const ModelConfig &cfg);

/// Several prepared scenes stacked for one forward pass.
struct SceneBatch {
  int size = 0;
  int history_steps = 0;
  int future_steps = 0;
  Index slots = 0;
  StackedGraphs dig;
  StackedGraphs dsg;
  StackedGraphs merged;
  Matrix temporal;             // (t_h * B) x kTemporalFeatures, step-major
  Matrix future;               // (t_f * B) x 2, step-major
  std::vector<int> modes;      // true mode per scene
  std::vector<AgentType> types;
};

SceneBatch make_batch(const std::vector<const PreparedScene *> &scenes);

/// Differentiable model outputs for a batch.
struct ForwardOutput {
  Var lateral;       // B x 3 probabilities (S, R, L)
  Var longitudinal;  // B x 3 probabilities (A, D, C)
  /// (t_f * B * 9) x 5, row (k * B + b) * 9 + mode: mu_x, mu_y (m),
  /// sigma_x, sigma_y (m), corr.
  Var trajectory;
  int batch = 0;
  int future_steps = 0;
};

/// Per-scene value-level forecast.
struct ForecastDistribution {
  Eigen::Matrix3d maneuver_probs;  // (lateral, longitudinal)
  /// Per mode (lateral * 3 + longitudinal): t_f x 5.
  std::array<Matrix, kModes> modes;

  double mode_probability(int mode) const { return maneuver_probs(mode / 3, mode % 3); }
  int top_mode() const;
};

ForecastDistribution extract_distribution(const ForwardOutput &out, int scene);

enum class PointReduction { TopMode, Weighted };
PointReduction parse_reduction(const std::string &s);

/// t_f x 2 point forecast.
Matrix predict_point(const ForecastDistribution &dist, PointReduction mode);

/// The full and small forecasting models.
class Forecaster {
 public:
  Forecaster(const ModelConfig &cfg, std::uint64_t seed);

  ForwardOutput forward(Tape &t, const SceneBatch &batch, bool training, std::mt19937_64 &rng);
  /// Evaluation-mode forecasts; throws TrainingError on non-finite outputs.
  std::vector<ForecastDistribution> predict(const SceneBatch &batch);

  const ModelConfig &config() const { return cfg_; }
  std::vector<Parameter *> parameters();
  std::size_t parameter_count();

  void save(const std::filesystem::path &path,
            const std::map<std::string, std::string> &extra_meta = {},
            const std::vector<Parameter> &extra_tensors = {});
  /// Restores parameters from a checkpoint written by save() for the
  /// same configuration.
  void load(const Checkpoint &ck);
  static Forecaster from_checkpoint(const Checkpoint &ck);

 private:
  Var temporal_encode(Tape &t, const SceneBatch &batch);
  Var fuse(Tape &t, const SceneBatch &batch, const Var &node_features, const Var &f_t);
  ForwardOutput decode(Tape &t, const SceneBatch &batch, const Var &f);

  ModelConfig cfg_;
  std::uint64_t seed_;
  UncertaintyGat intention_;
  UncertaintyGat safety_;
  UncertaintyGat merged_;
  Linear temporal_in_;
  LstmCell temporal_lstm_;
  Linear temporal_mlp_;  // second layer of the ablation C replacement
  Conv2d fusion_conv_;
  Linear fusion_mlp1_;
  Linear fusion_mlp2_;
  std::vector<Parameter> query_;
  std::vector<Parameter> key_;
  std::vector<Parameter> value_;
  Conv2d attention_conv_;  // ablation E
  Linear glu_;
  LayerNorm norm_;
  Linear lateral_head_;
  Linear longitudinal_head_;
  Linear decoder_in_;
  LstmCell decoder_lstm_;
  Linear decoder_out_;
};

}  // namespace safecast
