#include "safecast/model/forecaster.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

namespace safecast {

std::string to_string(Variant v) { return v == Variant::Small ? "small" : "full"; }

Variant parse_variant(const std::string &s) {
  if (s == "full") return Variant::Full;
  if (s == "small") return Variant::Small;
  throw std::invalid_argument("unknown model variant '" + s + "' (expected full or small)");
}

std::string Ablation::label() const {
  std::string out;
  if (no_intention) out += 'A';
  if (no_safety_spatial) out += 'B';
  if (no_temporal) out += 'C';
  if (no_maneuver) out += 'D';
  if (conv_fusion) out += 'E';
  if (no_guf) out += 'F';
  if (out.empty()) out = "G";
  if (no_rss) out += "+rss";
  return out;
}

Ablation Ablation::from_letter(const std::string &letter) {
  std::string up;
  for (char c : letter) up += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  Ablation a;
  if (up == "A") {
    a.no_intention = true;
  } else if (up == "B") {
    a.no_safety_spatial = true;
  } else if (up == "C") {
    a.no_temporal = true;
  } else if (up == "D") {
    a.no_maneuver = true;
  } else if (up == "E") {
    a.conv_fusion = true;
  } else if (up == "F") {
    a.no_guf = true;
  } else if (up == "RSS") {
    a.no_rss = true;
  } else if (up != "G") {
    throw std::invalid_argument("unknown ablation '" + letter + "' (expected A-G or RSS)");
  }
  return a;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string &m) { throw std::invalid_argument("model config: " + m); };
  if (hidden < 1) fail("hidden must be positive");
  if (fusion_heads < 1 || hidden % fusion_heads != 0) {
    fail("hidden (" + std::to_string(hidden) + ") must be a multiple of fusion_heads (" +
         std::to_string(fusion_heads) + ")");
  }
  if (gat_heads < 1 || second_gat_heads < 1) fail("attention heads must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (!(leaky_slope >= 0.0)) fail("leaky_slope must be non-negative");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0)) fail("bn_momentum must lie in (0, 1]");
  if (!(d_close > 0.0) || !(d_close_lon > 0.0) || !(lane_width > 0.0)) {
    fail("distances must be positive");
  }
  if (n_max < 0) fail("n_max must be non-negative");
  if (history_steps < 1 || future_steps < 1) fail("history and future steps must be positive");
  if (!(position_scale > 0.0)) fail("position_scale must be positive");
  if (std::isnan(guf_init_log_sigma) || guf_init_log_sigma == INFINITY) {
    fail("guf_init_log_sigma must be finite or -inf");
  }
  if (variant == Variant::Small &&
      (ablation.no_intention || ablation.no_safety_spatial || ablation.no_temporal)) {
    fail("ablations A, B and C need the full variant");
  }
  rss.validate();
}

GraphConfig ModelConfig::graph_config() const {
  GraphConfig g;
  g.d_close = d_close;
  g.d_close_lon = d_close_lon;
  g.lane_width = lane_width;
  g.num_slots = num_slots();
  g.rss = rss;
  g.rss_features = !ablation.no_rss;
  return g;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double get_double(const std::map<std::string, std::string> &m, const std::string &k) {
  auto it = m.find(k);
  if (it == m.end()) throw std::invalid_argument("checkpoint metadata lacks '" + k + "'");
  try {
    return std::stod(it->second);
  } catch (const std::exception &) {
    throw std::invalid_argument("checkpoint metadata '" + k + "' is not a number");
  }
}

int get_int(const std::map<std::string, std::string> &m, const std::string &k) {
  return static_cast<int>(get_double(m, k));
}

bool get_bool(const std::map<std::string, std::string> &m, const std::string &k) {
  return get_double(m, k) != 0.0;
}

}  // namespace

std::map<std::string, std::string> ModelConfig::to_meta() const {
  std::map<std::string, std::string> m;
  m["model.variant"] = to_string(variant);
  m["model.hidden"] = std::to_string(hidden);
  m["model.fusion_heads"] = std::to_string(fusion_heads);
  m["model.gat_heads"] = std::to_string(gat_heads);
  m["model.second_gat_heads"] = std::to_string(second_gat_heads);
  m["model.dropout"] = fmt(dropout);
  m["model.leaky_slope"] = fmt(leaky_slope);
  m["model.guf_init_log_sigma"] = fmt(guf_init_log_sigma);
  m["model.guf_at_inference"] = guf_at_inference ? "1" : "0";
  m["model.bn_momentum"] = fmt(bn_momentum);
  m["model.d_close"] = fmt(d_close);
  m["model.d_close_lon"] = fmt(d_close_lon);
  m["model.lane_width"] = fmt(lane_width);
  m["model.n_max"] = std::to_string(n_max);
  m["model.history_steps"] = std::to_string(history_steps);
  m["model.future_steps"] = std::to_string(future_steps);
  m["model.position_scale"] = fmt(position_scale);
  m["rss.rho"] = fmt(rss.rho);
  m["rss.a_max"] = fmt(rss.a_max);
  m["rss.b_min"] = fmt(rss.b_min);
  m["rss.b_max"] = fmt(rss.b_max);
  m["rss.alpha_max"] = fmt(rss.alpha_max);
  m["rss.beta_min"] = fmt(rss.beta_min);
  m["rss.mu"] = fmt(rss.mu);
  m["rss.context"] = to_string(rss.context);
  m["ablation.no_intention"] = ablation.no_intention ? "1" : "0";
  m["ablation.no_safety_spatial"] = ablation.no_safety_spatial ? "1" : "0";
  m["ablation.no_temporal"] = ablation.no_temporal ? "1" : "0";
  m["ablation.no_maneuver"] = ablation.no_maneuver ? "1" : "0";
  m["ablation.conv_fusion"] = ablation.conv_fusion ? "1" : "0";
  m["ablation.no_guf"] = ablation.no_guf ? "1" : "0";
  m["ablation.no_rss"] = ablation.no_rss ? "1" : "0";
  return m;
}

ModelConfig ModelConfig::from_meta(const std::map<std::string, std::string> &m) {
  ModelConfig c;
  auto it = m.find("model.variant");
  if (it == m.end()) throw std::invalid_argument("checkpoint metadata lacks 'model.variant'");
  c.variant = parse_variant(it->second);
  c.hidden = get_int(m, "model.hidden");
  c.fusion_heads = get_int(m, "model.fusion_heads");
  c.gat_heads = get_int(m, "model.gat_heads");
  c.second_gat_heads = get_int(m, "model.second_gat_heads");
  c.dropout = get_double(m, "model.dropout");
  c.leaky_slope = get_double(m, "model.leaky_slope");
  c.guf_init_log_sigma = get_double(m, "model.guf_init_log_sigma");
  c.guf_at_inference = get_bool(m, "model.guf_at_inference");
  c.bn_momentum = get_double(m, "model.bn_momentum");
  c.d_close = get_double(m, "model.d_close");
  c.d_close_lon = get_double(m, "model.d_close_lon");
  c.lane_width = get_double(m, "model.lane_width");
  c.n_max = get_int(m, "model.n_max");
  c.history_steps = get_int(m, "model.history_steps");
  c.future_steps = get_int(m, "model.future_steps");
  c.position_scale = get_double(m, "model.position_scale");
  c.rss.rho = get_double(m, "rss.rho");
  c.rss.a_max = get_double(m, "rss.a_max");
  c.rss.b_min = get_double(m, "rss.b_min");
  c.rss.b_max = get_double(m, "rss.b_max");
  c.rss.alpha_max = get_double(m, "rss.alpha_max");
  c.rss.beta_min = get_double(m, "rss.beta_min");
  c.rss.mu = get_double(m, "rss.mu");
  it = m.find("rss.context");
  if (it == m.end()) throw std::invalid_argument("checkpoint metadata lacks 'rss.context'");
  c.rss.context = parse_context(it->second);
  c.ablation.no_intention = get_bool(m, "ablation.no_intention");
  c.ablation.no_safety_spatial = get_bool(m, "ablation.no_safety_spatial");
  c.ablation.no_temporal = get_bool(m, "ablation.no_temporal");
  c.ablation.no_maneuver = get_bool(m, "ablation.no_maneuver");
  c.ablation.conv_fusion = get_bool(m, "ablation.conv_fusion");
  c.ablation.no_guf = get_bool(m, "ablation.no_guf");
  c.ablation.no_rss = get_bool(m, "ablation.no_rss");
  c.validate();
  return c;
}

namespace {

// Fixed divisors bringing temporal inputs to order one.
constexpr double kScaleDLon = 20.0;
constexpr double kScaleDLat = 2.0;
constexpr double kScalePos = 10.0;
constexpr double kScaleVel = 10.0;
constexpr double kScaleAcc = 2.0;

}  // namespace

PreparedScene prepare_scene(const SceneWindow &w, const ModelConfig &cfg) {
  if (w.history_steps() != cfg.history_steps || w.future_steps() != cfg.future_steps) {
    throw std::invalid_argument("window " + w.source + " has " +
                                std::to_string(w.history_steps()) + "+" +
                                std::to_string(w.future_steps()) + " steps, model expects " +
                                std::to_string(cfg.history_steps) + "+" +
                                std::to_string(cfg.future_steps));
  }
  if (w.num_slots() > cfg.num_slots()) {
    throw std::invalid_argument("window " + w.source + " has more agents than n_max + 1");
  }
  const GraphConfig g = cfg.graph_config();
  PreparedScene p;
  p.source = w.source;
  p.origin = w.origin();
  p.ego_type = w.ego_now().type;
  p.label = extract_maneuver_labels(w);
  const std::vector<SceneGraph> *safety = nullptr;
  if (cfg.variant == Variant::Full) {
    p.dig = graph_sequence(w, GraphKind::DIG, g);
    p.dsg = graph_sequence(w, GraphKind::DSG, g);
    safety = &p.dsg;
  } else {
    p.merged = graph_sequence(w, GraphKind::Merged, g);
    safety = &p.merged;
  }
  const Index dcol = cfg.variant == Variant::Full ? 2 : kDigFeatures;
  p.temporal.resize(cfg.history_steps, kTemporalFeatures);
  for (int k = 0; k < cfg.history_steps; ++k) {
    const AgentState &e = w.history[0][k];
    const Matrix &f = (*safety)[k].node_features;
    p.temporal.row(k) << f(0, dcol) / kScaleDLon, f(0, dcol + 1) / kScaleDLat,
        (e.p - p.origin).transpose() / kScalePos, e.v.transpose() / kScaleVel,
        e.a.transpose() / kScaleAcc;
  }
  p.future.resize(cfg.future_steps, 2);
  for (int k = 0; k < cfg.future_steps; ++k) {
    p.future.row(k) = (w.future[k].p - p.origin).transpose();
  }
  return p;
}

std::vector<PreparedScene> prepare_scenes(const std::vector<SceneWindow> &windows,
                                          const ModelConfig &cfg) {
  std::vector<PreparedScene> out;
  out.reserve(windows.size());
  for (const SceneWindow &w : windows) out.push_back(prepare_scene(w, cfg));
  return out;
}

namespace {

StackedGraphs stack_scene_graphs(const std::vector<const PreparedScene *> &scenes,
                                 std::vector<SceneGraph> PreparedScene::*member) {
  std::size_t count = 0;
  for (const PreparedScene *s : scenes) count += (s->*member).size();
  StackedGraphs out;
  if (count == 0) return out;
  const SceneGraph &first = (scenes[0]->*member)[0];
  const Index n = first.num_nodes(), f = first.node_features.cols();
  out.block = n;
  out.features.resize(static_cast<Index>(count) * n, f);
  out.adjacency.resize(static_cast<Index>(count) * n, n);
  out.mask.resize(static_cast<Index>(count) * n);
  Index r = 0;
  for (const PreparedScene *s : scenes) {
    for (const SceneGraph &g : s->*member) {
      if (g.num_nodes() != n || g.node_features.cols() != f) {
        throw DimensionError("batch mixes graphs of shape " + shape_string(g.node_features) +
                             " and " + shape_string(first.node_features));
      }
      out.features.middleRows(r, n) = g.node_features;
      out.adjacency.middleRows(r, n) = g.adjacency;
      for (Index i = 0; i < n; ++i) out.mask(r + i) = g.valid[i];
      r += n;
    }
  }
  return out;
}

}  // namespace

SceneBatch make_batch(const std::vector<const PreparedScene *> &scenes) {
  if (scenes.empty()) throw std::invalid_argument("empty batch");
  SceneBatch b;
  b.size = static_cast<int>(scenes.size());
  b.history_steps = static_cast<int>(scenes[0]->temporal.rows());
  b.future_steps = static_cast<int>(scenes[0]->future.rows());
  b.dig = stack_scene_graphs(scenes, &PreparedScene::dig);
  b.dsg = stack_scene_graphs(scenes, &PreparedScene::dsg);
  b.merged = stack_scene_graphs(scenes, &PreparedScene::merged);
  b.slots = b.dig.block != 0 ? b.dig.block : b.merged.block;
  const int B = b.size;
  b.temporal.resize(static_cast<Index>(b.history_steps) * B, kTemporalFeatures);
  b.future.resize(static_cast<Index>(b.future_steps) * B, 2);
  for (int s = 0; s < B; ++s) {
    const PreparedScene &p = *scenes[s];
    if (p.temporal.rows() != b.history_steps || p.future.rows() != b.future_steps) {
      throw DimensionError("batch mixes scenes with different horizons");
    }
    for (int k = 0; k < b.history_steps; ++k) b.temporal.row(k * B + s) = p.temporal.row(k);
    for (int k = 0; k < b.future_steps; ++k) b.future.row(k * B + s) = p.future.row(k);
    b.modes.push_back(p.label.mode());
    b.types.push_back(p.ego_type);
  }
  return b;
}

int ForecastDistribution::top_mode() const {
  int best = 0;
  for (int m = 1; m < kModes; ++m) {
    if (mode_probability(m) > mode_probability(best)) best = m;
  }
  return best;
}

ForecastDistribution extract_distribution(const ForwardOutput &out, int scene) {
  if (scene < 0 || scene >= out.batch) throw std::out_of_range("scene index outside batch");
  ForecastDistribution d;
  const Matrix &lat = out.lateral.value();
  const Matrix &lon = out.longitudinal.value();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) d.maneuver_probs(i, j) = lat(scene, i) * lon(scene, j);
  }
  const Matrix &traj = out.trajectory.value();
  for (int m = 0; m < kModes; ++m) {
    d.modes[m].resize(out.future_steps, 5);
    for (int k = 0; k < out.future_steps; ++k) {
      d.modes[m].row(k) = traj.row((static_cast<Index>(k) * out.batch + scene) * kModes + m);
    }
  }
  return d;
}

PointReduction parse_reduction(const std::string &s) {
  if (s == "top_mode") return PointReduction::TopMode;
  if (s == "weighted") return PointReduction::Weighted;
  throw std::invalid_argument("unknown point reduction '" + s + "'");
}

Matrix predict_point(const ForecastDistribution &dist, PointReduction mode) {
  if (mode == PointReduction::TopMode) return dist.modes[dist.top_mode()].leftCols(2);
  Matrix out = Matrix::Zero(dist.modes[0].rows(), 2);
  for (int m = 0; m < kModes; ++m) out += dist.mode_probability(m) * dist.modes[m].leftCols(2);
  return out;
}

namespace {

GatStackConfig stack_config(const ModelConfig &cfg, Index in_features) {
  GatStackConfig s;
  s.in_features = in_features;
  s.hidden = cfg.hidden;
  s.heads = cfg.gat_heads;
  s.second_heads = cfg.second_gat_heads;
  s.dropout = cfg.dropout;
  s.leaky_slope = cfg.leaky_slope;
  s.guf = !cfg.ablation.no_guf;
  s.guf_at_inference = cfg.guf_at_inference;
  s.guf_init_log_sigma = cfg.guf_init_log_sigma;
  s.bn_momentum = cfg.bn_momentum;
  return s;
}

constexpr Index kDecoderExtra = 3 + 3 + 3 + 3;  // probabilities and one-hots
constexpr double kCorrLimit = 1.0 - 1e-6;

}  // namespace

Forecaster::Forecaster(const ModelConfig &cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
  // Every component draws its initial weights whether or not an ablation
  // disables it, so shared components start identical across ablations.
  std::mt19937_64 rng(seed);
  const Index C = cfg_.hidden;
  intention_ = UncertaintyGat("intention", stack_config(cfg_, kDigFeatures), rng);
  safety_ = UncertaintyGat("safety", stack_config(cfg_, kDsgFeatures), rng);
  merged_ = UncertaintyGat("merged", stack_config(cfg_, kMergedFeatures), rng);
  temporal_in_ = Linear("temporal.in", kTemporalFeatures, C, rng);
  temporal_lstm_ = LstmCell("temporal.lstm", C, C, rng);
  temporal_mlp_ = Linear("temporal.mlp", C, C, rng);
  fusion_conv_ = Conv2d("fusion.conv", 2 * C, C, rng);
  fusion_mlp1_ = Linear("fusion.mlp1", C, C, rng);
  fusion_mlp2_ = Linear("fusion.mlp2", C, C, rng);
  const Index dk = C / cfg_.fusion_heads;
  for (int h = 0; h < cfg_.fusion_heads; ++h) {
    const std::string base = "fusion.attn" + std::to_string(h);
    query_.emplace_back(base + ".query", init_uniform(C, dk, C, rng));
    key_.emplace_back(base + ".key", init_uniform(C, dk, C, rng));
    value_.emplace_back(base + ".value", init_uniform(C, C, C, rng));
  }
  attention_conv_ = Conv2d("fusion.attn_conv", 2 * C, C, rng);
  glu_ = Linear("fusion.glu", C, 2 * C, rng);
  norm_ = LayerNorm("fusion.norm", C);
  lateral_head_ = Linear("decoder.lateral", C, 3, rng);
  longitudinal_head_ = Linear("decoder.longitudinal", C, 3, rng);
  decoder_in_ = Linear("decoder.in", C + kDecoderExtra, C, rng);
  decoder_lstm_ = LstmCell("decoder.lstm", C, C, rng);
  decoder_out_ = Linear("decoder.out", C, 5, rng);
}

std::vector<Parameter *> Forecaster::parameters() {
  std::vector<Parameter *> out;
  const Ablation &a = cfg_.ablation;
  if (cfg_.variant == Variant::Full) {
    if (!a.no_intention) intention_.collect(out);
    if (!a.no_safety_spatial) safety_.collect(out);
    temporal_in_.collect(out);
    if (a.no_temporal) {
      temporal_mlp_.collect(out);
    } else {
      temporal_lstm_.collect(out);
    }
    fusion_conv_.collect(out);
    fusion_mlp1_.collect(out);
    fusion_mlp2_.collect(out);
  } else {
    merged_.collect(out);
  }
  if (a.conv_fusion) {
    attention_conv_.collect(out);
  } else {
    for (std::size_t h = 0; h < query_.size(); ++h) {
      out.push_back(&query_[h]);
      out.push_back(&key_[h]);
      out.push_back(&value_[h]);
    }
  }
  glu_.collect(out);
  norm_.collect(out);
  if (!a.no_maneuver) {
    lateral_head_.collect(out);
    longitudinal_head_.collect(out);
  }
  decoder_in_.collect(out);
  decoder_lstm_.collect(out);
  decoder_out_.collect(out);
  return out;
}

std::size_t Forecaster::parameter_count() {
  std::size_t n = 0;
  for (Parameter *p : parameters()) {
    if (p->trainable) n += static_cast<std::size_t>(p->size());
  }
  return n;
}

Var Forecaster::temporal_encode(Tape &t, const SceneBatch &batch) {
  const int B = batch.size, th = batch.history_steps;
  Var x = ops::elu(temporal_in_(t, t.constant(batch.temporal)));
  Var steps;
  if (cfg_.ablation.no_temporal) {
    steps = temporal_mlp_(t, x);
  } else {
    LstmState s = temporal_lstm_.zero_state(t, B);
    std::vector<Var> hs;
    for (int k = 0; k < th; ++k) {
      s = temporal_lstm_(t, ops::slice_rows(x, static_cast<Index>(k) * B, B), s);
      hs.push_back(s.h);
    }
    steps = ops::concat_rows(hs);
  }
  // Step-major to scene-major.
  std::vector<Index> order;
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < th; ++k) order.push_back(static_cast<Index>(k) * B + b);
  }
  return ops::gather_rows(steps, order);
}

Var Forecaster::fuse(Tape &t, const SceneBatch &batch, const Var &nodes, const Var &f_t) {
  const int B = batch.size, th = batch.history_steps;
  const Index n = batch.slots, per_scene = th * n;
  const StackedGraphs &graphs = cfg_.variant == Variant::Full ? batch.dig : batch.merged;

  Var grid = nodes;
  if (cfg_.variant == Variant::Full) {
    std::vector<Var> conv;
    for (int b = 0; b < B; ++b) {
      conv.push_back(fusion_conv_(t, ops::slice_rows(nodes, b * per_scene, per_scene), th, n));
    }
    grid = fusion_mlp2_(t, ops::relu(fusion_mlp1_(t, ops::relu(ops::concat_rows(conv)))));
  }

  // Ego slot plus the mean over present neighbors, per step.
  std::vector<Var> pooled;
  for (int b = 0; b < B; ++b) {
    Matrix pool = Matrix::Zero(th, per_scene);
    for (int k = 0; k < th; ++k) {
      const Index base = b * per_scene + k * n;
      pool(k, k * n) = 1.0;
      double count = 0.0;
      for (Index s = 1; s < n; ++s) count += graphs.mask(base + s);
      for (Index s = 1; s < n; ++s) {
        if (graphs.mask(base + s) != 0.0) pool(k, k * n + s) = 1.0 / count;
      }
    }
    pooled.push_back(ops::matmul_const(pool, ops::slice_rows(grid, b * per_scene, per_scene)));
  }
  const Var f_is = ops::concat_rows(pooled);

  Var h;
  if (cfg_.ablation.conv_fusion) {
    std::vector<Var> out;
    const Var both = ops::concat_cols({f_t, f_is});
    for (int b = 0; b < B; ++b) {
      out.push_back(attention_conv_(t, ops::slice_rows(both, b * th, th), th, 1));
    }
    h = ops::concat_rows(out);
  } else {
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden / cfg_.fusion_heads));
    std::vector<Var> per_head;
    for (std::size_t i = 0; i < query_.size(); ++i) {
      const Var q = ops::matmul(f_t, t.param(query_[i]));
      const Var k = ops::matmul(f_is, t.param(key_[i]));
      const Var v = ops::matmul(f_is, t.param(value_[i]));
      std::vector<Var> scenes;
      for (int b = 0; b < B; ++b) {
        const Var scores = ops::scale(
            ops::matmul(ops::slice_rows(q, b * th, th), ops::transpose(ops::slice_rows(k, b * th, th))),
            scale);
        scenes.push_back(ops::matmul(ops::softmax_rows(scores), ops::slice_rows(v, b * th, th)));
      }
      const Var head = ops::concat_rows(scenes);
      h = i == 0 ? head : ops::add(h, head);
    }
  }
  return norm_(t, ops::glu(glu_(t, h)));
}

ForwardOutput Forecaster::decode(Tape &t, const SceneBatch &batch, const Var &f) {
  const int B = batch.size, th = batch.history_steps, tf = batch.future_steps;
  std::vector<Index> last;
  for (int b = 0; b < B; ++b) last.push_back(static_cast<Index>(b) * th + th - 1);
  const Var f_last = ops::gather_rows(f, last);

  ForwardOutput out;
  out.batch = B;
  out.future_steps = tf;
  if (cfg_.ablation.no_maneuver) {
    out.lateral = t.constant(Matrix::Constant(B, 3, 1.0 / 3.0));
    out.longitudinal = t.constant(Matrix::Constant(B, 3, 1.0 / 3.0));
  } else {
    out.lateral = ops::softmax_rows(lateral_head_(t, f_last));
    out.longitudinal = ops::softmax_rows(longitudinal_head_(t, f_last));
  }

  std::vector<Index> rep;
  Matrix onehot = Matrix::Zero(static_cast<Index>(B) * kModes, 6);
  for (int b = 0; b < B; ++b) {
    for (int m = 0; m < kModes; ++m) {
      const Index r = static_cast<Index>(b) * kModes + m;
      rep.push_back(b);
      if (!cfg_.ablation.no_maneuver) {
        onehot(r, m / 3) = 1.0;
        onehot(r, 3 + m % 3) = 1.0;
      }
    }
  }
  const Var x = ops::elu(decoder_in_(
      t, ops::concat_cols({ops::gather_rows(f_last, rep), ops::gather_rows(out.lateral, rep),
                           ops::gather_rows(out.longitudinal, rep), t.constant(onehot)})));
  LstmState s = decoder_lstm_.zero_state(t, x.rows());
  // Means accumulate per-step displacements, so steady motion is a
  // constant decoder output rather than a ramp the LSTM has to count out.
  std::vector<Var> steps, means;
  for (int k = 0; k < tf; ++k) {
    s = decoder_lstm_(t, x, s);
    steps.push_back(decoder_out_(t, s.h));
    const Var d = ops::slice_cols(steps.back(), 0, 2);
    means.push_back(k == 0 ? d : ops::add(means.back(), d));
  }
  const Var raw = ops::concat_rows(steps);
  const double ps = cfg_.position_scale;
  out.trajectory = ops::concat_cols({ops::scale(ops::concat_rows(means), ps),
                                     ops::scale(ops::exp(ops::slice_cols(raw, 2, 2)), ps),
                                     ops::scale(ops::tanh(ops::slice_cols(raw, 4, 1)), kCorrLimit)});
  return out;
}

ForwardOutput Forecaster::forward(Tape &t, const SceneBatch &batch, bool training,
                                  std::mt19937_64 &rng) {
  if (batch.history_steps != cfg_.history_steps || batch.future_steps != cfg_.future_steps) {
    throw DimensionError("batch horizons " + std::to_string(batch.history_steps) + "+" +
                         std::to_string(batch.future_steps) + " differ from the model's " +
                         std::to_string(cfg_.history_steps) + "+" +
                         std::to_string(cfg_.future_steps));
  }
  const Index C = cfg_.hidden;
  if (cfg_.variant == Variant::Small) {
    if (batch.merged.block == 0) throw DimensionError("small variant needs merged graphs");
    const Var nodes = merged_(t, batch.merged, training, rng);
    std::vector<Index> ego;
    const Index n = batch.slots;
    for (Index g = 0; g < batch.merged.num_graphs(); ++g) ego.push_back(g * n);
    const Var f = fuse(t, batch, nodes, ops::gather_rows(nodes, ego));
    return decode(t, batch, f);
  }
  if (batch.dig.block == 0 || batch.dsg.block == 0) {
    throw DimensionError("full variant needs intention and safety graphs");
  }
  const Index N = batch.dig.features.rows();
  const Var f_i = cfg_.ablation.no_intention ? t.constant(Matrix::Zero(N, C))
                                             : intention_(t, batch.dig, training, rng);
  const Var f_s = cfg_.ablation.no_safety_spatial ? t.constant(Matrix::Zero(N, C))
                                                  : safety_(t, batch.dsg, training, rng);
  const Var f_t = temporal_encode(t, batch);
  const Var f = fuse(t, batch, ops::concat_cols({f_i, f_s}), f_t);
  return decode(t, batch, f);
}

std::vector<ForecastDistribution> Forecaster::predict(const SceneBatch &batch) {
  Tape t;
  std::mt19937_64 rng(seed_);
  const ForwardOutput out = forward(t, batch, false, rng);
  if (!out.trajectory.value().allFinite() || !out.lateral.value().allFinite() ||
      !out.longitudinal.value().allFinite()) {
    throw TrainingError("model produced non-finite forecast parameters");
  }
  std::vector<ForecastDistribution> d;
  for (int b = 0; b < batch.size; ++b) d.push_back(extract_distribution(out, b));
  return d;
}

void Forecaster::save(const std::filesystem::path &path,
                      const std::map<std::string, std::string> &extra_meta,
                      const std::vector<Parameter> &extra_tensors) {
  Checkpoint ck;
  ck.meta = cfg_.to_meta();
  ck.meta["model.seed"] = std::to_string(seed_);
  for (const auto &[k, v] : extra_meta) ck.meta[k] = v;
  append_parameters(ck, parameters());
  for (const Parameter &p : extra_tensors) ck.tensors.emplace_back(p.name, p.value);
  save_checkpoint(path, ck);
}

void Forecaster::load(const Checkpoint &ck) { restore_parameters(ck, parameters()); }

Forecaster Forecaster::from_checkpoint(const Checkpoint &ck) {
  auto it = ck.meta.find("model.seed");
  const std::uint64_t seed = it == ck.meta.end() ? 0 : std::stoull(it->second);
  Forecaster f(ModelConfig::from_meta(ck.meta), seed);
  f.load(ck);
  return f;
}

}  // namespace safecast
