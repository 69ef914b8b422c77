#include "safecast/graph/scene_graph.hpp"

#include <stdexcept>

namespace safecast {

std::string to_string(GraphKind k) {
  switch (k) {
    case GraphKind::DIG:
      return "dig";
    case GraphKind::DSG:
      return "dsg";
    case GraphKind::Merged:
      return "merged";
  }
  return "dig";
}

Index feature_count(GraphKind kind) {
  switch (kind) {
    case GraphKind::DIG:
      return kDigFeatures;
    case GraphKind::DSG:
      return kDsgFeatures;
    case GraphKind::Merged:
      return kMergedFeatures;
  }
  return 0;
}

namespace {

int slot_count(const SceneWindow &w, int num_slots) {
  if (num_slots == 0) return w.num_slots();
  if (num_slots < w.num_slots()) {
    throw std::invalid_argument("graph needs " + std::to_string(w.num_slots()) +
                                " slots but only " + std::to_string(num_slots) + " requested");
  }
  return num_slots;
}

void check_step(const SceneWindow &w, int step) {
  if (step < 0 || step >= w.history_steps()) {
    throw std::out_of_range("history step " + std::to_string(step) + " outside window of " +
                            std::to_string(w.history_steps()));
  }
}

SceneGraph skeleton(const SceneWindow &w, int step, int n, GraphKind kind, double radius) {
  SceneGraph g;
  g.kind = kind;
  g.frame = w.history[0][step].frame;
  g.node_features = Matrix::Zero(n, feature_count(kind));
  g.adjacency = Matrix::Zero(n, n);
  g.valid.assign(n, 0);
  for (int s = 0; s < w.num_slots(); ++s) g.valid[s] = w.valid[s][step];
  for (int i = 0; i < w.num_slots(); ++i) {
    if (!g.valid[i]) continue;
    for (int j = i + 1; j < w.num_slots(); ++j) {
      if (!g.valid[j]) continue;
      if ((w.history[i][step].p - w.history[j][step].p).norm() <= radius) {
        g.adjacency(i, j) = g.adjacency(j, i) = 1.0;
      }
    }
  }
  return g;
}

void fill_kinematics(SceneGraph &g, const SceneWindow &w, int step) {
  const Vec2 o = w.origin();
  for (int s = 0; s < w.num_slots(); ++s) {
    if (!g.valid[s]) continue;
    const AgentState &a = w.history[s][step];
    auto row = g.node_features.row(s);
    row.segment<2>(0) = (a.p - o).transpose();
    row.segment<2>(2) = a.v.transpose();
    row.segment<2>(4) = a.a.transpose();
    row(6 + static_cast<int>(a.type)) = 1.0;
  }
}

// Envelope of every present agent against the others present at `step`.
std::vector<SafetyEnvelope> envelopes(const SceneWindow &w, int step,
                                      const RssParameters &params, double lane_width) {
  std::vector<AgentState> present;
  for (int s = 0; s < w.num_slots(); ++s) {
    if (w.valid[s][step]) present.push_back(w.history[s][step]);
  }
  std::vector<SafetyEnvelope> out(w.num_slots());
  for (int s = 0; s < w.num_slots(); ++s) {
    if (!w.valid[s][step]) continue;
    out[s] = safety_envelope(w.history[s][step], present, params, lane_width);
  }
  return out;
}

}  // namespace

SceneGraph build_dig(const SceneWindow &w, int step, double d_close, int num_slots) {
  check_step(w, step);
  SceneGraph g = skeleton(w, step, slot_count(w, num_slots), GraphKind::DIG, d_close);
  fill_kinematics(g, w, step);
  return g;
}

SceneGraph build_dsg(const SceneWindow &w, int step, const RssParameters &params,
                     double d_close_lon, int num_slots, double lane_width) {
  check_step(w, step);
  SceneGraph g = skeleton(w, step, slot_count(w, num_slots), GraphKind::DSG, d_close_lon);
  const auto env = envelopes(w, step, params, lane_width);
  const Vec2 o = w.origin();
  for (int s = 0; s < w.num_slots(); ++s) {
    if (!g.valid[s]) continue;
    g.node_features.row(s) << (w.history[s][step].p - o).transpose(), env[s].d_lon,
        env[s].d_lat;
  }
  return g;
}

SceneGraph build_graph(const SceneWindow &w, int step, GraphKind kind, const GraphConfig &cfg) {
  switch (kind) {
    case GraphKind::DIG:
      return build_dig(w, step, cfg.d_close, cfg.num_slots);
    case GraphKind::DSG: {
      SceneGraph g = build_dsg(w, step, cfg.rss, cfg.d_close_lon, cfg.num_slots, cfg.lane_width);
      if (!cfg.rss_features) g.node_features.rightCols(2).setZero();
      return g;
    }
    case GraphKind::Merged: {
      check_step(w, step);
      SceneGraph g =
          skeleton(w, step, slot_count(w, cfg.num_slots), GraphKind::Merged, cfg.d_close);
      fill_kinematics(g, w, step);
      if (cfg.rss_features) {
        const auto env = envelopes(w, step, cfg.rss, cfg.lane_width);
        for (int s = 0; s < w.num_slots(); ++s) {
          if (!g.valid[s]) continue;
          g.node_features(s, kDigFeatures) = env[s].d_lon;
          g.node_features(s, kDigFeatures + 1) = env[s].d_lat;
        }
      }
      return g;
    }
  }
  throw std::logic_error("unknown graph kind");
}

std::vector<SceneGraph> graph_sequence(const SceneWindow &w, GraphKind kind,
                                       const GraphConfig &cfg) {
  std::vector<SceneGraph> out;
  out.reserve(w.history_steps());
  for (int k = 0; k < w.history_steps(); ++k) out.push_back(build_graph(w, k, kind, cfg));
  return out;
}

StackedGraphs stack_graphs(const std::vector<SceneGraph> &graphs) {
  StackedGraphs s;
  if (graphs.empty()) return s;
  const Index n = graphs[0].num_nodes();
  const Index f = graphs[0].node_features.cols();
  const Index total = n * static_cast<Index>(graphs.size());
  s.block = n;
  s.features.resize(total, f);
  s.adjacency.resize(total, n);
  s.mask.resize(total);
  for (std::size_t g = 0; g < graphs.size(); ++g) {
    const SceneGraph &gr = graphs[g];
    if (gr.num_nodes() != n || gr.node_features.cols() != f) {
      throw DimensionError("stack_graphs: graph " + std::to_string(g) + " has shape " +
                           shape_string(gr.node_features) + ", expected " +
                           std::to_string(n) + " x " + std::to_string(f));
    }
    const Index r = static_cast<Index>(g) * n;
    s.features.middleRows(r, n) = gr.node_features;
    s.adjacency.middleRows(r, n) = gr.adjacency;
    for (Index i = 0; i < n; ++i) s.mask(r + i) = gr.valid[i];
  }
  return s;
}

}  // namespace safecast
