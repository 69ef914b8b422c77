#pragma once

#include "safecast/io/trajectory.hpp"
#include "safecast/numeric/tape.hpp"
#include "safecast/rss/rss.hpp"

#include <cstdint>
#include <vector>

namespace safecast {

enum class GraphKind { DIG, DSG, Merged };

std::string to_string(GraphKind k);

/// Node features: DIG (p, v, a, one-hot type), DSG (p, d_lon, d_lat),
/// Merged (DIG features followed by d_lon, d_lat).
inline constexpr Index kDigFeatures = 6 + kAgentTypes;
inline constexpr Index kDsgFeatures = 4;
inline constexpr Index kMergedFeatures = kDigFeatures + 2;

Index feature_count(GraphKind kind);

/// One timestep of a scene. Rows follow the window's slot order, padded
/// with absent nodes up to the requested slot count.
struct SceneGraph {
  Matrix node_features;              // n x F, zero rows for absent nodes
  Matrix adjacency;                  // n x n, symmetric 0/1, zero diagonal
  std::vector<std::uint8_t> valid;   // n
  GraphKind kind = GraphKind::DIG;
  int frame = 0;

  Index num_nodes() const { return node_features.rows(); }
};

struct GraphConfig {
  double d_close = 25.0;      // DIG edge radius, m
  double d_close_lon = 2.0;   // DSG edge radius, m
  double lane_width = 3.5;
  int num_slots = 0;          // 0 keeps the window's own slot count
  RssParameters rss;
  /// When false, DSG and merged graphs carry zero safety distances.
  bool rss_features = true;
};

/// Positions are relative to the window origin; velocity and acceleration
/// are taken as recorded. Edges join distinct present nodes whose center
/// distance is at most d_close.
SceneGraph build_dig(const SceneWindow &w, int step, double d_close, int num_slots = 0);

/// Safety distances come from safety_envelope against the other present
/// agents at the same step, evaluated in the source frame.
SceneGraph build_dsg(const SceneWindow &w, int step, const RssParameters &params,
                     double d_close_lon, int num_slots = 0, double lane_width = 3.5);

SceneGraph build_graph(const SceneWindow &w, int step, GraphKind kind, const GraphConfig &cfg);

/// One graph per history step, oldest first, with shared node order.
std::vector<SceneGraph> graph_sequence(const SceneWindow &w, GraphKind kind,
                                       const GraphConfig &cfg);

/// Graphs of equal node count stacked into one block-diagonal batch. Row
/// g * block + i is node i of graph g.
struct StackedGraphs {
  Matrix features;   // (G * block) x F
  Matrix adjacency;  // (G * block) x block, the diagonal blocks only
  Vector mask;       // G * block, 1 for present nodes
  Index block = 0;

  Index num_graphs() const { return block == 0 ? 0 : features.rows() / block; }
};

StackedGraphs stack_graphs(const std::vector<SceneGraph> &graphs);

}  // namespace safecast
