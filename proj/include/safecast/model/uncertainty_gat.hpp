#pragma once

#include "safecast/graph/scene_graph.hpp"
#include "safecast/numeric/layers.hpp"

#include <random>
#include <string>
#include <vector>

namespace safecast {

struct GatStackConfig {
  Index in_features = kDigFeatures;
  Index hidden = 64;
  int heads = 2;         // first attention layer
  int second_heads = 1;  // attention layer after dropout
  double dropout = 0.1;
  double leaky_slope = 0.2;
  bool guf = true;
  bool guf_at_inference = false;
  /// Initial log sigma of the feature noise. -infinity gives sigma = 0
  /// exactly, which also freezes it (d sigma / d log sigma = sigma).
  double guf_init_log_sigma = -5.0;
  double bn_momentum = 0.1;
};

/// Learnable per-feature Gaussian noise shared by all nodes of a forward
/// pass: x + sigma * z with one z ~ N(0, I) row per call.
class GufNoise {
 public:
  GufNoise() = default;
  GufNoise(std::string name, Index features, double init_log_sigma);

  /// Identity when !active.
  Var operator()(Tape &t, const Var &x, bool active, std::mt19937_64 &rng);
  void collect(std::vector<Parameter *> &out);

  Parameter &log_sigma() { return log_sigma_; }
  RowVector sigma() const { return log_sigma_.value.array().exp(); }

 private:
  Parameter log_sigma_;  // 1 x F
};

/// Attention coefficients of one head on a single graph. h is n x d, a has
/// 2d entries (source half first), adjacency n x n.
Matrix gat_attention(const Matrix &h, const Matrix &adjacency, const Vector &a,
                     double slope = 0.2);

/// Multi-head graph attention: ELU of the head average of alpha * (x W).
class GatLayer {
 public:
  GatLayer() = default;
  GatLayer(std::string name, Index in, Index out, int heads, std::mt19937_64 &rng,
           double slope = 0.2);

  /// x holds stacked graphs, adjacency is the block layout of StackedGraphs.
  Var operator()(Tape &t, const Var &x, const Matrix &adjacency, Index block);
  void collect(std::vector<Parameter *> &out);

  int heads() const { return static_cast<int>(weights_.size()); }
  Parameter &weight(int head) { return weights_.at(head); }
  /// out x 2: column 0 scores the receiving node, column 1 its neighbor.
  Parameter &attention(int head) { return attention_.at(head); }

 private:
  std::vector<Parameter> weights_;
  std::vector<Parameter> attention_;
  double slope_ = 0.2;
};

/// Batch norm, GUF, multi-head attention, dropout, a second attention
/// layer and a linear head, with a projected skip from the GUF output to
/// the second attention output. Rows of absent nodes come out zero.
class UncertaintyGat {
 public:
  UncertaintyGat() = default;
  UncertaintyGat(std::string name, const GatStackConfig &cfg, std::mt19937_64 &rng);

  Var operator()(Tape &t, const StackedGraphs &graphs, bool training, std::mt19937_64 &rng);
  void collect(std::vector<Parameter *> &out);

  const GatStackConfig &config() const { return cfg_; }
  GufNoise &guf() { return guf_; }
  GatLayer &first() { return gat1_; }
  GatLayer &second() { return gat2_; }

 private:
  GatStackConfig cfg_;
  BatchNorm norm_;
  GufNoise guf_;
  GatLayer gat1_;
  GatLayer gat2_;
  Linear skip_;
  Linear out_;
};

}  // namespace safecast
