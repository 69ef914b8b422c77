#include "safecast/model/uncertainty_gat.hpp"

#include <cmath>

namespace safecast {

GufNoise::GufNoise(std::string name, Index features, double init_log_sigma)
    : log_sigma_(std::move(name) + ".log_sigma",
                 Matrix::Constant(1, features, init_log_sigma)) {}

Var GufNoise::operator()(Tape &t, const Var &x, bool active, std::mt19937_64 &rng) {
  if (!active) return x;
  if (x.cols() != log_sigma_.value.cols()) {
    throw DimensionError("guf: features " + shape_string(x.value()) + " vs noise " +
                         shape_string(log_sigma_.value));
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix z(1, x.cols());
  for (Index f = 0; f < z.cols(); ++f) z(0, f) = normal(rng);
  const Var eps = ops::mul_const(ops::exp(t.param(log_sigma_)), z);
  return ops::add_row(x, eps);
}

void GufNoise::collect(std::vector<Parameter *> &out) { out.push_back(&log_sigma_); }

Matrix gat_attention(const Matrix &h, const Matrix &adjacency, const Vector &a, double slope) {
  const Index d = h.cols();
  if (a.size() != 2 * d) {
    throw DimensionError("gat_attention: attention vector of " + std::to_string(a.size()) +
                         " entries for features " + shape_string(h));
  }
  if (adjacency.rows() != h.rows() || adjacency.cols() != h.rows()) {
    throw DimensionError("gat_attention: adjacency " + shape_string(adjacency) +
                         " for features " + shape_string(h));
  }
  const Matrix s_src = h * a.head(d);
  const Matrix s_dst = h * a.tail(d);
  return ops::block_attention_coefficients(s_src, s_dst, adjacency, h.rows(), slope);
}

GatLayer::GatLayer(std::string name, Index in, Index out, int heads, std::mt19937_64 &rng,
                   double slope)
    : slope_(slope) {
  if (heads < 1) throw std::invalid_argument("graph attention needs at least one head");
  for (int k = 0; k < heads; ++k) {
    const std::string base = name + ".head" + std::to_string(k);
    weights_.emplace_back(base + ".weight", init_uniform(in, out, in, rng));
    attention_.emplace_back(base + ".attention", init_uniform(out, 2, out, rng));
  }
}

Var GatLayer::operator()(Tape &t, const Var &x, const Matrix &adjacency, Index block) {
  if (x.cols() != weights_[0].value.rows()) {
    throw DimensionError("graph attention: input " + shape_string(x.value()) +
                         " vs weight " + shape_string(weights_[0].value));
  }
  Var total;
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    const Var h = ops::matmul(x, t.param(weights_[k]));
    const Var s = ops::matmul(h, t.param(attention_[k]));
    const Var agg = ops::block_graph_attention(h, ops::slice_cols(s, 0, 1),
                                               ops::slice_cols(s, 1, 1), adjacency, block,
                                               slope_);
    total = k == 0 ? agg : ops::add(total, agg);
  }
  if (weights_.size() > 1) total = ops::scale(total, 1.0 / static_cast<double>(weights_.size()));
  return ops::elu(total);
}

void GatLayer::collect(std::vector<Parameter *> &out) {
  for (std::size_t k = 0; k < weights_.size(); ++k) {
    out.push_back(&weights_[k]);
    out.push_back(&attention_[k]);
  }
}

UncertaintyGat::UncertaintyGat(std::string name, const GatStackConfig &cfg,
                               std::mt19937_64 &rng)
    : cfg_(cfg),
      norm_(name + ".norm", cfg.in_features, cfg.bn_momentum),
      guf_(name + ".guf", cfg.in_features, cfg.guf_init_log_sigma),
      gat1_(name + ".gat1", cfg.in_features, cfg.hidden, cfg.heads, rng, cfg.leaky_slope),
      gat2_(name + ".gat2", cfg.hidden, cfg.hidden, cfg.second_heads, rng, cfg.leaky_slope),
      skip_(name + ".skip", cfg.in_features, cfg.hidden, rng, false),
      out_(name + ".out", cfg.hidden, cfg.hidden, rng) {}

Var UncertaintyGat::operator()(Tape &t, const StackedGraphs &graphs, bool training,
                               std::mt19937_64 &rng) {
  if (graphs.features.cols() != cfg_.in_features) {
    throw DimensionError("uncertainty gat: node features " + shape_string(graphs.features) +
                         " but configured for " + std::to_string(cfg_.in_features));
  }
  Var x = norm_(t, t.constant(graphs.features), graphs.mask, training);
  x = guf_(t, x, cfg_.guf && (training || cfg_.guf_at_inference), rng);
  Var h = gat1_(t, x, graphs.adjacency, graphs.block);
  h = ops::dropout(h, cfg_.dropout, training, rng);
  h = gat2_(t, h, graphs.adjacency, graphs.block);
  h = ops::add(h, skip_(t, x));
  return ops::mul_col(out_(t, h), t.constant(graphs.mask));
}

void UncertaintyGat::collect(std::vector<Parameter *> &out) {
  norm_.collect(out);
  if (cfg_.guf) guf_.collect(out);
  gat1_.collect(out);
  gat2_.collect(out);
  skip_.collect(out);
  out_.collect(out);
}

}  // namespace safecast
