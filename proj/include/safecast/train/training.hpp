#pragma once

#include "safecast/model/forecaster.hpp"
#include "safecast/numeric/optim.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace safecast {

struct LossWeights {
  double nll = 1.0;
  double maneuver = 1.0;
};

/// total = mse + nll_weight * nll + maneuver_weight * maneuver_nll.
struct LossReport {
  double total = 0.0;
  double mse_component = 0.0;
  double nll_component = 0.0;           // trajectory part, mean per step
  double maneuver_nll_component = 0.0;  // -log P(lat) - log P(lon)
  int batch_size = 0;
};

/// -log N2((x, y) | mu, sigma, corr). Throws TrainingError unless sigmas
/// are positive and |corr| < 1.
double bivariate_nll(double mu_x, double mu_y, double sigma_x, double sigma_y, double corr,
                     double x, double y);

/// Trajectory NLL of the true mode averaged over the horizon plus the
/// maneuver term, probabilities floored at 1e-12.
double nll_bivariate(const ForecastDistribution &dist, const Matrix &truth,
                     const ManeuverLabel &label);

/// Mean squared Euclidean error of the true mode's means.
double mse_loss(const ForecastDistribution &dist, const Matrix &truth, const ManeuverLabel &label);

struct LossTerms {
  Var total;
  LossReport report;
};

/// Batch-mean losses under true-maneuver conditioning.
LossTerms compute_loss(Tape &t, const ForwardOutput &out, const SceneBatch &batch,
                       const LossWeights &weights);

struct EpochRecord {
  int epoch = 0;  // 1-based
  LossReport train;
  std::optional<LossReport> val;
  double lr_end = 0.0;
};

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 128;
  int epochs = 200;
  double restart_period = 10.0;  // epochs in the first cosine cycle
  double restart_growth = 2.0;
  /// Epochs without validation NLL improvement before stopping; 0 disables.
  int patience = 10;
  LossWeights weights;
  std::uint64_t seed = 1;
  /// Directory for loss CSVs and checkpoints; empty writes nothing.
  std::filesystem::path out_dir;
  /// Metadata copied into every checkpoint.
  std::map<std::string, std::string> checkpoint_meta;
  /// Called after every completed epoch.
  std::function<void(const EpochRecord &)> on_epoch;
};


struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<double> lr_trace;  // learning rate of every optimizer step
  int best_epoch = 0;
  double best_val_nll = 0.0;
  bool stopped_early = false;
  bool diverged = false;
  std::string error;
};

/// Optimizer and schedule position for resuming.
struct TrainState {
  Adam optimizer;
  int epochs_done = 0;
  double best_val_nll = 0.0;
  int best_epoch = 0;
  int since_best = 0;
};

/// Trains in place with Adam and per-step cosine warm restarts. With an
/// out_dir it writes loss.csv, val_loss.csv, last.ckpt after every epoch
/// and best.ckpt on validation improvement. A non-finite loss or gradient
/// stops training with diverged set; earlier checkpoints are kept.
TrainResult train(Forecaster &model, const std::vector<PreparedScene> &train_set,
                  const std::vector<PreparedScene> &val_set, const TrainConfig &cfg,
                  TrainState *resume = nullptr);

/// Mean losses over a set in evaluation mode.
LossReport evaluate_loss(Forecaster &model, const std::vector<PreparedScene> &scenes,
                         const LossWeights &weights, int batch_size = 128);

/// Checkpoint including optimizer moments and schedule position.
void save_training_checkpoint(const std::filesystem::path &path, Forecaster &model,
                              const TrainState &state,
                              const std::map<std::string, std::string> &meta = {});
/// Restores model parameters and returns the saved optimizer state.
TrainState load_training_state(const Checkpoint &ck, Forecaster &model);

struct ClassWeights {
  double vehicle = 0.20;
  double pedestrian = 0.58;
  double bicycle = 0.22;
};

double weighted_sum(double vehicle, double pedestrian, double bicycle,
                    const ClassWeights &w = {});

struct ClassMetric {
  double ade = 0.0;
  double fde = 0.0;
  std::size_t count = 0;
};

struct MetricReport {
  std::vector<double> horizon_s;  // 1, 2, ... whole seconds within t_f
  std::vector<double> rmse;       // per entry of horizon_s
  std::map<AgentType, ClassMetric> per_class;
  double ade = 0.0;
  double fde = 0.0;
  /// Class-weighted sums over the classes present, weights renormalized.
  double wsade = 0.0;
  double wsfde = 0.0;
  std::size_t scenes = 0;
};

/// predictions and truths are t_f x 2 each.
MetricReport compute_metrics(const std::vector<Matrix> &predictions,
                             const std::vector<Matrix> &truths,
                             const std::vector<AgentType> &types, double step_rate_hz,
                             const ClassWeights &w = {});

MetricReport evaluate(Forecaster &model, const std::vector<PreparedScene> &scenes,
                      double step_rate_hz, PointReduction reduction = PointReduction::TopMode,
                      int batch_size = 128);

}  // namespace safecast
