#include "safecast/train/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace safecast {

namespace {

constexpr double kProbFloor = 1e-12;
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

}  // namespace

double bivariate_nll(double mu_x, double mu_y, double sigma_x, double sigma_y, double corr,
                     double x, double y) {
  if (!(sigma_x > 0.0) || !(sigma_y > 0.0) || !(std::abs(corr) < 1.0)) {
    throw TrainingError("invalid bivariate Gaussian: sigma must be positive and |corr| < 1");
  }
  const double dx = (x - mu_x) / sigma_x;
  const double dy = (y - mu_y) / sigma_y;
  const double omr = 1.0 - corr * corr;
  const double z = dx * dx + dy * dy - 2.0 * corr * dx * dy;
  return kLog2Pi + std::log(sigma_x) + std::log(sigma_y) + 0.5 * std::log(omr) + z / (2.0 * omr);
}

double nll_bivariate(const ForecastDistribution &dist, const Matrix &truth,
                     const ManeuverLabel &label) {
  if (!truth.allFinite()) throw TrainingError("ground truth contains non-finite values");
  const Matrix &m = dist.modes[label.mode()];
  if (truth.rows() != m.rows() || truth.cols() != 2) {
    throw DimensionError("nll: truth " + shape_string(truth) + " vs forecast " + shape_string(m));
  }
  double total = 0.0;
  for (Index k = 0; k < m.rows(); ++k) {
    total += bivariate_nll(m(k, 0), m(k, 1), m(k, 2), m(k, 3), m(k, 4), truth(k, 0), truth(k, 1));
  }
  const int lat = static_cast<int>(label.lateral);
  const int lon = static_cast<int>(label.longitudinal);
  const double p_lat = dist.maneuver_probs.row(lat).sum();
  const double p_lon = dist.maneuver_probs.col(lon).sum();
  return total / static_cast<double>(m.rows()) - std::log(std::max(p_lat, kProbFloor)) -
         std::log(std::max(p_lon, kProbFloor));
}

double mse_loss(const ForecastDistribution &dist, const Matrix &truth, const ManeuverLabel &label) {
  const Matrix &m = dist.modes[label.mode()];
  if (truth.rows() != m.rows() || truth.cols() != 2) {
    throw DimensionError("mse: truth " + shape_string(truth) + " vs forecast " + shape_string(m));
  }
  return (m.leftCols(2) - truth).rowwise().squaredNorm().mean();
}

LossTerms compute_loss(Tape &t, const ForwardOutput &out, const SceneBatch &batch,
                       const LossWeights &weights) {
  const int B = out.batch, tf = out.future_steps;
  if (B != batch.size || tf != batch.future_steps) {
    throw DimensionError("loss: forecast and batch disagree on size or horizon");
  }
  std::vector<Index> rows;
  for (int k = 0; k < tf; ++k) {
    for (int b = 0; b < B; ++b) {
      rows.push_back((static_cast<Index>(k) * B + b) * kModes + batch.modes[b]);
    }
  }
  const Var sel = ops::gather_rows(out.trajectory, rows);
  const double count = static_cast<double>(rows.size());
  const Var truth = t.constant(batch.future);

  const Var diff = ops::sub(ops::slice_cols(sel, 0, 2), truth);
  const Var mse = ops::scale(ops::sum(ops::square(diff)), 1.0 / count);

  const Var sx = ops::slice_cols(sel, 2, 1);
  const Var sy = ops::slice_cols(sel, 3, 1);
  const Var rho = ops::slice_cols(sel, 4, 1);
  const Var dx = ops::div(ops::scale(ops::slice_cols(diff, 0, 1), -1.0), sx);
  const Var dy = ops::div(ops::scale(ops::slice_cols(diff, 1, 1), -1.0), sy);
  const Var omr = ops::add_scalar(ops::scale(ops::square(rho), -1.0), 1.0);
  const Var z = ops::sub(ops::add(ops::square(dx), ops::square(dy)),
                         ops::scale(ops::mul(rho, ops::mul(dx, dy)), 2.0));
  const Var per_row = ops::add(
      ops::add(ops::add(ops::log(sx), ops::log(sy)), ops::scale(ops::log(omr), 0.5)),
      ops::div(z, ops::scale(omr, 2.0)));
  const Var nll = ops::add_scalar(ops::scale(ops::sum(per_row), 1.0 / count), kLog2Pi);

  Matrix lat_pick = Matrix::Zero(B, 3), lon_pick = Matrix::Zero(B, 3);
  for (int b = 0; b < B; ++b) {
    lat_pick(b, batch.modes[b] / 3) = 1.0;
    lon_pick(b, batch.modes[b] % 3) = 1.0;
  }
  const Var lat_term = ops::sum(ops::mul_const(ops::log(ops::clamp_min(out.lateral, kProbFloor)), lat_pick));
  const Var lon_term =
      ops::sum(ops::mul_const(ops::log(ops::clamp_min(out.longitudinal, kProbFloor)), lon_pick));
  const Var maneuver = ops::scale(ops::add(lat_term, lon_term), -1.0 / B);

  LossTerms res;
  res.total = ops::add(mse, ops::add(ops::scale(nll, weights.nll),
                                     ops::scale(maneuver, weights.maneuver)));
  res.report.mse_component = mse.scalar();
  res.report.nll_component = nll.scalar();
  res.report.maneuver_nll_component = maneuver.scalar();
  res.report.total = res.total.scalar();
  res.report.batch_size = B;
  return res;
}

namespace {

std::vector<std::vector<const PreparedScene *>> batches_of(const std::vector<PreparedScene> &set,
                                                           const std::vector<std::size_t> &order,
                                                           int batch_size) {
  std::vector<std::vector<const PreparedScene *>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<const PreparedScene *> b;
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) {
      b.push_back(&set[order[j]]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

void accumulate(LossReport &sum, const LossReport &r) {
  const double w = r.batch_size;
  sum.total += w * r.total;
  sum.mse_component += w * r.mse_component;
  sum.nll_component += w * r.nll_component;
  sum.maneuver_nll_component += w * r.maneuver_nll_component;
  sum.batch_size += r.batch_size;
}

LossReport finish(LossReport sum) {
  if (sum.batch_size == 0) return sum;
  const double n = sum.batch_size;
  sum.total /= n;
  sum.mse_component /= n;
  sum.nll_component /= n;
  sum.maneuver_nll_component /= n;
  return sum;
}

std::string csv_row(int epoch, const LossReport &r) {
  std::ostringstream os;
  os.precision(17);
  os << epoch << ',' << r.total << ',' << r.mse_component << ',' << r.nll_component << ','
     << r.maneuver_nll_component << '\n';
  return os.str();
}

constexpr const char *kCsvHeader = "epoch,total,mse,nll,maneuver_nll\n";

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(epoch + 1));
}

}  // namespace

LossReport evaluate_loss(Forecaster &model, const std::vector<PreparedScene> &scenes,
                         const LossWeights &weights, int batch_size) {
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  LossReport sum;
  std::mt19937_64 rng(0);
  for (const auto &b : batches_of(scenes, order, std::max(batch_size, 1))) {
    const SceneBatch batch = make_batch(b);
    Tape t;
    const ForwardOutput out = model.forward(t, batch, false, rng);
    accumulate(sum, compute_loss(t, out, batch, weights).report);
  }
  return finish(sum);
}

void save_training_checkpoint(const std::filesystem::path &path, Forecaster &model,
                              const TrainState &state,
                              const std::map<std::string, std::string> &meta) {
  std::map<std::string, std::string> m = meta;
  m["train.epochs_done"] = std::to_string(state.epochs_done);
  m["train.adam_steps"] = std::to_string(state.optimizer.steps());
  std::ostringstream best;
  best.precision(17);
  best << state.best_val_nll;
  m["train.best_val_nll"] = best.str();
  m["train.best_epoch"] = std::to_string(state.best_epoch);
  m["train.since_best"] = std::to_string(state.since_best);
  std::vector<Parameter> extra;
  for (const auto &[name, mo] : state.optimizer.moments()) {
    extra.emplace_back("adam.m/" + name, mo.m);
    extra.emplace_back("adam.v/" + name, mo.v);
  }
  model.save(path, m, extra);
}

TrainState load_training_state(const Checkpoint &ck, Forecaster &model) {
  model.load(ck);
  TrainState s;
  auto num = [&](const char *k, double fallback) {
    auto it = ck.meta.find(k);
    return it == ck.meta.end() ? fallback : std::stod(it->second);
  };
  s.epochs_done = static_cast<int>(num("train.epochs_done", 0));
  s.optimizer.set_steps(static_cast<long>(num("train.adam_steps", 0)));
  s.best_val_nll = num("train.best_val_nll", 0.0);
  s.best_epoch = static_cast<int>(num("train.best_epoch", 0));
  s.since_best = static_cast<int>(num("train.since_best", 0));
  for (Parameter *p : model.parameters()) {
    const Matrix *m = ck.find("adam.m/" + p->name);
    const Matrix *v = ck.find("adam.v/" + p->name);
    if (m && v) s.optimizer.moments()[p->name] = {*m, *v};
  }
  return s;
}

TrainResult train(Forecaster &model, const std::vector<PreparedScene> &train_set,
                  const std::vector<PreparedScene> &val_set, const TrainConfig &cfg,
                  TrainState *resume) {
  if (train_set.empty()) throw std::invalid_argument("training split is empty");
  if (cfg.batch_size < 1 || cfg.epochs < 0) {
    throw std::invalid_argument("batch_size must be positive and epochs non-negative");
  }
  TrainState local;
  TrainState &state = resume ? *resume : local;
  const std::vector<Parameter *> params = model.parameters();
  const std::size_t n = train_set.size();
  const int steps_per_epoch = static_cast<int>((n + cfg.batch_size - 1) / cfg.batch_size);

  std::ofstream train_csv, val_csv;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const auto mode = state.epochs_done > 0 ? std::ios::app : std::ios::trunc;
    train_csv.open(cfg.out_dir / "loss.csv", std::ios::out | mode);
    val_csv.open(cfg.out_dir / "val_loss.csv", std::ios::out | mode);
    if (!train_csv || !val_csv) {
      throw std::runtime_error("cannot write loss CSVs in " + cfg.out_dir.string());
    }
    if (state.epochs_done == 0) {
      train_csv << kCsvHeader;
      val_csv << kCsvHeader;
    }
  }

  TrainResult res;
  res.best_epoch = state.best_epoch;
  res.best_val_nll = state.best_val_nll;
  for (int epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    std::mt19937_64 rng(epoch_seed(cfg.seed, epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    LossReport sum;
    int step = 0;
    try {
      for (const auto &members : batches_of(train_set, order, cfg.batch_size)) {
        const double lr = cosine_warm_restarts(
            cfg.lr, cfg.restart_period, cfg.restart_growth,
            (epoch - 1) + static_cast<double>(step) / steps_per_epoch);
        const SceneBatch batch = make_batch(members);
        Tape t;
        const ForwardOutput out = model.forward(t, batch, true, rng);
        const LossTerms loss = compute_loss(t, out, batch, cfg.weights);
        if (!std::isfinite(loss.report.total)) {
          throw TrainingError("non-finite training loss at epoch " + std::to_string(epoch));
        }
        for (Parameter *p : params) p->zero_grad();
        t.backward(loss.total);
        state.optimizer.step(params, lr);
        res.lr_trace.push_back(lr);
        rec.lr_end = lr;
        accumulate(sum, loss.report);
        ++step;
      }
    } catch (const TrainingError &e) {
      res.diverged = true;
      res.error = e.what();
      break;
    }
    rec.train = finish(sum);
    if (!val_set.empty()) {
      rec.val = evaluate_loss(model, val_set, cfg.weights, cfg.batch_size);
    }
    state.epochs_done = epoch;
    res.history.push_back(rec);

    bool improved = false;
    if (rec.val) {
      const double v = rec.val->nll_component + rec.val->maneuver_nll_component;
      if (state.best_epoch == 0 || v < state.best_val_nll) {
        state.best_val_nll = v;
        state.best_epoch = epoch;
        state.since_best = 0;
        improved = true;
      } else {
        ++state.since_best;
      }
    }
    if (train_csv.is_open()) {
      train_csv << csv_row(epoch, rec.train) << std::flush;
      if (rec.val) val_csv << csv_row(epoch, *rec.val) << std::flush;
      save_training_checkpoint(cfg.out_dir / "last.ckpt", model, state, cfg.checkpoint_meta);
      if (improved) {
        save_training_checkpoint(cfg.out_dir / "best.ckpt", model, state, cfg.checkpoint_meta);
      }
    }
    res.best_epoch = state.best_epoch;
    res.best_val_nll = state.best_val_nll;
    if (cfg.on_epoch) cfg.on_epoch(rec);
    if (cfg.patience > 0 && state.since_best >= cfg.patience) {
      res.stopped_early = true;
      break;
    }
  }
  return res;
}

double weighted_sum(double vehicle, double pedestrian, double bicycle, const ClassWeights &w) {
  return w.vehicle * vehicle + w.pedestrian * pedestrian + w.bicycle * bicycle;
}

MetricReport compute_metrics(const std::vector<Matrix> &predictions,
                             const std::vector<Matrix> &truths,
                             const std::vector<AgentType> &types, double step_rate_hz,
                             const ClassWeights &w) {
  if (predictions.size() != truths.size() || predictions.size() != types.size()) {
    throw std::invalid_argument("metrics: predictions, truths and types differ in count");
  }
  if (predictions.empty()) throw std::invalid_argument("metrics need a non-empty split");
  MetricReport r;
  r.scenes = predictions.size();
  const Index tf = truths[0].rows();
  const int whole_seconds = static_cast<int>(std::floor(tf / step_rate_hz + 1e-9));
  std::vector<double> sq(whole_seconds, 0.0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].rows() != tf || truths[i].rows() != tf || predictions[i].cols() != 2 ||
        truths[i].cols() != 2) {
      throw DimensionError("metrics: trajectory " + std::to_string(i) + " has shape " +
                           shape_string(predictions[i]) + " vs " + shape_string(truths[i]));
    }
    const Vector d = (predictions[i] - truths[i]).rowwise().norm();
    const double ade = d.mean(), fde = d(tf - 1);
    r.ade += ade;
    r.fde += fde;
    ClassMetric &c = r.per_class[types[i]];
    c.ade += ade;
    c.fde += fde;
    ++c.count;
    for (int h = 1; h <= whole_seconds; ++h) {
      const Index step = static_cast<Index>(std::lround(h * step_rate_hz)) - 1;
      sq[h - 1] += d(step) * d(step);
    }
  }
  const double n = static_cast<double>(r.scenes);
  r.ade /= n;
  r.fde /= n;
  for (int h = 1; h <= whole_seconds; ++h) {
    r.horizon_s.push_back(h);
    r.rmse.push_back(std::sqrt(sq[h - 1] / n));
  }
  double weight_total = 0.0;
  for (auto &[type, c] : r.per_class) {
    c.ade /= static_cast<double>(c.count);
    c.fde /= static_cast<double>(c.count);
    const double cw = type == AgentType::Vehicle      ? w.vehicle
                      : type == AgentType::Pedestrian ? w.pedestrian
                                                      : w.bicycle;
    r.wsade += cw * c.ade;
    r.wsfde += cw * c.fde;
    weight_total += cw;
  }
  if (weight_total > 0.0) {
    r.wsade /= weight_total;
    r.wsfde /= weight_total;
  }
  return r;
}

MetricReport evaluate(Forecaster &model, const std::vector<PreparedScene> &scenes,
                      double step_rate_hz, PointReduction reduction, int batch_size) {
  if (scenes.empty()) throw std::invalid_argument("evaluation split is empty");
  std::vector<Matrix> preds, truths;
  std::vector<AgentType> types;
  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto &members : batches_of(scenes, order, std::max(batch_size, 1))) {
    const auto dists = model.predict(make_batch(members));
    for (std::size_t i = 0; i < members.size(); ++i) {
      preds.push_back(predict_point(dists[i], reduction));
      truths.push_back(members[i]->future);
      types.push_back(members[i]->ego_type);
    }
  }
  return compute_metrics(preds, truths, types, step_rate_hz);
}

}  // namespace safecast
