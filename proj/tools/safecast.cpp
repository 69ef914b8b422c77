// safecast: data generation, training, evaluation, RSS checks and
// plot-data export. Results go to --out; diagnostics go to stderr.

#include "safecast/cli/run_config.hpp"
#include "safecast/graph/scene_graph.hpp"
#include "safecast/rss/rss.hpp"
#include "safecast/train/heatmap.hpp"
#include "safecast/train/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace sc = safecast;
using json = nlohmann::json;

namespace {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

Level log_level() {
  static const Level level = [] {
    const char *env = std::getenv("SAFECAST_LOG");
    const std::string v = env ? env : "info";
    if (v == "error" || v == "quiet") return Level::Error;
    if (v == "warn") return Level::Warn;
    if (v == "debug") return Level::Debug;
    return Level::Info;
  }();
  return level;
}

void log(Level l, const std::string &msg) {
  static const char *names[] = {"error", "warn", "info", "debug"};
  if (l <= log_level()) std::cerr << "[" << names[static_cast<int>(l)] << "] " << msg << '\n';
}

struct Common {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
};

sc::RunConfig resolve_config(const Common &c) {
  sc::RunConfig cfg = c.config.empty() ? sc::default_run_config(c.seed)
                                       : sc::load_run_config(c.config, c.seed);
  if (!c.out.empty()) {
    cfg.out = c.out;
    cfg.train.out_dir = c.out;
  }
  return cfg;
}

std::string command_line(int argc, char **argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) {
    if (i) s += ' ';
    s += argv[i];
  }
  return s;
}

void manifest(const std::filesystem::path &dir, const std::string &cmd, const std::string &argv,
              std::uint64_t seed, const std::string &hash, const std::string &ablation = "") {
  sc::write_manifest(dir, {cmd, argv, seed, hash, sc::git_describe(), ablation});
}

std::string fnv_hex(const std::string &s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

std::string read_text(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Tracks rebuilt from window histories, so estimates see training data only.
std::vector<sc::Track> tracks_from_windows(const std::vector<sc::SceneWindow> &windows) {
  std::vector<sc::Track> out;
  for (const auto &w : windows) {
    for (int s = 0; s < w.num_slots(); ++s) {
      sc::Track t;
      for (std::size_t k = 0; k < w.history[s].size(); ++k) {
        if (w.valid[s][k]) t.push_back(w.history[s][k]);
      }
      if (s == 0) t.insert(t.end(), w.future.begin(), w.future.end());
      if (!t.empty()) out.push_back(std::move(t));
    }
  }
  return out;
}

json params_json(const sc::RssParameters &p) {
  return {{"rho", p.rho},         {"a_max", p.a_max},       {"b_min", p.b_min},
          {"b_max", p.b_max},     {"alpha_max", p.alpha_max}, {"beta_min", p.beta_min},
          {"mu", p.mu},           {"context", sc::to_string(p.context)}};
}

json metrics_json(const sc::MetricReport &r) {
  json classes = json::object();
  for (const auto &[type, m] : r.per_class) {
    classes[sc::to_string(type)] = {{"ade", m.ade}, {"fde", m.fde}, {"count", m.count}};
  }
  return {{"scenes", r.scenes}, {"ade", r.ade},     {"fde", r.fde},
          {"wsade", r.wsade},   {"wsfde", r.wsfde}, {"horizon_s", r.horizon_s},
          {"rmse", r.rmse},     {"per_class", classes}};
}

void write_metrics(const std::filesystem::path &dir, const sc::MetricReport &r) {
  std::filesystem::create_directories(dir);
  std::ofstream j(dir / "metrics.json");
  j << metrics_json(r).dump(2) << '\n';
  std::ofstream c(dir / "rmse.csv");
  c.precision(17);
  c << "horizon_s,rmse\n";
  for (std::size_t i = 0; i < r.rmse.size(); ++i) c << r.horizon_s[i] << ',' << r.rmse[i] << '\n';
  if (!j || !c) throw std::runtime_error("cannot write metrics in " + dir.string());
}

struct Splits {
  std::vector<sc::SceneWindow> train, val, test;
};

Splits split(const sc::RunConfig &cfg) {
  auto windows = sc::load_windows(cfg);
  log(Level::Info, "loaded " + std::to_string(windows.size()) + " windows");
  auto s = sc::split_dataset(std::move(windows), cfg.data.train_fraction, cfg.data.val_fraction,
                             cfg.seed);
  log(Level::Info, "split " + std::to_string(s.train.size()) + "/" +
                       std::to_string(s.val.size()) + "/" + std::to_string(s.test.size()));
  return {std::move(s.train), std::move(s.val), std::move(s.test)};
}

int cmd_gen(const Common &c, const std::string &spec_path, const std::string &argv) {
  sc::SynthSpec spec;
  std::string hash;
  std::filesystem::path out = c.out.empty() ? "runs/gen" : c.out;
  if (!spec_path.empty()) {
    const std::string text = read_text(spec_path);
    try {
      spec = sc::parse_synth_spec(text, c.seed);
    } catch (const sc::ConfigError &e) {
      throw sc::ConfigError(spec_path + ": " + e.what());
    }
    hash = fnv_hex(text + "|seed=" + std::to_string(spec.seed));
  } else {
    const sc::RunConfig cfg = resolve_config(c);
    spec = cfg.data.synthetic;
    hash = cfg.hash();
    if (c.out.empty()) out = cfg.out;
  }
  std::filesystem::create_directories(out);
  const auto scenes = sc::synthesize_tracks(spec);
  const auto windows = sc::synthesize_scenes(spec);
  std::ofstream labels(out / "labels.csv");
  labels << "file,ego_id,lateral,longitudinal,ego_type\n";
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%04zu.csv", i);
    sc::write_ngsim_csv(out / name, scenes[i]);
    const sc::ManeuverLabel l = sc::extract_maneuver_labels(windows[i]);
    labels << name << ',' << windows[i].ego_id << ',' << sc::to_char(l.lateral) << ','
           << sc::to_char(l.longitudinal) << ',' << sc::to_string(windows[i].ego_now().type)
           << '\n';
  }
  if (!labels) throw std::runtime_error("cannot write labels in " + out.string());
  manifest(out, "gen", argv, spec.seed, hash);
  log(Level::Info, "wrote " + std::to_string(scenes.size()) + " scenes to " + out.string());
  return 0;
}

int cmd_train(const Common &c, const std::string &argv) {
  sc::RunConfig cfg = resolve_config(c);
  const Splits s = split(cfg);
  if (s.train.empty()) throw std::runtime_error("training split is empty");

  std::optional<sc::Checkpoint> resume;
  if (!c.checkpoint.empty()) resume = sc::load_checkpoint(c.checkpoint);
  if (resume) {
    cfg.model = sc::ModelConfig::from_meta(resume->meta);
  } else if (cfg.rss_mode == sc::RssMode::Estimate) {
    const sc::RssEstimate est =
        sc::estimate_parameters(tracks_from_windows(s.train), cfg.data.window.context);
    for (const auto &w : est.warnings) log(Level::Warn, "rss estimate: " + w);
    cfg.model.rss = est.params;
    log(Level::Info, "estimated rss parameters " + params_json(est.params).dump());
  }
  manifest(cfg.out, "train", argv, cfg.seed, cfg.hash(), cfg.model.ablation.label());

  const auto train_set = sc::prepare_scenes(s.train, cfg.model);
  const auto val_set = sc::prepare_scenes(s.val, cfg.model);
  sc::Forecaster model = resume ? sc::Forecaster::from_checkpoint(*resume)
                                : sc::Forecaster(cfg.model, cfg.seed);
  sc::TrainState state;
  if (resume) {
    state = sc::load_training_state(*resume, model);
    log(Level::Info, "resuming after epoch " + std::to_string(state.epochs_done));
  }
  log(Level::Info, "model " + sc::to_string(cfg.model.variant) + " ablation " +
                       cfg.model.ablation.label() + " with " +
                       std::to_string(model.parameter_count()) + " parameters");

  cfg.train.checkpoint_meta = {{"run.config_hash", cfg.hash()}};
  cfg.train.on_epoch = [&](const sc::EpochRecord &r) {
    std::ostringstream os;
    os << "epoch " << r.epoch << " loss " << r.train.total << " mse " << r.train.mse_component
       << " nll " << r.train.nll_component;
    if (r.val) os << " val_nll " << r.val->nll_component + r.val->maneuver_nll_component;
    os << " lr " << r.lr_end;
    log(Level::Info, os.str());
  };
  const sc::TrainResult res = sc::train(model, train_set, val_set, cfg.train, &state);
  if (res.diverged) {
    log(Level::Error, "training diverged: " + res.error);
    return 1;
  }
  if (res.stopped_early) log(Level::Info, "early stop at epoch " + std::to_string(state.epochs_done));
  if (state.epochs_done == 0 || res.history.empty()) {
    sc::save_training_checkpoint(cfg.out / "last.ckpt", model, state, cfg.train.checkpoint_meta);
  }
  if (!s.test.empty()) {
    const auto test_set = sc::prepare_scenes(s.test, cfg.model);
    const sc::MetricReport r = sc::evaluate(model, test_set, cfg.data.window.step_rate_hz(),
                                            cfg.reduction, cfg.train.batch_size);
    write_metrics(cfg.out, r);
    log(Level::Info, "test ade " + std::to_string(r.ade) + " fde " + std::to_string(r.fde));
  }
  return 0;
}

sc::Forecaster load_model(const std::string &path) {
  if (path.empty()) throw std::invalid_argument("--checkpoint is required");
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  return sc::Forecaster::from_checkpoint(sc::load_checkpoint(path));
}

int cmd_eval(const Common &c, const std::string &argv) {
  sc::Forecaster model = load_model(c.checkpoint);
  const sc::RunConfig cfg = resolve_config(c);
  const Splits s = split(cfg);
  const auto &set = s.test.empty() ? s.val : s.test;
  if (set.empty()) throw std::runtime_error("no evaluation windows in the configured split");
  const auto scenes = sc::prepare_scenes(set, model.config());
  const sc::MetricReport r =
      sc::evaluate(model, scenes, cfg.data.window.step_rate_hz(), cfg.reduction);
  write_metrics(cfg.out, r);
  manifest(cfg.out, "eval", argv, cfg.seed, cfg.hash(), model.config().ablation.label());
  std::cout << metrics_json(r).dump(2) << '\n';
  return 0;
}

sc::RssParameters params_from_file(const std::filesystem::path &p, sc::Context ctx) {
  const json j = json::parse(read_text(p));
  sc::RssParameters r = sc::RssParameters::defaults(ctx);
  for (const auto &[k, v] : j.items()) {
    if (!v.is_number()) throw sc::ConfigError(p.string() + ": rss." + k + " must be a number");
    if (k == "rho") r.rho = v;
    else if (k == "a_max") r.a_max = v;
    else if (k == "b_min") r.b_min = v;
    else if (k == "b_max") r.b_max = v;
    else if (k == "alpha_max") r.alpha_max = v;
    else if (k == "beta_min") r.beta_min = v;
    else if (k == "mu") r.mu = v;
    else throw sc::ConfigError(p.string() + ": unknown key rss." + k);
  }
  r.validate();
  return r;
}

int cmd_rss(const Common &c, const std::string &input, const std::string &params,
            const std::string &context, double frame_rate, const std::string &argv) {
  const sc::Context ctx = sc::parse_context(context);
  const std::filesystem::path out = c.out.empty() ? "runs/rss" : c.out;
  std::vector<sc::Track> tracks;
  if (!input.empty()) {
    tracks = sc::load_trajectories(input, sc::TrajectoryFormat::NgsimCsv, frame_rate).tracks;
  }
  sc::RssParameters p = sc::RssParameters::defaults(ctx);
  if (params == "estimate") {
    if (tracks.empty()) throw std::invalid_argument("--params estimate needs --input");
    const sc::RssEstimate est = sc::estimate_parameters(tracks, ctx);
    for (const auto &w : est.warnings) log(Level::Warn, "rss estimate: " + w);
    p = est.params;
    std::cout << params_json(p).dump(2) << '\n';
  } else if (params != "default") {
    p = params_from_file(params, ctx);
  }
  std::filesystem::create_directories(out);
  if (!tracks.empty()) {
    std::map<int, std::vector<sc::AgentState>> frames;
    for (const auto &t : tracks) {
      for (const auto &s : t) frames[s.frame].push_back(s);
    }
    std::ofstream csv(out / "envelope.csv");
    csv.precision(10);
    csv << "frame,agent_id,d_lon,d_lat,leader_id,lateral_id\n";
    for (const auto &[frame, states] : frames) {
      for (std::size_t i = 0; i < states.size(); ++i) {
        std::vector<sc::AgentState> others;
        for (std::size_t j = 0; j < states.size(); ++j) {
          if (j != i) others.push_back(states[j]);
        }
        const sc::SafetyEnvelope e = sc::safety_envelope(states[i], others, p);
        csv << frame << ',' << states[i].agent_id << ',' << e.d_lon << ',' << e.d_lat << ','
            << (e.leader_id ? std::to_string(*e.leader_id) : "") << ','
            << (e.lateral_id ? std::to_string(*e.lateral_id) : "") << '\n';
      }
    }
    if (!csv) throw std::runtime_error("cannot write " + (out / "envelope.csv").string());
    log(Level::Info, "wrote envelopes for " + std::to_string(frames.size()) + " frames");
  }
  manifest(out, "rss", argv, c.seed.value_or(0), fnv_hex(params_json(p).dump()));
  return 0;
}

int cmd_graph(const Common &c, int scene, const std::string &kind, const std::string &argv) {
  const sc::RunConfig cfg = resolve_config(c);
  const auto windows = sc::load_windows(cfg);
  if (scene < 0 || scene >= static_cast<int>(windows.size())) {
    throw std::out_of_range("scene " + std::to_string(scene) + " outside 0.." +
                            std::to_string(windows.size() - 1));
  }
  sc::GraphKind k = sc::GraphKind::DIG;
  if (kind == "dsg") k = sc::GraphKind::DSG;
  else if (kind == "merged") k = sc::GraphKind::Merged;
  else if (kind != "dig") throw std::invalid_argument("--kind must be dig, dsg or merged");
  const auto graphs = sc::graph_sequence(windows[scene], k, cfg.model.graph_config());
  std::filesystem::create_directories(cfg.out);
  std::ofstream nodes(cfg.out / "nodes.csv"), edges(cfg.out / "edges.csv");
  nodes.precision(10);
  nodes << "step,slot,agent_id,valid";
  for (sc::Index f = 0; f < graphs[0].node_features.cols(); ++f) nodes << ",f" << f;
  nodes << '\n';
  edges << "step,source,target\n";
  const auto &w = windows[scene];
  for (std::size_t step = 0; step < graphs.size(); ++step) {
    const auto &g = graphs[step];
    for (sc::Index i = 0; i < g.node_features.rows(); ++i) {
      nodes << step << ',' << i << ','
            << (i < static_cast<sc::Index>(w.agent_ids.size()) ? w.agent_ids[i] : -1) << ','
            << static_cast<int>(g.valid[i]);
      for (sc::Index f = 0; f < g.node_features.cols(); ++f) nodes << ',' << g.node_features(i, f);
      nodes << '\n';
      for (sc::Index j = 0; j < g.adjacency.cols(); ++j) {
        if (i != j && g.adjacency(i, j) != 0.0) edges << step << ',' << i << ',' << j << '\n';
      }
    }
  }
  if (!nodes || !edges) throw std::runtime_error("cannot write graph CSVs in " + cfg.out.string());
  manifest(cfg.out, "graph", argv, cfg.seed, cfg.hash());
  return 0;
}

int cmd_heatmap(const Common &c, int scene, double grid, const std::string &argv) {
  sc::Forecaster model = load_model(c.checkpoint);
  const sc::RunConfig cfg = resolve_config(c);
  const auto windows = sc::load_windows(cfg);
  if (scene < 0 || scene >= static_cast<int>(windows.size())) {
    throw std::out_of_range("scene " + std::to_string(scene) + " outside 0.." +
                            std::to_string(windows.size() - 1));
  }
  const sc::PreparedScene p = sc::prepare_scene(windows[scene], model.config());
  const auto dist = model.predict(sc::make_batch({&p}));
  const sc::HeatmapGrid g = sc::gmm_heatmap(dist[0], grid);
  std::filesystem::create_directories(cfg.out);
  sc::write_heatmap_csv(cfg.out / "heatmap.csv", g);
  for (std::size_t k = 0; k < g.density.size(); ++k) {
    log(Level::Debug, "step " + std::to_string(k) + " mass " + std::to_string(g.mass(k)));
  }
  manifest(cfg.out, "heatmap", argv, cfg.seed, cfg.hash(), model.config().ablation.label());
  log(Level::Info, "wrote " + std::to_string(g.nx) + " x " + std::to_string(g.ny) +
                       " grid for " + std::to_string(g.density.size()) + " steps");
  return 0;
}

void add_common(CLI::App *app, Common &c, bool config = true, bool checkpoint = false,
                bool required = false) {
  if (config) app->add_option("--config", c.config, "JSON run config")->check(CLI::ExistingFile);
  if (checkpoint) app->add_option("--checkpoint", c.checkpoint, "model checkpoint");
  if (checkpoint && required) app->get_option("--checkpoint")->required();
  app->add_option("--out", c.out, "output directory");
  app->add_option("--seed", c.seed, "overrides the config seed");
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Risk-aware multimodal trajectory forecasting"};
  app.require_subcommand(1);
  Common common;
  const std::string argline = command_line(argc, argv);

  auto *gen = app.add_subcommand("gen", "write a synthetic dataset");
  std::string spec;
  add_common(gen, common);
  gen->add_option("--spec", spec, "standalone generator spec")->check(CLI::ExistingFile);

  auto *train = app.add_subcommand("train", "train a model");
  add_common(train, common, true, true);

  auto *eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, common, true, true, true);

  auto *rss = app.add_subcommand("rss", "RSS envelopes and parameter estimation");
  std::string input, params = "default", context = "highway";
  double frame_rate = 10.0;
  add_common(rss, common, false);
  rss->add_option("--input", input, "ngsim_csv trajectory file")->check(CLI::ExistingFile);
  rss->add_option("--params", params, "default, estimate, or a JSON file of bounds");
  rss->add_option("--context", context, "highway or urban")
      ->check(CLI::IsMember({"highway", "urban"}));
  rss->add_option("--frame-rate", frame_rate, "raw frame rate of --input");

  auto *graph = app.add_subcommand("graph", "export the graphs of one window");
  int scene = 0;
  std::string kind = "dig";
  add_common(graph, common);
  graph->add_option("--scene", scene, "window index");
  graph->add_option("--kind", kind, "dig, dsg or merged")
      ->check(CLI::IsMember({"dig", "dsg", "merged"}));

  auto *heat = app.add_subcommand("heatmap", "mixture density grid for one window");
  double grid = 0.5;
  add_common(heat, common, true, true, true);
  heat->add_option("--scene", scene, "window index");
  heat->add_option("--grid", grid, "cell size in meters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e, std::cout, std::cerr);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(common, spec, argline);
    if (train->parsed()) return cmd_train(common, argline);
    if (eval->parsed()) return cmd_eval(common, argline);
    if (rss->parsed()) return cmd_rss(common, input, params, context, frame_rate, argline);
    if (graph->parsed()) return cmd_graph(common, scene, kind, argline);
    if (heat->parsed()) return cmd_heatmap(common, scene, grid, argline);
  } catch (const sc::ConfigError &e) {
    log(Level::Error, e.what());
    return 2;
  } catch (const std::exception &e) {
    log(Level::Error, e.what());
    return 1;
  }
  return 1;
}
