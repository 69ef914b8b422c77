#include "safecast/cli/run_config.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#ifndef SAFECAST_SOURCE_DIR
#define SAFECAST_SOURCE_DIR "."
#endif

namespace safecast {

using json = nlohmann::json;

namespace {

/// One JSON object section; every key must be read before finish().
class Section {
 public:
  Section(const json &j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "expected an object");
  }

  bool has(const std::string &key) const { return j_.contains(key); }

  const json &raw(const std::string &key) {
    seen_.insert(key);
    return j_.at(key);
  }

  Section sub(const std::string &key) { return Section(raw(key), name(key)); }

  void number(const std::string &key, double &out) {
    if (!has(key)) return;
    const json &v = raw(key);
    if (!v.is_number()) fail(key, "expected a number");
    out = v.get<double>();
  }

  void integer(const std::string &key, int &out) {
    if (!has(key)) return;
    const json &v = raw(key);
    if (!v.is_number_integer()) fail(key, "expected an integer");
    out = v.get<int>();
  }

  void index(const std::string &key, Index &out) {
    int v = static_cast<int>(out);
    integer(key, v);
    out = v;
  }

  void boolean(const std::string &key, bool &out) {
    if (!has(key)) return;
    const json &v = raw(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    out = v.get<bool>();
  }

  void string(const std::string &key, std::string &out) {
    if (!has(key)) return;
    const json &v = raw(key);
    if (!v.is_string()) fail(key, "expected a string");
    out = v.get<std::string>();
  }

  void unsigned64(const std::string &key, std::uint64_t &out) {
    if (!has(key)) return;
    const json &v = raw(key);
    if (!v.is_number_unsigned()) fail(key, "expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }

  template <typename Key>
  void mix(const std::string &key, std::map<Key, double> &out,
           const std::vector<Key> &allowed) {
    if (!has(key)) return;
    const json &v = raw(key);
    if (!v.is_object() || v.empty()) fail(key, "expected a non-empty object of weights");
    std::map<Key, double> m;
    for (const auto &[k, w] : v.items()) {
      Key parsed{};
      if constexpr (std::is_same_v<Key, char>) {
        if (k.size() != 1) fail(key + "." + k, "expected a single-letter key");
        parsed = k[0];
      } else {
        parsed = k;
      }
      if (std::find(allowed.begin(), allowed.end(), parsed) == allowed.end()) {
        fail(key + "." + k, "unknown category");
      }
      if (!w.is_number() || w.template get<double>() < 0.0) fail(key + "." + k, "expected a weight >= 0");
      m[parsed] = w.template get<double>();
    }
    out = std::move(m);
  }

  void finish() const {
    for (const auto &[k, v] : j_.items()) {
      if (!seen_.count(k)) fail(k, "unknown key");
    }
  }

  [[noreturn]] void fail(const std::string &key, const std::string &msg) const {
    throw ConfigError("config " + (key.empty() ? (path_.empty() ? "root" : path_) : name(key)) +
                      ": " + msg);
  }

 private:
  std::string name(const std::string &key) const { return path_.empty() ? key : path_ + "." + key; }

  const json &j_;
  std::string path_;
  std::set<std::string> seen_;
};

json parse_text(const std::string &text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error &e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    std::string what = e.what();
    if (auto p = what.find("syntax error"); p != std::string::npos) what = what.substr(p);
    throw ConfigError("config line " + std::to_string(line) + ", column " + std::to_string(col) +
                      ": " + what);
  }
}

template <typename F>
void checked(F &&f, const std::string &where) {
  try {
    f();
  } catch (const ConfigError &) {
    throw;
  } catch (const std::exception &e) {
    throw ConfigError("config " + where + ": " + e.what());
  }
}

void read_window(Section &s, WindowConfig &w) {
  s.number("frame_rate_hz", w.frame_rate_hz);
  s.number("history_s", w.history_s);
  s.number("future_s", w.future_s);
  s.integer("downsample", w.downsample);
  s.integer("stride", w.stride);
  s.integer("n_max", w.n_max);
  s.number("d_close", w.d_close);
  std::string ctx = to_string(w.context);
  s.string("context", ctx);
  checked([&] { w.context = parse_context(ctx); }, "data.context");
}

void check_window(const WindowConfig &w) {
  if (!(w.frame_rate_hz > 0.0)) throw ConfigError("config data.frame_rate_hz: must be positive");
  if (w.downsample < 1) throw ConfigError("config data.downsample: must be at least 1");
  if (w.stride < 1) throw ConfigError("config data.stride: must be at least 1");
  if (w.n_max < 0) throw ConfigError("config data.n_max: must be non-negative");
  if (!(w.d_close > 0.0)) throw ConfigError("config data.d_close: must be positive");
  if (w.history_steps() < 1 || w.future_steps() < 1) {
    throw ConfigError("config data: history_s and future_s must each cover at least one step");
  }
}

void read_synth(Section &s, SynthSpec &spec) {
  s.integer("n_scenes", spec.n_scenes);
  s.integer("n_agents", spec.n_agents);
  s.mix<char>("lateral_mix", spec.lateral_mix, {'S', 'L', 'R'});
  s.mix<char>("longitudinal_mix", spec.longitudinal_mix, {'A', 'D', 'C'});
  s.mix<std::string>("type_mix", spec.type_mix, {"vehicle", "pedestrian", "bicycle"});
  s.number("braking_leader_fraction", spec.braking_leader_fraction);
  s.number("noise", spec.noise);
  s.number("lane_width", spec.lane_width);
  if (spec.n_scenes < 1) s.fail("n_scenes", "must be at least 1");
  if (spec.n_agents < 1) s.fail("n_agents", "must be at least 1");
  if (!(spec.braking_leader_fraction >= 0.0 && spec.braking_leader_fraction <= 1.0)) {
    s.fail("braking_leader_fraction", "must lie in [0, 1]");
  }
  if (!(spec.noise >= 0.0)) s.fail("noise", "must be non-negative");
}

void apply_window(SynthSpec &spec, const WindowConfig &w) {
  spec.frame_rate_hz = w.frame_rate_hz;
  spec.history_s = w.history_s;
  spec.future_s = w.future_s;
  spec.downsample = w.downsample;
  spec.d_close = w.d_close;
  spec.n_max = w.n_max;
  spec.context = w.context;
}

json mix_json(const std::map<char, double> &m) {
  json j = json::object();
  for (const auto &[k, v] : m) j[std::string(1, k)] = v;
  return j;
}

json canonical_json(const RunConfig &c) {
  const WindowConfig &w = c.data.window;
  const SynthSpec &s = c.data.synthetic;
  const ModelConfig &m = c.model;
  const TrainConfig &t = c.train;
  json j;
  j["seed"] = c.seed;
  j["out"] = c.out.string();
  j["data"] = {{"source", c.data.source},
               {"path", c.data.path.string()},
               {"format", c.data.format == TrajectoryFormat::NgsimCsv ? "ngsim_csv" : "apollo_txt"},
               {"frame_rate_hz", w.frame_rate_hz},
               {"history_s", w.history_s},
               {"future_s", w.future_s},
               {"downsample", w.downsample},
               {"stride", w.stride},
               {"n_max", w.n_max},
               {"d_close", w.d_close},
               {"context", to_string(w.context)},
               {"train_fraction", c.data.train_fraction},
               {"val_fraction", c.data.val_fraction},
               {"synthetic",
                {{"n_scenes", s.n_scenes},
                 {"n_agents", s.n_agents},
                 {"lateral_mix", mix_json(s.lateral_mix)},
                 {"longitudinal_mix", mix_json(s.longitudinal_mix)},
                 {"type_mix", s.type_mix},
                 {"braking_leader_fraction", s.braking_leader_fraction},
                 {"noise", s.noise},
                 {"lane_width", s.lane_width}}}};
  json model = json::object();
  for (const auto &[k, v] : m.to_meta()) model[k] = v;
  j["model"] = model;
  j["rss_mode"] = c.rss_mode == RssMode::Default    ? "default"
                  : c.rss_mode == RssMode::Estimate ? "estimate"
                                                    : "explicit";
  j["train"] = {{"lr", t.lr},
                {"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"restart_period", t.restart_period},
                {"restart_growth", t.restart_growth},
                {"patience", t.patience},
                {"nll_weight", t.weights.nll},
                {"maneuver_weight", t.weights.maneuver}};
  j["eval"] = {{"reduction", c.reduction == PointReduction::TopMode ? "top_mode" : "weighted"}};
  return j;
}

void finalize(RunConfig &c) {
  check_window(c.data.window);
  apply_window(c.data.synthetic, c.data.window);
  c.data.synthetic.seed = c.seed;
  const WindowConfig &w = c.data.window;
  c.model.history_steps = w.history_steps();
  c.model.future_steps = w.future_steps();
  c.model.n_max = w.n_max;
  c.model.d_close = w.d_close;
  if (c.rss_mode == RssMode::Default) c.model.rss = RssParameters::defaults(w.context);
  c.model.rss.context = w.context;
  checked([&] { c.model.validate(); }, "model");
  if (!(c.data.train_fraction > 0.0) || !(c.data.val_fraction >= 0.0) ||
      c.data.train_fraction + c.data.val_fraction > 1.0) {
    throw ConfigError("config data: need train_fraction > 0, val_fraction >= 0 and their sum <= 1");
  }
  const TrainConfig &t = c.train;
  if (!(t.lr > 0.0)) throw ConfigError("config train.lr: must be positive");
  if (t.batch_size < 1) throw ConfigError("config train.batch_size: must be at least 1");
  if (t.epochs < 0) throw ConfigError("config train.epochs: must be non-negative");
  if (!(t.restart_period > 0.0) || !(t.restart_growth >= 1.0)) {
    throw ConfigError("config train: restart_period must be positive and restart_growth >= 1");
  }
  if (t.patience < 0) throw ConfigError("config train.patience: must be non-negative");
  if (c.data.source != "synthetic" && c.data.path.empty()) {
    throw ConfigError("config data.path: required when data.source is \"file\"");
  }
  c.train.seed = c.seed;
  c.train.out_dir = c.out;
  c.canonical = canonical_json(c).dump();
}

}  // namespace

std::string RunConfig::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig parse_run_config(const std::string &text, std::optional<std::uint64_t> seed_override) {
  const json doc = parse_text(text);
  Section root(doc, "");
  RunConfig c;
  root.unsigned64("seed", c.seed);
  std::string out = c.out.string();
  root.string("out", out);
  c.out = out;

  if (root.has("data")) {
    Section d = root.sub("data");
    d.string("source", c.data.source);
    if (c.data.source != "synthetic" && c.data.source != "file") {
      d.fail("source", "expected \"synthetic\" or \"file\"");
    }
    std::string path;
    d.string("path", path);
    c.data.path = path;
    std::string format = "ngsim_csv";
    d.string("format", format);
    checked([&] { c.data.format = parse_format(format); }, "data.format");
    read_window(d, c.data.window);
    d.number("train_fraction", c.data.train_fraction);
    d.number("val_fraction", c.data.val_fraction);
    if (d.has("synthetic")) {
      Section s = d.sub("synthetic");
      read_synth(s, c.data.synthetic);
      s.finish();
    }
    d.finish();
  }

  if (root.has("model")) {
    Section m = root.sub("model");
    ModelConfig &mc = c.model;
    std::string variant = to_string(mc.variant);
    m.string("variant", variant);
    checked([&] { mc.variant = parse_variant(variant); }, "model.variant");
    m.index("hidden", mc.hidden);
    m.integer("fusion_heads", mc.fusion_heads);
    m.integer("gat_heads", mc.gat_heads);
    m.integer("second_gat_heads", mc.second_gat_heads);
    m.number("dropout", mc.dropout);
    m.number("leaky_slope", mc.leaky_slope);
    m.number("guf_init_log_sigma", mc.guf_init_log_sigma);
    m.boolean("guf_at_inference", mc.guf_at_inference);
    m.number("bn_momentum", mc.bn_momentum);
    m.number("d_close_lon", mc.d_close_lon);
    m.number("lane_width", mc.lane_width);
    m.number("position_scale", mc.position_scale);
    if (m.has("ablation")) {
      const json &a = m.raw("ablation");
      std::vector<std::string> letters;
      if (a.is_string()) {
        letters.push_back(a.get<std::string>());
      } else if (a.is_array()) {
        for (const json &x : a) {
          if (!x.is_string()) m.fail("ablation", "expected a letter or a list of letters");
          letters.push_back(x.get<std::string>());
        }
      } else {
        m.fail("ablation", "expected a letter or a list of letters");
      }
      Ablation combined;
      for (const std::string &l : letters) {
        Ablation one;
        checked([&] { one = Ablation::from_letter(l); }, "model.ablation");
        combined.no_intention |= one.no_intention;
        combined.no_safety_spatial |= one.no_safety_spatial;
        combined.no_temporal |= one.no_temporal;
        combined.no_maneuver |= one.no_maneuver;
        combined.conv_fusion |= one.conv_fusion;
        combined.no_guf |= one.no_guf;
        combined.no_rss |= one.no_rss;
      }
      mc.ablation = combined;
    }
    m.finish();
  }

  if (root.has("rss")) {
    const json &r = root.raw("rss");
    if (r.is_string()) {
      const std::string mode = r.get<std::string>();
      if (mode == "estimate") {
        c.rss_mode = RssMode::Estimate;
      } else if (mode != "default") {
        root.fail("rss", "expected \"default\", \"estimate\" or an object of bounds");
      }
    } else {
      Section s(r, "rss");
      c.rss_mode = RssMode::Explicit;
      RssParameters &p = c.model.rss;
      p = RssParameters::defaults(c.data.window.context);
      s.number("rho", p.rho);
      s.number("a_max", p.a_max);
      s.number("b_min", p.b_min);
      s.number("b_max", p.b_max);
      s.number("alpha_max", p.alpha_max);
      s.number("beta_min", p.beta_min);
      s.number("mu", p.mu);
      s.finish();
    }
  }

  if (root.has("train")) {
    Section t = root.sub("train");
    TrainConfig &tc = c.train;
    t.number("lr", tc.lr);
    t.integer("batch_size", tc.batch_size);
    t.integer("epochs", tc.epochs);
    t.number("restart_period", tc.restart_period);
    t.number("restart_growth", tc.restart_growth);
    t.integer("patience", tc.patience);
    t.number("nll_weight", tc.weights.nll);
    t.number("maneuver_weight", tc.weights.maneuver);
    t.finish();
  }

  if (root.has("eval")) {
    Section e = root.sub("eval");
    std::string red = "top_mode";
    e.string("reduction", red);
    checked([&] { c.reduction = parse_reduction(red); }, "eval.reduction");
    e.finish();
  }
  root.finish();

  if (seed_override) c.seed = *seed_override;
  finalize(c);
  return c;
}

namespace {

std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path &path,
                          std::optional<std::uint64_t> seed_override) {
  try {
    return parse_run_config(read_file(path), seed_override);
  } catch (const ConfigError &e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig default_run_config(std::optional<std::uint64_t> seed_override) {
  return parse_run_config("{}", seed_override);
}

SynthSpec parse_synth_spec(const std::string &text, std::optional<std::uint64_t> seed_override) {
  const json doc = parse_text(text);
  Section s(doc, "");
  SynthSpec spec;
  WindowConfig w = spec.window_config();
  read_window(s, w);
  check_window(w);
  read_synth(s, spec);
  s.unsigned64("seed", spec.seed);
  s.finish();
  apply_window(spec, w);
  if (seed_override) spec.seed = *seed_override;
  return spec;
}

std::vector<SceneWindow> load_windows(const RunConfig &cfg) {
  if (cfg.data.source == "synthetic") return synthesize_scenes(cfg.data.synthetic);
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(cfg.data.path)) {
    for (const auto &e : std::filesystem::directory_iterator(cfg.data.path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(cfg.data.path);
  }
  std::vector<SceneWindow> out;
  for (const auto &f : files) {
    const LoadResult r = load_trajectories(f, cfg.data.format, cfg.data.window.frame_rate_hz);
    auto w = window_scenes(r.tracks, cfg.data.window, f.filename().string());
    std::move(w.begin(), w.end(), std::back_inserter(out));
  }
  if (out.empty()) {
    throw EmptyInputError("no complete windows in " + cfg.data.path.string());
  }
  return out;
}

std::vector<Track> load_tracks(const RunConfig &cfg) {
  std::vector<Track> out;
  if (cfg.data.source == "synthetic") {
    for (auto &scene : synthesize_tracks(cfg.data.synthetic)) {
      std::move(scene.begin(), scene.end(), std::back_inserter(out));
    }
    return out;
  }
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(cfg.data.path)) {
    for (const auto &e : std::filesystem::directory_iterator(cfg.data.path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(cfg.data.path);
  }
  for (const auto &f : files) {
    auto r = load_trajectories(f, cfg.data.format, cfg.data.window.frame_rate_hz);
    std::move(r.tracks.begin(), r.tracks.end(), std::back_inserter(out));
  }
  return out;
}

std::string git_describe() {
  const std::string cmd =
      std::string("git -C \"") + SAFECAST_SOURCE_DIR + "\" describe --always --dirty 2>/dev/null";
  FILE *p = popen(cmd.c_str(), "r");
  if (!p) return "unknown";
  std::array<char, 256> buf{};
  std::string out;
  while (fgets(buf.data(), buf.size(), p)) out += buf.data();
  const int status = pclose(p);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return status == 0 && !out.empty() ? out : "unknown";
}

void write_manifest(const std::filesystem::path &dir, const RunManifest &m) {
  std::filesystem::create_directories(dir);
  const json j = {{"command", m.command},
                  {"command_line", m.command_line},
                  {"seed", m.seed},
                  {"config_hash", m.config_hash},
                  {"git_describe", m.git_describe},
                  {"ablation", m.ablation}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << j.dump(2) << '\n';
}

}  // namespace safecast
