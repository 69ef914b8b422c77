#pragma once

#include "safecast/model/forecaster.hpp"
#include "safecast/train/training.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace safecast {

/// Bad configuration: syntax errors carry line and column, schema errors
/// the dotted key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  /// "synthetic" draws scenes from `synthetic`; otherwise `path` names a
  /// trajectory file or a directory of them.
  std::string source = "synthetic";
  std::filesystem::path path;
  TrajectoryFormat format = TrajectoryFormat::NgsimCsv;
  WindowConfig window;
  double train_fraction = 0.7;
  double val_fraction = 0.15;
  SynthSpec synthetic;
};

enum class RssMode { Default, Estimate, Explicit };

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  RssMode rss_mode = RssMode::Default;
  TrainConfig train;
  PointReduction reduction = PointReduction::TopMode;
  std::uint64_t seed = 1;
  std::filesystem::path out = "runs/default";
  /// Canonical JSON of the fully resolved config.
  std::string canonical;

  /// FNV-1a 64 of `canonical`, hex.
  std::string hash() const;
};

/// Parses and fully validates a config document. Unknown keys, wrong types
/// and inconsistent values throw ConfigError before any work starts.
RunConfig parse_run_config(const std::string &text, std::optional<std::uint64_t> seed_override = {});
RunConfig load_run_config(const std::filesystem::path &path,
                          std::optional<std::uint64_t> seed_override = {});
/// Defaults only (used when no --config is given).
RunConfig default_run_config(std::optional<std::uint64_t> seed_override = {});

/// Synthetic generator settings from a standalone spec document, which
/// holds the keys of the config's data.synthetic section plus "seed".
SynthSpec parse_synth_spec(const std::string &text, std::optional<std::uint64_t> seed_override = {});

/// Windows for the configured data source. Directories are read in sorted
/// file-name order.
std::vector<SceneWindow> load_windows(const RunConfig &cfg);
/// Raw tracks for RSS estimation.
std::vector<Track> load_tracks(const RunConfig &cfg);

struct RunManifest {
  std::string command;
  std::string command_line;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string git_describe;
  std::string ablation;
};

/// Writes manifest.json into dir (created when missing).
void write_manifest(const std::filesystem::path &dir, const RunManifest &m);
/// `git describe --always --dirty` of the source tree, or "unknown".
std::string git_describe();

}  // namespace safecast
