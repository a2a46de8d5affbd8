#pragma once

#include "defectloc/balance.hpp"
#include "defectloc/graphseg.hpp"
#include "defectloc/ingest.hpp"
#include "defectloc/loss.hpp"
#include "defectloc/model.hpp"
#include "defectloc/synth.hpp"
#include "defectloc/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace defectloc {

struct PathsConfig {
  std::string board_dir;
  std::string texture_dir;
  std::string work_dir = "work";
};

struct TilingConfig {
  Extent window{289, 289};
  Extent stride{97, 67};  // {dy, dx}
  int bit_depth = 8;      // of materialised tile files
};

struct BalanceConfig {
  std::string extractor = "deep";  // deep | projection
  std::string extractor_weights;   // ONNX file for the deep extractor
  std::string extractor_layer;     // empty: network output
  int projection_dim = 64;
  KMeansOptions kmeans;
  /// Share of selected tiles moved to validation when no image is tagged val.
  double val_fallback_fraction = 0.1;
};

struct ModelConfig {
  std::vector<int> channels{32, 64, 128, 128, 256, 256, 512};
  std::vector<int> skips{0, 1, 2};
  int kernel = 4;
  int stride = 2;
  double leaky_slope = 0.2;
  bool batch_norm = true;
};

struct EvalConfig {
  double target_tpr = 0.4;
  int heatmaps = 8;
  double heatmap_opacity = 0.75;
  double tile_opacity = 0.50;
  int grid_even = 256;
  int grid_exact_limit = 4096;
};

struct PipelineConfig {
  std::uint64_t seed = 42;
  PathsConfig paths;
  SplitFractions split;
  TilingConfig tiling;
  BalanceConfig balance;
  SegParams seg;
  AugmentConfig augment;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;  // train.seed mirrors the global seed
  EvalConfig eval;

  /// Checks every sub-configuration; throws ConfigError naming the key.
  void validate() const;
  NetworkConfig network() const;
  TrainConfig training() const;
  KMeansOptions kmeans() const;
};

enum class ConfigSource { Default, File, Flag };
std::string to_string(ConfigSource s);

/// Every settable key as `section.key`, in rendering order.
const std::vector<std::string>& config_keys();

/// Throws ConfigError naming the key when it is unknown or the value does
/// not parse.
void apply_setting(PipelineConfig& config, const std::string& key, const std::string& value);
std::string get_setting(const PipelineConfig& config, const std::string& key);

struct ResolvedConfig {
  PipelineConfig config;
  std::map<std::string, ConfigSource> sources;
};

/// Defaults, then the INI file (if any), then `key=value` overrides.
ResolvedConfig resolve_config(const std::optional<std::filesystem::path>& file,
                              const std::vector<std::pair<std::string, std::string>>& overrides);

/// Parses INI text (`[section]` headers, `key = value` lines, `#`/`;`
/// comments) on top of the defaults. Returns the keys it set.
std::vector<std::string> parse_config_into(PipelineConfig& config, const std::string& text);
PipelineConfig parse_config(const std::string& text);

/// Deterministic INI rendering in config_keys() order. With `sources`, each
/// key is preceded by a comment naming where its value came from.
std::string render_config(const PipelineConfig& config, const std::map<std::string, ConfigSource>* sources = nullptr);

/// Splits `section.key=value`; throws ConfigError on malformed input.
std::pair<std::string, std::string> split_override(const std::string& text);

}  // namespace defectloc
