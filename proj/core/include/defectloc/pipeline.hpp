#pragma once

// Stage runners behind the command-line tool. Each stage reads the previous
// stage's artifacts from the work directory, writes its own, and records a
// fingerprint of everything it depended on so an unchanged rerun is a no-op.

#include "defectloc/balance.hpp"
#include "defectloc/config.hpp"
#include "defectloc/evaluator.hpp"
#include "defectloc/ingest.hpp"
#include "defectloc/tiler.hpp"
#include "defectloc/trainer.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace defectloc {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitRuntime = 3 };

/// Maps an exception to the documented exit code.
int exit_code_for(const std::exception& e);

/// Exclusive ownership of a work directory via `<dir>/.lock` (holds the pid;
/// a lock left by a dead process is taken over).
class WorkDirLock {
 public:
  explicit WorkDirLock(const std::filesystem::path& dir);
  ~WorkDirLock();
  WorkDirLock(const WorkDirLock&) = delete;
  WorkDirLock& operator=(const WorkDirLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct StageReport {
  std::string stage;
  bool skipped = false;  // fingerprint matched, nothing was redone
  std::string detail;
};

struct TileSet {
  std::vector<std::string> names;
  std::vector<Image> pixels;
};

struct ClusterSummary {
  ClusterModel model;
  std::size_t train_selected = 0;
  std::size_t val_selected = 0;
  bool val_from_fallback = false;
};

struct EvalReport {
  RocCurve curve;
  double threshold = 0.0;
  double target_tpr = 0.0;
  std::size_t tiles = 0;
  std::string model;
};

class Pipeline {
 public:
  Pipeline(PipelineConfig config, std::ostream& log, bool force = false);

  /// Restricts `force` to one stage; upstream stages are then reused when
  /// their fingerprints match.
  void force_only(const std::string& stage) { force_only_ = stage; }

  const PipelineConfig& config() const { return config_; }
  std::filesystem::path work() const { return config_.paths.work_dir; }

  StageReport ingest();
  StageReport tile();
  StageReport cluster();
  StageReport train();
  /// Evaluates the reconstructor on held-out synthetic anomalies and writes
  /// eval/ artifacts under `label`.
  EvalReport evaluate(const Reconstructor& reconstructor, const std::string& label);
  /// Writes `count` clean | input | mask strips to preview/.
  std::vector<std::filesystem::path> synth_preview(int count);

  Manifest manifest() const;
  /// Tiles from tiles/index.tsv whose source image has the given split.
  TileSet tiles(Split split) const;
  /// Selected tile names from the cluster stage, "train" or "val" use.
  TileSet selected(const std::string& use) const;
  ClusterSummary cluster_summary() const;
  TexturePool texture_pool() const;
  /// Synthetic test samples: unfiltered test-split tiles, no augmentation,
  /// every sample carries an overlay.
  std::vector<SyntheticSample> test_samples() const;

  std::filesystem::path best_checkpoint() const { return work() / "train" / "best.ckpt"; }

 private:
  std::string fingerprint(const std::string& stage) const;
  bool forced(const std::string& stage) const { return force_ && (force_only_.empty() || force_only_ == stage); }
  bool up_to_date(const std::string& stage) const;
  void stamp(const std::string& stage) const;
  void write_effective_config(const std::filesystem::path& dir) const;

  PipelineConfig config_;
  std::ostream& log_;
  bool force_;
  std::string force_only_;
  ClusterSummary last_cluster_;
};

struct CommandLine {
  std::string subcommand;
  std::optional<std::filesystem::path> config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
  bool force = false;
  bool annotate = false;
  std::map<std::string, std::string> args;  // subcommand-specific options
};

/// Runs one subcommand; returns the exit status. Messages go to `out`,
/// diagnostics to `err`.
int run_subcommand(const CommandLine& cmd, std::ostream& out, std::ostream& err);

}  // namespace defectloc
