#pragma once

#include "defectloc/common.hpp"
#include "defectloc/loss.hpp"
#include "defectloc/model.hpp"
#include "defectloc/synth.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace defectloc {

struct PlateauConfig {
  double factor = 0.7;
  int patience = 3;
  double threshold = 1e-4;  // relative
  double eps = 1e-8;
  int cooldown = 0;
  double min_lr = 0.0;
};

struct EarlyStopConfig {
  int patience = 40;
  double min_delta = 1e-6;  // absolute
};

struct TrainConfig {
  std::uint64_t seed = 42;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool amsgrad = false;
  PlateauConfig plateau;
  EarlyStopConfig early_stop;
  int batch_size = 32;
  int max_epochs = 500;

  void validate() const;
};

/// Reduce-on-plateau in "min" mode with a relative threshold: a value counts
/// as an improvement when it is below best * (1 - threshold). The rate is
/// multiplied by `factor` once the count of non-improving epochs exceeds
/// `patience`; reductions smaller than `eps` are ignored.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr, PlateauConfig cfg);

  /// Feeds one epoch's metric; returns true if the rate was reduced.
  bool step(double metric);

  double lr() const { return lr_; }
  double best() const { return best_; }
  int num_bad_epochs() const { return num_bad_; }
  int cooldown_counter() const { return cooldown_counter_; }
  int reductions() const { return reductions_; }

  void restore(double lr, double best, int num_bad, int cooldown_counter, int reductions);

 private:
  PlateauConfig cfg_;
  double lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int num_bad_ = 0;
  int cooldown_counter_ = 0;
  int reductions_ = 0;
};

/// Halts once `patience` consecutive epochs fail to beat the reference value
/// by more than min_delta. The reference moves only on such an improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(EarlyStopConfig cfg) : cfg_(cfg) {}

  /// Returns true when training should stop after this epoch.
  bool step(double metric, int epoch);

  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int wait() const { return wait_; }
  void restore(double best, int best_epoch, int wait);

 private:
  EarlyStopConfig cfg_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
  int wait_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown train;
  LossBreakdown val;
  double lr = 0.0;  // rate used during the epoch
};

struct TrainState {
  int epoch = 0;  // epochs completed
  double current_lr = 0.0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int epochs_since_best = 0;
  int epochs_since_plateau_improve = 0;
  int plateau_triggers = 0;
  std::vector<EpochRecord> history;
  std::string stop_reason;
};

/// End-of-epoch bookkeeping shared by the training loop and by replays of
/// scripted validation curves.
class TrainingController {
 public:
  explicit TrainingController(const TrainConfig& cfg);

  struct Decision {
    bool new_best = false;  // strictly below every earlier validation loss
    bool lr_reduced = false;
    bool stop = false;
  };

  Decision end_epoch(const LossBreakdown& train, const LossBreakdown& val);

  const TrainState& state() const { return state_; }
  double lr() const { return scheduler_.lr(); }
  const PlateauScheduler& scheduler() const { return scheduler_; }
  const EarlyStopping& early_stopping() const { return early_; }

  void restore(const TrainState& state, const PlateauScheduler& scheduler, const EarlyStopping& early);

 private:
  TrainConfig cfg_;
  PlateauScheduler scheduler_;
  EarlyStopping early_;
  TrainState state_;
};

/// Adam over the trainable tensors of a ModelWeights.
class Adam {
 public:
  Adam(const ModelWeights& weights, const TrainConfig& cfg);

  void step(ModelWeights& weights, const std::vector<std::vector<double>>& grads, double lr);

  std::int64_t steps() const { return t_; }
  std::vector<NamedTensor> state() const;
  void restore(const std::vector<NamedTensor>& state, std::int64_t steps);

 private:
  double beta1_, beta2_, eps_;
  bool amsgrad_;
  std::int64_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_, v_, vmax_;
};

/// Indexable source of training samples. sample() must be a pure function
/// of (index, epoch).
class SampleStream {
 public:
  virtual ~SampleStream() = default;
  virtual std::size_t size() const = 0;
  virtual SyntheticSample sample(std::size_t index, std::size_t epoch) const = 0;
};

/// Synthesises samples from clean tiles on the fly with per-sample seeds
/// derive_seed(seed, {epoch, index}). A frozen stream ignores the epoch, so
/// every pass sees the same samples (used for validation).
class SyntheticStream final : public SampleStream {
 public:
  SyntheticStream(std::vector<Image> tiles, const TexturePool& pool, AugmentConfig cfg, std::uint64_t seed,
                  bool frozen);

  std::size_t size() const override { return tiles_.size(); }
  SyntheticSample sample(std::size_t index, std::size_t epoch) const override;

 private:
  std::vector<Image> tiles_;
  const TexturePool* pool_;
  AugmentConfig cfg_;
  std::uint64_t seed_;
  bool frozen_;
};

/// Mean per-sample breakdown of `weights` (inference mode) over the stream at
/// `epoch`. Throws ParameterError on an empty stream.
LossBreakdown evaluate_epoch(const ModelWeights& weights, const SampleStream& stream, const LossConfig& loss_cfg,
                             std::size_t epoch = 0, int batch_size = 32);

struct TrainHooks {
  /// When set, best.ckpt / last.ckpt / train_log.tsv are written here.
  std::filesystem::path checkpoint_dir;
  /// Continue from checkpoint_dir/last.ckpt if it exists.
  bool resume = false;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ModelWeights best;
  TrainState state;
};

/// Mini-batch Adam on shuffled training samples, validation after every
/// epoch, reduce-on-plateau and early stopping on the validation total.
/// Returns the weights of the best validation epoch.
TrainResult train(const ModelWeights& initial, const SampleStream& train_stream, const SampleStream& val_stream,
                  const LossConfig& loss_cfg, const TrainConfig& train_cfg, const TrainHooks& hooks = {});

/// `epoch<TAB>split<TAB>mse<TAB>ssim_term<TAB>overlay_mse<TAB>total<TAB>lr`
std::string log_header();
std::string log_lines(const EpochRecord& record);

}  // namespace defectloc
