#pragma once

#include "defectloc/common.hpp"

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace defectloc {

/// Dense NCHW batch.
struct Tensor {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  double* sample(int i) { return data.data() + i * sample_size(); }
  const double* sample(int i) const { return data.data() + i * sample_size(); }

  /// Stacks single-channel images into an (N,1,H,W) batch.
  static Tensor from_images(std::span<const Image> images);
  /// Channel 0 of every sample as an image.
  std::vector<Image> to_images() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct StageSpec {
  int out_channels = 0;
  int kernel = 4;
  int stride = 2;
  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

/// Encoder/decoder layout. Each encoder stage is conv -> batch norm ->
/// leaky ReLU; the decoder mirrors it with transposed convolutions that are
/// the exact adjoint geometry of the matching encoder stage, so odd sizes
/// invert without output-padding tricks. The last decoder stage outputs one
/// channel through a sigmoid.
struct NetworkConfig {
  int input_h = 289;
  int input_w = 289;
  int input_channels = 1;
  int latent_channels = 512;
  std::vector<StageSpec> encoder_stages;
  /// Encoder stages (0-based) whose output is concatenated onto the input of
  /// the mirrored decoder stage.
  std::vector<int> skip_stages;
  double leaky_slope = 0.2;
  bool batch_norm = true;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  /// 289x289x1 -> 512x1x1 with seven stride-2, kernel-4 stages
  /// (32, 64, 128, 128, 256, 256, 512) and skips from stages 0-2.
  static NetworkConfig standard();
  /// Same recipe for another square input size and channel ladder.
  static NetworkConfig scaled(int input_size, std::vector<int> channels, std::vector<int> skips = {0, 1, 2});

  std::string canonical() const;
  static NetworkConfig parse_canonical(const std::string& text);
  std::uint64_t hash() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

struct StageGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int in_h = 0;
  int in_w = 0;
  int out_h = 0;
  int out_w = 0;
  int kernel = 0;
  int stride = 0;
  int pad_top = 0;
  int pad_left = 0;
};

/// Per-stage shapes. Each stage emits the fewest outputs that cover its
/// input (padding split floor/ceil between the leading and trailing side).
/// Throws ConfigError naming the failing stage, or stating the latent dims
/// when they do not end at 1x1.
std::vector<StageGeometry> plan_encoder(const NetworkConfig& config);

struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;
  bool trainable = true;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct WeightsMetadata {
  std::int64_t epoch = -1;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct ModelWeights {
  NetworkConfig config;
  std::vector<NamedTensor> tensors;  // trainable parameters and batch-norm running statistics
  WeightsMetadata meta;

  const NamedTensor& at(const std::string& name) const;
  NamedTensor& at(const std::string& name);
  std::size_t parameter_count() const;
  /// Bitwise equality of config and all tensors (metadata ignored).
  bool same_values(const ModelWeights& other) const;
};

/// Allocates and initialises weights: He-normal scaled by the fan-in of each
/// (transposed) convolution, zero biases, unit batch-norm scale.
ModelWeights build(const NetworkConfig& config, std::uint64_t init_seed);

enum class Mode { Train, Eval };

/// Forward/backward engine bound to a set of weights. Train mode uses batch
/// statistics (and updates the running ones); Eval uses running statistics.
class Network {
 public:
  explicit Network(ModelWeights& weights);
  /// Inference-only binding; Train-mode forward throws.
  explicit Network(const ModelWeights& weights);

  Tensor forward(const Tensor& batch, Mode mode);
  /// Gradient of a scalar loss w.r.t. every tensor in weights.tensors (zero
  /// for running statistics) given d(loss)/d(output) of the last Train-mode
  /// forward.
  std::vector<std::vector<double>> backward(const Tensor& grad_output);

  /// Replace the skip feature from encoder stage `stage` by zeros.
  void set_skip_ablated(int stage, bool ablated);

  const std::vector<StageGeometry>& geometry() const { return geometry_; }

 private:
  const ModelWeights* weights_;
  ModelWeights* mutable_weights_;
  std::vector<StageGeometry> geometry_;
  std::vector<int> skip_of_stage_;  // -1 or index into skip order
  std::vector<bool> ablated_;
  std::vector<std::size_t> enc_index_;  // first tensor index of each encoder stage
  std::vector<std::size_t> dec_index_;  // first tensor index of each decoder stage
  struct Caches;
  std::shared_ptr<Caches> cache_;
};

/// Inference-mode forward. Validates the batch shape against the config.
Tensor forward(const ModelWeights& weights, const Tensor& batch);

/// Checkpoint container: weights plus free-form training state.
struct Checkpoint {
  ModelWeights weights;
  std::map<std::string, std::string> attributes;
  std::vector<NamedTensor> state;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws LoadError on unreadable or truncated files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load(const std::filesystem::path& path);
/// Throws CompatibilityError when the stored config hash differs from
/// `expected`.
ModelWeights load(const std::filesystem::path& path, const NetworkConfig& expected);

}  // namespace defectloc
