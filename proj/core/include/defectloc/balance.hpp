#pragma once

#include "defectloc/common.hpp"
#include "defectloc/tiler.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace defectloc {

struct TileRef {
  std::string source_id;
  int row = 0;
  int col = 0;

  static TileRef of(const Tile& t) { return {t.source_id, t.row, t.col}; }
  std::string key() const { return tile_name(source_id, row, col); }
  friend auto operator<=>(const TileRef&, const TileRef&) = default;
};

struct FeatureVector {
  TileRef ref;
  std::vector<double> values;
};

/// Maps a grayscale tile to a fixed-length descriptor. Implementations are
/// read-only after construction.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<double> extract(const Image& tile) const = 0;
  virtual std::size_t dimension() const = 0;
  virtual std::string name() const = 0;
};

/// Hermetic extractor: area-averages the tile down to 8x8 and multiplies the
/// 64 values by a seeded Gaussian projection (entries N(0, 1/64)).
class ProjectionExtractor final : public FeatureExtractor {
 public:
  static constexpr int kGrid = 8;

  explicit ProjectionExtractor(std::size_t dimension = 64, std::uint64_t seed = 42);

  std::vector<double> extract(const Image& tile) const override;
  std::size_t dimension() const override { return dimension_; }
  std::string name() const override { return "projection"; }

  /// 8x8 block-mean downsample, row-major flattened.
  static std::vector<double> downsample(const Image& tile);
  /// dimension x 64, row-major.
  const std::vector<double>& projection() const { return projection_; }

 private:
  std::size_t dimension_;
  std::vector<double> projection_;
};

/// Pretrained ImageNet classifier (e.g. VGG16 exported to ONNX) run through
/// OpenCV's DNN module; the descriptor is the activation of `layer` (the
/// first fully connected layer for VGG16, 4096 values). Grayscale tiles are
/// replicated to three channels and resized to the network input.
class DeepExtractor final : public FeatureExtractor {
 public:
  struct Options {
    std::filesystem::path model_path;
    std::string layer;  // empty: network output
    int input_size = 224;
    std::vector<double> mean = {0.485, 0.456, 0.406};
    std::vector<double> stddev = {0.229, 0.224, 0.225};
  };

  /// Throws InitializationError with a remediation hint if the weights are
  /// missing or unreadable.
  explicit DeepExtractor(Options options);
  ~DeepExtractor() override;

  std::vector<double> extract(const Image& tile) const override;
  std::size_t dimension() const override { return dimension_; }
  std::string name() const override { return "deep"; }

 private:
  struct Impl;
  Options options_;
  std::unique_ptr<Impl> impl_;
  std::size_t dimension_ = 0;
};

/// One descriptor per tile, in input order. Throws ValidationError if an
/// extractor yields a non-finite value or an inconsistent length.
std::vector<FeatureVector> extract_features(const std::vector<Tile>& tiles, const FeatureExtractor& extractor);

struct KMeansOptions {
  int k = 7;
  std::uint64_t seed = 42;
  int max_iter = 300;
  double tol = 1e-4;
  int restarts = 1;
};

struct ClusterModel {
  int k = 0;
  std::vector<std::vector<double>> centroids;
  std::vector<TileRef> refs;     // aligned with assignments
  std::vector<int> assignments;  // cluster index per input feature
  std::vector<int> frequencies;
  std::vector<int> dropped;  // the two most frequent clusters, ties to the lower index
  double inertia = 0.0;      // within-cluster sum of squares
  std::vector<double> inertia_history;  // per Lloyd iteration of the kept restart
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Stops when the largest centroid
/// shift drops below tol or after max_iter iterations. An emptied cluster is
/// re-seeded at the point farthest from its assigned centroid. With
/// restarts > 1 the run with the lowest inertia is kept.
ClusterModel kmeans_fit(const std::vector<FeatureVector>& features, const KMeansOptions& options);

/// Indices of the two largest frequencies (ties: lower index first).
std::vector<int> most_frequent_clusters(const std::vector<int>& frequencies, int count = 2);

/// Tiles not assigned to a dropped cluster, in input order. Requires k >= 3.
std::vector<TileRef> select_balanced(const ClusterModel& model);

/// Feature cache: one line per tile, `key<TAB>source_id<TAB>row<TAB>col<TAB>v0,v1,...`
/// with round-trip precision.
void write_feature_cache(std::ostream& out, const std::vector<FeatureVector>& features);
std::vector<FeatureVector> read_feature_cache(std::istream& in);

/// `cluster<TAB>frequency<TAB>dropped` with a header line.
void write_cluster_report(std::ostream& out, const ClusterModel& model);

}  // namespace defectloc
