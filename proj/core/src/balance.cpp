#include "defectloc/balance.hpp"

#include <opencv2/core.hpp>
#include <opencv2/dnn.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

namespace defectloc {

// ---------------------------------------------------------------------------
// Extractors

ProjectionExtractor::ProjectionExtractor(std::size_t dimension, std::uint64_t seed) : dimension_(dimension) {
  if (dimension == 0) throw ParameterError("projection dimension must be >= 1");
  constexpr int inputs = kGrid * kGrid;
  projection_.resize(dimension * inputs);
  Rng rng(derive_seed(seed, {0x70726f6aULL}));
  const double scale = 1.0 / std::sqrt(static_cast<double>(inputs));
  for (double& v : projection_) v = scale * rng.normal();
}

std::vector<double> ProjectionExtractor::downsample(const Image& tile) {
  const int h = static_cast<int>(tile.rows());
  const int w = static_cast<int>(tile.cols());
  if (h < kGrid || w < kGrid) throw ValidationError("tile smaller than the 8x8 projection grid");
  std::vector<double> out(kGrid * kGrid);
  for (int i = 0; i < kGrid; ++i) {
    const int y0 = i * h / kGrid, y1 = (i + 1) * h / kGrid;
    for (int j = 0; j < kGrid; ++j) {
      const int x0 = j * w / kGrid, x1 = (j + 1) * w / kGrid;
      out[i * kGrid + j] = tile.block(y0, x0, y1 - y0, x1 - x0).mean();
    }
  }
  return out;
}

std::vector<double> ProjectionExtractor::extract(const Image& tile) const {
  const std::vector<double> d = downsample(tile);
  std::vector<double> out(dimension_, 0.0);
  for (std::size_t r = 0; r < dimension_; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < d.size(); ++c) acc += projection_[r * d.size() + c] * d[c];
    out[r] = acc;
  }
  return out;
}

struct DeepExtractor::Impl {
  mutable cv::dnn::Net net;
};

DeepExtractor::DeepExtractor(Options options) : options_(std::move(options)), impl_(std::make_unique<Impl>()) {
  const std::string hint =
      " -- export an ImageNet-pretrained VGG16 (e.g. torchvision IMAGENET1K_V1) to ONNX and pass its path via "
      "[balance] extractor_weights, or set [balance] extractor = projection for the hermetic extractor";
  std::error_code ec;
  if (options_.model_path.empty() || !std::filesystem::is_regular_file(options_.model_path, ec))
    throw InitializationError("feature extractor weights not found at '" + options_.model_path.string() + "'" + hint);
  try {
    impl_->net = cv::dnn::readNet(options_.model_path.string());
  } catch (const cv::Exception& e) {
    throw InitializationError("cannot read feature extractor '" + options_.model_path.string() + "': " + e.what() +
                              hint);
  }
  if (impl_->net.empty())
    throw InitializationError("feature extractor '" + options_.model_path.string() + "' is empty" + hint);
  impl_->net.setPreferableBackend(cv::dnn::DNN_BACKEND_OPENCV);
  impl_->net.setPreferableTarget(cv::dnn::DNN_TARGET_CPU);
  dimension_ = extract(Image::Constant(options_.input_size, options_.input_size, 0.5)).size();
}

DeepExtractor::~DeepExtractor() = default;

std::vector<double> DeepExtractor::extract(const Image& tile) const {
  cv::Mat gray(static_cast<int>(tile.rows()), static_cast<int>(tile.cols()), CV_32F);
  for (int y = 0; y < gray.rows; ++y)
    for (int x = 0; x < gray.cols; ++x) gray.at<float>(y, x) = static_cast<float>(tile(y, x));
  cv::Mat resized;
  cv::resize(gray, resized, cv::Size(options_.input_size, options_.input_size), 0, 0, cv::INTER_LINEAR);
  std::vector<cv::Mat> planes(3);
  for (int c = 0; c < 3; ++c)
    planes[c] = (resized - options_.mean[c]) / options_.stddev[c];
  cv::Mat rgb;
  cv::merge(planes, rgb);
  const cv::Mat blob = cv::dnn::blobFromImage(rgb);
  impl_->net.setInput(blob);
  const cv::Mat out = options_.layer.empty() ? impl_->net.forward() : impl_->net.forward(options_.layer);
  const cv::Mat flat = out.reshape(1, 1);
  std::vector<double> values(flat.total());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = flat.at<float>(0, static_cast<int>(i));
  return values;
}

std::vector<FeatureVector> extract_features(const std::vector<Tile>& tiles, const FeatureExtractor& extractor) {
  std::vector<FeatureVector> out;
  out.reserve(tiles.size());
  for (const auto& t : tiles) {
    FeatureVector f{TileRef::of(t), extractor.extract(t.pixels)};
    if (!out.empty() && f.values.size() != out.front().values.size())
      throw ValidationError("feature length changed at tile " + f.ref.key());
    for (double v : f.values)
      if (!std::isfinite(v)) throw ValidationError("non-finite feature for tile " + f.ref.key());
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-means

namespace {

using Points = std::vector<std::vector<double>>;

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Points kmeans_plus_plus(const Points& pts, int k, Rng& rng) {
  Points centers;
  centers.push_back(pts[rng.index(pts.size())]);
  std::vector<double> d2(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = sq_dist(pts[i], centers[0]);
  while (static_cast<int>(centers.size()) < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.index(pts.size());
    } else {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = pts.size() - 1;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        acc += d2[i];
        if (acc > target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(pts[pick]);
    for (std::size_t i = 0; i < pts.size(); ++i) d2[i] = std::min(d2[i], sq_dist(pts[i], centers.back()));
  }
  return centers;
}

struct Fit {
  Points centroids;
  std::vector<int> assignments;
  double inertia = 0.0;
  std::vector<double> history;
  int iterations = 0;
};

double assign(const Points& pts, const Points& centroids, std::vector<int>& labels, std::vector<double>& dist) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    int best = 0;
    double best_d = sq_dist(pts[i], centroids[0]);
    for (std::size_t c = 1; c < centroids.size(); ++c) {
      const double d = sq_dist(pts[i], centroids[c]);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    labels[i] = best;
    dist[i] = best_d;
    inertia += best_d;
  }
  return inertia;
}

Fit lloyd(const Points& pts, int k, const KMeansOptions& opt, Rng& rng) {
  Fit fit;
  fit.centroids = kmeans_plus_plus(pts, k, rng);
  const std::size_t dim = pts.front().size();
  fit.assignments.assign(pts.size(), 0);
  std::vector<double> dist(pts.size());

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    double inertia = assign(pts, fit.centroids, fit.assignments, dist);

    std::vector<int> counts(k, 0);
    for (int a : fit.assignments) ++counts[a];
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      // Farthest point (from its own centroid) among clusters that can spare one.
      std::size_t far = pts.size();
      for (std::size_t i = 0; i < pts.size(); ++i) {
        if (counts[fit.assignments[i]] < 2) continue;
        if (far == pts.size() || dist[i] > dist[far]) far = i;
      }
      if (far == pts.size()) break;
      --counts[fit.assignments[far]];
      ++counts[c];
      inertia -= dist[far];
      fit.assignments[far] = c;
      dist[far] = 0.0;
      fit.centroids[c] = pts[far];
    }
    fit.history.push_back(inertia);

    Points next(k, std::vector<double>(dim, 0.0));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      auto& dst = next[fit.assignments[i]];
      for (std::size_t d = 0; d < dim; ++d) dst[d] += pts[i][d];
    }
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        next[c] = fit.centroids[c];
        continue;
      }
      for (double& v : next[c]) v /= counts[c];
      shift = std::max(shift, std::sqrt(sq_dist(next[c], fit.centroids[c])));
    }
    fit.centroids = std::move(next);
    fit.iterations = iter + 1;
    if (shift < opt.tol) break;
  }
  fit.inertia = assign(pts, fit.centroids, fit.assignments, dist);
  fit.history.push_back(fit.inertia);
  return fit;
}

}  // namespace

std::vector<int> most_frequent_clusters(const std::vector<int>& frequencies, int count) {
  std::vector<int> order(frequencies.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frequencies[a] > frequencies[b]; });
  order.resize(std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(count, 0))));
  std::sort(order.begin(), order.end());
  return order;
}

ClusterModel kmeans_fit(const std::vector<FeatureVector>& features, const KMeansOptions& options) {
  if (options.k < 1) throw ParameterError("k must be >= 1");
  if (static_cast<int>(features.size()) < options.k)
    throw ParameterError("k-means needs at least k=" + std::to_string(options.k) + " points, got " +
                         std::to_string(features.size()));
  if (options.max_iter < 1 || options.restarts < 1) throw ParameterError("max_iter and restarts must be >= 1");
  Points pts;
  pts.reserve(features.size());
  for (const auto& f : features) {
    if (!pts.empty() && f.values.size() != pts.front().size())
      throw ValidationError("feature vectors differ in length");
    pts.push_back(f.values);
  }

  Rng rng(derive_seed(options.seed, {0x6b6d65616e73ULL}));
  Fit best;
  for (int r = 0; r < options.restarts; ++r) {
    Fit fit = lloyd(pts, options.k, options, rng);
    if (r == 0 || fit.inertia < best.inertia) best = std::move(fit);
  }

  ClusterModel model;
  model.k = options.k;
  model.centroids = std::move(best.centroids);
  model.assignments = std::move(best.assignments);
  model.inertia = best.inertia;
  model.inertia_history = std::move(best.history);
  model.iterations = best.iterations;
  model.frequencies.assign(options.k, 0);
  for (int a : model.assignments) ++model.frequencies[a];
  for (const auto& f : features) model.refs.push_back(f.ref);
  model.dropped = most_frequent_clusters(model.frequencies, 2);
  return model;
}

std::vector<TileRef> select_balanced(const ClusterModel& model) {
  if (model.k < 3) throw ParameterError("select_balanced needs k >= 3 (got " + std::to_string(model.k) + ")");
  std::vector<TileRef> out;
  for (std::size_t i = 0; i < model.assignments.size(); ++i) {
    const int a = model.assignments[i];
    if (std::find(model.dropped.begin(), model.dropped.end(), a) == model.dropped.end()) out.push_back(model.refs[i]);
  }
  return out;
}

void write_feature_cache(std::ostream& out, const std::vector<FeatureVector>& features) {
  out << std::setprecision(17);
  for (const auto& f : features) {
    out << f.ref.key() << '\t' << f.ref.source_id << '\t' << f.ref.row << '\t' << f.ref.col << '\t';
    for (std::size_t i = 0; i < f.values.size(); ++i) out << (i ? "," : "") << f.values[i];
    out << '\n';
  }
}

std::vector<FeatureVector> read_feature_cache(std::istream& in) {
  std::vector<FeatureVector> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 5) throw ValidationError("malformed feature cache line");
    FeatureVector f;
    f.ref = {fields[1], std::stoi(fields[2]), std::stoi(fields[3])};
    std::stringstream vs(fields[4]);
    while (std::getline(vs, field, ',')) f.values.push_back(std::stod(field));
    out.push_back(std::move(f));
  }
  return out;
}

void write_cluster_report(std::ostream& out, const ClusterModel& model) {
  out << "cluster\tfrequency\tdropped\n";
  for (int c = 0; c < model.k; ++c) {
    const bool dropped = std::find(model.dropped.begin(), model.dropped.end(), c) != model.dropped.end();
    out << c << '\t' << model.frequencies[c] << '\t' << (dropped ? 1 : 0) << '\n';
  }
}

}  // namespace defectloc
