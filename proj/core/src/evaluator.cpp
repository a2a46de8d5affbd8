#include "defectloc/evaluator.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace defectloc {

AnomalyMap anomaly_map(const Image& input, const Image& reconstruction, double threshold) {
  if (input.rows() != reconstruction.rows() || input.cols() != reconstruction.cols())
    throw ValidationError("anomaly_map: tile is " + std::to_string(input.rows()) + "x" + std::to_string(input.cols()) +
                          " but reconstruction is " + std::to_string(reconstruction.rows()) + "x" +
                          std::to_string(reconstruction.cols()));
  AnomalyMap m;
  m.residual = (input - reconstruction).abs();
  m.threshold = threshold;
  m.binary = m.residual >= threshold;
  return m;
}

AnomalyMap anomaly_map(const ModelWeights& weights, const Image& tile, double threshold) {
  const Image batch[1] = {tile};
  const Tensor out = forward(weights, Tensor::from_images(batch));
  return anomaly_map(tile, out.to_images().front(), threshold);
}

Reconstructor network_reconstructor(const ModelWeights& weights, int batch_size) {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  return [&weights, batch_size](const std::vector<Image>& tiles) {
    Network net(weights);
    std::vector<Image> out;
    out.reserve(tiles.size());
    for (std::size_t begin = 0; begin < tiles.size(); begin += batch_size) {
      const std::size_t end = std::min(tiles.size(), begin + static_cast<std::size_t>(batch_size));
      const std::span<const Image> chunk(tiles.data() + begin, end - begin);
      for (Image& r : net.forward(Tensor::from_images(chunk), Mode::Eval).to_images()) out.push_back(std::move(r));
    }
    return out;
  };
}

Reconstructor identity_reconstructor() {
  return [](const std::vector<Image>& tiles) { return tiles; };
}

// ---------------------------------------------------------------------------
// ROC

std::vector<double> threshold_grid(std::span<const double> scores, int even, std::size_t exact_limit) {
  std::vector<double> grid;
  for (int i = 0; i < even; ++i) grid.push_back(even == 1 ? 0.0 : static_cast<double>(i) / (even - 1));
  std::vector<double> distinct(scores.begin(), scores.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (!distinct.empty()) {
    if (distinct.size() <= exact_limit) {
      grid.insert(grid.end(), distinct.begin(), distinct.end());
    } else if (exact_limit > 0) {
      const std::size_t m = distinct.size();
      for (std::size_t i = 0; i < exact_limit; ++i) {
        const std::size_t idx = exact_limit == 1 ? 0 : (i * (m - 1) + (exact_limit - 1) / 2) / (exact_limit - 1);
        grid.push_back(distinct[idx]);
      }
    }
    grid.push_back(distinct.front());
  }
  std::sort(grid.begin(), grid.end(), std::greater<>());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

RocCurve roc(std::span<const double> scores, std::span<const bool> labels, std::span<const double> grid) {
  if (scores.size() != labels.size()) throw ValidationError("roc: scores and labels differ in length");
  RocCurve c;
  for (bool l : labels) (l ? c.positives : c.negatives)++;
  if (c.positives == 0 || c.negatives == 0)
    throw ValidationError("roc: rates undefined, truth has " + std::to_string(c.positives) + " positive and " +
                          std::to_string(c.negatives) + " negative pixels");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] < grid[i - 1])) throw ParameterError("roc: threshold grid must be strictly decreasing");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::int64_t tp = 0, fp = 0;
  std::size_t next = 0;
  const double P = static_cast<double>(c.positives), N = static_cast<double>(c.negatives);
  for (double t : grid) {
    while (next < order.size() && scores[order[next]] >= t) {
      (labels[order[next]] ? tp : fp)++;
      ++next;
    }
    c.points.push_back({t, static_cast<double>(fp) / N, static_cast<double>(tp) / P});
  }
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    const auto& a = c.points[i - 1];
    const auto& b = c.points[i];
    c.auc += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return c;
}

RocCurve roc(std::span<const double> scores, std::span<const bool> labels) {
  const auto grid = threshold_grid(scores);
  return roc(scores, labels, grid);
}

namespace {

void flatten(std::span<const Image> residuals, std::span<const Mask> truths, std::vector<double>& scores,
             std::vector<char>& labels) {
  if (residuals.size() != truths.size()) throw ValidationError("roc: residual and truth counts differ");
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    const Image& r = residuals[i];
    const Mask& m = truths[i];
    if (r.rows() != m.rows() || r.cols() != m.cols())
      throw ValidationError("roc: residual/truth shape mismatch at index " + std::to_string(i));
    scores.insert(scores.end(), r.data(), r.data() + r.size());
    labels.insert(labels.end(), m.data(), m.data() + m.size());
  }
}

RocCurve roc_flat(const std::vector<double>& scores, const std::vector<char>& labels) {
  // std::vector<bool> has no contiguous storage, hence the char staging.
  std::unique_ptr<bool[]> l(new bool[labels.size()]);
  for (std::size_t i = 0; i < labels.size(); ++i) l[i] = labels[i] != 0;
  return roc(std::span<const double>(scores), std::span<const bool>(l.get(), labels.size()));
}

}  // namespace

RocCurve roc(std::span<const Image> residuals, std::span<const Mask> truths) {
  std::vector<double> scores;
  std::vector<char> labels;
  flatten(residuals, truths, scores, labels);
  return roc_flat(scores, labels);
}

std::vector<RocCurve> roc_per_image(std::span<const Image> residuals, std::span<const Mask> truths) {
  if (residuals.size() != truths.size()) throw ValidationError("roc: residual and truth counts differ");
  std::vector<RocCurve> out;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    const auto pos = truths[i].count();
    if (pos == 0 || pos == truths[i].size()) continue;
    std::vector<double> scores;
    std::vector<char> labels;
    flatten(residuals.subspan(i, 1), truths.subspan(i, 1), scores, labels);
    out.push_back(roc_flat(scores, labels));
  }
  return out;
}

double select_threshold(const RocCurve& curve, double target_tpr) {
  double best_tpr = 0.0;
  for (const auto& p : curve.points) {
    if (!std::isfinite(p.threshold)) continue;
    if (p.tpr >= target_tpr) return p.threshold;  // points run from high to low threshold
    best_tpr = std::max(best_tpr, p.tpr);
  }
  throw ParameterError("target tpr " + std::to_string(target_tpr) + " unreachable; max achievable tpr is " +
                       std::to_string(best_tpr));
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

cv::Mat to_gray8(const Image& img) {
  cv::Mat m(static_cast<int>(img.rows()), static_cast<int>(img.cols()), CV_8U);
  for (int y = 0; y < m.rows; ++y)
    for (int x = 0; x < m.cols; ++x)
      m.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(img(y, x), 0.0, 1.0) * 255.0));
  return m;
}

ColorImage from_mat(const cv::Mat& bgr) {
  ColorImage out;
  out.height = bgr.rows;
  out.width = bgr.cols;
  out.bgr.resize(static_cast<std::size_t>(bgr.rows) * bgr.cols * 3);
  for (int y = 0; y < bgr.rows; ++y) std::copy_n(bgr.ptr<std::uint8_t>(y), bgr.cols * 3, &out.bgr[y * bgr.cols * 3]);
  return out;
}

cv::Mat to_mat(const ColorImage& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) std::copy_n(&img.bgr[y * img.width * 3], img.width * 3, m.ptr<std::uint8_t>(y));
  return m;
}

}  // namespace

ColorImage HeatmapTriplet::side_by_side() const {
  cv::Mat out;
  cv::hconcat(std::vector<cv::Mat>{to_mat(tile), to_mat(heatmap), to_mat(overlay)}, out);
  return from_mat(out);
}

HeatmapTriplet render_heatmap_overlay(const Image& tile, const Image& residual, OverlayOpacities opacities) {
  if (tile.rows() != residual.rows() || tile.cols() != residual.cols())
    throw ValidationError("heatmap: tile and residual differ in size");
  const double peak = residual.size() ? residual.maxCoeff() : 0.0;
  const Image normalised = peak > 0.0 ? Image(residual / peak) : Image(Image::Zero(residual.rows(), residual.cols()));

  cv::Mat tile_bgr, heat;
  cv::cvtColor(to_gray8(tile), tile_bgr, cv::COLOR_GRAY2BGR);
  cv::applyColorMap(to_gray8(normalised), heat, cv::COLORMAP_INFERNO);
  cv::Mat blended;
  cv::addWeighted(heat, opacities.heatmap, tile_bgr, opacities.tile, 0.0, blended);
  return {from_mat(tile_bgr), from_mat(heat), from_mat(blended)};
}

void save_color_image(const std::filesystem::path& path, const ColorImage& image) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), to_mat(image))) throw Error("cannot write '" + path.string() + "'");
}

}  // namespace defectloc
