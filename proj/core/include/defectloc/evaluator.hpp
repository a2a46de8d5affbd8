#pragma once

#include "defectloc/common.hpp"
#include "defectloc/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace defectloc {

struct AnomalyMap {
  Image residual;  // |input - reconstruction|
  double threshold = 0.0;
  Mask binary;  // residual >= threshold
};

AnomalyMap anomaly_map(const Image& input, const Image& reconstruction, double threshold);
/// Reconstructs the tile with `weights` in inference mode first.
AnomalyMap anomaly_map(const ModelWeights& weights, const Image& tile, double threshold);

/// Batch reconstruction function; the identity stub and trained networks
/// both fit this shape.
using Reconstructor = std::function<std::vector<Image>(const std::vector<Image>&)>;
Reconstructor network_reconstructor(const ModelWeights& weights, int batch_size = 32);
Reconstructor identity_reconstructor();

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // thresholds strictly decreasing, first is +inf
  double auc = 0.0;
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
};

/// `even` evenly spaced values over [0,1], the observed minimum, plus every
/// distinct observed score if there are at most `exact_limit` of them, or
/// else `exact_limit` order statistics spread evenly over the sorted
/// distinct scores. Sorted descending, duplicates removed.
std::vector<double> threshold_grid(std::span<const double> scores, int even = 256, std::size_t exact_limit = 4096);

/// ROC over pooled scores: a score >= t is predicted positive. The curve
/// starts at (+inf, 0, 0); AUC is the trapezoid rule over (fpr, tpr).
/// Throws ValidationError when either class is absent.
RocCurve roc(std::span<const double> scores, std::span<const bool> labels, std::span<const double> grid);
RocCurve roc(std::span<const double> scores, std::span<const bool> labels);

/// Pixel-pooled ROC over aligned residual maps and truth masks.
RocCurve roc(std::span<const Image> residuals, std::span<const Mask> truths);
/// One curve per (residual, mask) pair; pairs lacking a class are skipped.
std::vector<RocCurve> roc_per_image(std::span<const Image> residuals, std::span<const Mask> truths);

/// Largest finite threshold whose tpr reaches target_tpr. Throws
/// ParameterError naming the best achievable tpr if none does.
double select_threshold(const RocCurve& curve, double target_tpr);

/// 8-bit BGR raster.
struct ColorImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bgr;

  std::uint8_t at(int y, int x, int channel) const { return bgr[(static_cast<std::size_t>(y) * width + x) * 3 + channel]; }
};

struct HeatmapTriplet {
  ColorImage tile;
  ColorImage heatmap;
  ColorImage overlay;
  ColorImage side_by_side() const;
};

struct OverlayOpacities {
  double heatmap = 0.75;
  double tile = 0.50;
};

/// Residual normalised by its maximum (all zero stays zero), colour-mapped
/// with the inferno map, and blended over the tile.
HeatmapTriplet render_heatmap_overlay(const Image& tile, const Image& residual, OverlayOpacities opacities = {});

void save_color_image(const std::filesystem::path& path, const ColorImage& image);

}  // namespace defectloc
