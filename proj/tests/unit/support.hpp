#pragma once

// Shared fixtures and brute-force oracles for the unit and acceptance tests.
// Nothing here calls into the library code it is used to check.

#include "defectloc/common.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace testing {

using defectloc::Image;
using defectloc::Mask;

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "defectloc");
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// i.i.d. uniform pixels in [0,1].
Image random_image(int rows, int cols, std::uint64_t seed);
/// Smooth blobs plus a few hard edges; never constant.
Image structured_image(int rows, int cols, std::uint64_t seed);
Mask random_mask(int rows, int cols, double p, std::uint64_t seed);

/// Naive box-filter blur with clamped borders, written independently of the
/// library's smoothing code.
Image box_blur(const Image& image, int radius);

/// Mann-Whitney statistic: share of (positive, negative) pairs ranked
/// correctly, ties counting one half.
double concordant_pair_auc(std::span<const double> scores, std::span<const bool> labels);

/// Smallest within-cluster sum of squares over every assignment of the
/// points to at most k non-empty clusters.
double exhaustive_kmeans_optimum(const std::vector<std::vector<double>>& points, int k);

/// Within-cluster sum of squares of an assignment with centroids at the
/// cluster means.
double wcss(const std::vector<std::vector<double>>& points, const std::vector<int>& labels, int k);

/// SSIM of two images by direct per-window summation (uniform window, valid
/// positions, population moments).
double direct_ssim(const Image& a, const Image& b, int window, double c1, double c2);

/// Number of 8-connected regions of equal label; used to check that every
/// segment id covers one connected area.
int connected_regions(const Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& labels);

}  // namespace testing
