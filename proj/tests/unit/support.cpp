#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <unistd.h>

namespace testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter.fetch_add(1)));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

Image random_image(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(rows, cols);
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] = u(gen);
  return img;
}

Image structured_image(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img = Image::Constant(rows, cols, 0.3 + 0.4 * u(gen));
  for (int b = 0; b < 4; ++b) {
    const double cy = u(gen) * rows, cx = u(gen) * cols, r = 2.0 + u(gen) * rows / 3.0, amp = u(gen) - 0.5;
    for (int y = 0; y < rows; ++y)
      for (int x = 0; x < cols; ++x) img(y, x) += amp * std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / (r * r));
  }
  const int bar = static_cast<int>(u(gen) * (cols - 4));
  img.block(0, bar, rows, 3) = 0.95;
  const int stripe = static_cast<int>(u(gen) * (rows - 4));
  img.block(stripe, 0, 2, cols) = 0.05;
  for (Eigen::Index i = 0; i < img.size(); ++i) img.data()[i] += 0.05 * (u(gen) - 0.5);
  return img.cwiseMax(0.0).cwiseMin(1.0);
}

Mask random_mask(int rows, int cols, double p, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::bernoulli_distribution b(p);
  Mask m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = b(gen);
  return m;
}

Image box_blur(const Image& image, int radius) {
  const int h = static_cast<int>(image.rows()), w = static_cast<int>(image.cols());
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      int n = 0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          s += image(std::clamp(y + dy, 0, h - 1), std::clamp(x + dx, 0, w - 1));
          ++n;
        }
      out(y, x) = s / n;
    }
  }
  return out;
}

double concordant_pair_auc(std::span<const double> scores, std::span<const bool> labels) {
  double good = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      ++pairs;
      if (scores[i] > scores[j])
        good += 1.0;
      else if (scores[i] == scores[j])
        good += 0.5;
    }
  }
  return good / static_cast<double>(pairs);
}

double wcss(const std::vector<std::vector<double>>& points, const std::vector<int>& labels, int k) {
  const std::size_t d = points.front().size();
  std::vector<std::vector<double>> sum(k, std::vector<double>(d, 0.0));
  std::vector<int> count(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    ++count[labels[i]];
    for (std::size_t j = 0; j < d; ++j) sum[labels[i]][j] += points[i][j];
  }
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const int c = labels[i];
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = points[i][j] - sum[c][j] / count[c];
      total += diff * diff;
    }
  }
  return total;
}

double exhaustive_kmeans_optimum(const std::vector<std::vector<double>>& points, int k) {
  const std::size_t n = points.size();
  std::vector<int> labels(n, 0);
  double best = std::numeric_limits<double>::infinity();
  while (true) {
    best = std::min(best, wcss(points, labels, k));
    std::size_t i = 0;
    while (i < n && labels[i] == k - 1) labels[i++] = 0;
    if (i == n) break;
    ++labels[i];
  }
  return best;
}

double direct_ssim(const Image& a, const Image& b, int window, double c1, double c2) {
  const int oh = static_cast<int>(a.rows()) - window + 1, ow = static_cast<int>(a.cols()) - window + 1;
  const double n = static_cast<double>(window) * window;
  double total = 0.0;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < window; ++i)
        for (int j = 0; j < window; ++j) ma += a(y + i, x + j), mb += b(y + i, x + j);
      ma /= n;
      mb /= n;
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < window; ++i)
        for (int j = 0; j < window; ++j) {
          const double da = a(y + i, x + j) - ma, db = b(y + i, x + j) - mb;
          va += da * da;
          vb += db * db;
          cov += da * db;
        }
      va /= n;
      vb /= n;
      cov /= n;
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
  }
  return total / (static_cast<double>(oh) * ow);
}

int connected_regions(const Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& labels) {
  const int h = static_cast<int>(labels.rows()), w = static_cast<int>(labels.cols());
  std::vector<char> seen(static_cast<std::size_t>(h) * w, 0);
  std::vector<std::pair<int, int>> stack;
  int regions = 0;
  for (int y0 = 0; y0 < h; ++y0) {
    for (int x0 = 0; x0 < w; ++x0) {
      if (seen[y0 * w + x0]) continue;
      ++regions;
      seen[y0 * w + x0] = 1;
      stack.assign(1, {y0, x0});
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w || seen[ny * w + nx]) continue;
            if (labels(ny, nx) != labels(y, x)) continue;
            seen[ny * w + nx] = 1;
            stack.emplace_back(ny, nx);
          }
      }
    }
  }
  return regions;
}

}  // namespace testing
