#include "defectloc/graphseg.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <numeric>

namespace defectloc {

namespace {

class DisjointSet {
 public:
  explicit DisjointSet(int n) : parent_(n), rank_(n, 0), size_(n, 1) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }

  int find(int x) {
    int root = x;
    while (parent_[root] != root) root = parent_[root];
    while (parent_[x] != root) {
      const int next = parent_[x];
      parent_[x] = root;
      x = next;
    }
    return root;
  }

  /// Joins two roots, returns the surviving root.
  int join(int a, int b) {
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    size_[a] += size_[b];
    if (rank_[a] == rank_[b]) ++rank_[a];
    return a;
  }

  int size(int root) const { return size_[root]; }

 private:
  std::vector<int> parent_;
  std::vector<int> rank_;
  std::vector<int> size_;
};

struct Edge {
  double w;
  int a;
  int b;
};

int reflect(int i, int n) {
  // scipy "reflect": the edge sample is repeated.
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(4.0 * sigma + 0.5);
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

}  // namespace

void SegParams::validate() const {
  if (!(scale > 0.0)) throw ParameterError("segmentation scale must be > 0");
  if (!(sigma >= 0.0)) throw ParameterError("segmentation sigma must be >= 0");
  if (min_size < 1) throw ParameterError("segmentation min_size must be >= 1");
}

Image gaussian_smooth(const Image& image, double sigma) {
  if (sigma <= 0.0) return image;
  const std::vector<double> k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int h = static_cast<int>(image.rows());
  const int w = static_cast<int>(image.cols());

  Image tmp(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * image(y, reflect(x + t, w));
      tmp(y, x) = acc;
    }
  }
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * tmp(reflect(y + t, h), x);
      out(y, x) = acc;
    }
  }
  return out;
}

SegmentMap felzenszwalb_segment(const Image& image, const SegParams& params) {
  params.validate();
  if (image.size() == 0) throw ValidationError("cannot segment an empty image");

  const Image smooth = gaussian_smooth(image, params.sigma);
  const int h = static_cast<int>(smooth.rows());
  const int w = static_cast<int>(smooth.cols());
  const int n = h * w;

  // 8-connectivity: each pixel links right, down, down-right, up-right.
  std::vector<Edge> edges;
  edges.reserve(static_cast<std::size_t>(n) * 4);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int a = y * w + x;
      auto link = [&](int yy, int xx) {
        if (yy < 0 || yy >= h || xx >= w) return;
        const int b = yy * w + xx;
        edges.push_back({std::abs(smooth(y, x) - smooth(yy, xx)), std::min(a, b), std::max(a, b)});
      };
      link(y, x + 1);
      link(y + 1, x);
      link(y + 1, x + 1);
      link(y - 1, x + 1);
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& l, const Edge& r) {
    if (l.w != r.w) return l.w < r.w;
    if (l.a != r.a) return l.a < r.a;
    return l.b < r.b;
  });

  DisjointSet sets(n);
  std::vector<double> threshold(n, params.scale);
  for (const Edge& e : edges) {
    const int a = sets.find(e.a);
    const int b = sets.find(e.b);
    if (a == b) continue;
    if (e.w <= threshold[a] && e.w <= threshold[b]) {
      const int root = sets.join(a, b);
      threshold[root] = e.w + params.scale / sets.size(root);
    }
  }

  for (const Edge& e : edges) {
    const int a = sets.find(e.a);
    const int b = sets.find(e.b);
    if (a != b && (sets.size(a) < params.min_size || sets.size(b) < params.min_size)) sets.join(a, b);
  }

  SegmentMap out;
  out.labels.resize(h, w);
  std::vector<int> root_label(n, -1);
  for (int i = 0; i < n; ++i) {
    const int root = sets.find(i);
    if (root_label[root] < 0) {
      root_label[root] = out.segment_count++;
      out.sizes.push_back(0);
    }
    const int label = root_label[root];
    out.labels(i / w, i % w) = label;
    ++out.sizes[label];
  }
  return out;
}

HarvestedSegment crop_segment(const SegmentMap& segments, const Image& source, int label) {
  if (segments.labels.rows() != source.rows() || segments.labels.cols() != source.cols())
    throw ValidationError("segment map and source image differ in size");
  if (label < 0 || label >= segments.segment_count) throw ParameterError("segment label out of range");
  int y0 = static_cast<int>(source.rows()), x0 = static_cast<int>(source.cols()), y1 = -1, x1 = -1;
  for (int y = 0; y < segments.labels.rows(); ++y) {
    for (int x = 0; x < segments.labels.cols(); ++x) {
      if (segments.labels(y, x) != label) continue;
      y0 = std::min(y0, y);
      x0 = std::min(x0, x);
      y1 = std::max(y1, y);
      x1 = std::max(x1, x);
    }
  }
  if (y1 < 0) throw ValidationError("segment " + std::to_string(label) + " has no pixels");
  HarvestedSegment out;
  out.label = label;
  const int bh = y1 - y0 + 1;
  const int bw = x1 - x0 + 1;
  out.mask = segments.labels.block(y0, x0, bh, bw) == label;
  out.patch = source.block(y0, x0, bh, bw);
  return out;
}

std::vector<HarvestedSegment> crop_all_segments(const SegmentMap& segments, const Image& source) {
  if (segments.labels.rows() != source.rows() || segments.labels.cols() != source.cols())
    throw ValidationError("segment map and source image differ in size");
  const int n = segments.segment_count;
  std::vector<int> y0(n, INT32_MAX), x0(n, INT32_MAX), y1(n, -1), x1(n, -1);
  for (int y = 0; y < segments.labels.rows(); ++y) {
    for (int x = 0; x < segments.labels.cols(); ++x) {
      const int l = segments.labels(y, x);
      y0[l] = std::min(y0[l], y);
      x0[l] = std::min(x0[l], x);
      y1[l] = std::max(y1[l], y);
      x1[l] = std::max(x1[l], x);
    }
  }
  std::vector<HarvestedSegment> out(n);
  for (int l = 0; l < n; ++l) {
    if (y1[l] < 0) throw ValidationError("segment " + std::to_string(l) + " has no pixels");
    const int bh = y1[l] - y0[l] + 1;
    const int bw = x1[l] - x0[l] + 1;
    out[l].label = l;
    out[l].mask = segments.labels.block(y0[l], x0[l], bh, bw) == l;
    out[l].patch = source.block(y0[l], x0[l], bh, bw);
  }
  return out;
}

HarvestedSegment harvest_segment(const SegmentMap& segments, const Image& source, std::uint64_t seed) {
  if (segments.segment_count < 1) throw ParameterError("segment map has no segments");
  Rng rng(seed);
  const int label = static_cast<int>(rng.index(static_cast<std::uint64_t>(segments.segment_count)));
  return crop_segment(segments, source, label);
}

Image render_boundaries(const SegmentMap& segments, const Image& source) {
  Image out = source;
  const auto& l = segments.labels;
  for (int y = 0; y < l.rows(); ++y) {
    for (int x = 0; x < l.cols(); ++x) {
      const bool border = (x + 1 < l.cols() && l(y, x + 1) != l(y, x)) || (y + 1 < l.rows() && l(y + 1, x) != l(y, x));
      if (border) out(y, x) = 1.0;
    }
  }
  return out;
}

}  // namespace defectloc
