#pragma once

#include "defectloc/common.hpp"
#include "defectloc/graphseg.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace defectloc {

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double brightness_lo = 0.98;
  double brightness_hi = 1.5;
  double contrast_lo = 1.0;
  double contrast_hi = 1.2;
  double alpha_lo = 0.3;
  double alpha_hi = 1.0;
  double anomaly_probability = 0.5;

  void validate() const;
  /// No flips, unit brightness and contrast.
  static AugmentConfig none();
};

/// Horizontal flip, vertical flip, brightness factor, contrast about the
/// tile mean, then clip to [0,1].
Image augment(const Image& tile, const AugmentConfig& cfg, std::uint64_t seed);

struct OverlayResult {
  Image input;
  Mask mask;  // segment footprint in tile coordinates
};

/// Alpha-blends `patch` over `clean` where `mask` is set, with the mask's
/// top-left corner at `position`. Throws ParameterError when the mask does
/// not fit at that position or alpha is outside [0,1].
OverlayResult overlay(const Image& clean, const Image& patch, const Mask& mask, Position position, double alpha);

/// Crops a harvested segment to at most `limit`, centred on its bounding box.
/// If the centred window misses every mask pixel, it is moved to contain the
/// first one.
HarvestedSegment fit_segment(const HarvestedSegment& segment, Extent limit);

/// Texture images pre-segmented once; segments are drawn from them on demand.
class TexturePool {
 public:
  explicit TexturePool(SegParams params = {}) : params_(params) {}

  void add(const Image& texture, std::string name = {});
  bool empty() const { return textures_.empty(); }
  std::size_t size() const { return textures_.size(); }
  const SegParams& params() const { return params_; }

  struct Entry {
    std::string name;
    Image source;
    SegmentMap segments;
    std::vector<HarvestedSegment> crops;  // indexed by label
  };
  const Entry& entry(std::size_t i) const { return textures_.at(i); }

  /// Texture chosen uniformly, then a segment chosen exactly as
  /// harvest_segment(segments, source, derive_seed(seed, {1})) would.
  HarvestedSegment draw(std::uint64_t seed) const;

 private:
  SegParams params_;
  std::vector<Entry> textures_;
};

struct SyntheticSample {
  Image clean;  // augmented tile; the reconstruction target
  Image input;  // clean with the overlay applied
  Mask mask;
  double alpha = 0.0;
  bool has_anomaly = false;
};

/// Augments the tile and, with probability anomaly_probability, overlays a
/// pool segment at a uniformly random in-bounds position with
/// alpha ~ U[alpha_lo, alpha_hi].
SyntheticSample make_sample(const Image& clean_tile, const TexturePool& pool, const AugmentConfig& cfg,
                            std::uint64_t seed);

}  // namespace defectloc
