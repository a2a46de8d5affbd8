#pragma once

#include "defectloc/common.hpp"

#include <cstdint>
#include <vector>

namespace defectloc {

/// Felzenszwalb-Huttenlocher parameters; intensities are in [0,1], so
/// `scale` is on the same footing as an intensity difference.
struct SegParams {
  double scale = 2.0;
  double sigma = 5.0;
  int min_size = 100;

  void validate() const;
};

struct SegmentMap {
  LabelMap labels;  // ids contiguous from 0, numbered by first raster occurrence
  int segment_count = 0;
  std::vector<int> sizes;
};

/// Separable Gaussian blur, kernel truncated at 4 sigma, reflect-padded
/// borders (`dcba|abcd|dcba`). sigma == 0 returns the input unchanged.
Image gaussian_smooth(const Image& image, double sigma);

/// Graph-based segmentation on the 8-connected pixel grid with |intensity
/// difference| edge weights. Edges are processed in (weight, source, target)
/// order; components merge when the edge weight is within both components'
/// internal difference plus scale/|C|. A final pass over the same edge order
/// absorbs components smaller than min_size.
SegmentMap felzenszwalb_segment(const Image& image, const SegParams& params);

struct HarvestedSegment {
  int label = 0;
  Mask mask;    // tight bounding box of the segment
  Image patch;  // source pixels over the same box
};

/// Picks one segment uniformly at random under `seed` and crops it.
HarvestedSegment harvest_segment(const SegmentMap& segments, const Image& source, std::uint64_t seed);
HarvestedSegment crop_segment(const SegmentMap& segments, const Image& source, int label);
/// crop_segment for every label, indexed by label, in one pass over the map.
std::vector<HarvestedSegment> crop_all_segments(const SegmentMap& segments, const Image& source);

/// Debug rendering: source pixels with segment borders painted white.
Image render_boundaries(const SegmentMap& segments, const Image& source);

}  // namespace defectloc
