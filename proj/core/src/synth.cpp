#include "defectloc/synth.hpp"

#include <algorithm>
#include <cmath>

namespace defectloc {

namespace {

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError(std::string(name) + " must be in [0,1]");
}

void check_range(double lo, double hi, const char* name) {
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi)
    throw ParameterError(std::string(name) + " range must be finite with lo <= hi");
}

}  // namespace

void AugmentConfig::validate() const {
  check_probability(p_hflip, "p_hflip");
  check_probability(p_vflip, "p_vflip");
  check_probability(anomaly_probability, "anomaly_probability");
  check_range(brightness_lo, brightness_hi, "brightness");
  check_range(contrast_lo, contrast_hi, "contrast");
  check_range(alpha_lo, alpha_hi, "alpha");
  if (alpha_lo < 0.0 || alpha_hi > 1.0) throw ParameterError("alpha range must lie in [0,1]");
  if (brightness_lo < 0.0 || contrast_lo < 0.0) throw ParameterError("brightness and contrast must be >= 0");
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.p_hflip = c.p_vflip = 0.0;
  c.brightness_lo = c.brightness_hi = 1.0;
  c.contrast_lo = c.contrast_hi = 1.0;
  return c;
}

Image augment(const Image& tile, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  // Every draw happens unconditionally so the stream layout does not depend
  // on earlier outcomes.
  const bool hflip = rng.bernoulli(cfg.p_hflip);
  const bool vflip = rng.bernoulli(cfg.p_vflip);
  const double brightness = rng.uniform(cfg.brightness_lo, cfg.brightness_hi);
  const double contrast = rng.uniform(cfg.contrast_lo, cfg.contrast_hi);

  Image out = tile;
  if (hflip) out = out.rowwise().reverse().eval();
  if (vflip) out = out.colwise().reverse().eval();
  if (brightness != 1.0) out *= brightness;
  if (contrast != 1.0) {
    const double mean = out.mean();
    out = mean + contrast * (out - mean);
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

OverlayResult overlay(const Image& clean, const Image& patch, const Mask& mask, Position position, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must be in [0,1]");
  if (patch.rows() != mask.rows() || patch.cols() != mask.cols())
    throw ValidationError("overlay patch and mask differ in size");
  if (position.y < 0 || position.x < 0 || position.y + mask.rows() > clean.rows() ||
      position.x + mask.cols() > clean.cols())
    throw ParameterError("overlay at (" + std::to_string(position.y) + ", " + std::to_string(position.x) +
                         ") does not fit a " + std::to_string(mask.rows()) + "x" + std::to_string(mask.cols()) +
                         " patch into a " + std::to_string(clean.rows()) + "x" + std::to_string(clean.cols()) +
                         " tile");
  OverlayResult out{clean, Mask::Constant(clean.rows(), clean.cols(), false)};
  for (int y = 0; y < mask.rows(); ++y) {
    for (int x = 0; x < mask.cols(); ++x) {
      if (!mask(y, x)) continue;
      const int ty = position.y + y, tx = position.x + x;
      out.input(ty, tx) = std::clamp((1.0 - alpha) * clean(ty, tx) + alpha * patch(y, x), 0.0, 1.0);
      out.mask(ty, tx) = true;
    }
  }
  return out;
}

HarvestedSegment fit_segment(const HarvestedSegment& segment, Extent limit) {
  const int h = static_cast<int>(segment.mask.rows());
  const int w = static_cast<int>(segment.mask.cols());
  if (h <= limit.h && w <= limit.w) return segment;
  const int ch = std::min(h, limit.h);
  const int cw = std::min(w, limit.w);
  int y0 = (h - ch) / 2;
  int x0 = (w - cw) / 2;
  if (!segment.mask.block(y0, x0, ch, cw).any()) {
    for (int y = 0; y < h; ++y) {
      int x = 0;
      while (x < w && !segment.mask(y, x)) ++x;
      if (x < w) {
        y0 = std::clamp(y - ch / 2, 0, h - ch);
        x0 = std::clamp(x - cw / 2, 0, w - cw);
        break;
      }
    }
  }
  HarvestedSegment out;
  out.label = segment.label;
  out.mask = segment.mask.block(y0, x0, ch, cw);
  out.patch = segment.patch.block(y0, x0, ch, cw);
  return out;
}

void TexturePool::add(const Image& texture, std::string name) {
  params_.validate();
  Entry e;
  e.name = std::move(name);
  e.source = texture;
  e.segments = felzenszwalb_segment(texture, params_);
  e.crops = crop_all_segments(e.segments, texture);
  textures_.push_back(std::move(e));
}

HarvestedSegment TexturePool::draw(std::uint64_t seed) const {
  if (textures_.empty()) throw ParameterError("texture pool is empty");
  Rng pick(derive_seed(seed, {0}));
  const Entry& e = textures_[pick.index(textures_.size())];
  Rng label_rng(derive_seed(seed, {1}));
  const auto label = label_rng.index(static_cast<std::uint64_t>(e.segments.segment_count));
  return e.crops[label];
}

SyntheticSample make_sample(const Image& clean_tile, const TexturePool& pool, const AugmentConfig& cfg,
                            std::uint64_t seed) {
  cfg.validate();
  if (pool.empty()) throw ParameterError("texture pool is empty");
  SyntheticSample s;
  s.clean = augment(clean_tile, cfg, derive_seed(seed, {0}));
  s.mask = Mask::Constant(s.clean.rows(), s.clean.cols(), false);

  Rng rng(derive_seed(seed, {1}));
  const bool anomalous = rng.bernoulli(cfg.anomaly_probability);
  const double alpha = rng.uniform(cfg.alpha_lo, cfg.alpha_hi);
  if (!anomalous) {
    s.input = s.clean;
    return s;
  }
  const HarvestedSegment seg =
      fit_segment(pool.draw(derive_seed(seed, {2})), {static_cast<int>(s.clean.rows()), static_cast<int>(s.clean.cols())});
  const auto free_y = static_cast<std::uint64_t>(s.clean.rows() - seg.mask.rows() + 1);
  const auto free_x = static_cast<std::uint64_t>(s.clean.cols() - seg.mask.cols() + 1);
  const Position pos{static_cast<int>(rng.index(free_y)), static_cast<int>(rng.index(free_x))};
  OverlayResult o = overlay(s.clean, seg.patch, seg.mask, pos, alpha);
  s.input = std::move(o.input);
  s.mask = std::move(o.mask);
  s.alpha = alpha;
  s.has_anomaly = true;
  return s;
}

}  // namespace defectloc
