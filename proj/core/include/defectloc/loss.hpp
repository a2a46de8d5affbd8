#pragma once

#include "defectloc/common.hpp"
#include "defectloc/metrics.hpp"

#include <span>
#include <vector>

namespace defectloc {

/// Weights and SSIM settings of the composite reconstruction objective
/// total = l_mse * mse + l_ssim * (1 - ssim) + l_overlay * overlay_mse.
struct LossConfig {
  double lambda_mse = 1.0;
  double lambda_ssim = 1.0;
  double lambda_overlay = 1.0;
  double ssim_c1 = 0.01;
  double ssim_c2 = 0.03;
  int ssim_window = 11;

  void validate() const;
  SsimConfig ssim() const { return {ssim_window, ssim_c1, ssim_c2, SsimWeighting::Uniform, 1.5}; }
};

struct LossBreakdown {
  double mse = 0.0;
  double ssim_term = 0.0;
  double overlay_mse = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown& operator*=(double d);
  LossBreakdown& operator/=(double d);
};

/// Batch loss. mse is the mean squared difference over every pixel of the
/// batch; ssim_term is 1 minus the batch mean of per-image mean SSIM;
/// overlay_mse is the mean squared difference over mask-true pixels pooled
/// across the batch (0 when the batch has none).
///
/// When `grad` is non-null it receives d(total)/d(reconstruction), one image
/// per batch element.
LossBreakdown compute_loss(std::span<const Image> target, std::span<const Image> reconstruction,
                           std::span<const Mask> masks, const LossConfig& cfg, std::vector<Image>* grad = nullptr);

}  // namespace defectloc
