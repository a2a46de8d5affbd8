#pragma once

#include "defectloc/common.hpp"

namespace defectloc {

enum class SsimWeighting { Uniform, Gaussian };

/// Local-window SSIM settings. The stabilising constants are used as given
/// (not rescaled by the dynamic range), which for [0,1] data means
/// c1 = 0.01 and c2 = 0.03 act directly.
struct SsimConfig {
  int window = 11;
  double c1 = 0.01;
  double c2 = 0.03;
  SsimWeighting weighting = SsimWeighting::Uniform;
  double gaussian_sigma = 1.5;

  void validate() const;
};

/// SSIM of every fully contained window (valid positions only), so the map
/// is (H - window + 1) x (W - window + 1). Statistics use population
/// (1/N-weighted) moments.
Image ssim_map(const Image& a, const Image& b, const SsimConfig& cfg = {});

/// Mean of ssim_map().
double ssim_score(const Image& a, const Image& b, const SsimConfig& cfg = {});

/// Mean SSIM and its gradient with respect to `b`. The gradient has b's
/// shape. This is the kernel the training loss is built on.
double ssim_score_grad(const Image& a, const Image& b, const SsimConfig& cfg, Image& grad_b);

}  // namespace defectloc
