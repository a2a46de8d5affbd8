#include "defectloc/loss.hpp"

#include <cmath>
#include <string>

namespace defectloc {

void LossConfig::validate() const {
  if (lambda_mse < 0 || lambda_ssim < 0 || lambda_overlay < 0) throw ParameterError("loss weights must be >= 0");
  ssim().validate();
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  mse += o.mse;
  ssim_term += o.ssim_term;
  overlay_mse += o.overlay_mse;
  total += o.total;
  return *this;
}

LossBreakdown& LossBreakdown::operator*=(double d) {
  mse *= d;
  ssim_term *= d;
  overlay_mse *= d;
  total *= d;
  return *this;
}

LossBreakdown& LossBreakdown::operator/=(double d) {
  mse /= d;
  ssim_term /= d;
  overlay_mse /= d;
  total /= d;
  return *this;
}

LossBreakdown compute_loss(std::span<const Image> target, std::span<const Image> reconstruction,
                           std::span<const Mask> masks, const LossConfig& cfg, std::vector<Image>* grad) {
  cfg.validate();
  const std::size_t n = target.size();
  if (n == 0) throw ValidationError("compute_loss: empty batch");
  if (reconstruction.size() != n || masks.size() != n)
    throw ValidationError("compute_loss: batch sizes differ (" + std::to_string(n) + ", " +
                          std::to_string(reconstruction.size()) + ", " + std::to_string(masks.size()) + ")");

  double pixels = 0.0;
  double masked = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Image& t = target[i];
    const Image& r = reconstruction[i];
    if (r.rows() != t.rows() || r.cols() != t.cols() || masks[i].rows() != t.rows() || masks[i].cols() != t.cols())
      throw ValidationError("compute_loss: shape mismatch at batch index " + std::to_string(i));
    if (!t.allFinite() || !r.allFinite())
      throw ValidationError("compute_loss: non-finite value at batch index " + std::to_string(i));
    pixels += static_cast<double>(t.size());
    masked += static_cast<double>(masks[i].count());
  }

  const SsimConfig ssim_cfg = cfg.ssim();
  LossBreakdown out;
  double sq_sum = 0.0;
  double sq_masked = 0.0;
  double ssim_sum = 0.0;
  if (grad) grad->resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const Image diff = reconstruction[i] - target[i];
    const Image sq = diff.square();
    sq_sum += sq.sum();
    sq_masked += masks[i].select(sq, 0.0).sum();

    if (grad) {
      Image ssim_grad;
      ssim_sum += ssim_score_grad(target[i], reconstruction[i], ssim_cfg, ssim_grad);
      Image g = (2.0 * cfg.lambda_mse / pixels) * diff - (cfg.lambda_ssim / static_cast<double>(n)) * ssim_grad;
      if (masked > 0) g += masks[i].select((2.0 * cfg.lambda_overlay / masked) * diff, 0.0);
      (*grad)[i] = std::move(g);
    } else {
      ssim_sum += ssim_score(target[i], reconstruction[i], ssim_cfg);
    }
  }

  out.mse = sq_sum / pixels;
  out.ssim_term = 1.0 - ssim_sum / static_cast<double>(n);
  out.overlay_mse = masked > 0 ? sq_masked / masked : 0.0;
  out.total = cfg.lambda_mse * out.mse + cfg.lambda_ssim * out.ssim_term + cfg.lambda_overlay * out.overlay_mse;
  return out;
}

}  // namespace defectloc
