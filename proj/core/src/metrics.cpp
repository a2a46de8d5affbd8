#include "defectloc/metrics.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace defectloc {

namespace {

std::vector<double> window_weights(const SsimConfig& cfg) {
  std::vector<double> k(static_cast<std::size_t>(cfg.window));
  const int r = cfg.window / 2;
  double sum = 0.0;
  for (int i = 0; i < cfg.window; ++i) {
    const double d = i - r;
    k[i] = cfg.weighting == SsimWeighting::Uniform ? 1.0
                                                   : std::exp(-0.5 * d * d / (cfg.gaussian_sigma * cfg.gaussian_sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Weighted window sums over valid positions; separable.
Image filter_valid(const Image& in, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int h = static_cast<int>(in.rows()) - n + 1;
  const int w = static_cast<int>(in.cols()) - n + 1;
  Image rows(in.rows(), w);
  for (int y = 0; y < in.rows(); ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += k[j] * in(y, x + j);
      rows(y, x) = acc;
    }
  }
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * rows(y + i, x);
      out(y, x) = acc;
    }
  }
  return out;
}

// Adjoint of filter_valid: scatters window values back onto the full grid.
Image filter_valid_adjoint(const Image& g, const std::vector<double>& k, int full_h, int full_w) {
  const int n = static_cast<int>(k.size());
  Image rows = Image::Zero(full_h, g.cols());
  for (int y = 0; y < g.rows(); ++y)
    for (int i = 0; i < n; ++i) rows.row(y + i) += k[i] * g.row(y);
  Image out = Image::Zero(full_h, full_w);
  for (int x = 0; x < g.cols(); ++x)
    for (int j = 0; j < n; ++j) out.col(x + j) += k[j] * rows.col(x);
  return out;
}

void check_inputs(const Image& a, const Image& b, const SsimConfig& cfg) {
  cfg.validate();
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError("ssim: image shapes differ (" + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                          " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  if (a.rows() < cfg.window || a.cols() < cfg.window)
    throw ParameterError("ssim: window " + std::to_string(cfg.window) + " larger than image " +
                         std::to_string(a.rows()) + "x" + std::to_string(a.cols()));
}

struct Moments {
  Image mu_a, mu_b, var_a, var_b, cov;
};

Moments moments(const Image& a, const Image& b, const std::vector<double>& k) {
  Moments m;
  m.mu_a = filter_valid(a, k);
  m.mu_b = filter_valid(b, k);
  m.var_a = filter_valid(a * a, k) - m.mu_a * m.mu_a;
  m.var_b = filter_valid(b * b, k) - m.mu_b * m.mu_b;
  m.cov = filter_valid(a * b, k) - m.mu_a * m.mu_b;
  return m;
}

}  // namespace

void SsimConfig::validate() const {
  if (window < 3 || window % 2 == 0) throw ParameterError("ssim window must be odd and >= 3");
  if (!(c1 > 0.0) || !(c2 > 0.0)) throw ParameterError("ssim constants must be > 0");
  if (weighting == SsimWeighting::Gaussian && !(gaussian_sigma > 0.0))
    throw ParameterError("ssim gaussian sigma must be > 0");
}

Image ssim_map(const Image& a, const Image& b, const SsimConfig& cfg) {
  check_inputs(a, b, cfg);
  const Moments m = moments(a, b, window_weights(cfg));
  const Image num = (2.0 * m.mu_a * m.mu_b + cfg.c1) * (2.0 * m.cov + cfg.c2);
  const Image den = (m.mu_a * m.mu_a + m.mu_b * m.mu_b + cfg.c1) * (m.var_a + m.var_b + cfg.c2);
  return num / den;
}

double ssim_score(const Image& a, const Image& b, const SsimConfig& cfg) { return ssim_map(a, b, cfg).mean(); }

double ssim_score_grad(const Image& a, const Image& b, const SsimConfig& cfg, Image& grad_b) {
  check_inputs(a, b, cfg);
  const std::vector<double> k = window_weights(cfg);
  const Moments m = moments(a, b, k);

  const Image a1 = 2.0 * m.mu_a * m.mu_b + cfg.c1;
  const Image a2 = 2.0 * m.cov + cfg.c2;
  const Image b1 = m.mu_a * m.mu_a + m.mu_b * m.mu_b + cfg.c1;
  const Image b2 = m.var_a + m.var_b + cfg.c2;
  const Image s = (a1 * a2) / (b1 * b2);
  const double q = static_cast<double>(s.size());

  // dS/d(mu_b), dS/d(E[b^2]), dS/d(E[ab]) per window, pre-divided by q.
  const Image ds_da1 = a2 / (b1 * b2);
  const Image ds_da2 = a1 / (b1 * b2);
  const Image ds_db1 = -s / b1;
  const Image ds_db2 = -s / b2;
  const Image g_mu = (2.0 * m.mu_a * (ds_da1 - ds_da2) + 2.0 * m.mu_b * (ds_db1 - ds_db2)) / q;
  const Image g_bb = ds_db2 / q;
  const Image g_ab = 2.0 * ds_da2 / q;

  const int h = static_cast<int>(b.rows());
  const int w = static_cast<int>(b.cols());
  grad_b = filter_valid_adjoint(g_mu, k, h, w) + 2.0 * b * filter_valid_adjoint(g_bb, k, h, w) +
           a * filter_valid_adjoint(g_ab, k, h, w);
  return s.mean();
}

}  // namespace defectloc
