#include "defectloc/model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace defectloc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Unrolls kernel windows of a (channels, in_h, in_w) buffer into a
// (channels*k*k, out_h*out_w) matrix; out-of-range taps read as zero.
void im2col(const double* x, int channels, const StageGeometry& g, RowMat& cols) {
  const int k = g.kernel;
  const int hw = g.out_h * g.out_w;
  cols.resize(static_cast<Eigen::Index>(channels) * k * k, hw);
  for (int c = 0; c < channels; ++c) {
    const double* plane = x + static_cast<std::ptrdiff_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = cols.data() + ((static_cast<std::ptrdiff_t>(c) * k + ki) * k + kj) * hw;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ki;
          double* dst = row + static_cast<std::ptrdiff_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::ptrdiff_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad_left + kj;
            dst[ox] = (ix >= 0 && ix < g.in_w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into a (channels, in_h, in_w)
// buffer, which must be zeroed by the caller.
void col2im(const RowMat& cols, int channels, const StageGeometry& g, double* x) {
  const int k = g.kernel;
  const int hw = g.out_h * g.out_w;
  for (int c = 0; c < channels; ++c) {
    double* plane = x + static_cast<std::ptrdiff_t>(c) * g.in_h * g.in_w;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = cols.data() + ((static_cast<std::ptrdiff_t>(c) * k + ki) * k + kj) * hw;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_top + ki;
          if (iy < 0 || iy >= g.in_h) continue;
          double* dst = plane + static_cast<std::ptrdiff_t>(iy) * g.in_w;
          const double* src = row + static_cast<std::ptrdiff_t>(oy) * g.out_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad_left + kj;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

std::string stage_error(int stage, const std::string& what) {
  return "encoder stage " + std::to_string(stage) + ": " + what;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct BatchNormCache {
  Tensor xhat;
  std::vector<double> inv_std;
};

// In-place batch norm over (N, H, W) per channel.
// Train mode normalises with batch statistics and, when update_mean/var are
// given, folds them into the running estimates; Eval reads running stats.
void batch_norm_forward(Tensor& z, const double* gamma, const double* beta, const double* running_mean,
                        const double* running_var, double* update_mean, double* update_var, double momentum,
                        double eps, Mode mode, BatchNormCache* cache) {
  const std::size_t hw = static_cast<std::size_t>(z.h) * z.w;
  const double count = static_cast<double>(z.n) * static_cast<double>(hw);
  if (cache) {
    cache->xhat = Tensor(z.n, z.c, z.h, z.w);
    cache->inv_std.assign(z.c, 0.0);
  }
  for (int c = 0; c < z.c; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (int s = 0; s < z.n; ++s) {
        const double* p = z.sample(s) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      mean = sum / count;
      double sq = 0.0;
      for (int s = 0; s < z.n; ++s) {
        const double* p = z.sample(s) + c * hw;
        for (std::size_t i = 0; i < hw; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      var = sq / count;
      if (update_mean) {
        const double unbiased = count > 1 ? sq / (count - 1) : var;
        update_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
        update_var[c] = (1.0 - momentum) * running_var[c] + momentum * unbiased;
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    if (cache) cache->inv_std[c] = inv_std;
    for (int s = 0; s < z.n; ++s) {
      double* p = z.sample(s) + c * hw;
      double* xh = cache ? cache->xhat.sample(s) + c * hw : nullptr;
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = (p[i] - mean) * inv_std;
        if (xh) xh[i] = v;
        p[i] = gamma[c] * v + beta[c];
      }
    }
  }
}

// dy -> dz in place; accumulates dgamma/dbeta.
void batch_norm_backward(Tensor& dy, const BatchNormCache& cache, const double* gamma, double* dgamma,
                         double* dbeta) {
  const std::size_t hw = static_cast<std::size_t>(dy.h) * dy.w;
  const double count = static_cast<double>(dy.n) * static_cast<double>(hw);
  for (int c = 0; c < dy.c; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int s = 0; s < dy.n; ++s) {
      const double* g = dy.sample(s) + c * hw;
      const double* xh = cache.xhat.sample(s) + c * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += g[i];
        sum_dy_xhat += g[i] * xh[i];
      }
    }
    dgamma[c] += sum_dy_xhat;
    dbeta[c] += sum_dy;
    const double scale = gamma[c] * cache.inv_std[c] / count;
    for (int s = 0; s < dy.n; ++s) {
      double* g = dy.sample(s) + c * hw;
      const double* xh = cache.xhat.sample(s) + c * hw;
      for (std::size_t i = 0; i < hw; ++i) g[i] = scale * (count * g[i] - sum_dy - xh[i] * sum_dy_xhat);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from_images(std::span<const Image> images) {
  if (images.empty()) return {};
  const int h = static_cast<int>(images.front().rows());
  const int w = static_cast<int>(images.front().cols());
  Tensor t(static_cast<int>(images.size()), 1, h, w);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].rows() != h || images[i].cols() != w)
      throw ValidationError("batch images differ in size at index " + std::to_string(i));
    std::copy(images[i].data(), images[i].data() + images[i].size(), t.sample(static_cast<int>(i)));
  }
  return t;
}

std::vector<Image> Tensor::to_images() const {
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Image img(h, w);
    std::copy(sample(i), sample(i) + static_cast<std::size_t>(h) * w, img.data());
    out.push_back(std::move(img));
  }
  return out;
}

// ---------------------------------------------------------------------------
// NetworkConfig

NetworkConfig NetworkConfig::standard() { return scaled(289, {32, 64, 128, 128, 256, 256, 512}); }

NetworkConfig NetworkConfig::scaled(int input_size, std::vector<int> channels, std::vector<int> skips) {
  NetworkConfig cfg;
  cfg.input_h = input_size;
  cfg.input_w = input_size;
  for (int c : channels) cfg.encoder_stages.push_back({c, 4, 2});
  cfg.latent_channels = channels.empty() ? 0 : channels.back();
  cfg.skip_stages = std::move(skips);
  return cfg;
}

std::string NetworkConfig::canonical() const {
  std::ostringstream os;
  os << "input=" << input_h << 'x' << input_w << 'x' << input_channels << ";latent=" << latent_channels << ";stages=";
  for (std::size_t i = 0; i < encoder_stages.size(); ++i) {
    if (i) os << ',';
    os << encoder_stages[i].out_channels << ':' << encoder_stages[i].kernel << ':' << encoder_stages[i].stride;
  }
  os << ";skips=";
  for (std::size_t i = 0; i < skip_stages.size(); ++i) os << (i ? "," : "") << skip_stages[i];
  os << ";slope=" << format_double(leaky_slope) << ";bn=" << (batch_norm ? 1 : 0)
     << ";bn_momentum=" << format_double(bn_momentum) << ";bn_eps=" << format_double(bn_eps);
  return os.str();
}

NetworkConfig NetworkConfig::parse_canonical(const std::string& text) {
  NetworkConfig cfg;
  std::stringstream ss(text);
  std::string item;
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream in(s);
    std::string p;
    while (std::getline(in, p, sep))
      if (!p.empty()) parts.push_back(p);
    return parts;
  };
  try {
    while (std::getline(ss, item, ';')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("malformed network config field '" + item + "'");
      const std::string key = item.substr(0, eq);
      const std::string value = item.substr(eq + 1);
      if (key == "input") {
        const auto dims = split(value, 'x');
        if (dims.size() != 3) throw ConfigError("malformed input dims '" + value + "'");
        cfg.input_h = std::stoi(dims[0]);
        cfg.input_w = std::stoi(dims[1]);
        cfg.input_channels = std::stoi(dims[2]);
      } else if (key == "latent") {
        cfg.latent_channels = std::stoi(value);
      } else if (key == "stages") {
        for (const auto& st : split(value, ',')) {
          const auto f = split(st, ':');
          if (f.size() != 3) throw ConfigError("malformed stage '" + st + "'");
          cfg.encoder_stages.push_back({std::stoi(f[0]), std::stoi(f[1]), std::stoi(f[2])});
        }
      } else if (key == "skips") {
        for (const auto& s : split(value, ',')) cfg.skip_stages.push_back(std::stoi(s));
      } else if (key == "slope") {
        cfg.leaky_slope = std::stod(value);
      } else if (key == "bn") {
        cfg.batch_norm = value == "1";
      } else if (key == "bn_momentum") {
        cfg.bn_momentum = std::stod(value);
      } else if (key == "bn_eps") {
        cfg.bn_eps = std::stod(value);
      } else {
        throw ConfigError("unknown network config field '" + key + "'");
      }
    }
  } catch (const std::logic_error& e) {
    throw ConfigError("malformed network config: " + std::string(e.what()));
  }
  return cfg;
}

std::uint64_t NetworkConfig::hash() const { return fnv1a(canonical()); }

std::vector<StageGeometry> plan_encoder(const NetworkConfig& config) {
  if (config.input_h < 1 || config.input_w < 1 || config.input_channels < 1)
    throw ConfigError("input dims must be positive");
  if (config.encoder_stages.empty()) throw ConfigError("network needs at least one encoder stage");
  std::vector<StageGeometry> geo;
  int h = config.input_h, w = config.input_w, c = config.input_channels;
  auto plan_axis = [](int in, int k, int s, int& out, int& pad_lead) {
    int total;
    if (in >= k) {
      out = (in - k + s - 1) / s + 1;
      total = (out - 1) * s + k - in;
    } else {
      out = 1;
      total = k - in;
    }
    pad_lead = total / 2;
  };
  for (std::size_t i = 0; i < config.encoder_stages.size(); ++i) {
    const StageSpec& st = config.encoder_stages[i];
    const int idx = static_cast<int>(i);
    if (st.out_channels < 1) throw ConfigError(stage_error(idx, "out_channels must be >= 1"));
    if (st.kernel < 1) throw ConfigError(stage_error(idx, "kernel must be >= 1"));
    if (st.stride < 1) throw ConfigError(stage_error(idx, "stride must be >= 1"));
    if (st.stride > st.kernel)
      throw ConfigError(stage_error(idx, "stride " + std::to_string(st.stride) + " exceeds kernel " +
                                             std::to_string(st.kernel) + " (inputs would be skipped)"));
    StageGeometry g;
    g.in_channels = c;
    g.out_channels = st.out_channels;
    g.in_h = h;
    g.in_w = w;
    g.kernel = st.kernel;
    g.stride = st.stride;
    plan_axis(h, st.kernel, st.stride, g.out_h, g.pad_top);
    plan_axis(w, st.kernel, st.stride, g.out_w, g.pad_left);
    geo.push_back(g);
    h = g.out_h;
    w = g.out_w;
    c = g.out_channels;
  }
  if (h != 1 || w != 1)
    throw ConfigError("latent spatial dims " + std::to_string(h) + "×" + std::to_string(w) + " ≠ 1×1");
  if (c != config.latent_channels)
    throw ConfigError("latent channels " + std::to_string(c) + " ≠ " + std::to_string(config.latent_channels));
  std::vector<int> seen;
  for (int s : config.skip_stages) {
    if (s < 0 || s + 1 >= static_cast<int>(geo.size()))
      throw ConfigError("skip link from encoder stage " + std::to_string(s) +
                        " has no mirrored decoder stage with matching spatial dims");
    if (std::find(seen.begin(), seen.end(), s) != seen.end())
      throw ConfigError("duplicate skip link from encoder stage " + std::to_string(s));
    seen.push_back(s);
  }
  if (!(config.leaky_slope >= 0.0)) throw ConfigError("leaky slope must be >= 0");
  return geo;
}

// ---------------------------------------------------------------------------
// Weights

const NamedTensor& ModelWeights::at(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw ValidationError("no tensor named '" + name + "'");
}

NamedTensor& ModelWeights::at(const std::string& name) {
  return const_cast<NamedTensor&>(static_cast<const ModelWeights&>(*this).at(name));
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors)
    if (t.trainable) n += t.values.size();
  return n;
}

bool ModelWeights::same_values(const ModelWeights& other) const {
  if (!(config == other.config) || tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& a = tensors[i];
    const auto& b = other.tensors[i];
    if (a.name != b.name || a.shape != b.shape || a.values.size() != b.values.size()) return false;
    if (std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

namespace {

void add_batch_norm(std::vector<NamedTensor>& out, const std::string& prefix, int channels) {
  out.push_back({prefix + ".bn.gamma", {channels}, std::vector<double>(channels, 1.0), true});
  out.push_back({prefix + ".bn.beta", {channels}, std::vector<double>(channels, 0.0), true});
  out.push_back({prefix + ".bn.running_mean", {channels}, std::vector<double>(channels, 0.0), false});
  out.push_back({prefix + ".bn.running_var", {channels}, std::vector<double>(channels, 1.0), false});
}

int decoder_in_channels(const NetworkConfig& cfg, const std::vector<StageGeometry>& geo, int j) {
  const bool skip = std::find(cfg.skip_stages.begin(), cfg.skip_stages.end(), j) != cfg.skip_stages.end();
  return geo[j].out_channels * (skip ? 2 : 1);
}

// Tensor layout; initial values are placeholders.
std::vector<NamedTensor> layout(const NetworkConfig& cfg, const std::vector<StageGeometry>& geo) {
  std::vector<NamedTensor> t;
  for (std::size_t i = 0; i < geo.size(); ++i) {
    const auto& g = geo[i];
    const std::string p = "enc" + std::to_string(i);
    t.push_back({p + ".weight",
                 {g.out_channels, g.in_channels, g.kernel, g.kernel},
                 std::vector<double>(static_cast<std::size_t>(g.out_channels) * g.in_channels * g.kernel * g.kernel),
                 true});
    t.push_back({p + ".bias", {g.out_channels}, std::vector<double>(g.out_channels, 0.0), true});
    if (cfg.batch_norm) add_batch_norm(t, p, g.out_channels);
  }
  for (int j = static_cast<int>(geo.size()) - 1; j >= 0; --j) {
    const auto& g = geo[j];
    const std::string p = "dec" + std::to_string(j);
    const int cin = decoder_in_channels(cfg, geo, j);
    const int cout = g.in_channels;
    t.push_back({p + ".weight",
                 {cin, cout, g.kernel, g.kernel},
                 std::vector<double>(static_cast<std::size_t>(cin) * cout * g.kernel * g.kernel),
                 true});
    t.push_back({p + ".bias", {cout}, std::vector<double>(cout, 0.0), true});
    if (cfg.batch_norm && j > 0) add_batch_norm(t, p, cout);
  }
  return t;
}

}  // namespace

ModelWeights build(const NetworkConfig& config, std::uint64_t init_seed) {
  const auto geo = plan_encoder(config);
  ModelWeights w;
  w.config = config;
  w.tensors = layout(config, geo);
  Rng rng(derive_seed(init_seed, {0x77656967ULL}));
  const double gain = std::sqrt(2.0 / (1.0 + config.leaky_slope * config.leaky_slope));
  for (auto& t : w.tensors) {
    if (t.shape.size() != 4) continue;
    const bool transposed = t.name.rfind("dec", 0) == 0;
    double fan_in;
    if (transposed) {
      const int j = std::stoi(t.name.substr(3));
      const double s = geo[j].stride;
      fan_in = t.shape[0] * t.shape[2] * t.shape[3] / (s * s);
    } else {
      fan_in = static_cast<double>(t.shape[1]) * t.shape[2] * t.shape[3];
    }
    const double stddev = gain / std::sqrt(fan_in);
    for (double& v : t.values) v = stddev * rng.normal();
  }
  return w;
}

// ---------------------------------------------------------------------------
// Network

struct Network::Caches {
  struct Stage {
    Tensor input;   // encoder: stage input; decoder: (concatenated) input
    Tensor output;  // post-activation
    BatchNormCache bn;
  };
  std::vector<Stage> enc;
  std::vector<Stage> dec;
  bool valid = false;
};

Network::Network(ModelWeights& weights) : Network(static_cast<const ModelWeights&>(weights)) {
  mutable_weights_ = &weights;
}

Network::Network(const ModelWeights& weights)
    : weights_(&weights), mutable_weights_(nullptr), cache_(std::make_shared<Caches>()) {
  geometry_ = plan_encoder(weights.config);
  const auto expected = layout(weights.config, geometry_);
  if (expected.size() != weights.tensors.size())
    throw CompatibilityError("weights do not match network config (tensor count)");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (expected[i].name != weights.tensors[i].name || expected[i].shape != weights.tensors[i].shape ||
        expected[i].values.size() != weights.tensors[i].values.size())
      throw CompatibilityError("weights do not match network config at tensor '" + expected[i].name + "'");
  }
  const std::size_t per_enc = weights.config.batch_norm ? 6 : 2;
  const int n = static_cast<int>(geometry_.size());
  enc_index_.resize(n);
  dec_index_.resize(n);
  std::size_t idx = 0;
  for (int i = 0; i < n; ++i) {
    enc_index_[i] = idx;
    idx += per_enc;
  }
  for (int j = n - 1; j >= 0; --j) {
    dec_index_[j] = idx;
    idx += (weights.config.batch_norm && j > 0) ? 6 : 2;
  }
  skip_of_stage_.assign(n, -1);
  for (std::size_t s = 0; s < weights.config.skip_stages.size(); ++s)
    skip_of_stage_[weights.config.skip_stages[s]] = static_cast<int>(s);
  ablated_.assign(n, false);
}

void Network::set_skip_ablated(int stage, bool ablated) {
  if (stage < 0 || stage >= static_cast<int>(ablated_.size()) || skip_of_stage_[stage] < 0)
    throw ParameterError("encoder stage " + std::to_string(stage) + " has no skip link");
  ablated_[stage] = ablated;
}

Tensor Network::forward(const Tensor& batch, Mode mode) {
  const NetworkConfig& cfg = weights_->config;
  if (batch.c != cfg.input_channels || batch.h != cfg.input_h || batch.w != cfg.input_w)
    throw ValidationError("input batch is " + std::to_string(batch.c) + "x" + std::to_string(batch.h) + "x" +
                          std::to_string(batch.w) + ", network expects " + std::to_string(cfg.input_channels) + "x" +
                          std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w));
  if (batch.n < 1) throw ValidationError("empty input batch");
  if (mode == Mode::Train && !mutable_weights_) throw ParameterError("train-mode forward needs mutable weights");
  const bool train = mode == Mode::Train;
  auto& tensors = weights_->tensors;
  const int n_stages = static_cast<int>(geometry_.size());
  const int n = batch.n;

  Caches& cache = *cache_;
  cache.enc.assign(n_stages, {});
  cache.dec.assign(n_stages, {});
  cache.valid = train;

  auto activate = [&](Tensor& z, std::size_t base, Caches::Stage& st) {
    if (cfg.batch_norm) {
      double* um = train ? mutable_weights_->tensors[base + 4].values.data() : nullptr;
      double* uv = train ? mutable_weights_->tensors[base + 5].values.data() : nullptr;
      batch_norm_forward(z, tensors[base + 2].values.data(), tensors[base + 3].values.data(),
                         tensors[base + 4].values.data(), tensors[base + 5].values.data(), um, uv, cfg.bn_momentum,
                         cfg.bn_eps, mode, train ? &st.bn : nullptr);
    }
    for (double& v : z.data)
      if (v < 0.0) v *= cfg.leaky_slope;
  };

  RowMat cols;
  Tensor x = batch;
  std::vector<Tensor> skip_features(n_stages);
  for (int i = 0; i < n_stages; ++i) {
    const StageGeometry& g = geometry_[i];
    const std::size_t base = enc_index_[i];
    const ConstMatMap wmat(tensors[base].values.data(), g.out_channels,
                           static_cast<Eigen::Index>(g.in_channels) * g.kernel * g.kernel);
    const double* bias = tensors[base + 1].values.data();
    Tensor z(n, g.out_channels, g.out_h, g.out_w);
    for (int s = 0; s < n; ++s) {
      im2col(x.sample(s), g.in_channels, g, cols);
      MatMap out(z.sample(s), g.out_channels, static_cast<Eigen::Index>(g.out_h) * g.out_w);
      out.noalias() = wmat * cols;
      for (int c = 0; c < g.out_channels; ++c) out.row(c).array() += bias[c];
    }
    // Transient during inference, so the input tensor is moved rather than copied.
    if (train) cache.enc[i].input = std::move(x);
    activate(z, base, cache.enc[i]);
    if (skip_of_stage_[i] >= 0) skip_features[i] = z;
    if (train) cache.enc[i].output = z;
    x = std::move(z);
  }

  for (int j = n_stages - 1; j >= 0; --j) {
    const StageGeometry& g = geometry_[j];
    const std::size_t base = dec_index_[j];
    Tensor in;
    if (skip_of_stage_[j] >= 0) {
      const Tensor& skip = skip_features[j];
      in = Tensor(n, x.c + skip.c, x.h, x.w);
      const std::size_t a = x.sample_size();
      for (int s = 0; s < n; ++s) {
        std::copy(x.sample(s), x.sample(s) + a, in.sample(s));
        if (ablated_[j])
          std::fill(in.sample(s) + a, in.sample(s) + in.sample_size(), 0.0);
        else
          std::copy(skip.sample(s), skip.sample(s) + skip.sample_size(), in.sample(s) + a);
      }
    } else {
      in = std::move(x);
    }
    const int cin = in.c;
    const int cout = g.in_channels;
    const ConstMatMap wmat(tensors[base].values.data(), cin, static_cast<Eigen::Index>(cout) * g.kernel * g.kernel);
    const double* bias = tensors[base + 1].values.data();
    Tensor y(n, cout, g.in_h, g.in_w);
    for (int s = 0; s < n; ++s) {
      const ConstMatMap xin(in.sample(s), cin, static_cast<Eigen::Index>(g.out_h) * g.out_w);
      cols.noalias() = wmat.transpose() * xin;
      double* dst = y.sample(s);
      col2im(cols, cout, g, dst);
      const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
      for (int c = 0; c < cout; ++c)
        for (std::size_t p = 0; p < plane; ++p) dst[c * plane + p] += bias[c];
    }
    if (train) cache.dec[j].input = std::move(in);
    if (j > 0) {
      activate(y, base, cache.dec[j]);
    } else {
      for (double& v : y.data) v = 1.0 / (1.0 + std::exp(-v));
    }
    if (train) cache.dec[j].output = y;
    x = std::move(y);
  }
  return x;
}

std::vector<std::vector<double>> Network::backward(const Tensor& grad_output) {
  Caches& cache = *cache_;
  if (!cache.valid) throw ParameterError("backward() requires a preceding train-mode forward()");
  const NetworkConfig& cfg = weights_->config;
  const auto& tensors = weights_->tensors;
  const int n_stages = static_cast<int>(geometry_.size());
  const Tensor& out = cache.dec[0].output;
  if (grad_output.n != out.n || grad_output.c != out.c || grad_output.h != out.h || grad_output.w != out.w)
    throw ValidationError("gradient shape does not match network output");

  std::vector<std::vector<double>> grads(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) grads[i].assign(tensors[i].values.size(), 0.0);

  auto deactivate = [&](Tensor& dy, std::size_t base, const Caches::Stage& st) {
    const Tensor& y = st.output;
    for (std::size_t i = 0; i < dy.data.size(); ++i)
      if (!(y.data[i] > 0.0)) dy.data[i] *= cfg.leaky_slope;
    if (cfg.batch_norm)
      batch_norm_backward(dy, st.bn, tensors[base + 2].values.data(), grads[base + 2].data(), grads[base + 3].data());
  };

  const int n = grad_output.n;
  RowMat cols;
  Tensor dy = grad_output;
  for (std::size_t i = 0; i < dy.data.size(); ++i) dy.data[i] *= out.data[i] * (1.0 - out.data[i]);

  std::vector<Tensor> skip_grads(n_stages);
  for (int j = 0; j < n_stages; ++j) {
    const StageGeometry& g = geometry_[j];
    const std::size_t base = dec_index_[j];
    if (j > 0) deactivate(dy, base, cache.dec[j]);
    const Tensor& in = cache.dec[j].input;
    const int cin = in.c;
    const int cout = g.in_channels;
    const Eigen::Index kk = static_cast<Eigen::Index>(cout) * g.kernel * g.kernel;
    const ConstMatMap wmat(tensors[base].values.data(), cin, kk);
    MatMap dw(grads[base].data(), cin, kk);
    double* db = grads[base + 1].data();
    const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
    Tensor dx(n, cin, g.out_h, g.out_w);
    for (int s = 0; s < n; ++s) {
      const double* d = dy.sample(s);
      for (int c = 0; c < cout; ++c)
        for (std::size_t p = 0; p < plane; ++p) db[c] += d[c * plane + p];
      im2col(d, cout, g, cols);
      const ConstMatMap xin(in.sample(s), cin, static_cast<Eigen::Index>(g.out_h) * g.out_w);
      dw.noalias() += xin * cols.transpose();
      MatMap dxs(dx.sample(s), cin, static_cast<Eigen::Index>(g.out_h) * g.out_w);
      dxs.noalias() = wmat * cols;
    }
    if (skip_of_stage_[j] >= 0) {
      const int main_c = g.out_channels;
      Tensor main(n, main_c, g.out_h, g.out_w);
      Tensor skip(n, cin - main_c, g.out_h, g.out_w);
      for (int s = 0; s < n; ++s) {
        std::copy(dx.sample(s), dx.sample(s) + main.sample_size(), main.sample(s));
        if (!ablated_[j])
          std::copy(dx.sample(s) + main.sample_size(), dx.sample(s) + dx.sample_size(), skip.sample(s));
      }
      skip_grads[j] = std::move(skip);
      dy = std::move(main);
    } else {
      dy = std::move(dx);
    }
  }

  for (int i = n_stages - 1; i >= 0; --i) {
    const StageGeometry& g = geometry_[i];
    const std::size_t base = enc_index_[i];
    if (skip_of_stage_[i] >= 0)
      for (std::size_t k = 0; k < dy.data.size(); ++k) dy.data[k] += skip_grads[i].data[k];
    deactivate(dy, base, cache.enc[i]);
    const Eigen::Index kk = static_cast<Eigen::Index>(g.in_channels) * g.kernel * g.kernel;
    const Eigen::Index hw = static_cast<Eigen::Index>(g.out_h) * g.out_w;
    const ConstMatMap wmat(tensors[base].values.data(), g.out_channels, kk);
    MatMap dw(grads[base].data(), g.out_channels, kk);
    double* db = grads[base + 1].data();
    const Tensor& in = cache.enc[i].input;
    const bool need_dx = i > 0;
    Tensor dx = need_dx ? Tensor(n, g.in_channels, g.in_h, g.in_w) : Tensor();
    RowMat dcols;
    for (int s = 0; s < n; ++s) {
      const ConstMatMap d(dy.sample(s), g.out_channels, hw);
      for (int c = 0; c < g.out_channels; ++c) db[c] += d.row(c).sum();
      im2col(in.sample(s), g.in_channels, g, cols);
      dw.noalias() += d * cols.transpose();
      if (need_dx) {
        dcols.noalias() = wmat.transpose() * d;
        col2im(dcols, g.in_channels, g, dx.sample(s));
      }
    }
    dy = std::move(dx);
  }
  return grads;
}

Tensor forward(const ModelWeights& weights, const Tensor& batch) {
  Network net(weights);
  return net.forward(batch, Mode::Eval);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

constexpr char kMagic[8] = {'D', 'L', 'C', 'K', 'P', 'T', '0', '1'};
constexpr char kTrailer[4] = {'E', 'N', 'D', '!'};

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(const NamedTensor& t) {
    str(t.name);
    pod(static_cast<std::uint8_t>(t.trainable ? 1 : 0));
    pod(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) pod(static_cast<std::int32_t>(d));
    pod(static_cast<std::uint64_t>(t.values.size()));
    out_.write(reinterpret_cast<const char*>(t.values.data()),
               static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 24)) fail("implausible string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    check();
    return s;
  }
  NamedTensor tensor() {
    NamedTensor t;
    t.name = str();
    t.trainable = pod<std::uint8_t>() != 0;
    const auto ndim = pod<std::uint32_t>();
    if (ndim > 8) fail("implausible tensor rank");
    std::uint64_t expect = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      t.shape.push_back(pod<std::int32_t>());
      if (t.shape.back() < 0) fail("negative tensor dim");
      expect *= static_cast<std::uint64_t>(t.shape.back());
    }
    const auto count = pod<std::uint64_t>();
    if (count != expect) fail("tensor '" + t.name + "' size does not match its shape");
    t.values.resize(count);
    in_.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(count * sizeof(double)));
    check();
    return t;
  }
  [[noreturn]] void fail(const std::string& what) { throw LoadError(path_, what); }

 private:
  void check() {
    if (!in_) fail("truncated checkpoint");
  }
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    Writer w(out);
    out.write(kMagic, sizeof(kMagic));
    w.pod(static_cast<std::uint32_t>(1));
    w.pod(ckpt.weights.config.hash());
    w.str(ckpt.weights.config.canonical());
    w.pod(ckpt.weights.meta.epoch);
    w.pod(ckpt.weights.meta.val_loss);
    w.pod(static_cast<std::uint32_t>(ckpt.weights.tensors.size()));
    for (const auto& t : ckpt.weights.tensors) w.tensor(t);
    w.pod(static_cast<std::uint32_t>(ckpt.attributes.size()));
    for (const auto& [k, v] : ckpt.attributes) {
      w.str(k);
      w.str(v);
    }
    w.pod(static_cast<std::uint32_t>(ckpt.state.size()));
    for (const auto& t : ckpt.state) w.tensor(t);
    out.write(kTrailer, sizeof(kTrailer));
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string(), "cannot open checkpoint");
  Reader r(in, path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("not a checkpoint file");
  if (r.pod<std::uint32_t>() != 1) r.fail("unsupported checkpoint version");
  const auto stored_hash = r.pod<std::uint64_t>();
  Checkpoint ckpt;
  try {
    ckpt.weights.config = NetworkConfig::parse_canonical(r.str());
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  if (ckpt.weights.config.hash() != stored_hash) r.fail("config hash does not match embedded config");
  ckpt.weights.meta.epoch = r.pod<std::int64_t>();
  ckpt.weights.meta.val_loss = r.pod<double>();
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) ckpt.weights.tensors.push_back(r.tensor());
  const auto attrs = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < attrs; ++i) {
    std::string k = r.str();
    ckpt.attributes[k] = r.str();
  }
  const auto states = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < states; ++i) ckpt.state.push_back(r.tensor());
  char trailer[sizeof(kTrailer)];
  in.read(trailer, sizeof(trailer));
  if (!in || std::memcmp(trailer, kTrailer, sizeof(kTrailer)) != 0) r.fail("truncated checkpoint");
  try {
    Network check(ckpt.weights);
  } catch (const Error& e) {
    r.fail(e.what());
  }
  return ckpt;
}

void save(const ModelWeights& weights, const fs::path& path) { save_checkpoint({weights, {}, {}}, path); }

ModelWeights load(const fs::path& path) { return load_checkpoint(path).weights; }

ModelWeights load(const fs::path& path, const NetworkConfig& expected) {
  ModelWeights w = load(path);
  if (w.config.hash() != expected.hash())
    throw CompatibilityError("checkpoint '" + path.string() + "' was built for [" + w.config.canonical() +
                             "] but [" + expected.canonical() + "] was requested");
  return w;
}

}  // namespace defectloc
