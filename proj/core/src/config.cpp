#include "defectloc/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace defectloc {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general);
  return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

double parse_double(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, value, "a number");
  return out;
}

long long parse_int(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  long long out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, value, "an integer");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(key, value, "an unsigned integer");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, value, "a boolean");
}

std::vector<int> parse_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  const std::string v = trim(value);
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, item)));
  return out;
}

std::string fmt_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, const std::string&)> set;
};

#define DL_DOUBLE(name, expr)                                                                \
  Field{name, [](const PipelineConfig& c) { return fmt_double(c.expr); },                   \
        [](PipelineConfig& c, const std::string& v) { c.expr = parse_double(name, v); }}
#define DL_INT(name, expr)                                                                   \
  Field{name, [](const PipelineConfig& c) { return std::to_string(c.expr); },               \
        [](PipelineConfig& c, const std::string& v) { c.expr = static_cast<int>(parse_int(name, v)); }}
#define DL_U64(name, expr)                                                                   \
  Field{name, [](const PipelineConfig& c) { return std::to_string(c.expr); },               \
        [](PipelineConfig& c, const std::string& v) { c.expr = parse_u64(name, v); }}
#define DL_BOOL(name, expr)                                                                  \
  Field{name, [](const PipelineConfig& c) { return std::string(c.expr ? "true" : "false"); }, \
        [](PipelineConfig& c, const std::string& v) { c.expr = parse_bool(name, v); }}
#define DL_STRING(name, expr)                                                                \
  Field{name, [](const PipelineConfig& c) { return c.expr; },                               \
        [](PipelineConfig& c, const std::string& v) { c.expr = trim(v); }}
#define DL_LIST(name, expr)                                                                  \
  Field{name, [](const PipelineConfig& c) { return fmt_list(c.expr); },                     \
        [](PipelineConfig& c, const std::string& v) { c.expr = parse_list(name, v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      DL_U64("global.seed", seed),
      DL_STRING("paths.board_dir", paths.board_dir),
      DL_STRING("paths.texture_dir", paths.texture_dir),
      DL_STRING("paths.work_dir", paths.work_dir),
      DL_DOUBLE("ingest.train_fraction", split.train),
      DL_DOUBLE("ingest.val_fraction", split.val),
      DL_DOUBLE("ingest.test_fraction", split.test),
      DL_INT("tiler.window_h", tiling.window.h),
      DL_INT("tiler.window_w", tiling.window.w),
      DL_INT("tiler.stride_y", tiling.stride.h),
      DL_INT("tiler.stride_x", tiling.stride.w),
      DL_INT("tiler.bit_depth", tiling.bit_depth),
      DL_STRING("balance.extractor", balance.extractor),
      DL_STRING("balance.extractor_weights", balance.extractor_weights),
      DL_STRING("balance.extractor_layer", balance.extractor_layer),
      DL_INT("balance.projection_dim", balance.projection_dim),
      DL_INT("balance.k", balance.kmeans.k),
      DL_INT("balance.max_iter", balance.kmeans.max_iter),
      DL_DOUBLE("balance.tol", balance.kmeans.tol),
      DL_INT("balance.restarts", balance.kmeans.restarts),
      DL_DOUBLE("balance.val_fallback_fraction", balance.val_fallback_fraction),
      DL_DOUBLE("graphseg.scale", seg.scale),
      DL_DOUBLE("graphseg.sigma", seg.sigma),
      DL_INT("graphseg.min_size", seg.min_size),
      DL_DOUBLE("synth.p_hflip", augment.p_hflip),
      DL_DOUBLE("synth.p_vflip", augment.p_vflip),
      DL_DOUBLE("synth.brightness_lo", augment.brightness_lo),
      DL_DOUBLE("synth.brightness_hi", augment.brightness_hi),
      DL_DOUBLE("synth.contrast_lo", augment.contrast_lo),
      DL_DOUBLE("synth.contrast_hi", augment.contrast_hi),
      DL_DOUBLE("synth.alpha_lo", augment.alpha_lo),
      DL_DOUBLE("synth.alpha_hi", augment.alpha_hi),
      DL_DOUBLE("synth.anomaly_probability", augment.anomaly_probability),
      DL_LIST("model.channels", model.channels),
      DL_LIST("model.skips", model.skips),
      DL_INT("model.kernel", model.kernel),
      DL_INT("model.stride", model.stride),
      DL_DOUBLE("model.leaky_slope", model.leaky_slope),
      DL_BOOL("model.batch_norm", model.batch_norm),
      DL_DOUBLE("loss.lambda_mse", loss.lambda_mse),
      DL_DOUBLE("loss.lambda_ssim", loss.lambda_ssim),
      DL_DOUBLE("loss.lambda_overlay", loss.lambda_overlay),
      DL_DOUBLE("loss.ssim_c1", loss.ssim_c1),
      DL_DOUBLE("loss.ssim_c2", loss.ssim_c2),
      DL_INT("loss.ssim_window", loss.ssim_window),
      DL_DOUBLE("trainer.lr", train.lr),
      DL_DOUBLE("trainer.beta1", train.beta1),
      DL_DOUBLE("trainer.beta2", train.beta2),
      DL_DOUBLE("trainer.eps", train.eps),
      DL_BOOL("trainer.amsgrad", train.amsgrad),
      DL_DOUBLE("trainer.plateau_factor", train.plateau.factor),
      DL_INT("trainer.plateau_patience", train.plateau.patience),
      DL_DOUBLE("trainer.plateau_threshold", train.plateau.threshold),
      DL_DOUBLE("trainer.plateau_eps", train.plateau.eps),
      DL_INT("trainer.plateau_cooldown", train.plateau.cooldown),
      DL_DOUBLE("trainer.plateau_min_lr", train.plateau.min_lr),
      DL_INT("trainer.early_stop_patience", train.early_stop.patience),
      DL_DOUBLE("trainer.early_stop_min_delta", train.early_stop.min_delta),
      DL_INT("trainer.batch_size", train.batch_size),
      DL_INT("trainer.max_epochs", train.max_epochs),
      DL_DOUBLE("eval.target_tpr", eval.target_tpr),
      DL_INT("eval.heatmaps", eval.heatmaps),
      DL_DOUBLE("eval.heatmap_opacity", eval.heatmap_opacity),
      DL_DOUBLE("eval.tile_opacity", eval.tile_opacity),
      DL_INT("eval.grid_even", eval.grid_even),
      DL_INT("eval.grid_exact_limit", eval.grid_exact_limit),
  };
  return all;
}

#undef DL_DOUBLE
#undef DL_INT
#undef DL_U64
#undef DL_BOOL
#undef DL_STRING
#undef DL_LIST

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

template <class F>
void wrap(const std::string& key, F&& check) {
  try {
    check();
  } catch (const ParameterError& e) {
    throw ConfigError("invalid [" + key + "] settings: " + e.what());
  }
}

}  // namespace

std::string to_string(ConfigSource s) {
  switch (s) {
    case ConfigSource::Default: return "default";
    case ConfigSource::File: return "file";
    case ConfigSource::Flag: return "flag";
  }
  return "?";
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

void apply_setting(PipelineConfig& config, const std::string& key, const std::string& value) {
  field(key).set(config, value);
}

std::string get_setting(const PipelineConfig& config, const std::string& key) { return field(key).get(config); }

void PipelineConfig::validate() const {
  const double sum = split.train + split.val + split.test;
  if (split.train < 0 || split.val < 0 || split.test < 0 || std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("ingest fractions must be non-negative and sum to 1");
  if (tiling.window.h < 1 || tiling.window.w < 1 || tiling.stride.h < 1 || tiling.stride.w < 1)
    throw ConfigError("tiler window and stride must be >= 1");
  if (tiling.bit_depth != 8 && tiling.bit_depth != 16) throw ConfigError("tiler.bit_depth must be 8 or 16");
  if (balance.extractor != "deep" && balance.extractor != "projection")
    throw ConfigError("balance.extractor must be 'deep' or 'projection', got '" + balance.extractor + "'");
  if (balance.projection_dim < 1) throw ConfigError("balance.projection_dim must be >= 1");
  if (balance.kmeans.k < 3) throw ConfigError("balance.k must be >= 3 so that two clusters can be dropped");
  if (balance.kmeans.max_iter < 1 || balance.kmeans.restarts < 1 || !(balance.kmeans.tol >= 0))
    throw ConfigError("balance.max_iter and balance.restarts must be >= 1, balance.tol >= 0");
  if (!(balance.val_fallback_fraction > 0 && balance.val_fallback_fraction < 1))
    throw ConfigError("balance.val_fallback_fraction must be in (0,1)");
  wrap("graphseg", [&] { seg.validate(); });
  wrap("synth", [&] { augment.validate(); });
  wrap("loss", [&] { loss.validate(); });
  wrap("trainer", [&] { training().validate(); });
  if (!(eval.target_tpr > 0 && eval.target_tpr <= 1)) throw ConfigError("eval.target_tpr must be in (0,1]");
  if (eval.heatmaps < 0 || eval.grid_even < 2 || eval.grid_exact_limit < 2)
    throw ConfigError("eval.heatmaps must be >= 0, eval.grid_even and eval.grid_exact_limit >= 2");
  if (model.channels.empty()) throw ConfigError("model.channels must list at least one stage");
  for (int s : model.skips)
    if (s < 0 || s >= static_cast<int>(model.channels.size()) - 1)
      throw ConfigError("model.skips entry " + std::to_string(s) + " is not an inner encoder stage");
  plan_encoder(network());
}

NetworkConfig PipelineConfig::network() const {
  NetworkConfig n;
  n.input_h = tiling.window.h;
  n.input_w = tiling.window.w;
  n.input_channels = 1;
  n.latent_channels = model.channels.empty() ? 0 : model.channels.back();
  n.encoder_stages.clear();
  for (int c : model.channels) n.encoder_stages.push_back({c, model.kernel, model.stride});
  n.skip_stages = model.skips;
  n.leaky_slope = model.leaky_slope;
  n.batch_norm = model.batch_norm;
  return n;
}

TrainConfig PipelineConfig::training() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

KMeansOptions PipelineConfig::kmeans() const {
  KMeansOptions k = balance.kmeans;
  k.seed = seed;
  return k;
}

std::pair<std::string, std::string> split_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + text + "' is not of the form section.key=value");
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

std::vector<std::string> parse_config_into(PipelineConfig& config, const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  std::vector<std::string> set;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config key '" + section + "' must live inside a [section]");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      apply_setting(config, full, value.data());
      set.push_back(full);
    }
  }
  return set;
}

PipelineConfig parse_config(const std::string& text) {
  PipelineConfig c;
  parse_config_into(c, text);
  return c;
}

ResolvedConfig resolve_config(const std::optional<std::filesystem::path>& file,
                              const std::vector<std::pair<std::string, std::string>>& overrides) {
  ResolvedConfig r;
  for (const auto& k : config_keys()) r.sources[k] = ConfigSource::Default;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot read config file '" + file->string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& k : parse_config_into(r.config, ss.str())) r.sources[k] = ConfigSource::File;
  }
  for (const auto& [k, v] : overrides) {
    apply_setting(r.config, k, v);
    r.sources[k] = ConfigSource::Flag;
  }
  return r;
}

std::string render_config(const PipelineConfig& config, const std::map<std::string, ConfigSource>* sources) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    if (sources) {
      const auto it = sources->find(f.key);
      out += "# source: " + to_string(it == sources->end() ? ConfigSource::Default : it->second) + "\n";
    }
    const std::string value = f.get(config);
    out += f.key.substr(dot + 1) + " =" + (value.empty() ? "" : " " + value) + "\n";
  }
  return out;
}

}  // namespace defectloc
