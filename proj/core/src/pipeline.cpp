#include "defectloc/pipeline.hpp"

#include "defectloc/deskdata.hpp"
#include "defectloc/metrics.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

namespace defectloc {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return kExitUsage;
  if (dynamic_cast<const LoadError*>(&e) || dynamic_cast<const ValidationError*>(&e) ||
      dynamic_cast<const InitializationError*>(&e) || dynamic_cast<const CompatibilityError*>(&e))
    return kExitData;
  return kExitRuntime;
}

// ---------------------------------------------------------------------------

WorkDirLock::WorkDirLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      if (::write(fd, pid.data(), pid.size()) < 0) {
        ::close(fd);
        throw Error("cannot write lock file '" + path_.string() + "'");
      }
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw Error("cannot create lock file '" + path_.string() + "': " + std::strerror(errno));
    std::ifstream in(path_);
    long owner = 0;
    in >> owner;
    if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno == EPERM))
      throw Error("work directory '" + dir.string() + "' is in use by process " + std::to_string(owner));
    fs::remove(path_);  // stale
  }
  throw Error("cannot acquire lock '" + path_.string() + "'");
}

WorkDirLock::~WorkDirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write '" + p.string() + "'");
}

std::string listing(const std::string& dir) {
  std::string out;
  if (dir.empty() || !fs::is_directory(dir)) return out;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && is_raster_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    out += f.string() + "|" + std::to_string(fs::file_size(f)) + "|" +
           std::to_string(fs::last_write_time(f).time_since_epoch().count()) + "\n";
  }
  return out;
}

std::string settings(const PipelineConfig& c, std::initializer_list<const char*> prefixes) {
  std::string out;
  for (const auto& key : config_keys())
    for (const char* p : prefixes)
      if (key.rfind(p, 0) == 0) out += key + "=" + get_setting(c, key) + "\n";
  return out;
}

struct IndexRow {
  std::string name;
  std::string source_id;
  int row = 0;
  int col = 0;
};

std::vector<IndexRow> read_index(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(path.string(), "tile index missing; run the tile stage");
  std::vector<IndexRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    IndexRow r;
    std::string row, col;
    std::getline(ls, r.name, '\t');
    std::getline(ls, r.source_id, '\t');
    std::getline(ls, row, '\t');
    std::getline(ls, col, '\t');
    if (row.empty() || col.empty()) throw LoadError(path.string(), "malformed tile index line");
    r.row = std::stoi(row);
    r.col = std::stoi(col);
    rows.push_back(std::move(r));
  }
  return rows;
}

Image strip(const std::vector<Image>& parts) {
  Eigen::Index w = 0;
  for (const auto& p : parts) w += p.cols();
  Image out(parts.front().rows(), w);
  Eigen::Index x = 0;
  for (const auto& p : parts) {
    out.block(0, x, p.rows(), p.cols()) = p;
    x += p.cols();
  }
  return out;
}

std::unique_ptr<FeatureExtractor> make_extractor(const PipelineConfig& c) {
  if (c.balance.extractor == "projection")
    return std::make_unique<ProjectionExtractor>(static_cast<std::size_t>(c.balance.projection_dim), c.seed);
  DeepExtractor::Options o;
  o.model_path = c.balance.extractor_weights;
  o.layer = c.balance.extractor_layer;
  return std::make_unique<DeepExtractor>(o);
}

constexpr std::uint64_t kSeedSplitTrain = 0x747261696eULL;
constexpr std::uint64_t kSeedSplitVal = 0x76616cULL;
constexpr std::uint64_t kSeedInit = 0x696e6974ULL;
constexpr std::uint64_t kSeedEval = 0x6576616cULL;
constexpr std::uint64_t kSeedPreview = 0x70726576ULL;
constexpr std::uint64_t kSeedFallback = 0x66616c6cULL;

}  // namespace

// ---------------------------------------------------------------------------

Pipeline::Pipeline(PipelineConfig config, std::ostream& log, bool force)
    : config_(std::move(config)), log_(log), force_(force) {
  config_.validate();
}

std::string Pipeline::fingerprint(const std::string& stage) const {
  const auto& c = config_;
  std::string basis;
  if (stage == "ingest") {
    basis = settings(c, {"global.", "paths.board_dir", "paths.texture_dir", "ingest."}) +
            listing(c.paths.board_dir) + "--\n" + listing(c.paths.texture_dir);
  } else if (stage == "tile") {
    basis = fingerprint("ingest") + settings(c, {"tiler."});
  } else if (stage == "features") {
    basis = fingerprint("tile") + settings(c, {"balance.extractor", "balance.projection_dim"});
    if (c.balance.extractor == "deep" && fs::exists(c.balance.extractor_weights))
      basis += std::to_string(fs::file_size(c.balance.extractor_weights));
  } else if (stage == "cluster") {
    basis = fingerprint("features") + settings(c, {"balance."});
  } else if (stage == "train") {
    basis = fingerprint("cluster") + settings(c, {"graphseg.", "synth.", "model.", "loss.", "trainer."});
  } else {
    throw ParameterError("unknown stage '" + stage + "'");
  }
  return hex64(fnv1a(basis));
}

bool Pipeline::up_to_date(const std::string& stage) const {
  if (forced(stage)) return false;
  return read_text(work() / ".stamps" / stage) == fingerprint(stage) + "\n";
}

void Pipeline::stamp(const std::string& stage) const {
  write_text(work() / ".stamps" / stage, fingerprint(stage) + "\n");
}

void Pipeline::write_effective_config(const fs::path& dir) const {
  write_text(dir / "config.ini", render_config(config_));
}

StageReport Pipeline::ingest() {
  const auto& c = config_;
  if (c.paths.board_dir.empty() || !fs::is_directory(c.paths.board_dir))
    throw ConfigError("paths.board_dir '" + c.paths.board_dir + "' is not a directory");
  if (!c.paths.texture_dir.empty() && !fs::is_directory(c.paths.texture_dir))
    throw ConfigError("paths.texture_dir '" + c.paths.texture_dir + "' is not a directory");
  if (up_to_date("ingest")) return {"ingest", true, "manifest up to date"};

  ManifestBuild boards = build_manifest(c.paths.board_dir, c.split, c.seed, Role::Board);
  Manifest m = boards.manifest;
  std::size_t textures = 0;
  if (!c.paths.texture_dir.empty()) {
    ManifestBuild tex = build_manifest(c.paths.texture_dir, {1.0, 0.0, 0.0}, c.seed, Role::Texture);
    for (auto e : tex.manifest.entries()) {
      e.id = "tex-" + e.id;
      m.add(e);
      ++textures;
    }
  }
  if (boards.empty_warning) log_ << "warning: no board images found under " << c.paths.board_dir << "\n";
  for (const auto& e : m.unresolved()) log_ << "warning: unresolved path " << e.path << "\n";
  fs::create_directories(work());
  m.save(work() / "manifest.tsv");
  write_effective_config(work());
  stamp("ingest");
  std::ostringstream d;
  d << boards.manifest.size() << " boards (" << boards.manifest.select(Split::Train).size() << " train, "
    << boards.manifest.select(Split::Val).size() << " val, " << boards.manifest.select(Split::Test).size()
    << " test), " << textures << " textures";
  log_ << "ingest: " << d.str() << "\n";
  return {"ingest", false, d.str()};
}

Manifest Pipeline::manifest() const { return Manifest::load(work() / "manifest.tsv"); }

StageReport Pipeline::tile() {
  ingest();
  if (up_to_date("tile")) return {"tile", true, "tiles up to date"};
  const fs::path dir = work() / "tiles";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::size_t count = 0;
  for (const auto& e : manifest().select(Role::Board)) {
    const ImageRecord img = load_image(e.path, e.id);
    const TileGrid grid = plan_grid(img.extent(), config_.tiling.window, config_.tiling.stride);
    const auto tiles = extract_tiles(img, grid);
    write_tiles(dir, tiles, config_.tiling.bit_depth);
    count += tiles.size();
  }
  stamp("tile");
  log_ << "tile: " << count << " tiles\n";
  return {"tile", false, std::to_string(count) + " tiles"};
}

TileSet Pipeline::tiles(Split split) const {
  const Manifest m = manifest();
  std::set<std::string> ids;
  for (const auto& e : m.select(split))
    if (e.role == Role::Board) ids.insert(e.id);
  TileSet out;
  for (const auto& r : read_index(work() / "tiles" / "index.tsv")) {
    if (!ids.count(r.source_id)) continue;
    out.names.push_back(r.name);
    out.pixels.push_back(load_image(work() / "tiles" / (r.name + ".png")).pixels);
  }
  return out;
}

StageReport Pipeline::cluster() {
  tile();
  if (up_to_date("cluster")) return {"cluster", true, "selection up to date"};
  const fs::path dir = work() / "cluster";
  fs::create_directories(dir);

  const Manifest m = manifest();
  std::map<std::string, Split> split_of;
  for (const auto& e : m.entries()) split_of[e.id] = e.split;

  // Training and validation images share one clustering; test tiles stay unfiltered.
  std::vector<FeatureVector> features;
  const fs::path cache = dir / "features.tsv";
  const fs::path cache_key = dir / "features.key";
  if (!forced("cluster") && read_text(cache_key) == fingerprint("features") + "\n") {
    std::ifstream in(cache);
    features = read_feature_cache(in);
    log_ << "cluster: reusing " << features.size() << " cached features\n";
  } else {
    const auto extractor = make_extractor(config_);
    for (Split s : {Split::Train, Split::Val}) {
      std::set<std::string> ids;
      for (const auto& e : m.select(s)) ids.insert(e.id);
      for (const auto& r : read_index(work() / "tiles" / "index.tsv")) {
        if (!ids.count(r.source_id)) continue;
        const Image px = load_image(work() / "tiles" / (r.name + ".png")).pixels;
        FeatureVector f{{r.source_id, r.row, r.col}, extractor->extract(px)};
        for (double v : f.values)
          if (!std::isfinite(v)) throw ValidationError("non-finite feature for tile " + r.name);
        features.push_back(std::move(f));
      }
    }
    std::ofstream out(cache, std::ios::trunc);
    write_feature_cache(out, features);
    out.close();
    write_text(cache_key, fingerprint("features") + "\n");
  }
  if (features.empty()) throw ValidationError("no train/val tiles to cluster");

  ClusterSummary s;
  s.model = kmeans_fit(features, config_.kmeans());
  const auto kept = select_balanced(s.model);

  std::vector<std::string> train_names, val_names;
  for (const auto& ref : kept) (split_of.at(ref.source_id) == Split::Val ? val_names : train_names).push_back(ref.key());
  if (val_names.empty()) {
    std::vector<std::string> shuffled = train_names;
    Rng rng(derive_seed(config_.seed, {kSeedFallback}));
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.index(i)]);
    const auto n_val = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(config_.balance.val_fallback_fraction * shuffled.size())));
    if (shuffled.size() < 2) throw ValidationError("too few selected tiles to carve a validation set");
    const std::set<std::string> val_set(shuffled.begin(), shuffled.begin() + n_val);
    std::vector<std::string> rest;
    for (const auto& n : train_names) (val_set.count(n) ? val_names : rest).push_back(n);
    train_names = std::move(rest);
    s.val_from_fallback = true;
  }
  s.train_selected = train_names.size();
  s.val_selected = val_names.size();

  {
    std::ofstream report(dir / "clusters.tsv", std::ios::trunc);
    write_cluster_report(report, s.model);
    std::ofstream assign(dir / "assignments.tsv", std::ios::trunc);
    for (std::size_t i = 0; i < s.model.refs.size(); ++i)
      assign << s.model.refs[i].key() << '\t' << s.model.assignments[i] << '\n';
    std::ofstream sel(dir / "selection.tsv", std::ios::trunc);
    for (const auto& n : train_names) sel << n << "\ttrain\n";
    for (const auto& n : val_names) sel << n << "\tval\n";
  }
  write_effective_config(dir);
  stamp("cluster");
  last_cluster_ = s;
  std::ostringstream d;
  d << features.size() << " tiles in " << s.model.k << " clusters, dropped {" << s.model.dropped[0] << ", "
    << s.model.dropped[1] << "}, kept " << s.train_selected << " train + " << s.val_selected << " val"
    << (s.val_from_fallback ? " (val carved from train)" : "");
  log_ << "cluster: " << d.str() << "\n";
  return {"cluster", false, d.str()};
}

ClusterSummary Pipeline::cluster_summary() const {
  if (!last_cluster_.model.frequencies.empty()) return last_cluster_;
  ClusterSummary s;
  std::ifstream report(work() / "cluster" / "clusters.tsv");
  if (!report) throw LoadError((work() / "cluster" / "clusters.tsv").string(), "run the cluster stage first");
  std::string line;
  std::getline(report, line);
  while (std::getline(report, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    int c = 0, f = 0, dropped = 0;
    ls >> c >> f >> dropped;
    s.model.frequencies.push_back(f);
    if (dropped) s.model.dropped.push_back(c);
  }
  s.model.k = static_cast<int>(s.model.frequencies.size());
  std::ifstream sel(work() / "cluster" / "selection.tsv");
  while (std::getline(sel, line)) {
    if (line.size() > 4 && line.substr(line.size() - 4) == "\tval")
      ++s.val_selected;
    else if (!line.empty())
      ++s.train_selected;
  }
  return s;
}

TileSet Pipeline::selected(const std::string& use) const {
  std::ifstream sel(work() / "cluster" / "selection.tsv");
  if (!sel) throw LoadError((work() / "cluster" / "selection.tsv").string(), "run the cluster stage first");
  TileSet out;
  std::string line;
  while (std::getline(sel, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.substr(tab + 1) != use) continue;
    const std::string name = line.substr(0, tab);
    out.names.push_back(name);
    out.pixels.push_back(load_image(work() / "tiles" / (name + ".png")).pixels);
  }
  return out;
}

TexturePool Pipeline::texture_pool() const {
  TexturePool pool(config_.seg);
  for (const auto& e : manifest().select(Role::Texture)) pool.add(load_image(e.path, e.id).pixels, e.id);
  if (pool.empty()) throw ValidationError("no texture images; set paths.texture_dir");
  return pool;
}

StageReport Pipeline::train() {
  cluster();
  if (up_to_date("train")) return {"train", true, "checkpoint up to date"};
  const fs::path dir = work() / "train";
  const std::string fp = fingerprint("train");
  const bool resume = !forced("train") && read_text(dir / ".pending") == fp + "\n" && fs::exists(dir / "last.ckpt");
  if (!resume) fs::remove_all(dir);
  fs::create_directories(dir);
  write_text(dir / ".pending", fp + "\n");
  write_effective_config(dir);

  const TileSet train_tiles = selected("train");
  const TileSet val_tiles = selected("val");
  if (train_tiles.pixels.empty() || val_tiles.pixels.empty())
    throw ValidationError("cluster selection left no training or no validation tiles");
  const TexturePool pool = texture_pool();
  const SyntheticStream train_stream(train_tiles.pixels, pool, config_.augment,
                                     derive_seed(config_.seed, {kSeedSplitTrain}), false);
  const SyntheticStream val_stream(val_tiles.pixels, pool, config_.augment, derive_seed(config_.seed, {kSeedSplitVal}),
                                   true);
  const ModelWeights initial = build(config_.network(), derive_seed(config_.seed, {kSeedInit}));

  TrainHooks hooks;
  hooks.checkpoint_dir = dir;
  hooks.resume = resume;
  hooks.on_epoch = [this](const EpochRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "train: epoch %d  train %.6f  val %.6f  lr %.3g\n", r.epoch, r.train.total,
                  r.val.total, r.lr);
    log_ << buf << std::flush;
  };
  if (resume) log_ << "train: resuming from " << (dir / "last.ckpt").string() << "\n";
  const TrainResult result = defectloc::train(initial, train_stream, val_stream, config_.loss, config_.training(), hooks);
  if (!fs::exists(dir / "best.ckpt")) save(result.best, dir / "best.ckpt");
  fs::remove(dir / ".pending");
  stamp("train");
  std::ostringstream d;
  d << result.state.epoch << " epochs (" << result.state.stop_reason << "), best val " << result.state.best_val_loss
    << " at epoch " << result.state.best_epoch;
  log_ << "train: " << d.str() << "\n";
  return {"train", false, d.str()};
}

std::vector<SyntheticSample> Pipeline::test_samples() const {
  const TileSet test = tiles(Split::Test);
  if (test.pixels.empty()) throw ValidationError("no test-split tiles to evaluate");
  const TexturePool pool = texture_pool();
  AugmentConfig cfg = AugmentConfig::none();
  cfg.alpha_lo = config_.augment.alpha_lo;
  cfg.alpha_hi = config_.augment.alpha_hi;
  cfg.anomaly_probability = 1.0;
  std::vector<SyntheticSample> out;
  out.reserve(test.pixels.size());
  for (std::size_t i = 0; i < test.pixels.size(); ++i)
    out.push_back(make_sample(test.pixels[i], pool, cfg, derive_seed(config_.seed, {kSeedEval, i})));
  return out;
}

EvalReport Pipeline::evaluate(const Reconstructor& reconstructor, const std::string& label) {
  tile();
  const auto samples = test_samples();
  std::vector<Image> inputs;
  std::vector<Mask> truths;
  for (const auto& s : samples) {
    inputs.push_back(s.input);
    truths.push_back(s.mask);
  }
  const std::vector<Image> recon = reconstructor(inputs);
  if (recon.size() != inputs.size()) throw ValidationError("reconstructor returned the wrong number of tiles");
  std::vector<Image> residuals;
  std::vector<double> scores;
  std::unique_ptr<bool[]> labels(new bool[inputs.size() * (inputs.empty() ? 0 : inputs[0].size())]);
  std::size_t at = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    residuals.push_back(anomaly_map(inputs[i], recon[i], 0.0).residual);
    scores.insert(scores.end(), residuals.back().data(), residuals.back().data() + residuals.back().size());
    for (Eigen::Index j = 0; j < truths[i].size(); ++j) labels[at++] = truths[i].data()[j];
  }
  const auto grid = threshold_grid(scores, config_.eval.grid_even, static_cast<std::size_t>(config_.eval.grid_exact_limit));
  EvalReport report;
  report.curve = roc(std::span<const double>(scores), std::span<const bool>(labels.get(), at), grid);
  report.target_tpr = config_.eval.target_tpr;
  report.threshold = select_threshold(report.curve, report.target_tpr);
  report.tiles = samples.size();
  report.model = label;

  const fs::path dir = work() / "eval";
  fs::create_directories(dir / "heatmaps");
  {
    std::ofstream r(dir / "roc.tsv", std::ios::trunc);
    r << "threshold\tfpr\ttpr\n";
    char buf[128];
    for (const auto& p : report.curve.points) {
      std::snprintf(buf, sizeof buf, "%.17g\t%.17g\t%.17g\n", p.threshold, p.fpr, p.tpr);
      r << buf;
    }
    std::ofstream s(dir / "summary.tsv", std::ios::trunc);
    std::snprintf(buf, sizeof buf, "%.17g", report.curve.auc);
    s << "model\t" << label << "\nauc\t" << buf << "\n";
    std::snprintf(buf, sizeof buf, "%.17g", report.threshold);
    s << "threshold\t" << buf << "\ntarget_tpr\t" << report.target_tpr << "\ntiles\t" << report.tiles
      << "\npositives\t" << report.curve.positives << "\nnegatives\t" << report.curve.negatives << "\n";
  }
  const TileSet names = tiles(Split::Test);
  const OverlayOpacities op{config_.eval.heatmap_opacity, config_.eval.tile_opacity};
  for (int i = 0; i < config_.eval.heatmaps && i < static_cast<int>(samples.size()); ++i)
    save_color_image(dir / "heatmaps" / (names.names[i] + ".png"),
                     render_heatmap_overlay(inputs[i], residuals[i], op).side_by_side());
  write_effective_config(dir);
  log_ << "eval: model " << label << ", " << report.tiles << " tiles, auc " << report.curve.auc << ", threshold "
       << report.threshold << " at tpr >= " << report.target_tpr << "\n";
  return report;
}

std::vector<fs::path> Pipeline::synth_preview(int count) {
  if (count < 1) throw ParameterError("preview count must be >= 1");
  tile();
  TileSet source = fs::exists(work() / "cluster" / "selection.tsv") ? selected("train") : tiles(Split::Train);
  if (source.pixels.empty()) throw ValidationError("no training tiles to preview");
  const TexturePool pool = texture_pool();
  const fs::path dir = work() / "preview";
  fs::create_directories(dir);
  std::vector<fs::path> out;
  char name[64];
  for (int i = 0; i < count; ++i) {
    const auto idx = static_cast<std::size_t>(i) % source.pixels.size();
    const SyntheticSample s =
        make_sample(source.pixels[idx], pool, config_.augment, derive_seed(config_.seed, {kSeedPreview, std::uint64_t(i)}));
    std::snprintf(name, sizeof name, "sample_%03d.png", i);
    save_image(dir / name, strip({s.clean, s.input, s.mask.cast<double>()}));
    out.push_back(dir / name);
  }
  log_ << "synth-preview: wrote " << out.size() << " samples to " << dir.string() << "\n";
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::string arg(const CommandLine& cmd, const std::string& key, const std::string& fallback = {}) {
  const auto it = cmd.args.find(key);
  return it == cmd.args.end() ? fallback : it->second;
}

int parse_count(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int n = std::stoi(v, &used);
    if (used == v.size()) return n;
  } catch (const std::exception&) {
  }
  throw ConfigError("--" + key + " expects an integer, got '" + v + "'");
}

}  // namespace

int run_subcommand(const CommandLine& cmd, std::ostream& out, std::ostream& err) {
  try {
    ResolvedConfig resolved = resolve_config(cmd.config_file, cmd.overrides);
    const PipelineConfig& cfg = resolved.config;
    const std::string& sub = cmd.subcommand;

    if (sub == "print-config") {
      out << render_config(cfg, cmd.annotate ? &resolved.sources : nullptr);
      return kExitOk;
    }
    cfg.validate();
    if (sub == "ssim") {
      const std::string a = arg(cmd, "a"), b = arg(cmd, "b");
      if (a.empty() || b.empty()) throw ConfigError("ssim needs two image paths");
      const double score = ssim_score(load_image(a).pixels, load_image(b).pixels, cfg.loss.ssim());
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.10f", score);
      out << buf << "\n";
      return kExitOk;
    }
    if (sub == "make-desk-data") {
      const std::string dir = arg(cmd, "out");
      if (dir.empty()) throw ConfigError("make-desk-data needs --out");
      DeskCorpusOptions o;
      if (cmd.args.count("boards")) o.boards = parse_count("boards", arg(cmd, "boards"));
      if (cmd.args.count("textures")) o.textures = parse_count("textures", arg(cmd, "textures"));
      o.seed = cfg.seed;
      write_desk_corpus(dir, o);
      out << "wrote " << o.boards << " boards and " << o.textures << " textures to " << dir << " (config: " << dir
          << "/desk.ini)\n";
      return kExitOk;
    }
    if (sub == "heatmap") {
      const std::string tile_path = arg(cmd, "tile"), out_path = arg(cmd, "out");
      if (tile_path.empty() || out_path.empty()) throw ConfigError("heatmap needs --tile and --out");
      const fs::path model_path = arg(cmd, "model", (fs::path(cfg.paths.work_dir) / "train" / "best.ckpt").string());
      const ModelWeights w = load(model_path, cfg.network());
      const Image tile = load_image(tile_path).pixels;
      const AnomalyMap m = anomaly_map(w, tile, 0.0);
      save_color_image(out_path, render_heatmap_overlay(tile, m.residual, {cfg.eval.heatmap_opacity,
                                                                           cfg.eval.tile_opacity})
                                     .side_by_side());
      out << "wrote " << out_path << "\n";
      return kExitOk;
    }

    static const std::set<std::string> stages = {"ingest", "tile", "cluster", "synth-preview", "train", "eval"};
    if (!stages.count(sub)) throw ConfigError("unknown subcommand '" + sub + "'");

    WorkDirLock lock(cfg.paths.work_dir);
    Pipeline p(cfg, out, cmd.force);
    p.force_only(sub);
    StageReport r;
    if (sub == "ingest") r = p.ingest();
    else if (sub == "tile") r = p.tile();
    else if (sub == "cluster") r = p.cluster();
    else if (sub == "train") r = p.train();
    else if (sub == "synth-preview") {
      p.synth_preview(parse_count("count", arg(cmd, "count", "8")));
      return kExitOk;
    } else {
      const std::string model = arg(cmd, "model", "best");
      if (model == "identity") {
        p.evaluate(identity_reconstructor(), "identity");
      } else {
        const fs::path path = model == "best" ? p.best_checkpoint() : fs::path(model);
        const ModelWeights w = load(path, cfg.network());
        p.evaluate(network_reconstructor(w, cfg.train.batch_size), path.string());
      }
      return kExitOk;
    }
    if (r.skipped) out << r.stage << ": " << r.detail << " (use --force to redo)\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace defectloc
