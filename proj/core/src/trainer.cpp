#include "defectloc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace defectloc {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ParameterError("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ParameterError("betas must be in [0,1)");
  if (!(eps > 0.0)) throw ParameterError("eps must be > 0");
  if (!(plateau.factor > 0.0 && plateau.factor < 1.0)) throw ParameterError("plateau factor must be in (0,1)");
  if (plateau.patience < 1 || early_stop.patience < 1) throw ParameterError("patience must be >= 1");
  if (plateau.threshold < 0.0 || plateau.eps < 0.0 || plateau.min_lr < 0.0 || plateau.cooldown < 0)
    throw ParameterError("plateau threshold, eps, min_lr and cooldown must be >= 0");
  if (early_stop.min_delta < 0.0) throw ParameterError("min_delta must be >= 0");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (max_epochs < 1) throw ParameterError("max_epochs must be >= 1");
}

// ---------------------------------------------------------------------------

PlateauScheduler::PlateauScheduler(double initial_lr, PlateauConfig cfg) : cfg_(cfg), lr_(initial_lr) {}

bool PlateauScheduler::step(double metric) {
  if (metric < best_ * (1.0 - cfg_.threshold)) {
    best_ = metric;
    num_bad_ = 0;
  } else {
    ++num_bad_;
  }
  if (cooldown_counter_ > 0) {
    --cooldown_counter_;
    num_bad_ = 0;
  }
  if (num_bad_ <= cfg_.patience) return false;
  const double next = std::max(lr_ * cfg_.factor, cfg_.min_lr);
  cooldown_counter_ = cfg_.cooldown;
  num_bad_ = 0;
  if (lr_ - next <= cfg_.eps) return false;
  lr_ = next;
  ++reductions_;
  return true;
}

void PlateauScheduler::restore(double lr, double best, int num_bad, int cooldown_counter, int reductions) {
  lr_ = lr;
  best_ = best;
  num_bad_ = num_bad;
  cooldown_counter_ = cooldown_counter;
  reductions_ = reductions;
}

bool EarlyStopping::step(double metric, int epoch) {
  if (metric < best_ - cfg_.min_delta) {
    best_ = metric;
    best_epoch_ = epoch;
    wait_ = 0;
  } else {
    ++wait_;
  }
  return wait_ >= cfg_.patience;
}

void EarlyStopping::restore(double best, int best_epoch, int wait) {
  best_ = best;
  best_epoch_ = best_epoch;
  wait_ = wait;
}

// ---------------------------------------------------------------------------

TrainingController::TrainingController(const TrainConfig& cfg)
    : cfg_(cfg), scheduler_(cfg.lr, cfg.plateau), early_(cfg.early_stop) {
  cfg_.validate();
  state_.current_lr = cfg.lr;
}

TrainingController::Decision TrainingController::end_epoch(const LossBreakdown& train, const LossBreakdown& val) {
  Decision d;
  const int epoch = state_.epoch;
  state_.history.push_back({epoch, train, val, scheduler_.lr()});

  if (val.total < state_.best_val_loss) {
    state_.best_val_loss = val.total;
    state_.best_epoch = epoch;
    d.new_best = true;
  }
  d.stop = early_.step(val.total, epoch);
  state_.epochs_since_best = early_.wait();

  d.lr_reduced = scheduler_.step(val.total);
  state_.epochs_since_plateau_improve = scheduler_.num_bad_epochs();
  state_.plateau_triggers = scheduler_.reductions();
  state_.current_lr = scheduler_.lr();

  state_.epoch = epoch + 1;
  if (d.stop)
    state_.stop_reason = "early_stop";
  else if (state_.epoch >= cfg_.max_epochs) {
    d.stop = true;
    state_.stop_reason = "max_epochs";
  }
  return d;
}

void TrainingController::restore(const TrainState& state, const PlateauScheduler& scheduler,
                                 const EarlyStopping& early) {
  state_ = state;
  scheduler_ = scheduler;
  early_ = early;
}

// ---------------------------------------------------------------------------

Adam::Adam(const ModelWeights& weights, const TrainConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), amsgrad_(cfg.amsgrad) {
  for (const auto& t : weights.tensors) {
    names_.push_back(t.name);
    const std::size_t n = t.trainable ? t.values.size() : 0;
    m_.emplace_back(n, 0.0);
    v_.emplace_back(n, 0.0);
    vmax_.emplace_back(amsgrad_ ? n : 0, 0.0);
  }
}

void Adam::step(ModelWeights& weights, const std::vector<std::vector<double>>& grads, double lr) {
  if (grads.size() != weights.tensors.size() || weights.tensors.size() != m_.size())
    throw ValidationError("optimizer state does not match the weights");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double step_size = lr / bc1;
  const double sqrt_bc2 = std::sqrt(bc2);
  for (std::size_t i = 0; i < weights.tensors.size(); ++i) {
    auto& p = weights.tensors[i];
    if (!p.trainable) continue;
    const auto& g = grads[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.values.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      double second = v[j];
      if (amsgrad_) {
        vmax_[i][j] = std::max(vmax_[i][j], v[j]);
        second = vmax_[i][j];
      }
      p.values[j] -= step_size * m[j] / (std::sqrt(second) / sqrt_bc2 + eps_);
    }
  }
}

std::vector<NamedTensor> Adam::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (m_[i].empty()) continue;
    const int n = static_cast<int>(m_[i].size());
    out.push_back({"adam.m." + names_[i], {n}, m_[i], false});
    out.push_back({"adam.v." + names_[i], {n}, v_[i], false});
    if (amsgrad_) out.push_back({"adam.vmax." + names_[i], {n}, vmax_[i], false});
  }
  return out;
}

void Adam::restore(const std::vector<NamedTensor>& state, std::int64_t steps) {
  for (const auto& t : state) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      std::vector<double>* dst = nullptr;
      if (t.name == "adam.m." + names_[i]) dst = &m_[i];
      else if (t.name == "adam.v." + names_[i]) dst = &v_[i];
      else if (t.name == "adam.vmax." + names_[i]) dst = &vmax_[i];
      if (!dst) continue;
      if (dst->size() != t.values.size()) throw CompatibilityError("optimizer state '" + t.name + "' has wrong size");
      *dst = t.values;
    }
  }
  t_ = steps;
}

// ---------------------------------------------------------------------------

SyntheticStream::SyntheticStream(std::vector<Image> tiles, const TexturePool& pool, AugmentConfig cfg,
                                 std::uint64_t seed, bool frozen)
    : tiles_(std::move(tiles)), pool_(&pool), cfg_(cfg), seed_(seed), frozen_(frozen) {
  cfg_.validate();
}

SyntheticSample SyntheticStream::sample(std::size_t index, std::size_t epoch) const {
  return make_sample(tiles_.at(index), *pool_, cfg_, derive_seed(seed_, {frozen_ ? 0 : epoch, index}));
}

namespace {

struct Batch {
  std::vector<Image> inputs;
  std::vector<Image> targets;
  std::vector<Mask> masks;
};

Batch gather(const SampleStream& stream, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
             std::size_t epoch) {
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    SyntheticSample s = stream.sample(order[i], epoch);
    b.inputs.push_back(std::move(s.input));
    b.targets.push_back(std::move(s.clean));
    b.masks.push_back(std::move(s.mask));
  }
  return b;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string describe(const LossBreakdown& b) {
  return "mse=" + fmt(b.mse) + " ssim_term=" + fmt(b.ssim_term) + " overlay_mse=" + fmt(b.overlay_mse) +
         " total=" + fmt(b.total);
}

bool finite(const LossBreakdown& b) {
  return std::isfinite(b.mse) && std::isfinite(b.ssim_term) && std::isfinite(b.overlay_mse) && std::isfinite(b.total);
}

std::string encode_history(const std::vector<EpochRecord>& history) {
  std::string out;
  for (const auto& r : history) {
    out += std::to_string(r.epoch);
    for (double v : {r.train.mse, r.train.ssim_term, r.train.overlay_mse, r.train.total, r.val.mse, r.val.ssim_term,
                     r.val.overlay_mse, r.val.total, r.lr})
      out += " " + fmt(v);
    out += "\n";
  }
  return out;
}

std::vector<EpochRecord> decode_history(const std::string& text) {
  std::vector<EpochRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    EpochRecord r;
    std::string f[9];
    ls >> r.epoch;
    for (auto& s : f) ls >> s;
    if (!ls) throw LoadError("checkpoint", "malformed training history");
    r.train = {std::stod(f[0]), std::stod(f[1]), std::stod(f[2]), std::stod(f[3])};
    r.val = {std::stod(f[4]), std::stod(f[5]), std::stod(f[6]), std::stod(f[7])};
    r.lr = std::stod(f[8]);
    out.push_back(r);
  }
  return out;
}

double attr_double(const std::map<std::string, std::string>& a, const std::string& key) {
  const auto it = a.find(key);
  if (it == a.end()) throw LoadError("checkpoint", "missing training attribute '" + key + "'");
  return std::stod(it->second);
}

Checkpoint make_last_checkpoint(const ModelWeights& weights, const TrainingController& ctl, const Adam& adam) {
  Checkpoint ck;
  ck.weights = weights;
  const TrainState& s = ctl.state();
  const PlateauScheduler& ps = ctl.scheduler();
  const EarlyStopping& es = ctl.early_stopping();
  auto& a = ck.attributes;
  a["kind"] = "last";
  a["epoch"] = std::to_string(s.epoch);
  a["best_val_loss"] = fmt(s.best_val_loss);
  a["best_epoch"] = std::to_string(s.best_epoch);
  a["stop_reason"] = s.stop_reason;
  a["adam.t"] = std::to_string(adam.steps());
  a["sched.lr"] = fmt(ps.lr());
  a["sched.best"] = fmt(ps.best());
  a["sched.num_bad"] = std::to_string(ps.num_bad_epochs());
  a["sched.cooldown"] = std::to_string(ps.cooldown_counter());
  a["sched.reductions"] = std::to_string(ps.reductions());
  a["early.best"] = fmt(es.best());
  a["early.best_epoch"] = std::to_string(es.best_epoch());
  a["early.wait"] = std::to_string(es.wait());
  a["history"] = encode_history(s.history);
  ck.state = adam.state();
  return ck;
}

}  // namespace

LossBreakdown evaluate_epoch(const ModelWeights& weights, const SampleStream& stream, const LossConfig& loss_cfg,
                             std::size_t epoch, int batch_size) {
  if (stream.size() == 0) throw ParameterError("evaluation stream is empty");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  Network net(weights);
  std::vector<std::size_t> order(stream.size());
  std::iota(order.begin(), order.end(), 0);
  LossBreakdown sum;
  for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
    const std::size_t end = std::min(order.size(), begin + batch_size);
    const Batch b = gather(stream, order, begin, end, epoch);
    const std::vector<Image> recon = net.forward(Tensor::from_images(b.inputs), Mode::Eval).to_images();
    for (std::size_t i = 0; i < recon.size(); ++i)
      sum += compute_loss(std::span(&b.targets[i], 1), std::span(&recon[i], 1), std::span(&b.masks[i], 1), loss_cfg);
  }
  sum /= static_cast<double>(stream.size());
  return sum;
}

std::string log_header() { return "epoch\tsplit\tmse\tssim_term\toverlay_mse\ttotal\tlr"; }

std::string log_lines(const EpochRecord& r) {
  std::string out;
  for (const auto& [split, b] : {std::pair{"train", &r.train}, std::pair{"val", &r.val}}) {
    out += std::to_string(r.epoch) + "\t" + split + "\t" + fmt(b->mse) + "\t" + fmt(b->ssim_term) + "\t" +
           fmt(b->overlay_mse) + "\t" + fmt(b->total) + "\t" + fmt(r.lr) + "\n";
  }
  return out;
}

TrainResult train(const ModelWeights& initial, const SampleStream& train_stream, const SampleStream& val_stream,
                  const LossConfig& loss_cfg, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  loss_cfg.validate();
  if (train_stream.size() == 0) throw ParameterError("training stream is empty");
  if (val_stream.size() == 0) throw ParameterError("validation stream is empty");

  ModelWeights weights = initial;
  TrainResult result{initial, {}};
  TrainingController ctl(cfg);
  Adam adam(weights, cfg);

  namespace fs = std::filesystem;
  const bool persist = !hooks.checkpoint_dir.empty();
  const fs::path best_path = hooks.checkpoint_dir / "best.ckpt";
  const fs::path last_path = hooks.checkpoint_dir / "last.ckpt";
  const fs::path log_path = hooks.checkpoint_dir / "train_log.tsv";
  bool resumed = false;

  if (persist && hooks.resume && fs::exists(last_path)) {
    Checkpoint ck = load_checkpoint(last_path);
    if (ck.weights.config.hash() != initial.config.hash())
      throw CompatibilityError("cannot resume: '" + last_path.string() + "' was trained with another architecture");
    const auto& a = ck.attributes;
    TrainState s;
    s.epoch = static_cast<int>(attr_double(a, "epoch"));
    s.best_val_loss = attr_double(a, "best_val_loss");
    s.best_epoch = static_cast<int>(attr_double(a, "best_epoch"));
    s.stop_reason = a.count("stop_reason") ? a.at("stop_reason") : "";
    if (s.stop_reason == "max_epochs") s.stop_reason.clear();  // the budget may have been raised
    s.history = decode_history(a.count("history") ? a.at("history") : "");
    PlateauScheduler ps(cfg.lr, cfg.plateau);
    ps.restore(attr_double(a, "sched.lr"), attr_double(a, "sched.best"),
               static_cast<int>(attr_double(a, "sched.num_bad")), static_cast<int>(attr_double(a, "sched.cooldown")),
               static_cast<int>(attr_double(a, "sched.reductions")));
    EarlyStopping es(cfg.early_stop);
    es.restore(attr_double(a, "early.best"), static_cast<int>(attr_double(a, "early.best_epoch")),
               static_cast<int>(attr_double(a, "early.wait")));
    s.current_lr = ps.lr();
    s.epochs_since_best = es.wait();
    s.epochs_since_plateau_improve = ps.num_bad_epochs();
    s.plateau_triggers = ps.reductions();
    ctl.restore(s, ps, es);
    weights = ck.weights;
    adam.restore(ck.state, static_cast<std::int64_t>(attr_double(a, "adam.t")));
    result.best = fs::exists(best_path) ? load(best_path, initial.config) : weights;
    resumed = true;
  }

  if (persist) {
    fs::create_directories(hooks.checkpoint_dir);
    if (!resumed) {
      std::ofstream log(log_path, std::ios::trunc);
      log << log_header() << "\n";
    }
  }

  Network net(weights);
  const std::size_t n = train_stream.size();
  std::vector<std::size_t> order(n);

  while (ctl.state().stop_reason.empty() && ctl.state().epoch < cfg.max_epochs) {
    const int epoch = ctl.state().epoch;
    const double lr = ctl.lr();
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, {0x73687566ULL, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

    LossBreakdown train_sum;
    int batch_index = 0;
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(cfg.batch_size));
      const Batch b = gather(train_stream, order, begin, end, static_cast<std::size_t>(epoch));
      const Tensor out = net.forward(Tensor::from_images(b.inputs), Mode::Train);
      const std::vector<Image> recon = out.to_images();
      for (const auto& r : recon)
        if (!r.allFinite())
          throw TrainingError("non-finite reconstruction at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(batch_index));
      std::vector<Image> grad;
      LossBreakdown lb = compute_loss(b.targets, recon, b.masks, loss_cfg, &grad);
      if (!finite(lb))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index) + ": " + describe(lb));
      const auto grads = net.backward(Tensor::from_images(grad));
      adam.step(weights, grads, lr);
      lb *= static_cast<double>(end - begin);
      train_sum += lb;
    }
    train_sum /= static_cast<double>(n);

    const LossBreakdown val = evaluate_epoch(weights, val_stream, loss_cfg, 0, cfg.batch_size);
    if (!finite(val))
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch) + ": " + describe(val));

    const auto decision = ctl.end_epoch(train_sum, val);
    if (decision.new_best) {
      result.best = weights;
      result.best.meta = {epoch, val.total};
      if (persist) save(result.best, best_path);
    }
    if (persist) {
      Checkpoint last = make_last_checkpoint(weights, ctl, adam);
      last.weights.meta = {epoch, val.total};
      save_checkpoint(last, last_path);
      std::ofstream log(log_path, std::ios::app);
      log << log_lines(ctl.state().history.back());
    }
    if (hooks.on_epoch) hooks.on_epoch(ctl.state().history.back());
  }

  result.state = ctl.state();
  return result;
}

}  // namespace defectloc
