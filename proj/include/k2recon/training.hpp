#pragma once

// Self-supervised (and supervised) training of the unrolled network: losses,
// Adam, the epoch loop, checkpoints and the per-epoch NDJSON log.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <future>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "k2recon/container.hpp"
#include "k2recon/dataset.hpp"
#include "k2recon/metrics.hpp"
#include "k2recon/unrolled.hpp"

namespace k2recon {

enum class LossKind { l2, l1, mixed };
enum class Supervision { self, full };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::l2: return "l2";
    case LossKind::l1: return "l1";
    default: return "mixed";
  }
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "l2") return LossKind::l2;
  if (s == "l1") return LossKind::l1;
  if (s == "mixed") return LossKind::mixed;
  throw ConfigError("unknown loss kind '" + s + "' (expected l2, l1 or mixed)");
}

inline const char* to_string(Supervision s) { return s == Supervision::self ? "self" : "full"; }

inline Supervision parse_supervision(const std::string& s) {
  if (s == "self") return Supervision::self;
  if (s == "full") return Supervision::full;
  throw ConfigError("unknown supervision '" + s + "' (expected self or full)");
}

// ---------------------------------------------------------------------------
// Losses

namespace detail {

inline double guarded(double denom) { return denom > 0.0 ? denom : 1.0; }

/// ||d||_2 / n2 + ||d||_1 / n1 depending on kind; d already on the tape.
inline ndgrad::Var normalized_distance(ndgrad::Var diff, double n2, double n1, LossKind kind) {
  using namespace ndgrad;
  switch (kind) {
    case LossKind::l2: return scale(reduce(diff, ReduceKind::l2norm), 1.0 / guarded(n2));
    case LossKind::l1: return scale(reduce(diff, ReduceKind::l1norm), 1.0 / guarded(n1));
    default:
      return add(scale(reduce(diff, ReduceKind::l2norm), 1.0 / guarded(n2)),
                 scale(reduce(diff, ReduceKind::l1norm), 1.0 / guarded(n1)));
  }
}

inline std::pair<double, double> norms(const Tensor& t) {
  double s2 = 0.0, s1 = 0.0;
  for (double v : t.data()) {
    s2 += v * v;
    s1 += std::abs(v);
  }
  return {std::sqrt(s2), s1};
}

}  // namespace detail

/// Distance between the network's coil k-space and the measurements, restricted
/// to Lambda and normalized by the measurements' norm there. l1 sums absolute
/// real and imaginary parts.
inline ndgrad::Var self_supervised_loss(ndgrad::Var x_out, const ComplexTensor& y_omega, const MaskGrid& lambda_mask,
                                        std::shared_ptr<const CoilSensitivities> coils, LossKind kind) {
  if (lambda_mask.count() == 0) throw ConfigError("self_supervised_loss: the loss mask Lambda is empty");
  coils->require_kspace(y_omega, "self_supervised_loss");
  ndgrad::Tape& tape = *x_out.tape();
  ndgrad::Var k = to_kspace(x_out, coils);
  const Tensor m = mask_tensor(lambda_mask, k.shape());
  Tensor y = y_omega.to_tensor();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= m[i];
  const auto [n2, n1] = detail::norms(y);
  ndgrad::Var diff = ndgrad::sub(ndgrad::mul(k, tape.constant(m)), tape.constant(std::move(y)));
  return detail::normalized_distance(diff, n2, n1, kind);
}

/// Image-domain distance normalized by the reference; a zero reference falls
/// back to an unnormalized distance.
inline ndgrad::Var supervised_loss(ndgrad::Var x_out, const ComplexTensor& x_ref, LossKind kind) {
  const Tensor ref = x_ref.to_tensor();
  if (ref.shape() != x_out.shape()) {
    throw ContractViolation("supervised_loss: shape mismatch " + ndgrad::to_string(x_out.shape()) + " vs " +
                            ndgrad::to_string(ref.shape()));
  }
  const auto [n2, n1] = detail::norms(ref);
  ndgrad::Var diff = ndgrad::sub(x_out, x_out.tape()->constant(ref));
  return detail::normalized_distance(diff, n2, n1, kind);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const std::vector<Tensor>& params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter is touched.
inline void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                      const std::vector<std::string>& names = {}) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ContractViolation("adam_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ContractViolation("adam_step: gradient shape mismatch for parameter " + std::to_string(i));
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) {
        throw NumericalBreakdown("adam_step: non-finite gradient for parameter '" +
                                 (i < names.size() ? names[i] : std::to_string(i)) + "'");
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

/// Rescales so the global L2 norm is at most max_norm; returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& g : grads) {
    for (double v : g.data()) ss += v * v;
  }
  const double total = std::sqrt(ss);
  if (max_norm > 0.0 && total > max_norm) {
    const double s = max_norm / total;
    for (auto& g : grads) {
      for (double& v : g.data()) v *= s;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  std::size_t unroll = 5;
  std::size_t features = DenoiserParams::kDefaultFeatures;
  std::size_t depth = DenoiserParams::kDefaultDepth;
  double leaky_slope = 0.01;
  bool per_step_lambda = false;
  CgOptions cg = CgOptions::network();
  std::uint64_t init_seed = 0;

  void validate() const {
    if (unroll < 1) throw ConfigError("model: unroll K must be >= 1");
    if (features < 1) throw ConfigError("model: features must be >= 1");
    if (depth < 2) throw ConfigError("model: depth must be >= 2");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("model: leaky_slope must be in (0,1)");
    if (!(cg.tol > 0.0) || cg.max_iter < 1) throw ConfigError("model: invalid CG settings");
  }

  DenoiserParams init_params() const {
    return DenoiserParams::init(init_seed, features, depth, per_step_lambda ? unroll : 1, leaky_slope);
  }
};

struct TrainConfig {
  double lr = 5e-4;
  std::size_t batch_size = 2;
  std::size_t epochs = 100;
  LossKind loss = LossKind::mixed;
  double rho = 0.4;
  CalibrationSchedule schedule;
  std::uint64_t seed = 0;
  Supervision supervision = Supervision::self;
  double clip_norm = 1.0;
  std::size_t threads = 1;

  void validate(std::size_t unroll) const {
    if (!(lr > 0.0)) throw ConfigError("train: lr must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("train: rho must be in (0,1)");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
    schedule.validate(unroll);
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"unroll", c.unroll}, {"features", c.features},       {"depth", c.depth},
          {"leaky_slope", c.leaky_slope}, {"per_step_lambda", c.per_step_lambda},
          {"cg_tol", c.cg.tol},   {"cg_max_iter", c.cg.max_iter}, {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  try {
    c.unroll = j.value("unroll", c.unroll);
    c.features = j.value("features", c.features);
    c.depth = j.value("depth", c.depth);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.per_step_lambda = j.value("per_step_lambda", c.per_step_lambda);
    c.cg.tol = j.value("cg_tol", c.cg.tol);
    c.cg.max_iter = j.value("cg_max_iter", c.cg.max_iter);
    c.init_seed = j.value("init_seed", c.init_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const CalibrationSchedule& s) {
  return {{"keep_prob", s.keep_prob},
          {"enabled_steps", s.enabled_steps},
          {"resample_each_batch", s.resample_each_batch},
          {"seed", s.seed}};
}

inline CalibrationSchedule schedule_from_json(const nlohmann::json& j, CalibrationSchedule s = {}) {
  s.keep_prob = j.value("keep_prob", s.keep_prob);
  s.enabled_steps = j.value("enabled_steps", s.enabled_steps);
  s.resample_each_batch = j.value("resample_each_batch", s.resample_each_batch);
  s.seed = j.value("seed", s.seed);
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"loss", to_string(c.loss)},
          {"rho", c.rho},
          {"schedule", to_json(c.schedule)},
          {"seed", c.seed},
          {"supervision", to_string(c.supervision)},
          {"clip_norm", c.clip_norm},
          {"threads", c.threads}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    if (j.contains("loss")) c.loss = parse_loss_kind(j["loss"].get<std::string>());
    c.rho = j.value("rho", c.rho);
    if (j.contains("schedule")) c.schedule = schedule_from_json(j["schedule"], c.schedule);
    c.seed = j.value("seed", c.seed);
    if (j.contains("supervision")) c.supervision = parse_supervision(j["supervision"].get<std::string>());
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

inline UnrollConfig unroll_config(const ModelConfig& model, const CalibrationSchedule& schedule, Mode mode) {
  UnrollConfig u;
  u.depth = model.unroll;
  u.mode = mode;
  u.schedule = schedule;
  u.cg = model.cg;
  return u;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "k2recon-checkpoint";

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  DenoiserParams params;
  std::optional<AdamState> adam;
  std::size_t epochs_done = 0;
  std::size_t best_epoch = 0;
  double best_score = -std::numeric_limits<double>::infinity();
};

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& c) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json tensors = nlohmann::json::array();
  const auto named = c.params.named_tensors();
  for (const auto& [name, t] : named) {
    tensors.push_back({{"name", name}, {"array", container::to_json(container::write_array(dir, name + ".bin", t))}});
  }
  nlohmann::json j{{"format", kCheckpointFormat},
                   {"version", kCheckpointVersion},
                   {"model", to_json(c.model)},
                   {"train", to_json(c.train)},
                   {"tensors", tensors},
                   {"epochs_done", c.epochs_done},
                   {"best_epoch", c.best_epoch},
                   {"best_score", std::isfinite(c.best_score) ? nlohmann::json(c.best_score) : nlohmann::json(nullptr)}};
  if (c.adam) {
    nlohmann::json m = nlohmann::json::array(), v = nlohmann::json::array();
    for (std::size_t i = 0; i < named.size(); ++i) {
      m.push_back(container::to_json(container::write_array(dir, "adam_m." + named[i].first + ".bin", c.adam->m[i])));
      v.push_back(container::to_json(container::write_array(dir, "adam_v." + named[i].first + ".bin", c.adam->v[i])));
    }
    j["adam"] = {{"step", c.adam->step}, {"beta1", c.adam->beta1}, {"beta2", c.adam->beta2}, {"eps", c.adam->eps},
                 {"m", m}, {"v", v}};
  }
  j["leaky_slope"] = c.params.leaky_slope;
  container::write_json(dir / "manifest.json", j);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto j = container::read_manifest(dir, kCheckpointFormat, kCheckpointVersion);
  Checkpoint c;
  try {
    c.model = model_config_from_json(j.at("model"));
    c.train = train_config_from_json(j.at("train"));
    c.params = c.model.init_params();
    std::vector<std::pair<std::string, Tensor>> named;
    for (const auto& t : j.at("tensors")) {
      named.emplace_back(t.at("name").get<std::string>(), container::read_real(dir, container::record_from_json(t.at("array"))));
    }
    c.params.assign_named(named);
    c.params.leaky_slope = j.value("leaky_slope", c.model.leaky_slope);
    c.epochs_done = j.value("epochs_done", std::size_t{0});
    c.best_epoch = j.value("best_epoch", std::size_t{0});
    if (j.contains("best_score") && j["best_score"].is_number()) c.best_score = j["best_score"].get<double>();
    if (j.contains("adam")) {
      const auto& a = j["adam"];
      AdamState s;
      s.step = a.at("step").get<std::uint64_t>();
      s.beta1 = a.at("beta1").get<double>();
      s.beta2 = a.at("beta2").get<double>();
      s.eps = a.at("eps").get<double>();
      for (const auto& r : a.at("m")) s.m.push_back(container::read_real(dir, container::record_from_json(r)));
      for (const auto& r : a.at("v")) s.v.push_back(container::read_real(dir, container::record_from_json(r)));
      if (s.m.size() != named.size() || s.v.size() != named.size()) throw CorruptDataset("adam state count mismatch");
      c.adam = std::move(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataset((dir / "manifest.json").string() + ": " + e.what());
  } catch (const ContractViolation& e) {
    throw CorruptDataset((dir / "manifest.json").string() + ": " + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::optional<double> val_psnr;
  std::optional<double> val_ssim;
  std::optional<double> val_loss;
  double lr = 0.0;
  double seconds = 0.0;
  std::size_t optimizer_steps = 0;  // cumulative
};

inline nlohmann::json to_json(const EpochLog& e) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", e.epoch},       {"train_loss", e.train_loss}, {"val_psnr", opt(e.val_psnr)},
          {"val_ssim", opt(e.val_ssim)}, {"val_loss", opt(e.val_loss)}, {"lr", e.lr},
          {"seconds", e.seconds},   {"optimizer_steps", e.optimizer_steps}};
}

struct TrainResult {
  DenoiserParams final_params;
  DenoiserParams best_params;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
  std::size_t optimizer_steps = 0;
};

struct TrainIo {
  /// When set: writes log.ndjson, last/ and best/ checkpoints here.
  std::optional<std::filesystem::path> out_dir;
  /// Continue from a checkpoint written by a previous run (usually <out_dir>/last).
  std::optional<std::filesystem::path> resume_from;
  /// Stop after this many epochs in this invocation (simulates an interruption).
  std::optional<std::size_t> max_epochs_this_run;
  std::function<void(const EpochLog&)> on_epoch;
};

struct SampleGradient {
  double loss = 0.0;
  std::vector<Tensor> grads;
};

/// Forward + backward for one training sample. All randomness derives from
/// (seed, epoch, sample index, batch index), so results do not depend on thread
/// scheduling or on where a resumed run restarted.
inline SampleGradient sample_gradient(const DenoiserParams& params, const ModelConfig& model, const TrainConfig& cfg,
                                      const Sample& s, std::size_t epoch, std::size_t sample_index, std::size_t batch) {
  ndgrad::Tape tape;
  const DenoiserVars vars = DenoiserVars::bind(tape, params, true);
  const UnrollConfig ucfg = unroll_config(model, cfg.schedule, Mode::train);
  Rng batch_rng = make_rng(derive_seed(cfg.seed, epoch, batch, sample_index, 0xCA1B));
  ndgrad::Var loss;
  if (cfg.supervision == Supervision::self) {
    const SplitMasks split = split_mask(s.omega, cfg.rho, derive_seed(cfg.seed, epoch, sample_index, 0x5B11));
    const EncodingOperator op(s.coils, split.theta);
    const auto out = unrolled_forward(vars, ucfg, op, s.measured(split.theta), batch_rng);
    loss = self_supervised_loss(out.x, s.measured(), split.lambda, s.coils, cfg.loss);
  } else {
    if (!s.ground_truth) throw ConfigError("supervised training needs ground truth for sample " + s.id);
    const auto out = unrolled_forward(vars, ucfg, s.omega_operator(), s.measured(), batch_rng);
    loss = supervised_loss(out.x, *s.ground_truth, cfg.loss);
  }
  const auto g = tape.backward(loss);
  return {loss.value().item(), vars.collect(g)};
}

struct Validation {
  std::optional<double> psnr, ssim, loss;
  /// Higher is better.
  double score() const {
    if (psnr) return *psnr;
    if (loss) return -*loss;
    return 0.0;
  }
};

/// Mean PSNR/SSIM when every sample has ground truth; otherwise the mean
/// self-supervised loss on a fixed held-out Lambda split.
inline Validation validate(const DenoiserParams& params, const ModelConfig& model, const TrainConfig& cfg,
                           const std::vector<const Sample*>& samples) {
  Validation v;
  if (samples.empty()) return v;
  bool all_gt = true;
  for (const auto* s : samples) all_gt = all_gt && s->ground_truth.has_value();
  const UnrollConfig ucfg = unroll_config(model, cfg.schedule, Mode::eval);
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = *samples[i];
    if (all_gt) {
      const ComplexTensor x = reconstruct(params, ucfg, s.omega_operator(), s.measured());
      a += psnr(x, *s.ground_truth);
      if (s.height() >= 11 && s.width() >= 11) b += ssim(x, *s.ground_truth);
    } else {
      const SplitMasks split = split_mask(s.omega, cfg.rho, derive_seed(cfg.seed, 0xFA11, i));
      ndgrad::Tape tape;
      const DenoiserVars vars = DenoiserVars::bind(tape, params, false);
      Rng unused = make_rng(0);
      const auto out = unrolled_forward(vars, ucfg, EncodingOperator(s.coils, split.theta), s.measured(split.theta), unused);
      a += self_supervised_loss(out.x, s.measured(), split.lambda, s.coils, cfg.loss).value().item();
    }
  }
  const double n = static_cast<double>(samples.size());
  if (all_gt) {
    v.psnr = a / n;
    v.ssim = b / n;
  } else {
    v.loss = a / n;
  }
  return v;
}

inline TrainResult train(const Dataset& data, const ModelConfig& model, const TrainConfig& cfg, const TrainIo& io = {}) {
  namespace fs = std::filesystem;
  model.validate();
  cfg.validate(model.unroll);
  const auto train_set = data.split("train");
  if (train_set.empty()) throw ConfigError("train: dataset has no training samples");
  const auto val_set = data.split("val");

  Checkpoint state;
  state.model = model;
  state.train = cfg;
  state.params = model.init_params();
  if (io.resume_from) {
    Checkpoint loaded = load_checkpoint(*io.resume_from);
    if (to_json(loaded.model) != to_json(model)) throw ConfigError("resume: checkpoint model config differs from requested");
    state.params = std::move(loaded.params);
    state.adam = std::move(loaded.adam);
    state.epochs_done = loaded.epochs_done;
    state.best_epoch = loaded.best_epoch;
    state.best_score = loaded.best_score;
  }
  auto names_and_tensors = state.params.named_tensors();
  std::vector<std::string> names;
  std::vector<Tensor> flat;
  for (auto& [n, t] : names_and_tensors) {
    names.push_back(n);
    flat.push_back(std::move(t));
  }
  if (!state.adam) state.adam = AdamState::for_params(flat);

  TrainResult result;
  result.optimizer_steps = state.adam->step;
  DenoiserParams best = state.params;
  if (io.out_dir) {
    fs::create_directories(*io.out_dir);
    // A fresh run starts a fresh log; a resumed run appends to it.
    if (!io.resume_from) fs::remove(*io.out_dir / "log.ndjson");
    if (io.resume_from && fs::exists(*io.out_dir / "best" / "manifest.json")) {
      best = load_checkpoint(*io.out_dir / "best").params;
    }
  }

  std::size_t run_epochs = 0;
  for (std::size_t epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    if (io.max_epochs_this_run && run_epochs >= *io.max_epochs_this_run) break;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(derive_seed(cfg.seed, epoch, 0x5F));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(shuffle_rng)]);
    }

    double loss_sum = 0.0;
    const std::size_t nbatch = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    for (std::size_t b = 0; b < nbatch; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      std::vector<SampleGradient> parts(hi - lo);
      auto run = [&](std::size_t j) {
        const std::size_t idx = order[lo + j];
        parts[j] = sample_gradient(state.params, model, cfg, *train_set[idx], epoch, idx, b);
      };
      if (cfg.threads > 1 && parts.size() > 1) {
        std::vector<std::future<void>> jobs;
        for (std::size_t j = 0; j < parts.size(); ++j) {
          if (jobs.size() >= cfg.threads) {
            jobs.front().get();
            jobs.erase(jobs.begin());
          }
          jobs.push_back(std::async(std::launch::async, run, j));
        }
        for (auto& f : jobs) f.get();
      } else {
        for (std::size_t j = 0; j < parts.size(); ++j) run(j);
      }
      // Reduce in sample order so the sum is independent of scheduling.
      std::vector<Tensor> grads = parts[0].grads;
      loss_sum += parts[0].loss;
      for (std::size_t j = 1; j < parts.size(); ++j) {
        loss_sum += parts[j].loss;
        for (std::size_t p = 0; p < grads.size(); ++p) {
          auto dst = grads[p].data();
          auto src = parts[j].grads[p].data();
          for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += src[q];
        }
      }
      const double inv = 1.0 / static_cast<double>(parts.size());
      for (auto& g : grads) {
        for (double& v : g.data()) v *= inv;
      }
      clip_global_norm(grads, cfg.clip_norm);
      auto named = state.params.named_tensors();
      for (std::size_t p = 0; p < flat.size(); ++p) flat[p] = std::move(named[p].second);
      adam_step(flat, grads, *state.adam, cfg.lr, names);
      std::vector<std::pair<std::string, Tensor>> updated;
      for (std::size_t p = 0; p < flat.size(); ++p) updated.emplace_back(names[p], flat[p]);
      state.params.assign_named(updated);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / static_cast<double>(order.size());
    entry.lr = cfg.lr;
    entry.optimizer_steps = state.adam->step;
    const Validation val = validate(state.params, model, cfg, val_set);
    entry.val_psnr = val.psnr;
    entry.val_ssim = val.ssim;
    entry.val_loss = val.loss;
    entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    state.epochs_done = epoch;
    const bool improved = val_set.empty() || val.score() > state.best_score;
    if (improved) {
      state.best_score = val_set.empty() ? state.best_score : val.score();
      state.best_epoch = epoch;
      best = state.params;
    }
    if (io.out_dir) {
      Checkpoint last = state;
      save_checkpoint(*io.out_dir / "last", last);
      if (improved) {
        Checkpoint b = state;
        b.adam.reset();
        save_checkpoint(*io.out_dir / "best", b);
      }
      std::ofstream log(*io.out_dir / "log.ndjson", std::ios::app);
      if (!log) throw IoError("cannot append to " + (*io.out_dir / "log.ndjson").string());
      log << to_json(entry).dump() << '\n';
    }
    if (io.on_epoch) io.on_epoch(entry);
    result.log.push_back(entry);
    ++run_epochs;
  }
  result.final_params = state.params;
  result.best_params = best;
  result.best_epoch = state.best_epoch;
  result.optimizer_steps = state.adam->step;
  return result;
}

}  // namespace k2recon
