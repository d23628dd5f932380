#pragma once

// Reconstruction sets (one image per dataset sample, stored in the container
// format as "k2recon-recon") and the metric report computed from them.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "k2recon/baselines.hpp"
#include "k2recon/container.hpp"
#include "k2recon/dataset.hpp"
#include "k2recon/metrics.hpp"
#include "k2recon/training.hpp"

namespace k2recon {

inline constexpr int kReconVersion = 1;
inline constexpr const char* kReconFormat = "k2recon-recon";

enum class Method { zero_filled, cg_sense, tv, network };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::zero_filled: return "zero-filled";
    case Method::cg_sense: return "cg-sense";
    case Method::tv: return "tv";
    case Method::network: return "network";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::zero_filled, Method::cg_sense, Method::tv, Method::network}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigError("unknown method '" + s + "' (expected zero-filled, cg-sense, tv or network)");
}

struct BaselineConfig {
  double cg_sense_reg = 1e-3;
  double tv_weight = 0.01;
  int tv_iters = 50;

  void validate() const {
    if (!(cg_sense_reg >= 0.0)) throw ConfigError("baselines: cg_sense_reg must be >= 0");
    if (!(tv_weight > 0.0)) throw ConfigError("baselines: tv_weight must be > 0");
    if (tv_iters < 1) throw ConfigError("baselines: tv_iters must be >= 1");
  }
};

inline nlohmann::json to_json(const BaselineConfig& c) {
  return {{"cg_sense_reg", c.cg_sense_reg}, {"tv_weight", c.tv_weight}, {"tv_iters", c.tv_iters}};
}

inline BaselineConfig baseline_config_from_json(const nlohmann::json& j, BaselineConfig c = {}) {
  try {
    c.cg_sense_reg = j.value("cg_sense_reg", c.cg_sense_reg);
    c.tv_weight = j.value("tv_weight", c.tv_weight);
    c.tv_iters = j.value("tv_iters", c.tv_iters);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("baselines config: ") + e.what());
  }
  return c;
}

struct ReconImage {
  std::string id;
  ComplexTensor image;
};

struct ReconSet {
  std::string method;  // free-form label; the table row name
  double acceleration = 0.0;
  std::uint64_t seed = 0;
  std::vector<ReconImage> images;
};

/// Network reconstructions always run in eval mode: no calibration masks.
inline ComplexTensor reconstruct_sample(const Sample& s, Method method, const BaselineConfig& base,
                                        const Checkpoint* net = nullptr) {
  const EncodingOperator op = s.omega_operator();
  const ComplexTensor y = s.measured();
  switch (method) {
    case Method::zero_filled: return zero_filled(op, y);
    case Method::cg_sense: return cg_sense(op, y, base.cg_sense_reg);
    case Method::tv: return tv_reconstruct(op, y, base.tv_weight, base.tv_iters);
    case Method::network:
      if (!net) throw ConfigError("network reconstruction needs a checkpoint");
      return reconstruct(net->params, unroll_config(net->model, net->train.schedule, Mode::eval), op, y);
  }
  throw ConfigError("unknown method");
}

inline ReconSet reconstruct_split(const Dataset& data, const std::string& split, Method method,
                                  const BaselineConfig& base, const Checkpoint* net = nullptr) {
  ReconSet r;
  r.method = to_string(method);
  r.acceleration = data.config.acceleration;
  r.seed = method == Method::network && net ? net->train.seed : data.config.seed;
  for (const Sample* s : data.split(split)) r.images.push_back({s->id, reconstruct_sample(*s, method, base, net)});
  if (r.images.empty()) throw ConfigError("dataset has no '" + split + "' samples to reconstruct");
  return r;
}

inline void write_recon_set(const std::filesystem::path& dir, const ReconSet& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json images = nlohmann::json::array();
  for (const auto& im : r.images) {
    images.push_back({{"id", im.id}, {"array", container::to_json(container::write_array(dir, im.id + ".recon.bin", im.image))}});
  }
  container::write_json(dir / "manifest.json", {{"format", kReconFormat},
                                                {"version", kReconVersion},
                                                {"method", r.method},
                                                {"acceleration", r.acceleration},
                                                {"seed", r.seed},
                                                {"images", images}});
}

inline ReconSet read_recon_set(const std::filesystem::path& dir) {
  const auto m = container::read_manifest(dir, kReconFormat, kReconVersion);
  ReconSet r;
  try {
    r.method = m.at("method").get<std::string>();
    r.acceleration = m.value("acceleration", 0.0);
    r.seed = m.value("seed", std::uint64_t{0});
    for (const auto& j : m.at("images")) {
      r.images.push_back({j.at("id").get<std::string>(), container::read_complex(dir, container::record_from_json(j.at("array")))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataset((dir / "manifest.json").string() + ": " + e.what());
  }
  return r;
}

struct SampleMetrics {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct MetricReport {
  std::string method;
  double acceleration = 0.0;
  std::uint64_t seed = 0;
  std::vector<SampleMetrics> samples;
  double psnr = 0.0;  // mean over samples; +inf only if every sample is exact
  double ssim = 0.0;
};

/// Scores every image of `r` against the ground truth of the matching sample.
inline MetricReport evaluate(const Dataset& data, const ReconSet& r) {
  if (r.images.empty()) throw ConfigError("reconstruction set '" + r.method + "' is empty");
  MetricReport rep{r.method, r.acceleration, r.seed, {}, 0.0, 0.0};
  for (const auto& im : r.images) {
    const Sample* s = nullptr;
    for (const auto& c : data.samples) {
      if (c.id == im.id) s = &c;
    }
    if (!s) throw ConfigError("reconstruction '" + im.id + "' has no matching dataset sample");
    if (!s->ground_truth) throw ConfigError("sample " + im.id + " has no ground truth to score against");
    rep.samples.push_back({im.id, psnr(im.image, *s->ground_truth), ssim(im.image, *s->ground_truth)});
    rep.psnr += rep.samples.back().psnr;
    rep.ssim += rep.samples.back().ssim;
  }
  rep.psnr /= static_cast<double>(rep.samples.size());
  rep.ssim /= static_cast<double>(rep.samples.size());
  return rep;
}

inline nlohmann::json psnr_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json("inf"); }

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : r.samples) per.push_back({{"id", s.id}, {"psnr_db", psnr_json(s.psnr)}, {"ssim", s.ssim}});
  return {{"method", r.method}, {"acceleration", r.acceleration}, {"seed", r.seed},
          {"psnr_db", psnr_json(r.psnr)}, {"ssim", r.ssim}, {"samples", per}};
}

/// Rows are methods; one PSNR/SSIM column pair per acceleration present.
inline std::string render_table(const std::vector<MetricReport>& reports) {
  std::vector<double> accels;
  std::vector<std::string> methods;
  for (const auto& r : reports) {
    if (std::find(accels.begin(), accels.end(), r.acceleration) == accels.end()) accels.push_back(r.acceleration);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  }
  std::sort(accels.begin(), accels.end());
  std::size_t name_w = 6;
  for (const auto& m : methods) name_w = std::max(name_w, m.size());
  auto fmt = [](const char* f, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, f, v);
    return std::string(buf);
  };
  auto pad = [](std::string s, std::size_t w, bool left) {
    if (s.size() < w) s = left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
    return s;
  };
  std::ostringstream out;
  out << pad("Method", name_w, true);
  for (double a : accels) out << " | " << pad(fmt("%gx PSNR", a), 10, false) << "  " << pad("SSIM", 6, false);
  out << '\n' << std::string(name_w, '-');
  for (std::size_t i = 0; i < accels.size(); ++i) out << "-+-" << std::string(18, '-');
  out << '\n';
  for (const auto& m : methods) {
    out << pad(m, name_w, true);
    for (double a : accels) {
      const MetricReport* hit = nullptr;
      for (const auto& r : reports) {
        if (r.method == m && r.acceleration == a) hit = &r;
      }
      if (hit) {
        out << " | " << pad(std::isfinite(hit->psnr) ? fmt("%.2f", hit->psnr) : "inf", 10, false) << "  "
            << pad(fmt("%.4f", hit->ssim), 6, false);
      } else {
        out << " | " << pad("-", 10, false) << "  " << pad("-", 6, false);
      }
    }
    out << '\n';
  }
  return out.str();
}

/// Steps of one training-mode forward on `s` that applied a calibration mask,
/// each checked to contain the Theta support it was drawn around.
inline std::vector<std::size_t> calibrated_steps(const DenoiserParams& params, const ModelConfig& model,
                                                 const TrainConfig& cfg, const Sample& s) {
  UnrollConfig u = unroll_config(model, cfg.schedule, Mode::train);
  u.keep_trace = true;
  const SplitMasks split = split_mask(s.omega, cfg.rho, derive_seed(cfg.seed, 0x7ACE));
  const EncodingOperator op(s.coils, split.theta);
  ndgrad::Tape tape;
  const DenoiserVars vars = DenoiserVars::bind(tape, params, false);
  Rng rng = make_rng(derive_seed(cfg.seed, 0x7ACE, 1));
  std::vector<std::size_t> steps;
  for (const auto& st : unrolled_forward(vars, u, op, s.measured(split.theta), rng).trace) {
    if (!st.calibrated) continue;
    if (!is_subset(split.theta, st.calibration_mask)) {
      throw NumericalBreakdown("calibration mask at step " + std::to_string(st.step) + " drops sampled locations");
    }
    steps.push_back(st.step);
  }
  return steps;
}

struct SweepPoint {
  std::size_t m = 0;  // calibrated unroll steps during training
  double psnr = 0.0;
  double ssim = 0.0;
  std::vector<std::size_t> calibrated;  // from calibrated_steps
};

inline std::string sweep_csv(const std::vector<SweepPoint>& pts) {
  std::ostringstream out;
  out << "m,psnr_db,ssim\n";
  char buf[96];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f\n", p.m, p.psnr, p.ssim);
    out << buf;
  }
  return out.str();
}

/// PSNR against m as a standalone SVG line plot.
inline std::string sweep_svg(const std::vector<SweepPoint>& pts, const std::string& title) {
  if (pts.empty()) throw ConfigError("sweep: no points to plot");
  const double W = 480, H = 320, L = 60, R = 20, T = 40, B = 50;
  double lo = pts[0].psnr, hi = pts[0].psnr;
  std::size_t mmax = 0;
  for (const auto& p : pts) {
    if (!std::isfinite(p.psnr)) throw NumericalBreakdown("sweep: non-finite PSNR at m=" + std::to_string(p.m));
    lo = std::min(lo, p.psnr);
    hi = std::max(hi, p.psnr);
    mmax = std::max(mmax, p.m);
  }
  const double pad = std::max(0.5, 0.1 * (hi - lo));
  lo -= pad;
  hi += pad;
  auto px = [&](double m) { return L + (W - L - R) * (mmax ? m / static_cast<double>(mmax) : 0.5); };
  auto py = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };
  std::ostringstream o;
  char buf[160];
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<path d=\"M%g %g V%g H%g\" stroke=\"black\" fill=\"none\"/>\n", L, T, H - B, W - R);
  o << buf;
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%g\" text-anchor=\"middle\" font-size=\"11\">%zu</text>\n",
                  px(static_cast<double>(p.m)), H - B + 16, p.m);
    o << buf;
  }
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%g\" y=\"%.1f\" text-anchor=\"end\" font-size=\"11\">%.2f</text>\n", L - 6,
                  py(v) + 4, v);
    o << buf;
  }
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << "calibrated steps m</text>\n";
  o << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << (T + H - B) / 2
    << ")\" text-anchor=\"middle\">PSNR (dB)</text>\n";
  o << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%.1f,%.1f ", px(static_cast<double>(p.m)), py(p.psnr));
    o << buf;
  }
  o << "\"/>\n";
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3\" fill=\"#1f77b4\"/>\n",
                  px(static_cast<double>(p.m)), py(p.psnr));
    o << buf;
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace k2recon
