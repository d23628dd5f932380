#pragma once

// Synthetic multi-coil datasets and their on-disk container.
//
// Layout: <dir>/manifest.json plus, per sample, <id>.kspace.bin (complex128
// [ncoil,H,W], fully sampled), <id>.coils.bin (complex128 [ncoil,H,W]),
// <id>.omega.bin (uint8 [H,W]) and optionally <id>.gt.bin (complex128 [H,W]).
// External k-space can be ingested by writing the same layout without gt.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "k2recon/container.hpp"
#include "k2recon/phantom.hpp"
#include "k2recon/sampling.hpp"

namespace k2recon {

inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kDatasetFormat = "k2recon-dataset";

struct DataConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t ncoil = 4;
  double noise_sigma = 0.002;
  std::size_t n_train = 20;
  std::size_t n_val = 5;
  std::size_t n_test = 5;
  double acceleration = 4.0;
  std::size_t acs_lines = 0;  // 0 = default for the acceleration
  MaskKind mask_kind = MaskKind::random_1d;
  PhantomKind phantom = PhantomKind::random_ellipses;
  std::uint64_t seed = 0;

  std::size_t resolved_acs() const { return acs_lines ? acs_lines : default_acs_lines(width, acceleration); }

  void validate() const {
    if (height < 32 || width < 32) {
      throw ConfigError("data: H and W must be >= 32 (got " + std::to_string(height) + "x" + std::to_string(width) + ")");
    }
    if (ncoil < 1) throw ConfigError("data: ncoil must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ConfigError("data: noise_sigma must be >= 0");
    if (n_train + n_val + n_test == 0) throw ConfigError("data: dataset must contain at least one sample");
    if (!(acceleration >= 1.0)) throw ConfigError("data: acceleration must be >= 1");
  }
};

inline nlohmann::json to_json(const DataConfig& c) {
  return {{"height", c.height},         {"width", c.width},     {"ncoil", c.ncoil},
          {"noise_sigma", c.noise_sigma}, {"n_train", c.n_train}, {"n_val", c.n_val},
          {"n_test", c.n_test},         {"acceleration", c.acceleration}, {"acs_lines", c.acs_lines},
          {"mask_kind", to_string(c.mask_kind)}, {"phantom", to_string(c.phantom)}, {"seed", c.seed}};
}

/// Missing keys keep the defaults of `base`.
inline DataConfig data_config_from_json(const nlohmann::json& j, DataConfig base = {}) {
  try {
    base.height = j.value("height", base.height);
    base.width = j.value("width", base.width);
    base.ncoil = j.value("ncoil", base.ncoil);
    base.noise_sigma = j.value("noise_sigma", base.noise_sigma);
    base.n_train = j.value("n_train", base.n_train);
    base.n_val = j.value("n_val", base.n_val);
    base.n_test = j.value("n_test", base.n_test);
    base.acceleration = j.value("acceleration", base.acceleration);
    base.acs_lines = j.value("acs_lines", base.acs_lines);
    if (j.contains("mask_kind")) base.mask_kind = parse_mask_kind(j["mask_kind"].get<std::string>());
    if (j.contains("phantom")) base.phantom = parse_phantom_kind(j["phantom"].get<std::string>());
    base.seed = j.value("seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  return base;
}

struct Sample {
  std::string id;
  std::string split;  // train | val | test
  std::uint64_t seed = 0;
  ComplexTensor kspace;  // fully sampled coil k-space [ncoil,H,W]
  std::shared_ptr<const CoilSensitivities> coils;
  std::optional<ComplexTensor> ground_truth;
  SamplingMask omega;

  std::size_t height() const { return coils->height(); }
  std::size_t width() const { return coils->width(); }

  /// y_Omega: acquired k-space, zero elsewhere.
  ComplexTensor measured() const {
    ComplexTensor y = kspace;
    apply_mask_inplace(y, omega.grid);
    return y;
  }

  ComplexTensor measured(const MaskGrid& subset) const {
    ComplexTensor y = kspace;
    apply_mask_inplace(y, subset);
    return y;
  }

  EncodingOperator omega_operator() const { return EncodingOperator(coils, omega.grid); }

  /// Checks shapes and coil normalization; with `noiseless` also that kspace
  /// matches the ground truth.
  void validate(bool noiseless) const {
    if (!coils) throw CorruptDataset(id + ": missing coil maps");
    coils->require_kspace(kspace, id.c_str());
    omega.grid.require_shape(height(), width(), id.c_str());
    if (coils->normalization_error() > 1e-6) throw CorruptDataset(id + ": coil maps are not normalized");
    if (ground_truth) {
      coils->require_image(*ground_truth, id.c_str());
      if (noiseless && max_abs_diff(to_kspace(*ground_truth, *coils), kspace) > 1e-10) {
        throw CorruptDataset(id + ": k-space does not match ground truth");
      }
    }
  }
};

struct Dataset {
  DataConfig config;
  std::vector<Sample> samples;

  std::vector<const Sample*> split(const std::string& name) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples) {
      if (s.split == name) out.push_back(&s);
    }
    return out;
  }
};

inline std::string sample_id(const std::string& split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%03zu", split.c_str(), i);
  return buf;
}

inline std::uint64_t id_hash(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : id) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

inline Sample make_sample(const DataConfig& cfg, const std::string& id, const std::string& split) {
  Sample s;
  s.id = id;
  s.split = split;
  s.seed = derive_seed(cfg.seed, id_hash(id));
  const ComplexTensor gt = make_phantom(cfg.height, cfg.width, cfg.phantom, derive_seed(s.seed, 1));
  s.coils = std::make_shared<const CoilSensitivities>(make_coils(cfg.height, cfg.width, cfg.ncoil, derive_seed(s.seed, 2)));
  s.kspace = simulate_kspace(gt, *s.coils, cfg.noise_sigma, derive_seed(s.seed, 3));
  s.omega = make_mask(cfg.height, cfg.width, cfg.acceleration, cfg.resolved_acs(), cfg.mask_kind, derive_seed(s.seed, 4));
  s.ground_truth = gt;
  return s;
}

/// Pure function of the config: regenerating gives bit-identical samples.
inline Dataset generate_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset d{cfg, {}};
  const std::pair<const char*, std::size_t> splits[] = {{"train", cfg.n_train}, {"val", cfg.n_val}, {"test", cfg.n_test}};
  for (const auto& [name, count] : splits) {
    for (std::size_t i = 0; i < count; ++i) d.samples.push_back(make_sample(cfg, sample_id(name, i), name));
  }
  return d;
}

inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : d.samples) {
    nlohmann::json arrays;
    arrays["kspace"] = container::to_json(container::write_array(dir, s.id + ".kspace.bin", s.kspace));
    arrays["coils"] = container::to_json(container::write_array(dir, s.id + ".coils.bin", s.coils->maps));
    arrays["omega"] = container::to_json(container::write_array(dir, s.id + ".omega.bin", s.omega.grid));
    if (s.ground_truth) {
      arrays["ground_truth"] = container::to_json(container::write_array(dir, s.id + ".gt.bin", *s.ground_truth));
    }
    samples.push_back({{"id", s.id},
                       {"split", s.split},
                       {"seed", s.seed},
                       {"acceleration", s.omega.acceleration},
                       {"acs_lines", s.omega.acs_lines},
                       {"mask_kind", to_string(s.omega.kind)},
                       {"mask_seed", s.omega.seed},
                       {"arrays", arrays}});
  }
  nlohmann::json manifest{{"format", kDatasetFormat},
                          {"version", kDatasetVersion},
                          {"params", to_json(d.config)},
                          {"samples", samples}};
  container::write_json(dir / "manifest.json", manifest);
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto m = container::read_manifest(dir, kDatasetFormat, kDatasetVersion);
  Dataset d;
  try {
    d.config = data_config_from_json(m.at("params"));
    for (const auto& js : m.at("samples")) {
      Sample s;
      s.id = js.at("id").get<std::string>();
      s.split = js.value("split", std::string("test"));
      s.seed = js.value("seed", std::uint64_t{0});
      const auto& arrays = js.at("arrays");
      s.kspace = container::read_complex(dir, container::record_from_json(arrays.at("kspace")));
      s.coils = std::make_shared<const CoilSensitivities>(
          CoilSensitivities{container::read_complex(dir, container::record_from_json(arrays.at("coils")))});
      s.omega.grid = container::read_mask(dir, container::record_from_json(arrays.at("omega")));
      s.omega.acceleration = js.value("acceleration", d.config.acceleration);
      s.omega.acs_lines = js.value("acs_lines", std::size_t{0});
      s.omega.kind = parse_mask_kind(js.value("mask_kind", std::string("random-1d")));
      s.omega.seed = js.value("mask_seed", std::uint64_t{0});
      if (arrays.contains("ground_truth")) {
        s.ground_truth = container::read_complex(dir, container::record_from_json(arrays.at("ground_truth")));
      }
      if (s.kspace.shape().size() != 3 || s.coils->maps.shape().size() != 3) {
        throw CorruptDataset(s.id + ": k-space and coil maps must be [ncoil,H,W]");
      }
      try {
        s.validate(d.config.noise_sigma == 0.0);
      } catch (const ContractViolation& e) {
        throw CorruptDataset(s.id + ": " + e.what());
      }
      d.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataset((dir / "manifest.json").string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptDataset((dir / "manifest.json").string() + ": " + e.what());
  }
  if (d.samples.empty()) throw CorruptDataset((dir / "manifest.json").string() + ": dataset has no samples");
  return d;
}

}  // namespace k2recon
