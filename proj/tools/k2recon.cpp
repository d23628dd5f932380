// k2recon command-line tool.
//
//   k2recon gen-data    --config c.json --out data/
//   k2recon make-mask   --config c.json --out mask/
//   k2recon train       --config c.json --data data/ --out run/ [--resume]
//   k2recon reconstruct --config c.json --data data/ --method network --checkpoint run/best --out recon/ [--png]
//   k2recon evaluate    --data data/ recon-a/ recon-b/ [--out report/]
//   k2recon sweep       --config c.json --data data/ --out sweep/ --m 0,1,2,5
//
// Exit codes: 0 success, 2 configuration or usage, 3 I/O, 4 numerical failure.

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "k2recon/k2recon.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace k2recon;

namespace {

enum Exit { kOk = 0, kConfig = 2, kIo = 3, kNumerical = 4 };

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  BaselineConfig baselines;
};

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"data", k2recon::to_json(c.data)},
          {"model", k2recon::to_json(c.model)},
          {"train", k2recon::to_json(c.train)},
          {"baselines", k2recon::to_json(c.baselines)}};
}

/// Flag overrides. Unset options leave the config file value alone.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> unroll_k, batch, k2c_steps, threads, epochs, height, width, ncoil;
  std::optional<double> lr, k2c_prob, rho, accel;
  std::optional<std::string> supervision;
};

/// The top-level "seed" seeds every section that does not name its own.
RunConfig resolve(const std::optional<fs::path>& file, const Overrides& o) {
  json j = json::object();
  if (file) {
    if (!fs::exists(*file)) throw ConfigError("config file " + file->string() + " does not exist");
    j = container::read_json(*file);
    if (!j.is_object()) throw ConfigError(file->string() + ": config must be a JSON object");
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "seed" && key != "data" && key != "model" && key != "train" && key != "baselines") {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  RunConfig c;
  c.seed = o.seed.value_or(j.value("seed", std::uint64_t{0}));
  const json empty = json::object();
  const json& jd = j.contains("data") ? j["data"] : empty;
  const json& jm = j.contains("model") ? j["model"] : empty;
  const json& jt = j.contains("train") ? j["train"] : empty;
  DataConfig d;
  d.seed = c.seed;
  c.data = data_config_from_json(jd, d);
  ModelConfig m;
  m.init_seed = c.seed;
  c.model = model_config_from_json(jm, m);
  TrainConfig t;
  t.seed = c.seed;
  t.schedule.seed = c.seed;
  c.train = train_config_from_json(jt, t);
  if (j.contains("baselines")) c.baselines = baseline_config_from_json(j["baselines"]);
  if (o.seed) c.data.seed = c.model.init_seed = c.train.seed = c.train.schedule.seed = *o.seed;

  if (o.height) c.data.height = *o.height;
  if (o.width) c.data.width = *o.width;
  if (o.ncoil) c.data.ncoil = *o.ncoil;
  if (o.accel) c.data.acceleration = *o.accel;
  if (o.unroll_k) c.model.unroll = *o.unroll_k;
  if (o.lr) c.train.lr = *o.lr;
  if (o.batch) c.train.batch_size = *o.batch;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.k2c_steps) c.train.schedule.enabled_steps = *o.k2c_steps;
  if (o.k2c_prob) c.train.schedule.keep_prob = *o.k2c_prob;
  if (o.rho) c.train.rho = *o.rho;
  if (o.supervision) c.train.supervision = parse_supervision(*o.supervision);
  if (o.threads) {
    c.train.threads = *o.threads;
  } else if (const char* env = std::getenv("K2RECON_THREADS")) {
    try {
      c.train.threads = std::stoul(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("K2RECON_THREADS is not a number: ") + env);
    }
  }
  c.data.validate();
  c.model.validate();
  c.train.validate(c.model.unroll);
  c.baselines.validate();
  return c;
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

/// Outputs are either written into a fresh directory or overwritten on request.
void prepare_out(const fs::path& out, bool overwrite) {
  if (non_empty_dir(out) && !overwrite) {
    throw ConfigError("output directory " + out.string() + " is not empty (pass --overwrite to replace its contents)");
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
}

void echo_config(const fs::path& out, const RunConfig& c) { container::write_json(out / "config.resolved.json", to_json(c)); }

Dataset load_data(const fs::path& dir) {
  if (!fs::exists(dir)) throw ConfigError("dataset directory " + dir.string() + " does not exist");
  return read_dataset(dir);
}

Checkpoint load_checkpoint_arg(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("checkpoint " + dir.string() + " not found");
  return load_checkpoint(dir);
}

/// The acceleration of a dataset is fixed at generation; a disagreeing flag is an error.
void check_accel(const Dataset& d, const Overrides& o) {
  if (o.accel && *o.accel != d.config.acceleration) {
    throw ConfigError("--accel " + std::to_string(*o.accel) + " differs from the dataset's acceleration " +
                      std::to_string(d.config.acceleration));
  }
}

// ---------------------------------------------------------------------------
// PNG output

void write_png(const fs::path& path, const std::vector<double>& mag, std::size_t h, std::size_t w, double hi) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = hi > 0.0 ? std::clamp(mag[y * w + x] / hi, 0.0, 1.0) : 0.0;
      row[x] = static_cast<png_byte>(std::lround(255.0 * v));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(f);
}

double percentile99(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t k = static_cast<std::size_t>(0.99 * static_cast<double>(v.size() - 1));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

/// Magnitude render windowed to [0, p99 of the ground truth] (of the image
/// itself without one), plus |recon - gt| on the same window.
void render(const fs::path& out, const Sample& s, const ComplexTensor& x) {
  const std::size_t h = s.height(), w = s.width();
  const auto mag = magnitude(x);
  const double hi = percentile99(s.ground_truth ? magnitude(*s.ground_truth) : mag);
  write_png(out / (s.id + ".png"), mag, h, w, hi);
  if (s.ground_truth) write_png(out / (s.id + ".residual.png"), magnitude(x - *s.ground_truth), h, w, hi);
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const RunConfig& c, const fs::path& out, bool overwrite) {
  prepare_out(out, overwrite);
  const Dataset d = generate_dataset(c.data);
  write_dataset(out, d);
  std::cout << "wrote " << d.samples.size() << " samples (" << c.data.height << "x" << c.data.width << ", "
            << c.data.ncoil << " coils, R=" << c.data.acceleration << ") to " << out.string() << '\n';
}

void cmd_make_mask(const RunConfig& c, const fs::path& out, bool overwrite) {
  prepare_out(out, overwrite);
  const auto m = make_mask(c.data.height, c.data.width, c.data.acceleration, c.data.resolved_acs(), c.data.mask_kind,
                           c.data.seed);
  const auto rec = container::write_array(out, "mask.bin", m.grid);
  container::write_json(out / "manifest.json", {{"format", "k2recon-mask"},
                                                {"version", 1},
                                                {"acceleration", m.acceleration},
                                                {"acs_lines", m.acs_lines},
                                                {"kind", to_string(m.kind)},
                                                {"seed", m.seed},
                                                {"fraction", m.grid.fraction()},
                                                {"array", container::to_json(rec)}});
  std::vector<double> v(m.grid.cells.begin(), m.grid.cells.end());
  write_png(out / "mask.png", v, m.grid.height, m.grid.width, 1.0);
  echo_config(out, c);
  std::cout << "mask R=" << m.acceleration << " acs=" << m.acs_lines << " fraction=" << m.grid.fraction() << '\n';
}

void print_epoch(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch %3zu  loss %.5f  ", e.epoch, e.train_loss);
  std::cout << buf;
  if (e.val_psnr) {
    std::snprintf(buf, sizeof buf, "val PSNR %.2f dB  SSIM %.4f", *e.val_psnr, e.val_ssim.value_or(0.0));
  } else if (e.val_loss) {
    std::snprintf(buf, sizeof buf, "val loss %.5f", *e.val_loss);
  } else {
    buf[0] = '\0';
  }
  std::cout << buf << "  (" << e.seconds << " s)" << std::endl;
}

void cmd_train(const RunConfig& c, const Overrides& o, const fs::path& data_dir, const fs::path& out,
               std::optional<fs::path> resume, bool overwrite) {
  const Dataset d = load_data(data_dir);
  check_accel(d, o);
  if (resume) {
    if (resume->empty()) resume = out / "last";
    if (!fs::exists(*resume / "manifest.json")) throw ConfigError("nothing to resume: " + resume->string() + " not found");
  } else {
    prepare_out(out, overwrite);
  }
  echo_config(out, c);
  TrainIo io;
  io.out_dir = out;
  io.resume_from = resume;
  io.on_epoch = print_epoch;
  const auto r = train(d, c.model, c.train, io);
  std::cout << "best epoch " << r.best_epoch << ", " << r.optimizer_steps << " optimizer steps; checkpoints in "
            << out.string() << '\n';
}

void cmd_reconstruct(const RunConfig& c, const Overrides& o, const fs::path& data_dir, Method method,
                     const std::optional<fs::path>& ckpt_dir, const std::string& split, const fs::path& out,
                     bool png, bool overwrite) {
  const Dataset d = load_data(data_dir);
  check_accel(d, o);
  std::optional<Checkpoint> ckpt;
  if (method == Method::network) {
    if (!ckpt_dir) throw ConfigError("--method network needs --checkpoint");
    ckpt = load_checkpoint_arg(*ckpt_dir);
  }
  prepare_out(out, overwrite);
  const ReconSet r = reconstruct_split(d, split, method, c.baselines, ckpt ? &*ckpt : nullptr);
  write_recon_set(out, r);
  if (png) {
    for (const auto& im : r.images) {
      for (const auto& s : d.samples) {
        if (s.id == im.id) render(out, s, im.image);
      }
    }
  }
  echo_config(out, c);
  std::cout << "wrote " << r.images.size() << " " << r.method << " reconstructions to " << out.string() << '\n';
}

void cmd_evaluate(const fs::path& data_dir, const std::vector<fs::path>& recon_dirs,
                  const std::optional<fs::path>& out) {
  const Dataset d = load_data(data_dir);
  std::vector<MetricReport> reports;
  for (const auto& dir : recon_dirs) {
    if (!fs::is_directory(dir) || fs::is_empty(dir)) throw ConfigError("reconstruction directory " + dir.string() + " is empty");
    if (!fs::exists(dir / "manifest.json")) throw ConfigError("reconstruction directory " + dir.string() + " has no manifest.json");
    reports.push_back(evaluate(d, read_recon_set(dir)));
  }
  std::cout << render_table(reports);
  if (out) {
    std::error_code ec;
    fs::create_directories(*out, ec);
    if (ec) throw IoError("cannot create " + out->string() + ": " + ec.message());
    json j = json::array();
    for (const auto& r : reports) j.push_back(to_json(r));
    container::write_json(*out / "report.json", j);
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f || !(f << text)) throw IoError("cannot write " + path.string());
}

void cmd_sweep(const RunConfig& c, const Overrides& o, const fs::path& data_dir, const fs::path& out,
               std::vector<std::size_t> ms, bool overwrite) {
  const Dataset d = load_data(data_dir);
  check_accel(d, o);
  if (ms.empty()) ms = {0, 1, c.model.unroll / 2, c.model.unroll};
  std::sort(ms.begin(), ms.end());
  ms.erase(std::unique(ms.begin(), ms.end()), ms.end());
  for (std::size_t m : ms) {
    if (m > c.model.unroll) throw ConfigError("sweep: m=" + std::to_string(m) + " exceeds K=" + std::to_string(c.model.unroll));
  }
  const auto probe = d.split("train");
  if (probe.empty()) throw ConfigError("sweep: dataset has no training samples");
  prepare_out(out, overwrite);
  echo_config(out, c);

  std::vector<SweepPoint> pts;
  json trace = json::array();
  for (std::size_t m : ms) {
    TrainConfig t = c.train;
    t.schedule.enabled_steps = m;
    const fs::path run = out / ("m" + std::to_string(m));
    TrainIo io;
    io.out_dir = run;
    std::cout << "m = " << m << std::endl;
    io.on_epoch = print_epoch;
    const auto r = train(d, c.model, t, io);
    const Checkpoint best = load_checkpoint(run / "best");
    const MetricReport rep = evaluate(d, reconstruct_split(d, "test", Method::network, c.baselines, &best));
    const auto steps = calibrated_steps(r.final_params, c.model, t, *probe.front());
    pts.push_back({m, rep.psnr, rep.ssim, steps});
    trace.push_back({{"m", m}, {"calibrated_steps", steps}, {"psnr_db", psnr_json(rep.psnr)}, {"ssim", rep.ssim}});
  }
  write_text(out / "sweep.csv", sweep_csv(pts));
  char title[96];
  std::snprintf(title, sizeof title, "Test PSNR vs calibrated steps (K=%zu, R=%g)", c.model.unroll, d.config.acceleration);
  write_text(out / "sweep.svg", sweep_svg(pts, title));
  container::write_json(out / "sweep.json", trace);
  std::cout << sweep_csv(pts);
}

std::vector<std::size_t> parse_list(const std::string& s) {
  std::vector<std::size_t> v;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stoul(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("--m expects a comma-separated list of integers, got '" + s + "'");
    }
  }
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unrolled self-supervised MRI reconstruction with per-step k-space calibration"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "k2recon 1.0");

  std::optional<fs::path> config;
  fs::path out, data_dir;
  bool overwrite = false;
  Overrides o;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config, "JSON config with data/model/train/baselines sections");
    c->add_option("--seed", o.seed, "Seed for every section");
    c->add_flag("--overwrite", overwrite, "Replace the contents of a non-empty output directory");
  };
  auto add_data_flags = [&](CLI::App* c) {
    c->add_option("--height", o.height, "Image height");
    c->add_option("--width", o.width, "Image width");
    c->add_option("--ncoil", o.ncoil, "Number of coils");
    c->add_option("--accel", o.accel, "Acceleration R");
  };
  auto add_train_flags = [&](CLI::App* c) {
    c->add_option("--accel", o.accel, "Expected acceleration of the dataset");
    c->add_option("--unroll-k", o.unroll_k, "Unrolled iterations K");
    c->add_option("--lr", o.lr, "Adam learning rate");
    c->add_option("--batch", o.batch, "Batch size");
    c->add_option("--epochs", o.epochs, "Epochs");
    c->add_option("--k2c-steps", o.k2c_steps, "Calibrated unroll steps m (0 disables)");
    c->add_option("--k2c-prob", o.k2c_prob, "Calibration keep probability p");
    c->add_option("--rho", o.rho, "Fraction of sampled locations held out for the loss");
    c->add_option("--supervision", o.supervision, "self | full");
    c->add_option("--threads", o.threads, "Worker threads (default: $K2RECON_THREADS or 1)");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-coil phantom dataset");
  add_common(gen);
  add_data_flags(gen);
  gen->add_option("--out", out, "Dataset directory")->required();

  auto* mask = app.add_subcommand("make-mask", "Write a sampling mask and its PNG");
  add_common(mask);
  add_data_flags(mask);
  mask->add_option("--out", out, "Mask directory")->required();

  std::optional<fs::path> resume;
  std::string resume_arg;
  auto* tr = app.add_subcommand("train", "Train the unrolled network (resumable)");
  add_common(tr);
  add_train_flags(tr);
  tr->add_option("--data", data_dir, "Dataset directory")->required();
  tr->add_option("--out", out, "Run directory (log, last/ and best/ checkpoints)")->required();
  auto* resume_opt = tr->add_option("--resume", resume_arg, "Resume from a checkpoint (default: <out>/last)")
                         ->expected(0, 1);

  std::string method_name = "network", split = "test";
  std::optional<fs::path> checkpoint;
  bool png = false;
  auto* rec = app.add_subcommand("reconstruct", "Reconstruct a dataset split (network runs in eval mode)");
  add_common(rec);
  rec->add_option("--accel", o.accel, "Expected acceleration of the dataset");
  rec->add_option("--data", data_dir, "Dataset directory")->required();
  rec->add_option("--method", method_name, "network | zero-filled | cg-sense | tv");
  rec->add_option("--checkpoint", checkpoint, "Checkpoint directory (network)");
  rec->add_option("--split", split, "train | val | test");
  rec->add_option("--out", out, "Output directory")->required();
  rec->add_flag("--png", png, "Also write magnitude and residual PNGs");

  std::vector<fs::path> recon_dirs;
  std::optional<fs::path> report_out;
  auto* ev = app.add_subcommand("evaluate", "Score reconstruction directories against ground truth");
  ev->add_option("--data", data_dir, "Dataset directory")->required();
  ev->add_option("--out", report_out, "Write report.json here");
  ev->add_option("recon", recon_dirs, "Reconstruction directories")->required();

  std::string m_list;
  auto* sw = app.add_subcommand("sweep", "Train once per m and plot test PSNR against m");
  add_common(sw);
  add_train_flags(sw);
  sw->add_option("--data", data_dir, "Dataset directory")->required();
  sw->add_option("--out", out, "Sweep directory")->required();
  sw->add_option("--m", m_list, "Comma-separated m values (default 0,1,K/2,K)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (ev->parsed()) {
      cmd_evaluate(data_dir, recon_dirs, report_out);
      return kOk;
    }
    const RunConfig c = resolve(config, o);
    if (gen->parsed()) cmd_gen_data(c, out, overwrite);
    if (mask->parsed()) cmd_make_mask(c, out, overwrite);
    if (tr->parsed()) {
      if (resume_opt->count() > 0) resume = fs::path(resume_arg);
      cmd_train(c, o, data_dir, out, resume, overwrite);
    }
    if (rec->parsed()) cmd_reconstruct(c, o, data_dir, parse_method(method_name), checkpoint, split, out, png, overwrite);
    if (sw->parsed()) cmd_sweep(c, o, data_dir, out, m_list.empty() ? std::vector<std::size_t>{} : parse_list(m_list), overwrite);
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ContractViolation& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericalBreakdown& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  }
}
