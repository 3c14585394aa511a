// Command-line surface for the dose-prediction pipeline: dataset generation,
// training, inference, dosimetric reports, and difference maps.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aranet/dosimetry.hpp"
#include "aranet/persist.hpp"
#include "aranet/phantom.hpp"
#include "aranet/trainer.hpp"

namespace fs = std::filesystem;
using namespace aranet;

namespace {

// canonical structure order, matching the training channel layout
constexpr std::array<const char*, 6> kMaskNames = {"ptv",    "bladder",         "femur_l",
                                                   "femur_r", "small_intestine", "rectum"};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::int64_t> parse_int_list(const std::string& text, std::size_t count,
                                         const std::string& what) {
  std::vector<std::int64_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoll(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError(what + ": '" + tok + "' is not an integer");
    }
  }
  if (out.size() != count) {
    throw UsageError(what + ": expected " + std::to_string(count) + " comma-separated values");
  }
  return out;
}

void require_exists(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw UsageError(what + " does not exist: " + path);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::vector<MaskVolume> read_canonical_masks(const std::string& dir, const Volume& grid_of) {
  std::vector<MaskVolume> masks;
  for (const char* name : kMaskNames) {
    MaskVolume m = read_mask(dir + "/" + std::string(name) + ".dmask");
    require_same_grid(grid_of, m);
    masks.push_back(std::move(m));
  }
  return masks;
}

// ---------------------------------------------------------------------------
// phantom gen

struct GenOptions {
  std::int64_t n = 0;
  std::uint64_t seed = 0;
  std::string out;
  std::string grid = "8,64,64";
  std::string split = "40,6,8";
};

int run_gen(const GenOptions& o) {
  if (o.n < 1) throw UsageError("--n must be at least 1");
  const auto g = parse_int_list(o.grid, 3, "--grid");
  const auto s = parse_int_list(o.split, 3, "--split");
  for (std::int64_t v : s) {
    if (v < 0) throw UsageError("--split: parts must be non-negative");
  }
  if (s[0] + s[1] + s[2] <= 0) throw UsageError("--split: parts must not all be zero");

  const Shape grid{g[0], g[1], g[2]};
  const std::array<int, 3> split{static_cast<int>(s[0]), static_cast<int>(s[1]),
                                 static_cast<int>(s[2])};
  const auto counts = make_dataset(static_cast<int>(o.n), o.seed, o.out, grid, split);
  std::cout << "wrote " << o.n << " samples to " << o.out << " (train=" << counts[0]
            << " val=" << counts[1] << " test=" << counts[2] << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string data;
  std::string config;
  std::string arm = "full";
  std::int64_t steps = -1;
  std::int64_t epochs = -1;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  int batch = 2;
  std::string out;
  std::string log;
  std::string report;
  std::string resume;
  bool paper_scale = false;
  bool lr_given = false;
  bool batch_given = false;
  bool arm_given = false;
  bool seed_given = false;
};

std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

// key=value settings; values already given on the command line win
void apply_config_file(TrainOptions& o) {
  if (o.config.empty()) return;
  require_exists(o.config, "config file");
  std::ifstream in(o.config);
  if (!in) throw UsageError("config file is not readable: " + o.config);

  const bool cli_count = o.steps >= 0 || o.epochs >= 0;
  bool cfg_steps = false, cfg_epochs = false;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string text = strip(line);
    if (text.empty() || text[0] == '#') continue;
    const std::size_t eq = text.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = strip(text.substr(0, eq));
    const std::string val = strip(text.substr(eq + 1));
    try {
      if (key == "arm") {
        if (!o.arm_given) o.arm = val, o.arm_given = true;
      } else if (key == "steps") {
        if (!cli_count && !cfg_epochs) o.steps = std::stoll(val), cfg_steps = true;
      } else if (key == "epochs") {
        if (cfg_steps) throw UsageError("config: steps and epochs are exclusive");
        if (!cli_count) o.epochs = std::stoll(val), cfg_epochs = true;
      } else if (key == "seed") {
        if (!o.seed_given) o.seed = std::stoull(val), o.seed_given = true;
      } else if (key == "lr") {
        if (!o.lr_given) o.lr = std::stod(val), o.lr_given = true;
      } else if (key == "batch") {
        if (!o.batch_given) o.batch = std::stoi(val), o.batch_given = true;
      } else {
        throw UsageError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception&) {
      throw UsageError("config line " + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
  }
}

void write_ape_report(const std::string& path, const CohortEval& cohort) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("report: cannot open '" + path + "' for writing");
  out << "metric,ape_percent\n";
  out << "D95," << fmt(cohort.ape_d95) << "\n";
  out << "D50," << fmt(cohort.ape_d50) << "\n";
  out << "Dmean," << fmt(cohort.ape_dmean) << "\n";

  fs::path samples_path(path);
  samples_path.replace_filename(samples_path.stem().string() + "_samples" +
                                samples_path.extension().string());
  std::ofstream sout(samples_path, std::ios::binary);
  if (!sout) throw io_error("report: cannot open '" + samples_path.string() + "' for writing");
  sout << "id,d95_truth,d95_pred,d95_diff,d50_truth,d50_pred,d50_diff,"
          "dmean_truth,dmean_pred,dmean_diff\n";
  std::array<double, 9> sums{};
  for (const SampleEval& ev : cohort.samples) {
    const StructurePair& t = ev.structures.front();
    const std::array<double, 9> row{
        t.truth.d95,    t.pred.d95,    std::abs(t.truth.d95 - t.pred.d95),
        t.truth.d50,    t.pred.d50,    std::abs(t.truth.d50 - t.pred.d50),
        t.truth.d_mean, t.pred.d_mean, std::abs(t.truth.d_mean - t.pred.d_mean)};
    sout << ev.id;
    for (std::size_t i = 0; i < row.size(); ++i) {
      sout << ',' << fmt(row[i]);
      sums[i] += row[i];
    }
    sout << "\n";
  }
  sout << "average";
  for (double s : sums) sout << ',' << fmt(s / static_cast<double>(cohort.samples.size()));
  sout << "\n";
}

int run_train(TrainOptions o) {
  apply_config_file(o);
  require_exists(o.data, "data directory");
  require_exists(o.data + "/manifest.txt", "manifest");
  if (!o.resume.empty()) {
    require_exists(o.resume, "checkpoint");
    if (o.arm_given || o.seed_given || o.lr_given || o.batch_given || o.paper_scale) {
      throw UsageError("--resume restores arm, seed, lr, and batch from the checkpoint; "
                       "drop those flags");
    }
  }
  Arm arm = Arm::full;
  try {
    arm = parse_arm(o.arm);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (o.steps >= 0 && o.epochs >= 0) throw UsageError("--steps and --epochs are exclusive");

  const Manifest mf = read_manifest(o.data);
  SlicePool pool = load_slices(mf, "train");
  const std::size_t n_slices = pool.x.size();

  TrainConfig cfg;
  cfg.arm = arm;
  cfg.seed = o.seed;
  cfg.lr = o.paper_scale ? 1e-5 : 1e-3;
  cfg.batch_size = o.paper_scale ? 16 : 2;
  if (o.lr_given) cfg.lr = o.lr;
  if (o.batch_given) cfg.batch_size = o.batch;
  cfg.arch.input_size = pool.x.front().shape()[1];

  Trainer trainer = o.resume.empty() ? Trainer(cfg, std::move(pool))
                                     : Trainer::resume(o.resume, std::move(pool));
  trainer.set_prescription_gy(mf.prescription_gy);

  std::int64_t target = 500;
  const int batch = trainer.config().batch_size;
  if (o.steps >= 0) {
    target = o.steps;
  } else if (o.epochs >= 0) {
    const std::int64_t per_epoch =
        (static_cast<std::int64_t>(n_slices) + batch - 1) / batch;
    target = o.epochs * per_epoch;
  }

  std::ofstream log;
  if (!o.log.empty()) {
    log.open(o.log, std::ios::binary);
    if (!log) throw io_error("train: cannot open log '" + o.log + "' for writing");
    write_loss_csv_header(log);
  }

  while (trainer.completed_steps() < target) {
    const LossReport r = trainer.step();
    if (log.is_open()) append_loss_csv(log, trainer.completed_steps(), r);
  }
  trainer.save(o.out);

  std::cout << "arm=" << arm_name(trainer.config().arm) << " steps=" << trainer.completed_steps()
            << " checkpoint=" << o.out << "\n";

  if (!o.report.empty()) {
    const CohortEval cohort =
        evaluate_split(trainer.generator(), mf, "test", mf.prescription_gy, 50.0);
    write_ape_report(o.report, cohort);
    std::cout << "report=" << o.report << " ape_d95=" << fmt(cohort.ape_d95)
              << " ape_d50=" << fmt(cohort.ape_d50) << " ape_dmean=" << fmt(cohort.ape_dmean)
              << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictOptions {
  std::string ckpt;
  std::string sample;
  std::string out;
};

int run_predict(const PredictOptions& o) {
  require_exists(o.ckpt, "checkpoint");
  require_exists(o.sample, "sample directory");
  require_exists(o.sample + "/ct.dvol", "CT volume");
  for (const char* name : kMaskNames) {
    require_exists(o.sample + "/" + std::string(name) + ".dmask", "mask");
  }

  const LoadedGenerator lg = load_generator(o.ckpt);
  const Volume ct = read_volume(o.sample + "/ct.dvol");
  const std::vector<MaskVolume> masks = read_canonical_masks(o.sample, ct);
  const Volume pred = predict_volume(lg.net, ct, masks, lg.prescription_gy);
  write_volume(o.out, pred);
  std::cout << "wrote " << o.out << " (prescription " << fmt(lg.prescription_gy) << " Gy)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string pred;
  std::string truth;
  std::string masks;
  double prescription = 0.0;
  double vx = 50.0;
  std::string out;
};

std::vector<std::string> mask_files_in(const std::string& dir) {
  // target first, remaining structures in name order
  const std::string target = dir + "/ptv.dmask";
  if (!fs::exists(target)) throw UsageError("masks directory needs ptv.dmask: " + dir);
  std::vector<std::string> rest;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".dmask") continue;
    if (entry.path().filename() == "ptv.dmask") continue;
    rest.push_back(entry.path().string());
  }
  std::sort(rest.begin(), rest.end());
  std::vector<std::string> files{target};
  files.insert(files.end(), rest.begin(), rest.end());
  return files;
}

int run_eval(const EvalOptions& o) {
  require_exists(o.pred, "prediction volume");
  require_exists(o.truth, "truth volume");
  require_exists(o.masks, "masks directory");
  if (!(o.prescription > 0.0) || !std::isfinite(o.prescription)) {
    throw UsageError("--prescription must be a positive dose in Gy");
  }
  if (!(o.vx > 0.0) || !std::isfinite(o.vx)) throw UsageError("--vx must be positive");
  const std::vector<std::string> files = mask_files_in(o.masks);

  const Volume pred = read_volume(o.pred);
  const Volume truth = read_volume(o.truth);

  std::ofstream out(o.out, std::ios::binary);
  if (!out) throw io_error("eval: cannot open '" + o.out + "' for writing");
  out << "structure,source,D95,D50,Dmean,V50,CI,HI\n";
  for (std::size_t k = 0; k < files.size(); ++k) {
    const MaskVolume mask = read_mask(files[k]);
    const bool is_target = k == 0;
    const StructureMetrics t =
        compute_structure_metrics(truth, mask, is_target, o.prescription, o.vx);
    const StructureMetrics p =
        compute_structure_metrics(pred, mask, is_target, o.prescription, o.vx);

    auto row = [&](const char* source, const StructureMetrics& m) {
      out << mask.label << ',' << source << ',' << fmt(m.d95) << ',' << fmt(m.d50) << ','
          << fmt(m.d_mean) << ',' << fmt(m.v50);
      if (m.has_ci) {
        out << ',' << fmt(m.ci);
      } else {
        out << ',';
      }
      if (m.has_hi) {
        out << ',' << fmt(m.hi);
      } else {
        out << ',';
      }
      out << "\n";
    };
    row("truth", t);
    row("prediction", p);
    out << mask.label << ",ape_percent," << fmt(ape({t.d95}, {p.d95})) << ','
        << fmt(ape({t.d50}, {p.d50})) << ',' << fmt(ape({t.d_mean}, {p.d_mean})) << ",,,\n";
  }
  std::cout << "wrote " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// diffmap

struct DiffmapOptions {
  std::string pred;
  std::string truth;
  std::string out;
};

int run_diffmap(const DiffmapOptions& o) {
  require_exists(o.pred, "prediction volume");
  require_exists(o.truth, "truth volume");

  const Volume pred = read_volume(o.pred);
  const Volume truth = read_volume(o.truth);
  if (pred.shape != truth.shape) {
    throw std::invalid_argument("diffmap: volumes have different grids, " + shape_str(pred.shape) +
                                " vs " + shape_str(truth.shape));
  }

  const std::size_t n = pred.values.size();
  std::vector<double> diff(n);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = std::abs(static_cast<double>(pred.values[i]) -
                       static_cast<double>(truth.values[i]));
    max_diff = std::max(max_diff, diff[i]);
  }

  // slices stacked vertically: one W-wide, (D*H)-tall grayscale page
  const std::int64_t width = pred.shape[2];
  const std::int64_t height = pred.shape[0] * pred.shape[1];
  std::ofstream out(o.out, std::ios::binary);
  if (!out) throw io_error("diffmap: cannot open '" + o.out + "' for writing");
  out << "P5\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> pixels(n);
  for (std::size_t i = 0; i < n; ++i) {
    pixels[i] = max_diff == 0.0
                    ? 0
                    : static_cast<unsigned char>(std::lround(255.0 * diff[i] / max_diff));
  }
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw io_error("diffmap: short write to '" + o.out + "'");

  std::cout << "max_abs_diff_gy=" << fmt(max_diff) << " gy_per_level=" << fmt(max_diff / 255.0)
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic radiotherapy dose prediction pipeline"};
  app.require_subcommand(1);

  GenOptions gen_opts;
  CLI::App* phantom = app.add_subcommand("phantom", "synthetic dataset tools");
  phantom->require_subcommand(1);
  CLI::App* gen = phantom->add_subcommand("gen", "generate a phantom dataset");
  gen->add_option("--n", gen_opts.n, "number of samples")->required();
  gen->add_option("--seed", gen_opts.seed, "base seed (sample i uses seed+i)");
  gen->add_option("--out", gen_opts.out, "output directory")->required();
  gen->add_option("--grid", gen_opts.grid, "volume grid D,H,W (default 8,64,64)");
  gen->add_option("--split", gen_opts.split, "train,val,test proportions (default 40,6,8)");

  TrainOptions train_opts;
  CLI::App* train = app.add_subcommand("train", "train a dose predictor");
  train->add_option("--config", train_opts.config, "key=value file; explicit flags win");
  train->add_option("--data", train_opts.data, "dataset directory with manifest.txt")->required();
  auto* arm_opt = train->add_option("--arm", train_opts.arm, "unet | aunet | raunet | full");
  auto* steps_opt = train->add_option("--steps", train_opts.steps, "total optimizer steps");
  auto* epochs_opt =
      train->add_option("--epochs", train_opts.epochs, "passes over the training slices");
  steps_opt->excludes(epochs_opt);
  auto* seed_opt = train->add_option("--seed", train_opts.seed, "training seed");
  auto* lr_opt = train->add_option("--lr", train_opts.lr, "learning rate");
  auto* batch_opt = train->add_option("--batch", train_opts.batch, "batch size");
  train->add_option("--out", train_opts.out, "checkpoint to write")->required();
  train->add_option("--log", train_opts.log, "CSV loss log for the steps run here");
  train->add_option("--report", train_opts.report, "test-split APE report CSV");
  train->add_option("--resume", train_opts.resume, "continue from this checkpoint");
  train->add_flag("--paper-scale", train_opts.paper_scale,
                  "published hyper-parameters (lr 1e-5, batch 16)");

  PredictOptions predict_opts;
  CLI::App* predict = app.add_subcommand("predict", "predict a dose volume");
  predict->add_option("--ckpt", predict_opts.ckpt, "trained checkpoint")->required();
  predict->add_option("--sample", predict_opts.sample, "sample directory (ct.dvol + masks)")
      ->required();
  predict->add_option("--out", predict_opts.out, "prediction volume to write")->required();

  EvalOptions eval_opts;
  CLI::App* eval = app.add_subcommand("eval", "dosimetric comparison report");
  eval->add_option("--pred", eval_opts.pred, "predicted dose volume")->required();
  eval->add_option("--truth", eval_opts.truth, "ground-truth dose volume")->required();
  eval->add_option("--masks", eval_opts.masks, "directory of structure masks")->required();
  eval->add_option("--prescription", eval_opts.prescription, "prescription dose in Gy")
      ->required();
  eval->add_option("--vx", eval_opts.vx, "V_x threshold in Gy (default 50)");
  eval->add_option("--out", eval_opts.out, "report CSV to write")->required();

  DiffmapOptions diff_opts;
  CLI::App* diffmap = app.add_subcommand("diffmap", "absolute difference image");
  diffmap->add_option("--pred", diff_opts.pred, "predicted dose volume")->required();
  diffmap->add_option("--truth", diff_opts.truth, "ground-truth dose volume")->required();
  diffmap->add_option("--out", diff_opts.out, "PGM image to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  train_opts.arm_given = arm_opt->count() > 0;
  train_opts.seed_given = seed_opt->count() > 0;
  train_opts.lr_given = lr_opt->count() > 0;
  train_opts.batch_given = batch_opt->count() > 0;

  try {
    if (gen->parsed()) return run_gen(gen_opts);
    if (train->parsed()) return run_train(train_opts);
    if (predict->parsed()) return run_predict(predict_opts);
    if (eval->parsed()) return run_eval(eval_opts);
    if (diffmap->parsed()) return run_diffmap(diff_opts);
    std::cerr << "error: no subcommand given\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
