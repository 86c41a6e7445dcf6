#include "visreview/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <optional>

#include "visreview/config.hpp"
#include "visreview/gradcheck.hpp"
#include "visreview/parallel.hpp"
#include "visreview/serialize.hpp"

namespace vr {

namespace fs = std::filesystem;

namespace {

// Held for the duration of a command that writes into `dir`.
class OutputLock {
 public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string());
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      fail(ErrorCode::InvalidConfig, "output directory " + dir.string() + " is locked by another run (" +
                                         path_.string() + ")");
    }
    ::close(fd);
  }
  ~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  fs::path path_;
};

struct LoadedData {
  Dataset dataset;
  DatasetSplit split;
  std::vector<const Sample*> train;
  std::vector<const Sample*> val;
};

void check_pack_matches(const RunConfig& cfg, const GeneratorConfig& pack) {
  const auto& d = cfg.dataset;
  if (d.n_classes != pack.n_classes || d.image_size != pack.image_size || d.channels != pack.channels ||
      d.score_low != pack.score_low || d.score_high != pack.score_high) {
    fail(ErrorCode::InvalidConfig,
         "dataset section of the config (classes, image size, channels, score range) does not match the pack");
  }
}

LoadedData load_data(const RunConfig& cfg, const std::string& pack) {
  LoadedData d;
  d.dataset = load_dataset(pack);
  check_pack_matches(cfg, d.dataset.config);
  d.split = split_dataset(d.dataset, cfg.split, cfg.seed);
  d.train = select(d.dataset, d.split.train);
  d.val = select(d.dataset, d.split.val);
  return d;
}

std::string trace_name(const TrainTarget& target) {
  std::string name = target.to_string();
  for (auto& ch : name) {
    if (ch == ':') ch = '_';
  }
  return "trace_" + name + ".csv";
}

void log_trace(std::ostream& err, const std::string& label, const FitResult& result) {
  for (const auto& row : result.trace) {
    err << label << " epoch " << row.epoch << " " << row.split << " loss " << format_fixed4(row.loss)
        << " accuracy " << format_fixed4(row.accuracy) << "\n";
  }
}

bool has_checkpoint(const fs::path& dir) { return fs::exists(dir / "header.json"); }

// Trains the given slice and writes its checkpoint(s) and trace under `root`.
FitResult train_target(HierarchicalModel& model, FlatModel* flat, TrainTarget target, const RunConfig& cfg,
                       const LoadedData& data, const fs::path& root, std::size_t threads, std::ostream& err) {
  const TrainConfig tc = cfg.training(threads);
  FitResult result;
  switch (target.kind) {
    case TrainTarget::Kind::higher:
      result = fit(model, target, data.train, tc, data.val);
      save_higher(root / "higher", model.higher, cfg.seed);
      break;
    case TrainTarget::Kind::lower:
    case TrainTarget::Kind::lowers:
      if (has_checkpoint(root / "fx")) load_extractor(root / "fx", model.fx);
      result = fit(model, target, data.train, tc, data.val);
      if (target.kind == TrainTarget::Kind::lower) {
        save_lower(root / lower_dir_name(target.index), model.lowers[target.index], "fx", cfg.seed);
      } else {
        for (std::size_t i = 0; i < model.lowers.size(); ++i) {
          save_lower(root / lower_dir_name(i), model.lowers[i], "fx", cfg.seed);
        }
      }
      save_extractor(root / "fx", model.fx, cfg.seed);
      break;
    case TrainTarget::Kind::flat:
      result = fit_flat(*flat, data.train, tc, data.val);
      save_flat(root / "flat", *flat, cfg.seed);
      break;
  }
  write_file(root / trace_name(target), trace_csv(result.trace));
  log_trace(err, target.to_string(), result);
  return result;
}

void write_report(const MetricsReport& report, const fs::path& dir) {
  emit_report(report, dir, ReportFormat::json);
  emit_report(report, dir, ReportFormat::csv);
}

int cmd_gen_config(const std::string& preset, const std::string& out_path, std::ostream& out) {
  RunConfig cfg;
  if (preset == "desk") {
    cfg = RunConfig::desk();
  } else if (preset == "paper") {
    cfg = RunConfig::paper();
  } else {
    fail(ErrorCode::InvalidConfig, "unknown preset '" + preset + "' (desk or paper)");
  }
  const std::string text = config_json(cfg).dump(2) + "\n";
  if (out_path.empty()) {
    out << text;
  } else {
    write_file(out_path, text);
  }
  return kExitOk;
}

int cmd_gen_data(const std::string& config_path, const std::string& pack, std::ostream& err) {
  const RunConfig cfg = load_config(config_path);
  OutputLock lock(pack);
  const Dataset ds = build_dataset(cfg.dataset);
  save_dataset(ds, pack);
  err << "wrote " << ds.samples.size() << " samples (" << cfg.dataset.raw_count() << " raw, "
      << ds.samples.size() - cfg.dataset.raw_count() << " augmented) to " << pack << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& pack, const std::string& target_text,
              const std::string& out_dir, std::ostream& err) {
  const RunConfig cfg = load_config(config_path);
  const TrainTarget target = TrainTarget::parse(target_text);
  const LoadedData data = load_data(cfg, pack);
  OutputLock lock(out_dir);
  const std::size_t threads = default_threads();
  HierarchicalModel model = make_hierarchical(cfg.model(), cfg.seed);
  if (target.kind == TrainTarget::Kind::lower && target.index >= model.lowers.size()) {
    fail(ErrorCode::InvalidConfig, "target " + target_text + " is outside the " +
                                       std::to_string(model.lowers.size()) + " lower models");
  }
  FlatModel flat = make_flat(cfg.model(), cfg.seed);
  train_target(model, &flat, target, cfg, data, out_dir, threads, err);
  return kExitOk;
}

HierarchicalModel load_hierarchical(const RunConfig& cfg, const fs::path& dir) {
  HierarchicalModel model = make_hierarchical(cfg.model(), cfg.seed);
  load_higher(dir / "higher", model.higher);
  load_extractor(dir / "fx", model.fx);
  for (std::size_t i = 0; i < model.lowers.size(); ++i) load_lower(dir / lower_dir_name(i), model.lowers[i]);
  return model;
}

int cmd_eval(const std::string& config_path, const std::string& pack, const std::string& ckpt_dir,
             const std::string& out_dir, std::ostream& err) {
  const RunConfig cfg = load_config(config_path);
  const LoadedData data = load_data(cfg, pack);
  const HierarchicalModel model = load_hierarchical(cfg, ckpt_dir);
  OutputLock lock(out_dir);
  const std::size_t threads = default_threads();
  const auto routed = evaluate_hierarchical(model, data.val, threads);
  const auto oracle = evaluate_oracle_routed(model, data.val, threads);
  const MetricsReport report = build_report(routed, oracle, model.lowers.size(), cfg.gamma);
  write_report(report, out_dir);
  err << "evaluated " << data.val.size() << " validation samples; report in " << out_dir << "\n";
  return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& pack, const std::string& out_dir,
               std::ostream& err) {
  const RunConfig cfg = load_config(config_path);
  const LoadedData data = load_data(cfg, pack);
  OutputLock lock(out_dir);
  const std::size_t threads = default_threads();
  const fs::path ckpt = fs::path(out_dir) / "checkpoints";
  HierarchicalModel model = make_hierarchical(cfg.model(), cfg.seed);
  FlatModel flat = make_flat(cfg.model(), cfg.seed);
  for (const char* t : {"higher", "lowers", "flat"}) {
    train_target(model, &flat, TrainTarget::parse(t), cfg, data, ckpt, threads, err);
  }
  const auto routed = evaluate_hierarchical(model, data.val, threads);
  const auto oracle = evaluate_oracle_routed(model, data.val, threads);
  const auto flat_records = evaluate_flat(flat, data.val, threads);
  const MetricsReport report = build_report(routed, oracle, model.lowers.size(), cfg.gamma,
                                            std::span<const PredictionRecord>(flat_records));
  write_report(report, out_dir);
  err << format_report(report);
  return kExitOk;
}

int cmd_grad_check(std::size_t seeds, std::uint64_t first_seed, std::size_t coordinates, std::ostream& out) {
  GradSuiteOptions options;
  options.seeds.clear();
  for (std::size_t i = 0; i < seeds; ++i) options.seeds.push_back(first_seed + i);
  options.model_coordinates = coordinates;
  std::size_t failures = 0;
  run_gradient_suite(options, [&](const GradCase& c) {
    char line[224];
    std::snprintf(line, sizeof line, "%s  %-28s seed %-4llu max rel err %.3e over %zu coordinates (%.6e vs %.6e)\n",
                  c.passed ? "PASS" : "FAIL", c.name.c_str(), static_cast<unsigned long long>(c.seed),
                  c.result.max_relative_error, c.result.coordinates, c.result.worst_analytic,
                  c.result.worst_numeric);
    out << line;
    if (!c.passed) ++failures;
  });
  out << (failures == 0 ? "all gradient checks passed\n" : std::to_string(failures) + " gradient checks failed\n");
  return failures == 0 ? kExitOk : kExitCheck;
}

int cmd_report(const std::string& in, std::ostream& out) {
  out << format_report(read_report(in));
  return kExitOk;
}

}  // namespace

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::IoError:
    case ErrorCode::CorruptManifest:
    case ErrorCode::EmptyDataset:
    case ErrorCode::LabelOutOfRange:
    case ErrorCode::TooFewSamples:
    case ErrorCode::NonSquareImage:
      return kExitData;
    default:
      return kExitConfig;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical visual review scoring: data generation, training and evaluation", "visreview"};
  app.require_subcommand(1);

  std::string config, pack, out_dir, target, ckpt_dir, in, preset = "desk";
  std::size_t seeds = 5, coordinates = GradSuiteOptions{}.model_coordinates;
  std::uint64_t first_seed = 1;

  auto* gen_config = app.add_subcommand("gen-config", "Print a configuration with every default filled in");
  gen_config->add_option("--preset", preset, "desk (default) or paper")->check(CLI::IsMember({"desk", "paper"}));
  gen_config->add_option("--out", out_dir, "Write to this file instead of standard output");

  auto* gen_data = app.add_subcommand("gen-data", "Generate a synthetic dataset pack");
  gen_data->add_option("--config", config)->required();
  gen_data->add_option("--out", pack, "Pack directory")->required();

  auto* train = app.add_subcommand("train", "Train one model slice");
  train->add_option("--config", config)->required();
  train->add_option("--data", pack)->required();
  train->add_option("--target", target, "higher, lower:<i>, lowers or flat")->required();
  train->add_option("--out", out_dir, "Checkpoint root directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate the hierarchical model on the validation split");
  eval->add_option("--config", config)->required();
  eval->add_option("--data", pack)->required();
  eval->add_option("--ckpt-dir", ckpt_dir)->required();
  eval->add_option("--out", out_dir, "Report directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Train hierarchical and flat models and compare them");
  ablate->add_option("--config", config)->required();
  ablate->add_option("--data", pack)->required();
  ablate->add_option("--out", out_dir, "Report directory")->required();

  auto* grad = app.add_subcommand("grad-check", "Run the finite-difference gradient suite");
  grad->add_option("--seeds", seeds, "Number of seeds")->check(CLI::PositiveNumber);
  grad->add_option("--seed", first_seed, "First seed");
  grad->add_option("--coordinates", coordinates, "Sampled coordinates per tensor in the full-model checks")
      ->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Print a saved report");
  report->add_option("--in", in, "Report directory or report.json")->required();

  std::vector<const char*> argv{"visreview"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen_config) return cmd_gen_config(preset, out_dir, out);
    if (*gen_data) return cmd_gen_data(config, pack, err);
    if (*train) return cmd_train(config, pack, target, out_dir, err);
    if (*eval) return cmd_eval(config, pack, ckpt_dir, out_dir, err);
    if (*ablate) return cmd_ablate(config, pack, out_dir, err);
    if (*grad) return cmd_grad_check(seeds, first_seed, coordinates, out);
    if (*report) return cmd_report(in, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitConfig;
}

}  // namespace vr
