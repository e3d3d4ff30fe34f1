// SPDX-License-Identifier: Apache-2.0
#include "kdcal/cli.hpp"

#include <glob.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kdcal/checkpoint.hpp"
#include "kdcal/error.hpp"
#include "kdcal/experiment.hpp"

namespace kdcal {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr double kRecomputeTolerance = 1e-12;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

void check_close(const char* what, double a, double b) {
  if (!(std::abs(a - b) <= kRecomputeTolerance)) {
    std::ostringstream m;
    m << std::setprecision(17) << "artifact validation failed: " << what << " " << a << " vs " << b;
    throw NumericError(m.str());
  }
}

// Reload everything just written and make sure the numbers agree.
void validate_run_dir(const fs::path& dir, const SummaryArtifacts& names, const Dataset& test, std::size_t n_bins) {
  const json summary = json::parse(read_text(dir / "summary.json"));
  const json& m = summary.at("metrics");
  const Model reloaded = load_checkpoint(dir / names.checkpoint);
  const Evaluation again = evaluate(reloaded, test, n_bins);
  check_close("ece", m.at("ece").get<double>(), again.report.ece);
  check_close("oe", m.at("oe").get<double>(), again.report.oe);
  check_close("test_accuracy", m.at("test_accuracy").get<double>(), again.accuracy);

  std::ifstream bins_in(dir / names.bins_csv);
  if (!bins_in) throw IoError("cannot read " + (dir / names.bins_csv).string());
  const BinMetrics from_csv = metrics_from_bins(read_bins_csv(bins_in));
  check_close("bins.csv ece", m.at("ece").get<double>(), from_csv.ece);
  check_close("bins.csv oe", m.at("oe").get<double>(), from_csv.oe);

  const ExperimentConfig echoed = load_experiment_config(dir / names.config);
  (void)echoed;
}

void write_run_dir(const fs::path& dir, const ExperimentConfig& config, const std::string& role,
                   const TrainResult& result, const Dataset& test, std::ostream& out) {
  ensure_dir(dir);
  const SummaryArtifacts names{role + ".ckpt", "config.json", "bins.csv", "scatter.csv"};
  save_checkpoint(result.model, dir / names.checkpoint);
  write_text(dir / names.config, to_json(config).dump(2) + "\n");
  const Evaluation eval = evaluate(result.model, test, config.n_bins);
  reliability_export(eval.report, eval.predictions, {dir / names.bins_csv, dir / names.scatter_csv});
  const json summary = make_run_summary(config, role, result.record, eval, names);
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  validate_run_dir(dir, names, test, config.n_bins);
  out << std::setprecision(6) << role << " " << config.name << ": best_epoch=" << result.record.best_epoch
      << " val_acc=" << result.record.best_val_accuracy << " test_acc=" << eval.accuracy
      << " ece=" << eval.report.ece << " oe=" << eval.report.oe << " -> " << dir.string() << "\n";
}

TrainConfig with_progress(TrainConfig cfg, bool verbose, std::ostream& err) {
  if (!verbose) return cfg;
  const std::size_t epochs = cfg.epochs;
  cfg.on_epoch = [epochs, &err](const EpochRecord& e) {
    err << "epoch " << e.epoch << "/" << epochs << " lr " << e.lr << " loss " << e.train_loss << " val_acc "
        << e.val_accuracy << "\n";
  };
  return cfg;
}

int cmd_train_teacher(const std::string& config_path, bool verbose, std::ostream& out, std::ostream& err) {
  const ExperimentConfig config = load_experiment_config(config_path);
  const ExperimentData data = load_experiment_data(config.dataset);
  const TrainResult result = train_teacher(teacher_spec(config), data.train, data.val,
                                           with_progress(teacher_train_config(config), verbose, err));
  write_run_dir(resolve_output_dir(config), config, "teacher", result, data.test, out);
  return 0;
}

void check_teacher_compatible(const Model& teacher, const ExperimentConfig& config) {
  const ModelSpec& t = teacher.spec();
  const ModelSpec s = student_spec(config);
  if (t.n_classes != s.n_classes || t.input_shape != s.input_shape) {
    std::ostringstream m;
    m << "teacher checkpoint is incompatible: teacher expects input (" << t.input_shape[0] << ", "
      << t.input_shape[1] << ", " << t.input_shape[2] << ") with " << t.n_classes << " classes, dataset has ("
      << s.input_shape[0] << ", " << s.input_shape[1] << ", " << s.input_shape[2] << ") with " << s.n_classes
      << " classes";
    throw InputError(m.str());
  }
}

int cmd_distill(const std::string& config_path, const std::string& teacher_path, bool verbose, std::ostream& out,
                std::ostream& err) {
  const ExperimentConfig config = load_experiment_config(config_path);
  const Model teacher = load_checkpoint(teacher_path);
  check_teacher_compatible(teacher, config);
  out << "distill " << to_json(config.distill).dump() << "\n";
  const ExperimentData data = load_experiment_data(config.dataset);
  const TrainResult result = distill(teacher, student_spec(config), data.train, data.val, config.distill,
                                     with_progress(student_train_config(config), verbose, err));
  write_run_dir(resolve_output_dir(config), config, "student", result, data.test, out);
  return 0;
}

json report_to_json(const CalibrationReport& r) {
  json bins = json::array();
  for (const BinStats& b : r.bins) {
    bins.push_back({{"bin_lo", b.lo}, {"bin_hi", b.hi}, {"count", b.count}, {"accuracy", b.accuracy},
                    {"confidence", b.confidence}});
  }
  return {{"n_bins", r.n_bins}, {"n_samples", r.n_samples}, {"accuracy", r.accuracy},
          {"ece", r.ece},       {"oe", r.oe},               {"bins", bins}};
}

int cmd_evaluate(const std::string& checkpoint, const std::vector<std::string>& dataset_paths,
                 const std::string& variant_name, std::size_t n_bins, const std::string& out_dir, std::ostream& out) {
  const Model model = load_checkpoint(checkpoint);
  std::string name = variant_name;
  if (name.empty()) name = model.spec().n_classes == 100 ? "cifar100" : "cifar10";
  const CifarVariant variant = parse_cifar_variant(name);
  const std::vector<fs::path> paths(dataset_paths.begin(), dataset_paths.end());
  const Dataset data = load_cifar_binary(paths, variant);
  if (data.image_shape() != model.spec().input_shape || data.meta.n_classes != model.spec().n_classes) {
    throw InputError("dataset layout does not match the checkpoint's input shape or class count");
  }
  const Evaluation eval = evaluate(model, data, n_bins);
  const fs::path dir(out_dir);
  ensure_dir(dir);
  reliability_export(eval.report, eval.predictions, {dir / "bins.csv", dir / "scatter.csv"});
  json report = report_to_json(eval.report);
  report["checkpoint"] = checkpoint;
  report["dataset"] = dataset_paths;
  write_text(dir / "report.json", report.dump(2) + "\n");

  std::ifstream bins_in(dir / "bins.csv");
  const BinMetrics from_csv = metrics_from_bins(read_bins_csv(bins_in));
  check_close("bins.csv ece", eval.report.ece, from_csv.ece);
  check_close("bins.csv oe", eval.report.oe, from_csv.oe);

  out << std::setprecision(6) << "n=" << eval.report.n_samples << " accuracy=" << eval.accuracy
      << " ece=" << eval.report.ece << " oe=" << eval.report.oe << "\n";
  return 0;
}

std::vector<std::string> expand_globs(const std::vector<std::string>& patterns) {
  std::vector<std::string> files;
  for (const std::string& p : patterns) {
    glob_t g{};
    const int rc = ::glob(p.c_str(), 0, nullptr, &g);
    if (rc == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) files.emplace_back(g.gl_pathv[i]);
    } else {
      files.push_back(p);  // let the reader report it
    }
    globfree(&g);
  }
  return files;
}

struct CompareRow {
  std::string name;
  double accuracy = 0.0;
  double ece = 0.0;
  double oe = 0.0;
  bool best_ece = false;
  bool best_oe = false;
};

int cmd_compare(const std::vector<std::string>& patterns, const std::string& csv_path, std::ostream& out,
                std::ostream& err) {
  std::vector<CompareRow> rows;
  for (const std::string& file : expand_globs(patterns)) {
    try {
      const json s = json::parse(read_text(file));
      const json& m = s.at("metrics");
      CompareRow r;
      r.name = s.value("name", fs::path(file).parent_path().filename().string());
      r.accuracy = m.at("test_accuracy").get<double>();
      r.ece = m.at("ece").get<double>();
      r.oe = m.at("oe").get<double>();
      if (!std::isfinite(r.accuracy) || !std::isfinite(r.ece) || !std::isfinite(r.oe)) {
        throw FormatError("non-finite metric");
      }
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      err << "warning: skipping " << file << ": " << e.what() << "\n";
    }
  }
  if (rows.empty()) {
    err << "error: no readable summaries\n";
    return 1;
  }
  double min_ece = rows.front().ece;
  double min_oe = rows.front().oe;
  for (const auto& r : rows) {
    min_ece = std::min(min_ece, r.ece);
    min_oe = std::min(min_oe, r.oe);
  }
  for (auto& r : rows) {
    r.best_ece = r.ece == min_ece;
    r.best_oe = r.oe == min_oe;
  }

  std::ostringstream csv;
  csv << "name,accuracy,ece,oe,best_ece,best_oe\n" << std::setprecision(17);
  for (const auto& r : rows) {
    csv << r.name << "," << r.accuracy << "," << r.ece << "," << r.oe << "," << (r.best_ece ? 1 : 0) << ","
        << (r.best_oe ? 1 : 0) << "\n";
  }
  if (csv_path.empty()) {
    out << csv.str() << "\n";
  } else {
    write_text(csv_path, csv.str());
  }

  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  out << std::left << std::setw(static_cast<int>(width)) << "name" << "  " << std::right << std::setw(8) << "acc"
      << std::setw(10) << "ece" << std::setw(10) << "oe" << "\n";
  out << std::fixed;
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.name << "  " << std::right << std::setprecision(2)
        << std::setw(8) << 100.0 * r.accuracy << std::setprecision(4) << std::setw(9) << r.ece
        << (r.best_ece ? "*" : " ") << std::setw(9) << r.oe << (r.best_oe ? "*" : " ") << "\n";
  }
  out << "* best\n";
  out.unsetf(std::ios::floatfield);
  return 0;
}

int cmd_make_synthetic(std::size_t n_classes, std::size_t per_class, std::uint64_t seed, const std::string& path,
                       std::ostream& out) {
  if (n_classes > 10) throw ConfigError("classes: the CIFAR-10 layout holds at most 10 classes");
  const Dataset d = make_synthetic(n_classes, per_class, {3, 32, 32}, seed);
  const fs::path p(path);
  if (p.has_parent_path()) ensure_dir(p.parent_path());
  write_cifar_binary(d, p, CifarVariant::cifar10);
  out << "wrote " << d.size() << " images to " << path << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge distillation toward calibrated students"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Per-epoch progress on stderr");

  std::string config_path;
  auto* teacher_cmd = app.add_subcommand("train-teacher", "Train a teacher with cross-entropy");
  teacher_cmd->add_option("config", config_path, "Experiment config (JSON)")->required();

  std::string teacher_path;
  auto* distill_cmd = app.add_subcommand("distill", "Distill a student from a trained teacher");
  distill_cmd->add_option("config", config_path, "Experiment config (JSON)")->required();
  distill_cmd->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();

  std::string checkpoint;
  std::vector<std::string> dataset_paths;
  std::string variant;
  std::size_t n_bins = 15;
  std::string eval_out = "eval";
  auto* eval_cmd = app.add_subcommand("evaluate", "Calibration report for a checkpoint on CIFAR-layout data");
  eval_cmd->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--dataset", dataset_paths, "CIFAR binary file(s)")->required();
  eval_cmd->add_option("--variant", variant, "cifar10 or cifar100 (default from class count)");
  eval_cmd->add_option("--bins", n_bins, "Number of confidence bins")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out", eval_out, "Output directory");

  std::vector<std::string> summaries;
  std::string compare_csv;
  auto* compare_cmd = app.add_subcommand("compare", "Tabulate accuracy/ECE/OE across run summaries");
  compare_cmd->add_option("--summaries", summaries, "Summary files or glob patterns")->required();
  compare_cmd->add_option("--out", compare_csv, "CSV output path (default: stdout)");

  std::size_t syn_classes = 10;
  std::size_t syn_per_class = 100;
  std::uint64_t syn_seed = 1;
  std::string syn_out;
  auto* syn_cmd = app.add_subcommand("make-synthetic", "Write the synthetic dataset as a CIFAR-10 binary");
  syn_cmd->add_option("--classes", syn_classes, "Number of classes (<= 10)");
  syn_cmd->add_option("--per-class", syn_per_class, "Images per class");
  syn_cmd->add_option("--seed", syn_seed, "Generator seed");
  syn_cmd->add_option("--out", syn_out, "Output file")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*teacher_cmd) return cmd_train_teacher(config_path, verbose, out, err);
    if (*distill_cmd) return cmd_distill(config_path, teacher_path, verbose, out, err);
    if (*eval_cmd) return cmd_evaluate(checkpoint, dataset_paths, variant, n_bins, eval_out, out);
    if (*compare_cmd) return cmd_compare(summaries, compare_csv, out, err);
    if (*syn_cmd) return cmd_make_synthetic(syn_classes, syn_per_class, syn_seed, syn_out, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace kdcal
