// SPDX-License-Identifier: Apache-2.0
#include "kdcal/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

#include "kdcal/error.hpp"
#include "kdcal/rng.hpp"

namespace kdcal {

namespace {

using nlohmann::json;

constexpr std::uint64_t kStreamTestSet = 7;
constexpr std::uint64_t kStreamHoldout = 3;

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return fallback;
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(field(key) + ": expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
        if (std::is_unsigned_v<T> && v.get<long long>() < 0) {
          throw ConfigError(field(key) + ": must be non-negative");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(field(key) + ": " + e.what());
    }
  }

  Section child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Fn>
void prefixed(const std::string& path, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ConfigError(path + "." + e.what());
  }
}

ImageShape parse_shape(Section& s, const std::string& key, ImageShape fallback) {
  const auto v = s.get<std::vector<std::size_t>>(key, {fallback[0], fallback[1], fallback[2]});
  if (v.size() != 3) throw ConfigError(s.field(key) + ": expected [C, H, W]");
  for (std::size_t d : v) {
    if (d < 1) throw ConfigError(s.field(key) + ": entries must be >= 1");
  }
  return {v[0], v[1], v[2]};
}

ModelConfig parse_model(Section& s, ModelConfig d) {
  ModelConfig m;
  const auto arch = s.get<std::string>("arch", std::string(to_string(d.arch)));
  prefixed(s.field("arch").substr(0, s.field("arch").rfind('.')), [&] {
    try {
      m.arch = parse_arch(arch);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("arch: ") + e.what());
    }
  });
  m.width_multiplier = s.get<double>("width_multiplier", d.width_multiplier);
  if (!(m.width_multiplier > 0.0)) throw ConfigError(s.field("width_multiplier") + ": must be > 0");
  m.seed = s.get<std::uint64_t>("seed", d.seed);
  return m;
}

TrainSection parse_train(Section& s, const TrainSection& d) {
  TrainSection t;
  t.epochs = s.get<std::size_t>("epochs", d.epochs);
  t.batch_size = s.get<std::size_t>("batch_size", d.batch_size);
  t.lr0 = s.get<double>("lr0", d.lr0);
  t.momentum = s.get<double>("momentum", d.momentum);
  t.weight_decay = s.get<double>("weight_decay", d.weight_decay);
  t.crop_pad = s.get<std::size_t>("crop_pad", d.crop_pad);
  t.flip_prob = s.get<double>("flip_prob", d.flip_prob);
  Section sch = s.child("schedule");
  const auto kind = sch.get<std::string>("kind", std::string(to_string(d.schedule.kind)));
  try {
    t.schedule.kind = parse_schedule_kind(kind);
  } catch (const ConfigError& e) {
    throw ConfigError(sch.field("kind") + ": " + e.what());
  }
  // Cosine annealing spans the whole run unless told otherwise.
  t.schedule.t_max = sch.get<std::size_t>("t_max", std::max<std::size_t>(t.epochs, 1));
  t.schedule.milestones = sch.get<std::vector<std::size_t>>("milestones", d.schedule.milestones);
  t.schedule.gamma = sch.get<double>("gamma", d.schedule.gamma);
  t.schedule.eta_min = sch.get<double>("eta_min", d.schedule.eta_min);
  sch.finish();

  TrainConfig probe;
  probe.epochs = t.epochs;
  probe.batch_size = t.batch_size;
  probe.lr0 = t.lr0;
  probe.momentum = t.momentum;
  probe.weight_decay = t.weight_decay;
  probe.schedule = t.schedule;
  probe.crop_pad = t.crop_pad;
  probe.flip_prob = t.flip_prob;
  const std::string path = s.field("x").substr(0, s.field("x").size() - 2);
  try {
    validate(probe.schedule);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ".schedule." + e.what());
  }
  prefixed(path, [&] { validate(probe); });
  return t;
}

json train_to_json(const TrainSection& t) {
  return {
      {"epochs", t.epochs},
      {"batch_size", t.batch_size},
      {"lr0", t.lr0},
      {"momentum", t.momentum},
      {"weight_decay", t.weight_decay},
      {"crop_pad", t.crop_pad},
      {"flip_prob", t.flip_prob},
      {"schedule",
       {{"kind", std::string(to_string(t.schedule.kind))},
        {"t_max", t.schedule.t_max},
        {"milestones", t.schedule.milestones},
        {"gamma", t.schedule.gamma},
        {"eta_min", t.schedule.eta_min}}},
  };
}

json model_to_json(const ModelConfig& m) {
  return {{"arch", std::string(to_string(m.arch))}, {"width_multiplier", m.width_multiplier}, {"seed", m.seed}};
}

TrainConfig to_train_config(const TrainSection& t, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = t.epochs;
  c.batch_size = t.batch_size;
  c.lr0 = t.lr0;
  c.momentum = t.momentum;
  c.weight_decay = t.weight_decay;
  c.schedule = t.schedule;
  c.crop_pad = t.crop_pad;
  c.flip_prob = t.flip_prob;
  c.seed = seed;
  return c;
}

std::vector<std::filesystem::path> as_paths(const std::vector<std::string>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

nlohmann::json to_json(const DistillSpec& d) {
  return {
      {"distiller", std::string(to_string(d.distiller))},
      {"augmentation", std::string(to_string(d.augmentation))},
      {"alpha", d.alpha},
      {"temperature", d.temperature},
      {"mixup_a", d.mixup_a},
      {"cutout_size", d.cutout_size},
      {"cutmix_p", d.cutmix_p},
      {"cutmix_a", d.cutmix_a},
      {"grad_rescale_T2", d.grad_rescale_T2},
  };
}

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  ExperimentConfig c;
  const ExperimentConfig d;
  Section root(j, "");
  c.seed = root.get<std::uint64_t>("seed", d.seed);
  c.output_dir = root.get<std::string>("output_dir", d.output_dir);
  if (c.output_dir.empty()) throw ConfigError("output_dir: must not be empty");
  c.name = root.get<std::string>("name", "");
  if (c.name.empty()) {
    const std::filesystem::path p(c.output_dir);
    c.name = p.filename().empty() ? p.parent_path().filename().string() : p.filename().string();
  }

  {
    Section s = root.child("dataset");
    DatasetConfig& ds = c.dataset;
    ds.kind = s.get<std::string>("kind", d.dataset.kind);
    if (ds.kind != "synthetic" && ds.kind != "cifar10" && ds.kind != "cifar100") {
      throw ConfigError(s.field("kind") + ": unknown dataset kind '" + ds.kind +
                        "' (valid: synthetic, cifar10, cifar100)");
    }
    const std::size_t default_classes = ds.kind == "cifar100" ? 100 : 10;
    ds.n_classes = s.get<std::size_t>("n_classes", default_classes);
    ds.samples_per_class = s.get<std::size_t>("samples_per_class", d.dataset.samples_per_class);
    ds.test_samples_per_class = s.get<std::size_t>("test_samples_per_class", d.dataset.test_samples_per_class);
    ds.image_shape = parse_shape(s, "image_shape", d.dataset.image_shape);
    ds.seed = s.get<std::uint64_t>("seed", c.seed);
    ds.train_paths = s.get<std::vector<std::string>>("train_paths", {});
    ds.val_paths = s.get<std::vector<std::string>>("val_paths", {});
    ds.test_paths = s.get<std::vector<std::string>>("test_paths", {});
    ds.val_fraction = s.get<double>("val_fraction", d.dataset.val_fraction);
    s.finish();
    if (ds.n_classes < 2) throw ConfigError(s.field("n_classes") + ": must be >= 2");
    if (ds.kind == "synthetic") {
      if (ds.samples_per_class < 1) throw ConfigError(s.field("samples_per_class") + ": must be >= 1");
      if (ds.test_samples_per_class < 1) throw ConfigError(s.field("test_samples_per_class") + ": must be >= 1");
    } else {
      if (ds.train_paths.empty()) throw ConfigError(s.field("train_paths") + ": required for CIFAR datasets");
      if (ds.test_paths.empty()) throw ConfigError(s.field("test_paths") + ": required for CIFAR datasets");
      ds.image_shape = {3, 32, 32};
      if (ds.n_classes != default_classes) {
        throw ConfigError(s.field("n_classes") + ": must be " + std::to_string(default_classes) + " for " + ds.kind);
      }
    }
    if (ds.val_paths.empty() && !(ds.val_fraction > 0.0 && ds.val_fraction < 1.0)) {
      throw ConfigError(s.field("val_fraction") + ": must be in (0, 1) when no val_paths are given");
    }
  }

  {
    Section s = root.child("train");
    c.train = parse_train(s, d.train);
    s.finish();
  }
  {
    Section s = root.child("teacher");
    c.teacher = parse_model(s, {Arch::tiny_teacher, 1.0, c.seed});
    if (s.has("train")) {
      Section t = s.child("train");
      c.teacher_train = parse_train(t, c.train);
      t.finish();
    } else {
      s.child("train");
      c.teacher_train = c.train;
    }
    s.finish();
  }
  {
    Section s = root.child("student");
    c.student = parse_model(s, {Arch::tiny_student, 1.0, c.seed});
    s.finish();
  }
  {
    Section s = root.child("distill");
    DistillSpec& ds = c.distill;
    try {
      ds.distiller = parse_distiller(s.get<std::string>("distiller", "scaled_kd"));
    } catch (const ConfigError& e) {
      if (std::string(e.what()).starts_with("distill.")) throw;
      throw ConfigError(s.field("distiller") + ": " + e.what());
    }
    try {
      ds.augmentation = parse_augmentation(s.get<std::string>("augmentation", "none"));
    } catch (const ConfigError& e) {
      if (std::string(e.what()).starts_with("distill.")) throw;
      throw ConfigError(s.field("augmentation") + ": " + e.what());
    }
    ds.alpha = s.get<double>("alpha", d.distill.alpha);
    ds.temperature = s.get<double>("temperature", d.distill.temperature);
    ds.mixup_a = s.get<double>("mixup_a", d.distill.mixup_a);
    ds.cutout_size = s.get<std::size_t>("cutout_size", d.distill.cutout_size);
    ds.cutmix_p = s.get<double>("cutmix_p", d.distill.cutmix_p);
    ds.cutmix_a = s.get<double>("cutmix_a", d.distill.cutmix_a);
    ds.grad_rescale_T2 = s.get<bool>("grad_rescale_T2", d.distill.grad_rescale_T2);
    s.finish();
    prefixed("distill", [&] { validate(ds); });
  }
  {
    Section s = root.child("eval");
    c.n_bins = s.get<std::size_t>("n_bins", d.n_bins);
    s.finish();
    if (c.n_bins < 1) throw ConfigError("eval.n_bins: must be >= 1");
  }
  root.finish();

  // Architectures must fit the input; report against the owning section.
  prefixed("teacher", [&] { validate(teacher_spec(c)), (void)parameter_count(teacher_spec(c)); });
  prefixed("student", [&] { validate(student_spec(c)), (void)parameter_count(student_spec(c)); });
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const DatasetConfig& ds = c.dataset;
  json teacher = model_to_json(c.teacher);
  teacher["train"] = train_to_json(c.teacher_train);
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"dataset",
       {{"kind", ds.kind},
        {"n_classes", ds.n_classes},
        {"samples_per_class", ds.samples_per_class},
        {"test_samples_per_class", ds.test_samples_per_class},
        {"image_shape", {ds.image_shape[0], ds.image_shape[1], ds.image_shape[2]}},
        {"seed", ds.seed},
        {"train_paths", ds.train_paths},
        {"val_paths", ds.val_paths},
        {"test_paths", ds.test_paths},
        {"val_fraction", ds.val_fraction}}},
      {"teacher", teacher},
      {"student", model_to_json(c.student)},
      {"distill", to_json(c.distill)},
      {"train", train_to_json(c.train)},
      {"eval", {{"n_bins", c.n_bins}}},
  };
}

ModelSpec teacher_spec(const ExperimentConfig& c) {
  return {c.teacher.arch, c.dataset.n_classes, c.teacher.width_multiplier, c.dataset.image_shape, c.teacher.seed};
}

ModelSpec student_spec(const ExperimentConfig& c) {
  return {c.student.arch, c.dataset.n_classes, c.student.width_multiplier, c.dataset.image_shape, c.student.seed};
}

TrainConfig teacher_train_config(const ExperimentConfig& c) { return to_train_config(c.teacher_train, c.seed); }
TrainConfig student_train_config(const ExperimentConfig& c) { return to_train_config(c.train, c.seed); }

ExperimentData load_experiment_data(const DatasetConfig& c) {
  Dataset train;
  Dataset test;
  if (c.kind == "synthetic") {
    train = make_synthetic(c.n_classes, c.samples_per_class, c.image_shape, c.seed);
    test = make_synthetic(c.n_classes, c.test_samples_per_class, c.image_shape, derive_seed(c.seed, kStreamTestSet));
  } else {
    const CifarVariant v = parse_cifar_variant(c.kind);
    const auto train_paths = as_paths(c.train_paths);
    const auto test_paths = as_paths(c.test_paths);
    train = load_cifar_binary(train_paths, v);
    test = load_cifar_binary(test_paths, v);
  }
  ExperimentData out;
  if (!c.val_paths.empty()) {
    const auto val_paths = as_paths(c.val_paths);
    out.val = load_cifar_binary(val_paths, parse_cifar_variant(c.kind == "synthetic" ? "cifar10" : c.kind));
    out.val.meta.n_classes = c.n_classes;
    out.train = std::move(train);
  } else {
    HoldoutSplit split = split_holdout(train, c.val_fraction, derive_seed(c.seed, kStreamHoldout));
    out.train = std::move(split.train);
    out.val = std::move(split.val);
  }
  out.test = std::move(test);
  validate(out.train);
  validate(out.val);
  validate(out.test);
  return out;
}

std::filesystem::path resolve_output_dir(const ExperimentConfig& c) {
  std::filesystem::path dir(c.output_dir);
  if (const char* root = std::getenv("KDCAL_OUTPUT_ROOT"); root != nullptr && *root != '\0' && dir.is_relative()) {
    dir = std::filesystem::path(root) / dir;
  }
  return dir;
}

nlohmann::json make_run_summary(const ExperimentConfig& config, const std::string& role, const RunRecord& record,
                                const Evaluation& test_eval, const SummaryArtifacts& artifacts) {
  json series = {{"epoch", json::array()},        {"train_loss", json::array()},   {"kd", json::array()},
                 {"aug", json::array()},          {"val_accuracy", json::array()}, {"lr", json::array()}};
  for (const auto& e : record.epochs) {
    series["epoch"].push_back(e.epoch);
    series["train_loss"].push_back(e.train_loss);
    series["kd"].push_back(e.kd_component);
    series["aug"].push_back(e.aug_component);
    series["val_accuracy"].push_back(e.val_accuracy);
    series["lr"].push_back(e.lr);
  }
  return {
      {"name", config.name},
      {"role", role},
      {"config", to_json(config)},
      {"metrics",
       {{"best_epoch", record.best_epoch},
        {"best_val_accuracy", record.best_val_accuracy},
        {"test_accuracy", test_eval.accuracy},
        {"ece", test_eval.report.ece},
        {"oe", test_eval.report.oe},
        {"n_bins", test_eval.report.n_bins},
        {"n_test", test_eval.report.n_samples}}},
      {"series", series},
      {"artifacts",
       {{"checkpoint", artifacts.checkpoint},
        {"config", artifacts.config},
        {"bins_csv", artifacts.bins_csv},
        {"scatter_csv", artifacts.scatter_csv}}},
      {"wall_time_s", record.wall_time_s},
  };
}

}  // namespace kdcal
