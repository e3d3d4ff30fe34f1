// SPDX-License-Identifier: Apache-2.0
#include "kdcal/train.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <numbers>

#include "kdcal/augment.hpp"
#include "kdcal/rng.hpp"

namespace kdcal {

namespace {

// Stream ids for derive_seed; shared by teacher and student training.
constexpr std::uint64_t kStreamCropFlip = 1;
constexpr std::uint64_t kStreamAugment = 2;
constexpr std::uint64_t kStreamShuffleBase = 1000;

struct StepOutcome {
  double loss = 0.0;
  double kd = 0.0;
  double aug = 0.0;
  Gradients grads;
};

using StepFn = std::function<StepOutcome(const Model& model, const Tensor& x, const LabelBatch& y)>;

std::uint64_t hash_batch(std::uint64_t h, const Tensor& x) {
  for (std::size_t i = 0; i < x.size(); ++i) h = derive_seed(h, std::bit_cast<std::uint64_t>(x[i]));
  return derive_seed(h, x.size());
}

double accuracy_on(const Model& model, const Dataset& d, std::size_t batch_size) {
  const PredictionSet p = predict(model, d, batch_size);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < p.size(); ++i) ok += p.predicted[i] == p.actual[i] ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(p.size());
}

void check_dataset_for(const ModelSpec& spec, const Dataset& d, const char* which) {
  validate(d);
  if (d.image_shape() != spec.input_shape) {
    throw ConfigError(std::string(which) + " image shape " + shape_string(d.images.shape()) +
                      " does not match model input_shape");
  }
  if (d.meta.n_classes != spec.n_classes) {
    throw ConfigError(std::string(which) + " has " + std::to_string(d.meta.n_classes) + " classes, model expects " +
                      std::to_string(spec.n_classes));
  }
}

TrainResult run_training(Model model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                         const StepFn& step) {
  const auto started = std::chrono::steady_clock::now();
  Rng crop_rng(derive_seed(cfg.seed, kStreamCropFlip));
  OptimizerState opt = make_optimizer(model, cfg.momentum, cfg.weight_decay);

  RunRecord record;
  record.seed = cfg.seed;
  Model best = model;
  best.set_mode(Mode::eval);
  if (cfg.epochs == 0) record.best_val_accuracy = accuracy_on(best, val, cfg.eval_batch_size);

  bool have_best = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.schedule, epoch, cfg.lr0);
    const BatchPlan plan{cfg.batch_size, derive_seed(cfg.seed, kStreamShuffleBase + epoch), true};
    const auto order = batch_indices(train.size(), plan);
    double loss_sum = 0.0, kd_sum = 0.0, aug_sum = 0.0;
    model.set_mode(Mode::train);
    for (std::size_t bi = 0; bi < order.size(); ++bi) {
      const Batch b = gather(train, order[bi]);
      const Tensor x = standard_augment(b.images, cfg.crop_pad, cfg.flip_prob, crop_rng);
      StepOutcome out;
      try {
        out = step(model, x, b.labels);
        if (!std::isfinite(out.loss)) throw NumericError("non-finite training loss");
        sgd_step(model, out.grads, opt, lr);
      } catch (const NumericError& e) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                                   std::to_string(bi) + ": " + e.what(),
                               best);
      }
      loss_sum += out.loss;
      kd_sum += out.kd;
      aug_sum += out.aug;
      if (cfg.on_batch) cfg.on_batch({epoch + 1, bi, out.loss, out.kd, out.aug});
    }
    model.set_mode(Mode::eval);
    const double nb = static_cast<double>(order.size());
    EpochRecord rec{epoch + 1, loss_sum / nb, kd_sum / nb, aug_sum / nb, accuracy_on(model, val, cfg.eval_batch_size),
                    lr};
    record.epochs.push_back(rec);
    if (cfg.on_epoch) cfg.on_epoch(rec);
    if (!have_best || rec.val_accuracy > record.best_val_accuracy) {
      have_best = true;
      record.best_epoch = rec.epoch;
      record.best_val_accuracy = rec.val_accuracy;
      best = model;
    }
  }
  best.set_mode(Mode::eval);
  record.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {std::move(best), std::move(record)};
}

}  // namespace

OptimizerState make_optimizer(const Model& model, double momentum, double weight_decay) {
  OptimizerState s{momentum, weight_decay, {}};
  for (const auto& p : model.parameters()) s.velocity.emplace_back(p.shape());
  return s;
}

void sgd_step(Model& model, const Gradients& grads, OptimizerState& opt, double lr) {
  const auto params = model.parameters();
  if (grads.size() != params.size() || opt.velocity.size() != params.size()) {
    throw InputError("sgd_step: gradients/velocity not aligned with parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size()) throw InputError("sgd_step: gradient size mismatch");
    if (!grads[i].all_finite()) throw NumericError("sgd_step: non-finite gradient in parameter " + std::to_string(i));
  }
  auto mut = model.mutable_parameters();
  for (std::size_t i = 0; i < mut.size(); ++i) {
    double* theta = mut[i].data();
    double* v = opt.velocity[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < mut[i].size(); ++k) {
      const double gk = g[k] + opt.weight_decay * theta[k];
      v[k] = opt.momentum * v[k] + gk;
      theta[k] -= lr * v[k];
    }
  }
}

std::string_view to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::multistep: return "multistep";
    case ScheduleKind::constant: return "constant";
  }
  return "unknown";
}

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "cosine") return ScheduleKind::cosine;
  if (name == "multistep") return ScheduleKind::multistep;
  if (name == "constant") return ScheduleKind::constant;
  throw ConfigError("unknown schedule '" + std::string(name) + "' (valid: cosine, multistep, constant)");
}

void validate(const Schedule& s) {
  if (s.t_max < 1) throw ConfigError("t_max: must be >= 1");
  if (!(s.gamma > 0.0 && s.gamma <= 1.0)) throw ConfigError("gamma: must be in (0, 1]");
  for (std::size_t i = 1; i < s.milestones.size(); ++i) {
    if (s.milestones[i] <= s.milestones[i - 1]) throw ConfigError("milestones: must be strictly increasing");
  }
  if (!(s.eta_min >= 0.0)) throw ConfigError("eta_min: must be >= 0");
}

double lr_at(const Schedule& schedule, std::size_t epoch, double lr0) {
  switch (schedule.kind) {
    case ScheduleKind::cosine: {
      if (epoch > schedule.t_max) {
        throw UsageError("lr_at: epoch " + std::to_string(epoch) + " beyond cosine t_max " +
                         std::to_string(schedule.t_max));
      }
      const double phase = std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(schedule.t_max);
      return schedule.eta_min + 0.5 * (lr0 - schedule.eta_min) * (1.0 + std::cos(phase));
    }
    case ScheduleKind::multistep: {
      double lr = lr0;
      for (std::size_t m : schedule.milestones) {
        if (m <= epoch) lr *= schedule.gamma;
      }
      return lr;
    }
    case ScheduleKind::constant:
      return lr0;
  }
  return lr0;
}

void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (!(c.lr0 > 0.0)) throw ConfigError("lr0: must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("momentum: must be in [0, 1)");
  if (!(c.weight_decay >= 0.0)) throw ConfigError("weight_decay: must be >= 0");
  if (!(c.flip_prob >= 0.0 && c.flip_prob <= 1.0)) throw ConfigError("flip_prob: must be in [0, 1]");
  if (c.eval_batch_size < 1) throw ConfigError("eval_batch_size: must be >= 1");
  validate(c.schedule);
  if (c.schedule.kind == ScheduleKind::cosine && c.epochs > 0 && c.epochs - 1 > c.schedule.t_max) {
    throw ConfigError("schedule.t_max: cosine schedule shorter than the run");
  }
}

TrainResult train_teacher(const ModelSpec& spec, const Dataset& train, const Dataset& val, const TrainConfig& config) {
  validate(config);
  check_dataset_for(spec, train, "training set");
  check_dataset_for(spec, val, "validation set");
  Model model = build_model(spec);
  model.set_normalization(compute_normalization(train));
  const Normalization norm = model.normalization();

  StepFn step = [&norm](const Model& m, const Tensor& x, const LabelBatch& y) {
    const ForwardResult fr = forward(m, normalize(x, norm));
    const LossValue ce = cross_entropy(fr.logits, y);
    return StepOutcome{ce.value, 0.0, ce.value, backward(m, fr, ce.logit_grad)};
  };
  return run_training(std::move(model), train, val, config, step);
}

std::shared_ptr<const TeacherCache::Entry> TeacherCache::find(std::uint64_t key) const {
  std::lock_guard lock(mu_);
  const auto it = map_.find(key);
  if (it == map_.end()) return nullptr;
  ++hits_;
  return it->second;
}

std::shared_ptr<const TeacherCache::Entry> TeacherCache::insert(std::uint64_t key, Entry entry) {
  auto p = std::make_shared<const Entry>(std::move(entry));
  std::lock_guard lock(mu_);
  return map_.try_emplace(key, std::move(p)).first->second;
}

std::size_t TeacherCache::size() const {
  std::lock_guard lock(mu_);
  return map_.size();
}

std::size_t TeacherCache::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

TrainResult distill(const Model& teacher_in, const ModelSpec& student_spec, const Dataset& train, const Dataset& val,
                    const DistillSpec& dspec, const TrainConfig& config, TeacherCache* cache) {
  validate(config);
  validate(dspec);
  const ModelSpec& tspec = teacher_in.spec();
  if (tspec.input_shape != student_spec.input_shape || tspec.n_classes != student_spec.n_classes) {
    throw ConfigError("teacher/student mismatch: teacher expects input " +
                      shape_string({tspec.input_shape[0], tspec.input_shape[1], tspec.input_shape[2]}) + " with " +
                      std::to_string(tspec.n_classes) + " classes, student " +
                      shape_string({student_spec.input_shape[0], student_spec.input_shape[1],
                                    student_spec.input_shape[2]}) +
                      " with " + std::to_string(student_spec.n_classes));
  }
  check_dataset_for(student_spec, train, "training set");
  check_dataset_for(student_spec, val, "validation set");

  Model teacher = teacher_in;
  teacher.set_mode(Mode::eval);
  Model student = build_model(student_spec);
  student.set_normalization(compute_normalization(train));
  const Normalization s_norm = student.normalization();
  const Normalization t_norm = teacher.normalization();
  const bool shared_norm = s_norm == t_norm;
  Rng aug_rng(derive_seed(config.seed, kStreamAugment));
  const bool need_embedding = dspec.distiller == Distiller::rkd_da;
  std::uint64_t teacher_key =
      derive_seed(derive_seed(teacher_in.instance_id(), teacher_in.version()), need_embedding ? 1 : 0);
  for (const double v : t_norm.mean) teacher_key = derive_seed(teacher_key, std::bit_cast<std::uint64_t>(v));
  for (const double v : t_norm.stddev) teacher_key = derive_seed(teacher_key, std::bit_cast<std::uint64_t>(v));

  auto teacher_outputs = [&](const Tensor& x_raw, const Tensor& x) {
    auto run = [&] {
      ForwardResult r = forward(teacher, shared_norm ? x : normalize(x_raw, t_norm));
      return TeacherCache::Entry{std::move(r.logits), need_embedding ? std::move(r.embedding) : Tensor{}};
    };
    if (!cache) return std::make_shared<const TeacherCache::Entry>(run());
    const std::uint64_t key = hash_batch(teacher_key, x_raw);
    if (auto hit = cache->find(key)) return hit;
    return cache->insert(key, run());
  };

  StepFn step = [&](const Model& m, const Tensor& x_raw, const LabelBatch& y) {
    const Tensor x = normalize(x_raw, s_norm);
    const std::shared_ptr<const TeacherCache::Entry> tr = teacher_outputs(x_raw, x);
    const ForwardResult sr = forward(m, x);

    // Augmented batch first: mixup's pairing also drives the two-stream KD term.
    std::optional<MixupBatch> mb;
    std::optional<CutoutBatch> cb;
    std::optional<CutMixBatch> cm;
    switch (dspec.augmentation) {
      case Augmentation::none: break;
      case Augmentation::mixup: mb = mixup(x, y, dspec.mixup_a, aug_rng); break;
      case Augmentation::cutout: cb = cutout(x, y, dspec.cutout_size, aug_rng); break;
      case Augmentation::cutmix: cm = cutmix(x, y, dspec.cutmix_p, dspec.cutmix_a, aug_rng); break;
    }

    LossValue kd;
    if (dspec.distiller == Distiller::rkd_da) {
      kd = rkd_da_loss(tr->embedding, sr.embedding);
    } else if (mb) {
      kd = mixup_distill_loss(tr->logits, sr.logits, mb->pairing, dspec.temperature, dspec.grad_rescale_T2);
    } else {
      kd = scaled_kl_loss(tr->logits, sr.logits, dspec.temperature, dspec.grad_rescale_T2);
    }

    std::optional<ForwardResult> ar;
    LossValue aug;
    if (mb) {
      ar = forward(m, mb->x_mix);
      aug = mixup_ce_loss(ar->logits, *mb);
    } else if (cb) {
      ar = forward(m, cb->x_cut);
      aug = cross_entropy(ar->logits, cb->y);
    } else if (cm) {
      ar = forward(m, cm->x_cm);
      aug = cutmix_ce_loss(ar->logits, *cm);
    } else {
      aug = cross_entropy(sr.logits, y);
    }

    CombinedLoss total = combined_loss(dspec, kd, aug);
    StepOutcome out{total.value, kd.value, aug.value, {}};
    Tensor orig_grad = total.kd_logit_grad.empty() ? Tensor(sr.logits.shape()) : total.kd_logit_grad;
    if (!ar) {
      for (std::size_t i = 0; i < orig_grad.size(); ++i) orig_grad[i] += total.aug_logit_grad[i];
    }
    out.grads = backward(m, sr, orig_grad, total.kd_embedding_grad);
    if (ar) accumulate(out.grads, backward(m, *ar, total.aug_logit_grad));
    return out;
  };

  TrainResult result = run_training(std::move(student), train, val, config, step);
  result.record.distill = dspec;
  return result;
}

Evaluation evaluate(const Model& model, const Dataset& dataset, std::size_t n_bins, std::size_t batch_size) {
  const ModelSpec& spec = model.spec();
  if (dataset.images.rank() != 4 || dataset.image_shape() != spec.input_shape) {
    throw ConfigError("evaluate: dataset image shape " + shape_string(dataset.images.shape()) +
                      " does not match model input");
  }
  if (dataset.meta.n_classes > spec.n_classes) {
    throw ConfigError("evaluate: dataset has more classes than the model");
  }
  Evaluation ev;
  if (model.mode() == Mode::eval) {
    ev.predictions = predict(model, dataset, batch_size);
  } else {
    Model m = model;
    m.set_mode(Mode::eval);
    ev.predictions = predict(m, dataset, batch_size);
  }
  ev.report = calibration_report(ev.predictions, n_bins);
  ev.accuracy = ev.report.accuracy;
  return ev;
}

}  // namespace kdcal
