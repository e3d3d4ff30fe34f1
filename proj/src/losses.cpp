// SPDX-License-Identifier: Apache-2.0
#include "kdcal/losses.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "kdcal/error.hpp"

namespace kdcal {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_logits(const Tensor& z, const char* op) {
  if (z.rank() != 2 || z.dim(0) == 0 || z.dim(1) == 0) {
    throw InputError(std::string(op) + ": logits must be a non-empty N x classes array, got " +
                     shape_string(z.shape()));
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw InputError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void check_temperature(double t) {
  if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("temperature must be positive");
}

void check_labels(const Tensor& z, const LabelBatch& y, const char* op) {
  if (y.size() != z.dim(0)) throw InputError(std::string(op) + ": label count differs from batch size");
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= z.dim(1)) {
      throw InputError(std::string(op) + ": label " + std::to_string(label) + " out of range [0, " +
                       std::to_string(z.dim(1)) + ")");
    }
  }
}

void check_embeddings(const Tensor& e_t, const Tensor& e_s, std::size_t min_n, const char* op) {
  if (e_t.rank() != 2 || e_s.rank() != 2) throw InputError(std::string(op) + ": embeddings must be N x d");
  if (e_t.dim(0) != e_s.dim(0)) throw InputError(std::string(op) + ": teacher/student batch sizes differ");
  if (e_t.dim(0) < min_n) {
    throw InputError(std::string(op) + ": needs at least " + std::to_string(min_n) + " samples");
  }
}

// log p(c) for each row and per-sample CE sum.
double nll_sum(const Tensor& logp, const LabelBatch& y) {
  double total = 0.0;
  for (std::size_t r = 0; r < y.size(); ++r) total -= logp(r, static_cast<std::size_t>(y[r]));
  return total;
}

}  // namespace

std::string_view to_string(Distiller d) {
  switch (d) {
    case Distiller::scaled_kd: return "scaled_kd";
    case Distiller::rkd_da: return "rkd_da";
  }
  return "unknown";
}

std::string_view to_string(Augmentation a) {
  switch (a) {
    case Augmentation::none: return "none";
    case Augmentation::mixup: return "mixup";
    case Augmentation::cutout: return "cutout";
    case Augmentation::cutmix: return "cutmix";
  }
  return "unknown";
}

Distiller parse_distiller(std::string_view name) {
  if (name == "scaled_kd") return Distiller::scaled_kd;
  if (name == "rkd_da") return Distiller::rkd_da;
  throw ConfigError("unknown distiller '" + std::string(name) + "' (valid: scaled_kd, rkd_da)");
}

Augmentation parse_augmentation(std::string_view name) {
  if (name == "none") return Augmentation::none;
  if (name == "mixup") return Augmentation::mixup;
  if (name == "cutout") return Augmentation::cutout;
  if (name == "cutmix") return Augmentation::cutmix;
  throw ConfigError("unknown augmentation '" + std::string(name) + "' (valid: none, mixup, cutout, cutmix)");
}

void validate(const DistillSpec& s) {
  if (!(s.alpha >= 0.0 && s.alpha <= 1.0)) throw ConfigError("alpha: must be in [0, 1]");
  if (!(s.temperature > 0.0) || !std::isfinite(s.temperature)) throw ConfigError("temperature: must be > 0");
  if (!(s.mixup_a > 0.0)) throw ConfigError("mixup_a: must be > 0");
  if (s.cutout_size < 1) throw ConfigError("cutout_size: must be >= 1");
  if (!(s.cutmix_p >= 0.0 && s.cutmix_p <= 1.0)) throw ConfigError("cutmix_p: must be in [0, 1]");
  if (!(s.cutmix_a > 0.0)) throw ConfigError("cutmix_a: must be > 0");
}

Tensor temp_log_softmax(const Tensor& z, double temperature) {
  check_logits(z, "temp_softmax");
  check_temperature(temperature);
  if (!z.all_finite()) throw InputError("temp_softmax: non-finite logits");
  const std::size_t n = z.dim(0), c = z.dim(1);
  Tensor out(z.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, z(r, k) / temperature);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      out(r, k) = z(r, k) / temperature - mx;
      sum += std::exp(out(r, k));
    }
    const double log_sum = std::log(sum);
    for (std::size_t k = 0; k < c; ++k) out(r, k) -= log_sum;
  }
  return out;
}

Tensor temp_softmax(const Tensor& z, double temperature) {
  check_logits(z, "temp_softmax");
  check_temperature(temperature);
  if (!z.all_finite()) throw InputError("temp_softmax: non-finite logits");
  const std::size_t n = z.dim(0), c = z.dim(1);
  Tensor out(z.shape());
  for (std::size_t r = 0; r < n; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, z(r, k) / temperature);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      out(r, k) = std::exp(z(r, k) / temperature - mx);
      sum += out(r, k);
    }
    for (std::size_t k = 0; k < c; ++k) out(r, k) /= sum;
  }
  return out;
}

LossValue scaled_kl_loss(const Tensor& z_teacher, const Tensor& z_student, double temperature, bool rescale_T2) {
  check_logits(z_student, "scaled_kl_loss");
  check_same_shape(z_teacher, z_student, "scaled_kl_loss");
  const std::size_t n = z_student.dim(0), c = z_student.dim(1);
  const Tensor lp_t = temp_log_softmax(z_teacher, temperature);
  const Tensor lp_s = temp_log_softmax(z_student, temperature);

  double total = 0.0;
  LossValue out;
  out.logit_grad = Tensor(z_student.shape());
  const double denom = static_cast<double>(n) * static_cast<double>(c);
  const double factor = rescale_T2 ? temperature * temperature : 1.0;
  const double grad_scale = factor / (temperature * denom);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      const double pt = std::exp(lp_t(r, k));
      const double ps = std::exp(lp_s(r, k));
      total += pt * (lp_t(r, k) - lp_s(r, k));
      out.logit_grad(r, k) = (ps - pt) * grad_scale;
    }
  }
  out.value = factor * (total / denom);
  out.components["kd"] = out.value;
  return out;
}

LossValue cross_entropy(const Tensor& z, const LabelBatch& y) {
  check_logits(z, "cross_entropy");
  check_labels(z, y, "cross_entropy");
  const std::size_t n = z.dim(0);
  const Tensor logp = temp_log_softmax(z, 1.0);
  LossValue out;
  out.value = nll_sum(logp, y) / static_cast<double>(n);
  out.logit_grad = Tensor(z.shape());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < z.dim(1); ++k) out.logit_grad(r, k) = std::exp(logp(r, k));
    out.logit_grad(r, static_cast<std::size_t>(y[r])) -= 1.0;
    for (std::size_t k = 0; k < z.dim(1); ++k) out.logit_grad(r, k) /= static_cast<double>(n);
  }
  out.components["ce"] = out.value;
  return out;
}

LossValue pair_cross_entropy(const Tensor& z, const LabelBatch& y_i, const LabelBatch& y_j, double lambda) {
  check_logits(z, "pair_cross_entropy");
  check_labels(z, y_i, "pair_cross_entropy");
  check_labels(z, y_j, "pair_cross_entropy");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InputError("pair_cross_entropy: lambda must be in [0, 1]");
  const std::size_t n = z.dim(0);
  const Tensor logp = temp_log_softmax(z, 1.0);
  const double ce_i = nll_sum(logp, y_i) / static_cast<double>(n);
  const double ce_j = nll_sum(logp, y_j) / static_cast<double>(n);
  LossValue out;
  out.value = lambda * ce_i + (1.0 - lambda) * ce_j;
  out.logit_grad = Tensor(z.shape());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < z.dim(1); ++k) out.logit_grad(r, k) = std::exp(logp(r, k));
    out.logit_grad(r, static_cast<std::size_t>(y_i[r])) -= lambda;
    out.logit_grad(r, static_cast<std::size_t>(y_j[r])) -= 1.0 - lambda;
    for (std::size_t k = 0; k < z.dim(1); ++k) out.logit_grad(r, k) /= static_cast<double>(n);
  }
  out.components["ce_i"] = ce_i;
  out.components["ce_j"] = ce_j;
  return out;
}

LossValue mixup_ce_loss(const Tensor& z_mix, const MixupBatch& mb) {
  return pair_cross_entropy(z_mix, mb.y_i, mb.y_j, mb.lambda);
}

LossValue cutmix_ce_loss(const Tensor& z_cm, const CutMixBatch& cm) {
  return pair_cross_entropy(z_cm, cm.y_i, cm.y_j, cm.lambda_adj);
}

MixupDistillValue mixup_distill_loss(const Tensor& z_t_i, const Tensor& z_s_i, const Tensor& z_t_j,
                                     const Tensor& z_s_j, double temperature, bool rescale_T2) {
  check_same_shape(z_s_i, z_s_j, "mixup_distill_loss");
  LossValue a = scaled_kl_loss(z_t_i, z_s_i, temperature, rescale_T2);
  LossValue b = scaled_kl_loss(z_t_j, z_s_j, temperature, rescale_T2);
  return {a.value + b.value, std::move(a.logit_grad), std::move(b.logit_grad)};
}

LossValue mixup_distill_loss(const Tensor& z_teacher, const Tensor& z_student, std::span<const std::size_t> pairing,
                             double temperature, bool rescale_T2) {
  check_same_shape(z_teacher, z_student, "mixup_distill_loss");
  if (pairing.size() != z_student.dim(0)) throw InputError("mixup_distill_loss: pairing length mismatch");
  const Tensor z_t_j = take_rows(z_teacher, pairing);
  const Tensor z_s_j = take_rows(z_student, pairing);
  MixupDistillValue v = mixup_distill_loss(z_teacher, z_student, z_t_j, z_s_j, temperature, rescale_T2);
  LossValue out;
  out.value = v.value;
  out.logit_grad = std::move(v.grad_i);
  const std::size_t c = z_student.dim(1);
  for (std::size_t n = 0; n < pairing.size(); ++n) {
    for (std::size_t k = 0; k < c; ++k) out.logit_grad(pairing[n], k) += v.grad_j(n, k);
  }
  out.components["kd"] = out.value;
  return out;
}

double huber(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double huber_grad(double x) {
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

LossValue rkd_distance_loss(const Tensor& e_teacher, const Tensor& e_student) {
  check_embeddings(e_teacher, e_student, 2, "rkd_distance_loss");
  const std::size_t n = e_student.dim(0), dt = e_teacher.dim(1), ds = e_student.dim(1);
  const std::size_t pairs = n * (n - 1) / 2;

  auto distances = [n](const Tensor& e, std::size_t d) {
    std::vector<double> out;
    out.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = e(i, k) - e(j, k);
          sq += diff * diff;
        }
        out.push_back(std::sqrt(sq));
      }
    }
    return out;
  };
  const auto d_t = distances(e_teacher, dt);
  const auto d_s = distances(e_student, ds);
  double mu_t = 0.0, mu_s = 0.0;
  for (std::size_t p = 0; p < pairs; ++p) {
    mu_t += d_t[p];
    mu_s += d_s[p];
  }
  mu_t /= static_cast<double>(pairs);
  mu_s /= static_cast<double>(pairs);

  LossValue out;
  out.embedding_grad = Tensor(e_student.shape());
  if (mu_t == 0.0 || mu_s == 0.0) {
    out.components["rkd_distance"] = 0.0;
    return out;
  }

  double total = 0.0;
  std::vector<double> g(pairs);
  double weighted = 0.0;  // sum_p g_p d_s[p]
  for (std::size_t p = 0; p < pairs; ++p) {
    const double r = d_s[p] / mu_s - d_t[p] / mu_t;
    total += huber(r);
    g[p] = huber_grad(r) / static_cast<double>(pairs);
    weighted += g[p] * d_s[p];
  }
  out.value = total / static_cast<double>(pairs);

  const double mean_term = weighted / (mu_s * mu_s * static_cast<double>(pairs));
  std::size_t p = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j, ++p) {
      if (d_s[p] == 0.0) continue;
      const double dl_dd = g[p] / mu_s - mean_term;
      const double scale = dl_dd / d_s[p];
      for (std::size_t k = 0; k < ds; ++k) {
        const double diff = e_student(i, k) - e_student(j, k);
        out.embedding_grad(i, k) += scale * diff;
        out.embedding_grad(j, k) -= scale * diff;
      }
    }
  }
  out.components["rkd_distance"] = out.value;
  return out;
}

LossValue rkd_angle_loss(const Tensor& e_teacher, const Tensor& e_student) {
  check_embeddings(e_teacher, e_student, 3, "rkd_angle_loss");
  const std::size_t n = e_student.dim(0);
  const double triples = static_cast<double>(n) * static_cast<double>(n - 1) * static_cast<double>(n - 2);

  // Unit edge vectors towards vertex j; norms of zero mark degenerate edges.
  auto edges = [n](const Tensor& e, std::size_t j, RowMatrix& unit, Eigen::VectorXd& norm) {
    const std::size_t d = e.dim(1);
    unit.setZero(static_cast<long>(n), static_cast<long>(d));
    norm.setZero(static_cast<long>(n));
    for (std::size_t i = 0; i < n; ++i) {
      if (i == j) continue;
      double sq = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = e(i, k) - e(j, k);
        unit(static_cast<long>(i), static_cast<long>(k)) = diff;
        sq += diff * diff;
      }
      const double len = std::sqrt(sq);
      norm(static_cast<long>(i)) = len;
      if (len > 0.0) unit.row(static_cast<long>(i)) /= len;
    }
  };

  LossValue out;
  out.embedding_grad = Tensor(e_student.shape());
  const long ds = static_cast<long>(e_student.dim(1));
  RowMatrix ut, us;
  Eigen::VectorXd nt, ns;
  double total = 0.0;
  RowMatrix weight(static_cast<long>(n), static_cast<long>(n));
  for (std::size_t j = 0; j < n; ++j) {
    edges(e_teacher, j, ut, nt);
    edges(e_student, j, us, ns);
    const RowMatrix cos_t = ut * ut.transpose();
    const RowMatrix cos_s = us * us.transpose();
    weight.setZero();
    for (std::size_t i = 0; i < n; ++i) {
      if (i == j) continue;
      for (std::size_t k = 0; k < n; ++k) {
        if (k == j || k == i) continue;
        const long li = static_cast<long>(i), lk = static_cast<long>(k);
        const double r = cos_s(li, lk) - cos_t(li, lk);
        total += huber(r);
        if (ns(li) > 0.0 && ns(lk) > 0.0) weight(li, lk) = huber_grad(r) / triples;
      }
    }
    // Each ordered pair (i, k) and its mirror share the cosine; fold both.
    const RowMatrix sym = weight + weight.transpose();
    const RowMatrix pull = sym * us;
    const Eigen::VectorXd proj = sym.cwiseProduct(cos_s).rowwise().sum();
    Eigen::RowVectorXd vertex = Eigen::RowVectorXd::Zero(ds);
    for (std::size_t i = 0; i < n; ++i) {
      const long li = static_cast<long>(i);
      if (i == j || ns(li) == 0.0) continue;
      const Eigen::RowVectorXd gi = (pull.row(li) - proj(li) * us.row(li)) / ns(li);
      for (long k = 0; k < ds; ++k) out.embedding_grad(i, static_cast<std::size_t>(k)) += gi(k);
      vertex += gi;
    }
    for (long k = 0; k < ds; ++k) out.embedding_grad(j, static_cast<std::size_t>(k)) -= vertex(k);
  }
  out.value = total / triples;
  out.components["rkd_angle"] = out.value;
  return out;
}

LossValue rkd_da_loss(const Tensor& e_teacher, const Tensor& e_student, double distance_weight, double angle_weight) {
  const LossValue dist = rkd_distance_loss(e_teacher, e_student);
  const LossValue angle = rkd_angle_loss(e_teacher, e_student);
  LossValue out;
  out.value = distance_weight * dist.value + angle_weight * angle.value;
  out.embedding_grad = Tensor(e_student.shape());
  for (std::size_t i = 0; i < out.embedding_grad.size(); ++i) {
    out.embedding_grad[i] = distance_weight * dist.embedding_grad[i] + angle_weight * angle.embedding_grad[i];
  }
  out.components["rkd_distance"] = dist.value;
  out.components["rkd_angle"] = angle.value;
  out.components["kd"] = out.value;
  return out;
}

CombinedLoss combined_loss(const DistillSpec& spec, const LossValue& kd, const LossValue& aug) {
  if (!std::isfinite(kd.value) || !std::isfinite(aug.value)) {
    throw NumericError("combined_loss: non-finite component (kd=" + std::to_string(kd.value) +
                       ", aug=" + std::to_string(aug.value) + ")");
  }
  const double a = spec.alpha;
  CombinedLoss out;
  out.value = a * kd.value + (1.0 - a) * aug.value;
  out.components["kd"] = kd.value;
  out.components["aug"] = aug.value;
  auto scaled = [](const Tensor& t, double s) {
    Tensor r = t;
    for (double& v : r.values()) v *= s;
    return r;
  };
  out.kd_logit_grad = scaled(kd.logit_grad, a);
  out.kd_embedding_grad = scaled(kd.embedding_grad, a);
  out.aug_logit_grad = scaled(aug.logit_grad, 1.0 - a);
  return out;
}

}  // namespace kdcal
