// SPDX-License-Identifier: Apache-2.0
#include "kdcal/augment.hpp"

#include <algorithm>
#include <cmath>

#include "kdcal/error.hpp"

namespace kdcal {

namespace {

void check_batch(const Tensor& x, const LabelBatch& y, const char* op) {
  if (x.rank() != 4) throw InputError(std::string(op) + ": expected an N x C x H x W batch");
  if (x.dim(0) != y.size()) throw InputError(std::string(op) + ": image and label counts differ");
}

void check_pairing(const std::vector<std::size_t>& pairing, std::size_t n) {
  if (pairing.size() != n) throw InputError("pairing length differs from batch size");
  std::vector<bool> seen(n, false);
  for (std::size_t p : pairing) {
    if (p >= n || seen[p]) throw InputError("pairing is not a permutation");
    seen[p] = true;
  }
}

std::size_t clip_sub(std::size_t center, std::size_t half) { return center > half ? center - half : 0; }

}  // namespace

MixupBatch mixup(const Tensor& x, const LabelBatch& y, double a, Rng& rng, const MixupOverrides& overrides) {
  check_batch(x, y, "mixup");
  if (!(a > 0.0)) throw ConfigError("mixup: Beta parameter a must be positive");
  const std::size_t n = x.dim(0);
  if (n < 2) throw InputError("mixup: batch size must be >= 2");

  MixupBatch mb;
  mb.lambda = overrides.lambda ? *overrides.lambda : rng.beta(a, a);
  if (!(mb.lambda >= 0.0 && mb.lambda <= 1.0)) throw ConfigError("mixup: lambda must be in [0, 1]");
  mb.pairing = overrides.pairing ? *overrides.pairing : rng.permutation(n);
  check_pairing(mb.pairing, n);

  const double lam = mb.lambda;
  const std::size_t row = x.row_size();
  mb.x_mix = Tensor(x.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const double* xi = x.data() + s * row;
    const double* xj = x.data() + mb.pairing[s] * row;
    double* out = mb.x_mix.data() + s * row;
    // Rounding can land one ulp outside [min, max]; clamp so every mixed
    // pixel stays between its two sources.
    for (std::size_t k = 0; k < row; ++k) {
      const double v = lam * xi[k] + (1.0 - lam) * xj[k];
      out[k] = std::clamp(v, std::min(xi[k], xj[k]), std::max(xi[k], xj[k]));
    }
  }
  mb.y_i = y;
  mb.y_j.resize(n);
  for (std::size_t s = 0; s < n; ++s) mb.y_j[s] = y[mb.pairing[s]];
  return mb;
}

Box cutout_box(std::size_t r, std::size_t c, std::size_t hole, std::size_t height, std::size_t width) {
  const std::size_t half = hole / 2;
  return {clip_sub(r, half), std::min(height, r + half), clip_sub(c, half), std::min(width, c + half)};
}

void zero_box(Tensor& images, std::size_t n, const Box& box) {
  const std::size_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
  for (std::size_t c = 0; c < C; ++c) {
    double* plane = images.data() + (n * C + c) * H * W;
    for (std::size_t r = box.r1; r < box.r2; ++r) std::fill(plane + r * W + box.c1, plane + r * W + box.c2, 0.0);
  }
}

CutoutBatch cutout(const Tensor& x, const LabelBatch& y, std::size_t hole, Rng& rng,
                   std::span<const std::pair<std::size_t, std::size_t>> forced_centers) {
  check_batch(x, y, "cutout");
  if (hole < 1) throw ConfigError("cutout: hole size must be >= 1");
  const std::size_t n = x.dim(0), H = x.dim(2), W = x.dim(3);
  if (!forced_centers.empty() && forced_centers.size() != n) {
    throw InputError("cutout: forced centre count differs from batch size");
  }
  CutoutBatch cb{x, y, {}};
  cb.boxes.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t r, c;
    if (forced_centers.empty()) {
      r = rng.uniform_index(H);
      c = rng.uniform_index(W);
    } else {
      std::tie(r, c) = forced_centers[s];
    }
    cb.boxes.push_back(cutout_box(r, c, hole, H, W));
    zero_box(cb.x_cut, s, cb.boxes.back());
  }
  return cb;
}

Box cutmix_box(double lambda, std::size_t cy, std::size_t cx, std::size_t height, std::size_t width) {
  const double ratio = std::sqrt(1.0 - lambda);
  // The epsilon keeps exact products such as 0.6 * 10 from flooring to 5.
  const auto cut_h = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(height) + 1e-9));
  const auto cut_w = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(width) + 1e-9));
  return {clip_sub(cy, cut_h / 2), std::min(height, cy + cut_h / 2), clip_sub(cx, cut_w / 2),
          std::min(width, cx + cut_w / 2)};
}

CutMixBatch cutmix(const Tensor& x, const LabelBatch& y, double p, double a, Rng& rng,
                   const CutMixOverrides& overrides) {
  check_batch(x, y, "cutmix");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("cutmix: probability must be in [0, 1]");
  if (!(a > 0.0)) throw ConfigError("cutmix: Beta parameter a must be positive");
  const std::size_t n = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (n < 2) throw InputError("cutmix: batch size must be >= 2");

  CutMixBatch cm;
  cm.y_i = y;
  cm.applied = overrides.apply ? *overrides.apply : rng.uniform() < p;
  if (!cm.applied) {
    cm.x_cm = x;
    cm.y_j = y;
    cm.lambda_adj = 1.0;
    cm.pairing.resize(n);
    for (std::size_t s = 0; s < n; ++s) cm.pairing[s] = s;
    return cm;
  }
  const double lambda = overrides.lambda ? *overrides.lambda : rng.beta(a, a);
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("cutmix: lambda must be in [0, 1]");
  std::size_t cy, cx;
  if (overrides.center) {
    std::tie(cy, cx) = *overrides.center;
  } else {
    cy = rng.uniform_index(H);
    cx = rng.uniform_index(W);
  }
  cm.pairing = overrides.pairing ? *overrides.pairing : rng.permutation(n);
  check_pairing(cm.pairing, n);
  cm.box = cutmix_box(lambda, cy, cx, H, W);
  cm.lambda_adj = 1.0 - static_cast<double>(cm.box.area()) / static_cast<double>(H * W);

  cm.x_cm = x;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t src = cm.pairing[s];
    for (std::size_t c = 0; c < C; ++c) {
      const double* from = x.data() + (src * C + c) * H * W;
      double* to = cm.x_cm.data() + (s * C + c) * H * W;
      for (std::size_t r = cm.box.r1; r < cm.box.r2; ++r) {
        std::copy(from + r * W + cm.box.c1, from + r * W + cm.box.c2, to + r * W + cm.box.c1);
      }
    }
  }
  cm.y_j.resize(n);
  for (std::size_t s = 0; s < n; ++s) cm.y_j[s] = y[cm.pairing[s]];
  return cm;
}

}  // namespace kdcal
