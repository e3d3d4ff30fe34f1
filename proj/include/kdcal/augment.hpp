// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "kdcal/data.hpp"
#include "kdcal/rng.hpp"
#include "kdcal/tensor.hpp"

namespace kdcal {

/// Half-open pixel rectangle rows [r1, r2) x cols [c1, c2).
struct Box {
  std::size_t r1 = 0, r2 = 0, c1 = 0, c2 = 0;

  std::size_t area() const { return (r2 - r1) * (c2 - c1); }
  bool contains(std::size_t r, std::size_t c) const { return r >= r1 && r < r2 && c >= c1 && c < c2; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct MixupBatch {
  Tensor x_mix;
  LabelBatch y_i;
  LabelBatch y_j;
  double lambda = 1.0;
  std::vector<std::size_t> pairing;  // x_j[n] = x[pairing[n]]
};

/// Values that replace the corresponding random draws. For tests.
struct MixupOverrides {
  std::optional<double> lambda;
  std::optional<std::vector<std::size_t>> pairing;
};

/// One lambda ~ Beta(a, a) and one uniform pairing permutation per batch;
/// x_mix = lambda x + (1 - lambda) x[pairing]. Draw order: lambda, pairing.
MixupBatch mixup(const Tensor& x, const LabelBatch& y, double a, Rng& rng, const MixupOverrides& overrides = {});

struct CutoutBatch {
  Tensor x_cut;
  LabelBatch y;
  std::vector<Box> boxes;
};

/// Box of nominal side `hole` centred on (r, c): [r - hole/2, r + hole/2)
/// per axis, clipped to the H x W grid.
Box cutout_box(std::size_t r, std::size_t c, std::size_t hole, std::size_t height, std::size_t width);

/// Zeroes `box` in every channel of sample n (in place).
void zero_box(Tensor& images, std::size_t n, const Box& box);

/// One hole per sample, centre uniform over the grid. Apply to normalized
/// images so the hole is zero in model-input space.
CutoutBatch cutout(const Tensor& x, const LabelBatch& y, std::size_t hole, Rng& rng,
                   std::span<const std::pair<std::size_t, std::size_t>> forced_centers = {});

struct CutMixBatch {
  Tensor x_cm;
  LabelBatch y_i;
  LabelBatch y_j;
  double lambda_adj = 1.0;
  Box box;
  bool applied = false;
  std::vector<std::size_t> pairing;
};

struct CutMixOverrides {
  std::optional<bool> apply;
  std::optional<double> lambda;
  std::optional<std::pair<std::size_t, std::size_t>> center;  // (row, col)
  std::optional<std::vector<std::size_t>> pairing;
};

/// Box with side floor(sqrt(1 - lambda) * extent) per axis centred on
/// (cy, cx): [c - side/2, c + side/2), clipped.
Box cutmix_box(double lambda, std::size_t cy, std::size_t cx, std::size_t height, std::size_t width);

/// With probability p pastes one box from the paired image into every
/// sample; lambda_adj = 1 - area / (H W) from the clipped box. Draw order:
/// apply coin, lambda ~ Beta(a, a), centre row, centre col, pairing.
CutMixBatch cutmix(const Tensor& x, const LabelBatch& y, double p, double a, Rng& rng,
                   const CutMixOverrides& overrides = {});

}  // namespace kdcal
