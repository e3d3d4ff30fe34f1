// SPDX-License-Identifier: Apache-2.0
#include "kdcal/model.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

#include "kdcal/error.hpp"
#include "kdcal/rng.hpp"

namespace kdcal {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::uint64_t next_instance_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1);
}

std::size_t scaled_channels(std::size_t base, double width) {
  const auto c = static_cast<long>(std::lround(static_cast<double>(base) * width));
  return static_cast<std::size_t>(std::max(1L, c));
}

std::size_t plane(const ImageShape& s) { return s[1] * s[2]; }
std::size_t volume(const ImageShape& s) { return s[0] * s[1] * s[2]; }

struct Recipe {
  std::vector<Layer> layers;
  std::vector<std::vector<std::size_t>> param_shapes;
  std::vector<std::size_t> fan_in;  // per parameter, 0 for biases
  std::size_t embedding_layer = 0;
};

class RecipeBuilder {
 public:
  explicit RecipeBuilder(const ImageShape& input) : shape_(input) {}

  void conv(std::size_t out_c) {
    Layer l{LayerKind::conv3x3, shape_, {out_c, shape_[1], shape_[2]}};
    l.weight = add_param({out_c, shape_[0], 3, 3}, shape_[0] * 9);
    l.bias = add_param({out_c}, 0);
    push(l);
  }
  void relu() { push({LayerKind::relu, shape_, shape_}); }
  void maxpool() {
    const ImageShape out{shape_[0], shape_[1] / 2, shape_[2] / 2};
    if (out[1] == 0 || out[2] == 0) {
      throw ConfigError("input spatial size too small for the architecture's pooling stages");
    }
    push({LayerKind::maxpool2, shape_, out});
  }
  void global_avg_pool() { push({LayerKind::global_avg_pool, shape_, {shape_[0], 1, 1}}); }
  void flatten() { push({LayerKind::flatten, shape_, {volume(shape_), 1, 1}}); }
  void linear(std::size_t out_features) {
    Layer l{LayerKind::linear, shape_, {out_features, 1, 1}};
    l.weight = add_param({out_features, shape_[0]}, shape_[0]);
    l.bias = add_param({out_features}, 0);
    push(l);
  }
  void mark_embedding() { recipe_.embedding_layer = recipe_.layers.size() - 1; }

  Recipe finish() { return std::move(recipe_); }

 private:
  std::size_t add_param(std::vector<std::size_t> shape, std::size_t fan_in) {
    recipe_.param_shapes.push_back(std::move(shape));
    recipe_.fan_in.push_back(fan_in);
    return recipe_.param_shapes.size() - 1;
  }
  void push(const Layer& l) {
    recipe_.layers.push_back(l);
    shape_ = l.out;
  }

  ImageShape shape_;
  Recipe recipe_;
};

Recipe make_recipe(const ModelSpec& spec) {
  validate(spec);
  RecipeBuilder b(spec.input_shape);
  const double w = spec.width_multiplier;
  switch (spec.arch) {
    case Arch::tiny_student:
      b.conv(scaled_channels(16, w));
      b.relu();
      b.maxpool();
      b.conv(scaled_channels(32, w));
      b.relu();
      b.maxpool();
      b.global_avg_pool();
      b.mark_embedding();
      b.flatten();
      b.linear(spec.n_classes);
      break;
    case Arch::tiny_teacher:
      b.conv(scaled_channels(32, w));
      b.relu();
      b.maxpool();
      b.conv(scaled_channels(64, w));
      b.relu();
      b.maxpool();
      b.conv(scaled_channels(128, w));
      b.relu();
      b.maxpool();
      b.global_avg_pool();
      b.mark_embedding();
      b.flatten();
      b.linear(spec.n_classes);
      break;
    case Arch::mlp_probe:
      b.flatten();
      b.linear(scaled_channels(16, w));
      b.relu();
      b.mark_embedding();
      b.linear(spec.n_classes);
      break;
  }
  return b.finish();
}

// Column matrix for a 3x3, stride 1, zero-pad 1 convolution:
// rows index (channel, ky, kx), columns index output pixels; rows are ld
// apart so a whole batch can share one matrix. Each row is the
// channel plane shifted by (ky - 1, kx - 1), so it is built from row copies.
void im2col(const double* img, const ImageShape& s, double* cols, std::size_t ld) {
  const std::size_t C = s[0], H = s[1], W = s[2], HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const double* src = img + c * HW;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* dst = cols + ((c * 3 + ky) * 3 + kx) * ld;
        for (std::size_t y = 0; y < H; ++y) {
          double* row = dst + y * W;
          const std::size_t iy = y + ky;  // offset by one
          if (iy == 0 || iy > H) {
            std::fill_n(row, W, 0.0);
            continue;
          }
          const double* srow = src + (iy - 1) * W;
          if (kx == 1) {
            std::copy_n(srow, W, row);
          } else if (kx == 0) {
            row[0] = 0.0;
            std::copy_n(srow, W - 1, row + 1);
          } else {
            std::copy_n(srow + 1, W - 1, row);
            row[W - 1] = 0.0;
          }
        }
      }
    }
  }
}

// Accumulates into img, which the caller zeroes.
void col2im(const double* cols, const ImageShape& s, double* img, std::size_t ld) {
  const std::size_t C = s[0], H = s[1], W = s[2], HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    double* dst = img + c * HW;
    for (std::size_t ky = 0; ky < 3; ++ky) {
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const double* src = cols + ((c * 3 + ky) * 3 + kx) * ld;
        for (std::size_t y = 0; y < H; ++y) {
          const std::size_t iy = y + ky;
          if (iy == 0 || iy > H) continue;
          double* drow = dst + (iy - 1) * W;
          const double* srow = src + y * W;
          if (kx == 1) {
            for (std::size_t x = 0; x < W; ++x) drow[x] += srow[x];
          } else if (kx == 0) {
            for (std::size_t x = 0; x + 1 < W; ++x) drow[x] += srow[x + 1];
          } else {
            for (std::size_t x = 1; x < W; ++x) drow[x] += srow[x - 1];
          }
        }
      }
    }
  }
}

Tensor batch_tensor(std::size_t n, const ImageShape& s) {
  if (s[1] == 1 && s[2] == 1) return Tensor({n, s[0]});
  return Tensor({n, s[0], s[1], s[2]});
}

}  // namespace

struct ActivationCache {
  std::uint64_t model_id = 0;
  std::uint64_t model_version = 0;
  std::size_t batch = 0;
  std::vector<Tensor> inputs;                        // input of each layer
  std::vector<std::vector<std::uint32_t>> argmax;   // maxpool winners per layer
};

std::string_view to_string(Arch arch) {
  switch (arch) {
    case Arch::tiny_teacher: return "tiny_teacher";
    case Arch::tiny_student: return "tiny_student";
    case Arch::mlp_probe: return "mlp_probe";
  }
  return "unknown";
}

Arch parse_arch(std::string_view name) {
  if (name == "tiny_teacher") return Arch::tiny_teacher;
  if (name == "tiny_student") return Arch::tiny_student;
  if (name == "mlp_probe") return Arch::mlp_probe;
  throw ConfigError("unknown architecture '" + std::string(name) +
                    "' (valid: tiny_teacher, tiny_student, mlp_probe)");
}

void validate(const ModelSpec& spec) {
  if (spec.n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (!(spec.width_multiplier > 0.0) || !std::isfinite(spec.width_multiplier)) {
    throw ConfigError("width_multiplier must be positive");
  }
  for (std::size_t d : spec.input_shape) {
    if (d < 1) throw ConfigError("input_shape entries must be >= 1");
  }
}

Model::Model(const ModelSpec& spec) : spec_(spec), id_(next_instance_id()) {
  Recipe r = make_recipe(spec);
  layers_ = std::move(r.layers);
  embedding_layer_ = r.embedding_layer;
  params_.reserve(r.param_shapes.size());
  for (auto& s : r.param_shapes) params_.emplace_back(std::move(s));
}

Model::Model(const Model& other)
    : spec_(other.spec_),
      layers_(other.layers_),
      params_(other.params_),
      embedding_layer_(other.embedding_layer_),
      mode_(other.mode_),
      normalization_(other.normalization_),
      id_(next_instance_id()) {}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    spec_ = other.spec_;
    layers_ = other.layers_;
    params_ = other.params_;
    embedding_layer_ = other.embedding_layer_;
    mode_ = other.mode_;
    normalization_ = other.normalization_;
    ++version_;
  }
  return *this;
}

std::size_t Model::embedding_dim() const { return layers_[embedding_layer_].out[0]; }

std::span<Tensor> Model::mutable_parameters() {
  ++version_;
  return params_;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

std::size_t parameter_count(const ModelSpec& spec) {
  const Recipe r = make_recipe(spec);
  std::size_t n = 0;
  for (const auto& s : r.param_shapes) n += shape_size(s);
  return n;
}

Model build_model(const ModelSpec& spec) {
  Model model(spec);
  const Recipe r = make_recipe(spec);
  Rng rng(spec.seed);
  auto params = model.mutable_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (r.fan_in[i] == 0) continue;  // biases stay zero
    const double bound = std::sqrt(6.0 / static_cast<double>(r.fan_in[i]));
    for (double& v : params[i].values()) v = (2.0 * rng.uniform() - 1.0) * bound;
  }
  return model;
}

ForwardResult forward(const Model& model, const Tensor& x) {
  const ImageShape& in = model.spec().input_shape;
  if (x.rank() != 4 || x.dim(1) != in[0] || x.dim(2) != in[1] || x.dim(3) != in[2]) {
    throw InputError("forward: input shape " + shape_string(x.shape()) + " does not match model input " +
                     shape_string({in[0], in[1], in[2]}));
  }
  const std::size_t n = x.dim(0);
  if (n == 0) throw InputError("forward: empty batch");

  const bool training = model.mode() == Mode::train;
  auto cache = std::make_shared<ActivationCache>();
  cache->model_id = model.instance_id();
  cache->model_version = model.version();
  cache->batch = n;
  const auto& layers = model.layers();
  const auto params = model.parameters();
  if (training) cache->argmax.resize(layers.size());

  ForwardResult result;
  Tensor cur = x;
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const Layer& l = layers[li];
    Tensor out = batch_tensor(n, l.out);
    switch (l.kind) {
      case LayerKind::conv3x3: {
        const std::size_t K = l.in[0] * 9, HW = plane(l.in), cout = l.out[0];
        ConstMatrixMap w(params[l.weight].data(), static_cast<long>(cout), static_cast<long>(K));
        Eigen::Map<const Eigen::VectorXd> b(params[l.bias].data(), static_cast<long>(cout));
        // One GEMM for the batch: columns of sample s sit at [s*HW, (s+1)*HW).
        const std::size_t ld = n * HW;
        RowMatrix cols(K, ld);
        for (std::size_t s = 0; s < n; ++s) im2col(cur.data() + s * volume(l.in), l.in, cols.data() + s * HW, ld);
        RowMatrix prod(cout, ld);
        prod.noalias() = w * cols;
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t c = 0; c < cout; ++c) {
            const double* src = prod.data() + c * ld + s * HW;
            double* dst = out.data() + (s * cout + c) * HW;
            const double bc = b[static_cast<long>(c)];
            for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] + bc;
          }
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = cur[i] > 0.0 ? cur[i] : 0.0;
        break;
      case LayerKind::maxpool2: {
        const std::size_t C = l.in[0], H = l.in[1], W = l.in[2], oh = l.out[1], ow = l.out[2];
        std::vector<std::uint32_t>* arg = training ? &cache->argmax[li] : nullptr;
        if (arg) arg->resize(out.size());
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t c = 0; c < C; ++c) {
            const double* src = cur.data() + (s * C + c) * H * W;
            double* dst = out.data() + (s * C + c) * oh * ow;
            for (std::size_t y = 0; y < oh; ++y) {
              for (std::size_t xx = 0; xx < ow; ++xx) {
                std::size_t best = (2 * y) * W + 2 * xx;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                  for (std::size_t dx = 0; dx < 2; ++dx) {
                    const std::size_t idx = (2 * y + dy) * W + 2 * xx + dx;
                    if (src[idx] > src[best]) best = idx;
                  }
                }
                dst[y * ow + xx] = src[best];
                if (arg) (*arg)[(s * C + c) * oh * ow + y * ow + xx] = static_cast<std::uint32_t>(best);
              }
            }
          }
        }
        break;
      }
      case LayerKind::global_avg_pool: {
        const std::size_t C = l.in[0], HW = plane(l.in);
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t c = 0; c < C; ++c) {
            const double* src = cur.data() + (s * C + c) * HW;
            double acc = 0.0;
            for (std::size_t i = 0; i < HW; ++i) acc += src[i];
            out[s * C + c] = acc * inv;
          }
        }
        break;
      }
      case LayerKind::flatten:
        std::copy_n(cur.data(), cur.size(), out.data());
        break;
      case LayerKind::linear: {
        const std::size_t fin = l.in[0], fout = l.out[0];
        ConstMatrixMap xin(cur.data(), static_cast<long>(n), static_cast<long>(fin));
        ConstMatrixMap w(params[l.weight].data(), static_cast<long>(fout), static_cast<long>(fin));
        Eigen::Map<const Eigen::RowVectorXd> b(params[l.bias].data(), static_cast<long>(fout));
        MatrixMap o(out.data(), static_cast<long>(n), static_cast<long>(fout));
        o.noalias() = xin * w.transpose();
        o.rowwise() += b;
        break;
      }
    }
    if (li == model.embedding_layer()) result.embedding = out;
    if (training) {
      cache->inputs.push_back(std::move(cur));
    }
    cur = std::move(out);
  }
  if (!cur.all_finite()) throw NumericError("forward produced non-finite logits");
  result.logits = std::move(cur);
  if (training) result.cache = std::move(cache);
  return result;
}

Gradients zero_gradients(const Model& model) {
  Gradients g;
  g.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) g.emplace_back(p.shape());
  return g;
}

void accumulate(Gradients& into, const Gradients& from) {
  if (into.size() != from.size()) throw InputError("gradient collections differ in length");
  for (std::size_t i = 0; i < into.size(); ++i) {
    if (into[i].size() != from[i].size()) throw InputError("gradient tensors differ in size");
    for (std::size_t k = 0; k < into[i].size(); ++k) into[i][k] += from[i][k];
  }
}

Gradients backward(const Model& model, const ForwardResult& result, const Tensor& logit_grad,
                   const Tensor& embedding_grad) {
  const ActivationCache* cache = result.cache.get();
  if (cache == nullptr) throw UsageError("backward requires a train-mode forward result");
  if (cache->model_id != model.instance_id()) {
    throw UsageError("backward: activation cache belongs to a different model instance");
  }
  if (cache->model_version != model.version()) {
    throw UsageError("backward: activation cache is stale (parameters changed since forward)");
  }
  const std::size_t n = cache->batch;
  if (logit_grad.shape() != result.logits.shape()) {
    throw InputError("backward: logit_grad shape " + shape_string(logit_grad.shape()) +
                     " does not match logits " + shape_string(result.logits.shape()));
  }
  if (!embedding_grad.empty() && embedding_grad.shape() != result.embedding.shape()) {
    throw InputError("backward: embedding_grad shape does not match embedding");
  }
  if (!logit_grad.all_finite() || !embedding_grad.all_finite()) {
    throw NumericError("backward: non-finite upstream gradient");
  }

  const auto& layers = model.layers();
  const auto params = model.parameters();
  Gradients grads = zero_gradients(model);

  Tensor g = logit_grad;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const Layer& l = layers[li];
    if (li == model.embedding_layer() && !embedding_grad.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += embedding_grad[i];
    }
    const Tensor& in = cache->inputs[li];
    const bool need_input_grad = li > 0;
    // Elementwise layers reuse the upstream buffer instead of allocating.
    const bool in_place = l.kind == LayerKind::relu || l.kind == LayerKind::flatten;
    Tensor gin = need_input_grad && !in_place ? Tensor(in.shape()) : Tensor();
    switch (l.kind) {
      case LayerKind::conv3x3: {
        const std::size_t K = l.in[0] * 9, HW = plane(l.in), cout = l.out[0];
        ConstMatrixMap w(params[l.weight].data(), static_cast<long>(cout), static_cast<long>(K));
        MatrixMap gw(grads[l.weight].data(), static_cast<long>(cout), static_cast<long>(K));
        Eigen::Map<Eigen::VectorXd> gb(grads[l.bias].data(), static_cast<long>(cout));
        const std::size_t ld = n * HW;
        RowMatrix gout(cout, ld);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t c = 0; c < cout; ++c) {
            std::copy_n(g.data() + (s * cout + c) * HW, HW, gout.data() + c * ld + s * HW);
          }
        }
        RowMatrix cols(K, ld);
        for (std::size_t s = 0; s < n; ++s) im2col(in.data() + s * volume(l.in), l.in, cols.data() + s * HW, ld);
        gw.noalias() += gout * cols.transpose();
        gb += gout.rowwise().sum();
        if (need_input_grad) {
          cols.noalias() = w.transpose() * gout;
          for (std::size_t s = 0; s < n; ++s) col2im(cols.data() + s * HW, l.in, gin.data() + s * volume(l.in), ld);
        }
        break;
      }
      case LayerKind::relu:
        if (need_input_grad) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (!(in[i] > 0.0)) g[i] = 0.0;
          }
          gin = std::move(g);
        }
        break;
      case LayerKind::maxpool2: {
        const auto& arg = cache->argmax[li];
        const std::size_t planes = n * l.in[0], isz = plane(l.in), osz = plane(l.out);
        for (std::size_t p = 0; p < planes; ++p) {
          for (std::size_t k = 0; k < osz; ++k) gin[p * isz + arg[p * osz + k]] += g[p * osz + k];
        }
        break;
      }
      case LayerKind::global_avg_pool: {
        const std::size_t C = l.in[0], HW = plane(l.in);
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t c = 0; c < C; ++c) {
            std::fill_n(gin.data() + (s * C + c) * HW, HW, g[s * C + c] * inv);
          }
        }
        break;
      }
      case LayerKind::flatten:
        if (need_input_grad) gin = Tensor(in.shape(), std::move(g).take_values());
        break;
      case LayerKind::linear: {
        const std::size_t fin = l.in[0], fout = l.out[0];
        ConstMatrixMap go(g.data(), static_cast<long>(n), static_cast<long>(fout));
        ConstMatrixMap xin(in.data(), static_cast<long>(n), static_cast<long>(fin));
        ConstMatrixMap w(params[l.weight].data(), static_cast<long>(fout), static_cast<long>(fin));
        MatrixMap gw(grads[l.weight].data(), static_cast<long>(fout), static_cast<long>(fin));
        Eigen::Map<Eigen::RowVectorXd> gb(grads[l.bias].data(), static_cast<long>(fout));
        gw.noalias() += go.transpose() * xin;
        gb += go.colwise().sum();
        if (need_input_grad) {
          MatrixMap gi(gin.data(), static_cast<long>(n), static_cast<long>(fin));
          gi.noalias() = go * w;
        }
        break;
      }
    }
    g = std::move(gin);
  }
  return grads;
}

Tensor normalize(const Tensor& images, const Normalization& n) {
  if (n.is_identity()) return images;
  if (images.rank() != 4 || images.dim(1) != n.mean.size() || n.stddev.size() != n.mean.size()) {
    throw InputError("normalize: channel count mismatch");
  }
  Tensor out(images.shape());
  const std::size_t C = images.dim(1), HW = images.dim(2) * images.dim(3);
  for (std::size_t s = 0; s < images.dim(0); ++s) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (s * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) out[off + i] = (images[off + i] - n.mean[c]) / n.stddev[c];
    }
  }
  return out;
}

Tensor denormalize(const Tensor& images, const Normalization& n) {
  if (n.is_identity()) return images;
  if (images.rank() != 4 || images.dim(1) != n.mean.size()) {
    throw InputError("denormalize: channel count mismatch");
  }
  Tensor out(images.shape());
  const std::size_t C = images.dim(1), HW = images.dim(2) * images.dim(3);
  for (std::size_t s = 0; s < images.dim(0); ++s) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (s * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) out[off + i] = images[off + i] * n.stddev[c] + n.mean[c];
    }
  }
  return out;
}

}  // namespace kdcal
