#pragma once

// Minimal differentiable core: MLP encoder, normalized projector, cosine
// classifier, SGD with momentum, cosine schedule and finite-difference checks.
// Batches are row-major in the sense that each row of a matrix is a sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bacon/error.hpp"
#include "bacon/random.hpp"

namespace bacon {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Linear {
  Matrix weight;  // out x in
  Vector bias;    // out
};

// Stack of affine layers with tanh between consecutive layers (none after the
// last one).
struct Mlp {
  std::vector<Linear> layers;

  Eigen::Index in_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  Eigen::Index out_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }
};

struct MlpCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // affine output of each layer
};

inline Matrix mlp_forward(const Mlp& mlp, const Matrix& x, MlpCache* cache = nullptr) {
  detail::require(!mlp.layers.empty(), "mlp_forward: empty network");
  detail::require(x.cols() == mlp.in_dim(), "mlp_forward: input dimension " + std::to_string(x.cols()) +
                                                 " does not match " + std::to_string(mlp.in_dim()));
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Matrix h = x;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    Matrix a = h * layer.weight.transpose();
    a.rowwise() += layer.bias.transpose();
    if (cache) {
      cache->inputs.push_back(h);
      cache->pre.push_back(a);
    }
    h = (l + 1 < mlp.layers.size()) ? Matrix(a.array().tanh()) : std::move(a);
  }
  return h;
}

// Accumulates parameter gradients into `grad` (same shape as `mlp`) and
// optionally returns the gradient with respect to the input.
inline void mlp_backward(const Mlp& mlp, const MlpCache& cache, const Matrix& d_out, Mlp& grad,
                         Matrix* d_in = nullptr) {
  Matrix d = d_out;
  for (std::size_t l = mlp.layers.size(); l-- > 0;) {
    if (l + 1 < mlp.layers.size()) {
      const Matrix t = cache.pre[l].array().tanh();
      d = d.array() * (1.0 - t.array().square());
    }
    grad.layers[l].weight.noalias() += d.transpose() * cache.inputs[l];
    grad.layers[l].bias += d.colwise().sum().transpose();
    if (l > 0 || d_in) d = d * mlp.layers[l].weight;
  }
  if (d_in) *d_in = std::move(d);
}

struct ModelConfig {
  int d_in = 16;
  int d_hidden = 64;  // 0 -> single linear encoder layer
  int d_feat = 16;
  int proj_hidden = 64;  // 0 -> single linear projector layer
  int d_proj = 32;
  int num_classes = 10;
  double classifier_scale = 10.0;
};

// Shared encoder, contrastive projector and cosine classifier.
struct Model {
  Mlp encoder;
  Mlp projector;
  Matrix classifier;  // num_classes x d_feat
  double scale = 10.0;
};

enum Block : unsigned { kEncoder = 1u, kProjector = 2u, kClassifier = 4u, kAllBlocks = 7u };

// Visits every trainable tensor as (name, block, tensor).
template <typename M, typename F>
  requires std::is_same_v<std::remove_const_t<M>, Model>
void for_each_tensor(M& model, F&& fn) {
  for (std::size_t l = 0; l < model.encoder.layers.size(); ++l) {
    fn("encoder." + std::to_string(l) + ".weight", kEncoder, model.encoder.layers[l].weight);
    fn("encoder." + std::to_string(l) + ".bias", kEncoder, model.encoder.layers[l].bias);
  }
  for (std::size_t l = 0; l < model.projector.layers.size(); ++l) {
    fn("projector." + std::to_string(l) + ".weight", kProjector, model.projector.layers[l].weight);
    fn("projector." + std::to_string(l) + ".bias", kProjector, model.projector.layers[l].bias);
  }
  fn(std::string("classifier.weight"), kClassifier, model.classifier);
}

// Zero tensor tree with the same shapes as `model`.
inline Model zeros_like(const Model& model) {
  Model z = model;
  for_each_tensor(z, [](const std::string&, Block, auto& t) { t.setZero(); });
  return z;
}

inline Linear make_linear(int in, int out, Rng& rng) {
  // Glorot-uniform weights, zero bias.
  const double limit = std::sqrt(6.0 / (in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Linear l{Matrix(out, in), Vector::Zero(out)};
  for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = u(rng);
  return l;
}

inline void validate(const ModelConfig& cfg) {
  detail::require(cfg.d_in >= 1 && cfg.d_feat >= 1 && cfg.d_proj >= 1, "model: dimensions must be >= 1");
  detail::require(cfg.d_hidden >= 0 && cfg.proj_hidden >= 0, "model: hidden widths must be >= 0");
  detail::require(cfg.num_classes >= 1, "model: need at least one class");
  detail::require(cfg.classifier_scale > 0.0, "model: classifier scale must be > 0");
}

inline Model init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  auto rng = make_rng(seed, {kStreamInit});
  Model m;
  if (cfg.d_hidden > 0) {
    m.encoder.layers.push_back(make_linear(cfg.d_in, cfg.d_hidden, rng));
    m.encoder.layers.push_back(make_linear(cfg.d_hidden, cfg.d_feat, rng));
  } else {
    m.encoder.layers.push_back(make_linear(cfg.d_in, cfg.d_feat, rng));
  }
  if (cfg.proj_hidden > 0) {
    m.projector.layers.push_back(make_linear(cfg.d_feat, cfg.proj_hidden, rng));
    m.projector.layers.push_back(make_linear(cfg.proj_hidden, cfg.d_proj, rng));
  } else {
    m.projector.layers.push_back(make_linear(cfg.d_feat, cfg.d_proj, rng));
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  m.classifier.resize(cfg.num_classes, cfg.d_feat);
  for (Eigen::Index i = 0; i < m.classifier.size(); ++i) m.classifier.data()[i] = normal(rng);
  m.scale = cfg.classifier_scale;
  return m;
}

// ---------------------------------------------------------------------------
// Row normalization with a deterministic fallback for zero rows.

struct NormalizeCache {
  Vector norms;
  std::vector<char> fallback;
};

inline Matrix normalize_rows(const Matrix& u, NormalizeCache* cache = nullptr,
                             int* fallbacks = nullptr) {
  Matrix y(u.rows(), u.cols());
  if (cache) {
    cache->norms.resize(u.rows());
    cache->fallback.assign(u.rows(), 0);
  }
  int n_fallback = 0;
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const double n = u.row(i).norm();
    if (cache) cache->norms[i] = n;
    if (n > 0.0 && std::isfinite(n)) {
      y.row(i) = u.row(i) / n;
    } else {
      y.row(i).setZero();
      y(i, 0) = 1.0;
      ++n_fallback;
      if (cache) cache->fallback[i] = 1;
    }
  }
  if (fallbacks) *fallbacks += n_fallback;
  return y;
}

// dL/du from dL/dy for y = u / |u|. Fallback rows get zero gradient.
inline Matrix normalize_rows_backward(const Matrix& y, const NormalizeCache& cache, const Matrix& dy) {
  Matrix du(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (cache.fallback[i]) {
      du.row(i).setZero();
      continue;
    }
    const double dot = y.row(i).dot(dy.row(i));
    du.row(i) = (dy.row(i) - dot * y.row(i)) / cache.norms[i];
  }
  return du;
}

// ---------------------------------------------------------------------------
// Forward operations.

inline Matrix encode_batch(const Model& m, const Matrix& x, MlpCache* cache = nullptr) {
  return mlp_forward(m.encoder, x, cache);
}

inline Vector encode(const Model& m, const Vector& x) {
  return encode_batch(m, x.transpose()).row(0).transpose();
}

struct ProjectCache {
  MlpCache mlp;
  NormalizeCache norm;
  Matrix out;
};

/// Unit-norm contrastive features. Rows whose pre-normalization vector is zero
/// fall back to the first basis vector and are counted in `fallbacks`.
inline Matrix project_batch(const Model& m, const Matrix& z, ProjectCache* cache = nullptr,
                            int* fallbacks = nullptr) {
  const Matrix u = mlp_forward(m.projector, z, cache ? &cache->mlp : nullptr);
  Matrix y = normalize_rows(u, cache ? &cache->norm : nullptr, fallbacks);
  if (cache) cache->out = y;
  return y;
}

inline Vector project(const Model& m, const Vector& z, int* fallbacks = nullptr) {
  return project_batch(m, z.transpose(), nullptr, fallbacks).row(0).transpose();
}

struct ClassifyCache {
  Matrix z_unit;
  NormalizeCache z_norm;
  Matrix w_unit;
  NormalizeCache w_norm;
};

/// Cosine classifier: logit_c = s * <z/|z|, w_c/|w_c|>.
inline Matrix classify_batch(const Model& m, const Matrix& z, ClassifyCache* cache = nullptr) {
  detail::require(z.cols() == m.classifier.cols(), "classify: feature dimension mismatch");
  ClassifyCache local;
  ClassifyCache& c = cache ? *cache : local;
  int zero_rows = 0;
  c.z_unit = normalize_rows(z, &c.z_norm, &zero_rows);
  if (zero_rows > 0) throw InvalidArgument("classify: zero feature vector has no direction");
  c.w_unit = normalize_rows(m.classifier, &c.w_norm);
  return m.scale * (c.z_unit * c.w_unit.transpose());
}

inline Vector classify(const Model& m, const Vector& z) {
  return classify_batch(m, z.transpose()).row(0).transpose();
}

// Backward of classify_batch: accumulates into grad.classifier, returns dL/dz.
inline Matrix classify_backward(const Model& m, const ClassifyCache& c, const Matrix& d_logits,
                                Model& grad) {
  const Matrix d_zu = m.scale * (d_logits * c.w_unit);
  const Matrix d_wu = m.scale * (d_logits.transpose() * c.z_unit);
  grad.classifier += normalize_rows_backward(c.w_unit, c.w_norm, d_wu);
  return normalize_rows_backward(c.z_unit, c.z_norm, d_zu);
}

// ---------------------------------------------------------------------------
// Optimization.

struct TrainSchedule {
  double base_lr = 0.1;
  int total_epochs = 200;
  int batch_size = 256;
  int warmup_epochs = 20;
};

inline void validate(const TrainSchedule& s) {
  detail::require(s.total_epochs >= 1, "schedule: total_epochs must be >= 1");
  detail::require(s.warmup_epochs >= 0 && s.warmup_epochs <= s.total_epochs,
                  "schedule: warmup_epochs must lie in [0, total_epochs]");
  detail::require(s.batch_size >= 2, "schedule: batch_size must be >= 2");
  detail::require(s.base_lr >= 0.0, "schedule: base_lr must be >= 0");
}

/// base_lr * 0.5 * (1 + cos(pi * epoch / total_epochs)).
inline double cosine_lr(int epoch, const TrainSchedule& s) {
  detail::require(epoch >= 0 && epoch < s.total_epochs, "cosine_lr: epoch out of range");
  return s.base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / s.total_epochs));
}

inline bool all_finite(const Model& g) {
  bool ok = true;
  for_each_tensor(g, [&](const std::string&, Block, const auto& t) { ok = ok && t.allFinite(); });
  return ok;
}

// Calls fn(param, grad, state) for every tensor of the selected blocks.
template <typename F>
void zip_tensors(Model& params, const Model& grads, Model& state, unsigned blocks, F&& fn) {
  auto mlp = [&](Mlp& p, const Mlp& g, Mlp& s) {
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      fn(p.layers[l].weight, g.layers[l].weight, s.layers[l].weight);
      fn(p.layers[l].bias, g.layers[l].bias, s.layers[l].bias);
    }
  };
  if (blocks & kEncoder) mlp(params.encoder, grads.encoder, state.encoder);
  if (blocks & kProjector) mlp(params.projector, grads.projector, state.projector);
  if (blocks & kClassifier) fn(params.classifier, grads.classifier, state.classifier);
}

// SGD with heavy-ball momentum: v <- mu * v + g (+ wd * p); p <- p - lr * v.
class Sgd {
 public:
  explicit Sgd(const Model& shape, double momentum = 0.9, double weight_decay = 0.0)
      : velocity_(zeros_like(shape)), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Model& params, const Model& grads, double lr, unsigned blocks = kAllBlocks) {
    if (!all_finite(grads)) throw NumericalError("sgd: non-finite gradient");
    zip_tensors(params, grads, velocity_, blocks, [&](auto& p, const auto& g, auto& v) {
      v *= momentum_;
      v += g;
      if (weight_decay_ > 0.0) v += weight_decay_ * p;
      p -= lr * v;
    });
  }

  const Model& velocity() const { return velocity_; }
  Model& velocity() { return velocity_; }

 private:
  Model velocity_;
  double momentum_;
  double weight_decay_;
};

/// Plain p <- p - lr * g over the selected blocks.
inline void sgd_step(Model& params, const Model& grads, double lr, unsigned blocks = kAllBlocks) {
  Sgd(params, 0.0).step(params, grads, lr, blocks);
}

// ---------------------------------------------------------------------------
// Flat parameter views for finite-difference checks.

inline Vector flatten(const Model& m) {
  Eigen::Index n = 0;
  for_each_tensor(m, [&](const std::string&, Block, const auto& t) { n += t.size(); });
  Vector v(n);
  Eigen::Index off = 0;
  for_each_tensor(m, [&](const std::string&, Block, const auto& t) {
    v.segment(off, t.size()) = Eigen::Map<const Vector>(t.data(), t.size());
    off += t.size();
  });
  return v;
}

inline void unflatten(Model& m, const Vector& v) {
  Eigen::Index off = 0;
  for_each_tensor(m, [&](const std::string&, Block, auto& t) {
    Eigen::Map<Vector>(t.data(), t.size()) = v.segment(off, t.size());
    off += t.size();
  });
  detail::require(off == v.size(), "unflatten: size mismatch");
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  bool passed = true;
};

/// Relative error between an analytic gradient and central differences
/// (f(x+h) - f(x-h)) / 2h. Entries whose magnitude is below `floor` are
/// compared on an absolute scale.
template <typename ValueFn>
GradCheckReport compare_gradient(ValueFn&& value, const Vector& x, const Vector& analytic,
                                 double tol, double step = 1e-5, double floor = 1e-6) {
  detail::require(analytic.size() == x.size(), "grad_check: gradient size mismatch");
  GradCheckReport r;
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + step;
    const double up = value(probe);
    probe[i] = x[i] - step;
    const double down = value(probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    const double err = std::abs(numeric - analytic[i]) / denom;
    if (!(err <= r.max_rel_error)) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
  }
  r.passed = r.max_rel_error < tol;
  return r;
}

/// `loss_fn(x)` returns {value, gradient}; the gradient at `x` is compared
/// against central differences of the value.
template <typename LossFn>
GradCheckReport grad_check(LossFn&& loss_fn, const Vector& x, double tol, double step = 1e-5) {
  const auto [value, analytic] = loss_fn(x);
  (void)value;
  return compare_gradient([&](const Vector& p) { return loss_fn(p).first; }, x, analytic, tol, step);
}

}  // namespace bacon
