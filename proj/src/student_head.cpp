#include "ccma/student_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ccma/teacher_head.hpp"

namespace ccma {

namespace {

void check_dim(const StudentModel& model, const EmbeddingTable& feats, const char* op) {
  if (feats.d != model.dim) {
    throw Error(std::string(op) + ": feature dimension " + std::to_string(feats.d) +
                " differs from model dimension " + std::to_string(model.dim));
  }
}

// logits = W x + b, then in-place softmax.
void head_probs(const StudentModel& model, std::span<const double> x, std::span<double> out) {
  double hi = -INFINITY;
  for (std::size_t k = 0; k < model.num_classes; ++k) {
    auto w = model.weights.row(k);
    double z = model.bias[k];
    for (std::size_t j = 0; j < model.dim; ++j) z += w[j] * x[j];
    out[k] = z;
    hi = std::max(hi, z);
  }
  double total = 0.0;
  for (auto& v : out) {
    v = std::exp(v - hi);
    total += v;
  }
  for (auto& v : out) v /= total;
}

void load_row(const EmbeddingTable& feats, std::size_t i, std::vector<double>& x) {
  auto src = feats.row(i);
  std::copy(src.begin(), src.end(), x.begin());
}

void apply_dropout(std::vector<double>& x, double rho, Rng& rng) {
  if (rho <= 0.0) return;
  const double keep = 1.0 - rho;
  const double scale = 1.0 / keep;
  for (auto& v : x) v = rng.bernoulli(keep) ? v * scale : 0.0;
}

PosteriorMatrix forward_impl(const StudentModel& model, const EmbeddingTable& feats,
                             Rng* mask_rng) {
  check_dim(model, feats, "forward");
  PosteriorMatrix out(feats.n, model.num_classes);
  std::vector<double> x(model.dim);
  for (std::size_t i = 0; i < feats.n; ++i) {
    load_row(feats, i, x);
    if (mask_rng != nullptr) apply_dropout(x, model.dropout, *mask_rng);
    head_probs(model, x, out.row(i));
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw Error("TrainConfig: lr must be non-negative");
  if (!(weight_decay >= 0.0)) throw Error("TrainConfig: weight_decay must be non-negative");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw Error("TrainConfig: betas must lie in (0, 1)");
  }
  if (!(eps > 0.0)) throw Error("TrainConfig: eps must be positive");
  if (epochs == 0) throw Error("TrainConfig: epochs must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("TrainConfig: dropout must lie in [0, 1)");
}

StudentModel init_student(std::size_t num_classes, std::size_t dim, std::uint64_t seed,
                          double dropout) {
  if (num_classes == 0 || dim == 0) throw Error("init_student: C and D must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("init_student: dropout must lie in [0, 1)");
  StudentModel m;
  m.num_classes = num_classes;
  m.dim = dim;
  m.weights = Matrix(num_classes, dim);
  m.bias.assign(num_classes, 0.0);
  m.dropout = dropout;
  Rng rng(derive_seed(seed, 0x1417));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& w : m.weights.data()) w = rng.normal() * scale;
  m.rng.reseed(derive_seed(seed, 0xd50));
  return m;
}

PosteriorMatrix forward(StudentModel& model, const EmbeddingTable& feats, bool training) {
  return forward_impl(model, feats, training ? &model.rng : nullptr);
}

PosteriorMatrix predict_proba(const StudentModel& model, const EmbeddingTable& feats) {
  return forward_impl(model, feats, nullptr);
}

EmbeddingTable student_embeddings(const StudentModel& model, const EmbeddingTable& feats) {
  check_dim(model, feats, "student_embeddings");
  return feats;
}

Matrix grad_embedding(const StudentModel& model, const EmbeddingTable& feats) {
  check_dim(model, feats, "grad_embedding");
  const std::size_t c = model.num_classes;
  const std::size_t d = model.dim;
  const PosteriorMatrix p = predict_proba(model, feats);
  Matrix out(feats.n, c * d);
  for (std::size_t i = 0; i < feats.n; ++i) {
    const std::size_t pseudo = argmax(p.row(i));
    auto x = feats.row(i);
    auto dst = out.row(i);
    for (std::size_t k = 0; k < c; ++k) {
      const double g = p(i, k) - (k == pseudo ? 1.0 : 0.0);
      for (std::size_t j = 0; j < d; ++j) dst[k * d + j] = g * x[j];
    }
  }
  return out;
}

std::vector<PosteriorMatrix> mc_dropout_posteriors(const StudentModel& model,
                                                   const EmbeddingTable& feats, std::size_t passes,
                                                   std::uint64_t seed) {
  if (!(model.dropout > 0.0)) throw Error("mc_dropout_posteriors: MC dropout requires dropout");
  if (passes < 2) throw Error("mc_dropout_posteriors: need at least two passes");
  std::vector<PosteriorMatrix> out;
  out.reserve(passes);
  for (std::size_t k = 0; k < passes; ++k) {
    Rng rng(derive_seed(seed, 0xbad, k));
    out.push_back(forward_impl(model, feats, &rng));
  }
  return out;
}

double cross_entropy(const StudentModel& model, const EmbeddingTable& feats,
                     const LabelVector& labels) {
  check_dim(model, feats, "cross_entropy");
  if (labels.size() != feats.n || feats.n == 0) throw Error("cross_entropy: bad label count");
  const PosteriorMatrix p = predict_proba(model, feats);
  double loss = 0.0;
  for (std::size_t i = 0; i < feats.n; ++i) {
    loss -= std::log(std::max(p(i, static_cast<std::size_t>(labels[i])), 1e-300));
  }
  return loss / static_cast<double>(feats.n);
}

HeadGradient cross_entropy_gradient(const StudentModel& model, const EmbeddingTable& feats,
                                    const LabelVector& labels) {
  check_dim(model, feats, "cross_entropy_gradient");
  if (labels.size() != feats.n || feats.n == 0) {
    throw Error("cross_entropy_gradient: bad label count");
  }
  HeadGradient g{Matrix(model.num_classes, model.dim),
                 std::vector<double>(model.num_classes, 0.0)};
  const PosteriorMatrix p = predict_proba(model, feats);
  const double inv_n = 1.0 / static_cast<double>(feats.n);
  for (std::size_t i = 0; i < feats.n; ++i) {
    auto x = feats.row(i);
    for (std::size_t k = 0; k < model.num_classes; ++k) {
      const double r =
          (p(i, k) - (static_cast<Label>(k) == labels[i] ? 1.0 : 0.0)) * inv_n;
      g.bias[k] += r;
      auto gw = g.weights.row(k);
      for (std::size_t j = 0; j < model.dim; ++j) gw[j] += r * x[j];
    }
  }
  return g;
}

void adamw_step(StudentModel& model, OptimizerState& state, const HeadGradient& grad,
                const TrainConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  auto update = [&](double& param, double& m, double& v, double g, double decay) {
    param -= cfg.lr * decay * param;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    param -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  };

  auto& w = model.weights.data();
  const auto& gw = grad.weights.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    update(w[i], state.m_weights.data()[i], state.v_weights.data()[i], gw[i], cfg.weight_decay);
  }
  for (std::size_t k = 0; k < model.bias.size(); ++k) {
    update(model.bias[k], state.m_bias[k], state.v_bias[k], grad.bias[k], 0.0);
  }
}

TrainResult train_student(StudentModel init, const EmbeddingTable& feats, const LabelVector& labels,
                          const EmbeddingTable& val_feats, const LabelVector& val_labels,
                          const TrainConfig& cfg) {
  cfg.validate();
  if (feats.n == 0 || labels.empty()) throw Error("train_student: empty training set");
  if (labels.size() != feats.n) throw Error("train_student: label count differs from n");
  check_dim(init, feats, "train_student");
  for (Label y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= init.num_classes) {
      throw Error("train_student: label outside [0, C)");
    }
  }
  const bool has_val = val_feats.n > 0;
  if (has_val) {
    check_dim(init, val_feats, "train_student");
    if (val_labels.size() != val_feats.n) throw Error("train_student: bad validation labels");
  }

  TrainResult result{std::move(init), {}, 0, 0.0};
  StudentModel& model = result.model;
  model.dropout = cfg.dropout;
  const std::size_t c = model.num_classes;
  const std::size_t d = model.dim;
  const std::size_t n = feats.n;
  const std::size_t bs = cfg.batch_size == 0 ? std::min<std::size_t>(512, n)
                                             : std::min(cfg.batch_size, n);

  OptimizerState opt(c, d);
  Rng rng(derive_seed(cfg.seed, 0x7a1));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> x(d);
  std::vector<double> p(c);
  HeadGradient grad{Matrix(c, d), std::vector<double>(c, 0.0)};

  StudentModel best = model;
  double best_acc = -1.0;
  double best_loss = INFINITY;
  result.epoch_loss.reserve(cfg.epochs);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t stop = std::min(n, start + bs);
      std::fill(grad.weights.data().begin(), grad.weights.data().end(), 0.0);
      std::fill(grad.bias.begin(), grad.bias.end(), 0.0);
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t s = start; s < stop; ++s) {
        const std::size_t i = order[s];
        load_row(feats, i, x);
        apply_dropout(x, model.dropout, rng);
        head_probs(model, x, p);
        const auto y = static_cast<std::size_t>(labels[i]);
        epoch_loss -= std::log(std::max(p[y], 1e-300));
        for (std::size_t k = 0; k < c; ++k) {
          const double r = (p[k] - (k == y ? 1.0 : 0.0)) * inv;
          grad.bias[k] += r;
          auto gw = grad.weights.row(k);
          for (std::size_t j = 0; j < d; ++j) gw[j] += r * x[j];
        }
      }
      adamw_step(model, opt, grad, cfg);
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(n));

    if (has_val) {
      const PosteriorMatrix vp = predict_proba(model, val_feats);
      const double acc = top1_accuracy(vp, val_labels);
      double loss = 0.0;
      for (std::size_t i = 0; i < val_feats.n; ++i) {
        loss -= std::log(std::max(vp(i, static_cast<std::size_t>(val_labels[i])), 1e-300));
      }
      if (acc > best_acc || (acc == best_acc && loss < best_loss)) {
        best_acc = acc;
        best_loss = loss;
        best = model;
        result.best_epoch = epoch;
      }
    }
  }

  if (has_val) {
    Rng keep = model.rng;
    model = std::move(best);
    model.rng = keep;
    result.best_val_accuracy = best_acc;
  } else {
    result.best_epoch = cfg.epochs - 1;
  }
  return result;
}

}  // namespace ccma
