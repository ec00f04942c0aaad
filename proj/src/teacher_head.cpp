#include "ccma/teacher_head.hpp"

#include <algorithm>
#include <cmath>

namespace ccma {

TeacherModel::TeacherModel(PrototypeTable protos, double temperature)
    : prototypes(std::move(protos)), tau(temperature) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw Error("TeacherModel: tau must be positive");
  if (prototypes.classes() < 2) throw Error("TeacherModel: need at least two prototypes");
  if (!prototypes.table.normalized) prototypes.table = l2_normalize(prototypes.table);
}

Matrix teacher_logits(const TeacherModel& model, const EmbeddingTable& feats) {
  if (feats.d != model.prototypes.dim()) {
    throw Error("teacher_logits: feature dimension " + std::to_string(feats.d) +
                " differs from prototype dimension " + std::to_string(model.prototypes.dim()));
  }
  if (!feats.normalized) throw Error("teacher_logits: teacher features must be l2-normalized");
  const std::size_t c = model.prototypes.classes();
  Matrix logits(feats.n, c);
  for (std::size_t i = 0; i < feats.n; ++i) {
    auto x = feats.row(i);
    for (std::size_t k = 0; k < c; ++k) {
      auto t = model.prototypes.table.row(k);
      double dot = 0.0;
      for (std::size_t j = 0; j < feats.d; ++j) dot += static_cast<double>(x[j]) * t[j];
      logits(i, k) = dot / model.tau;
    }
  }
  return logits;
}

PosteriorMatrix softmax_rows(const Matrix& logits) {
  PosteriorMatrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto in = logits.row(i);
    double hi = -INFINITY;
    for (double v : in) {
      if (!std::isfinite(v)) throw Error("softmax_rows: non-finite logit in row " + std::to_string(i));
      hi = std::max(hi, v);
    }
    auto dst = out.row(i);
    double total = 0.0;
    for (std::size_t k = 0; k < in.size(); ++k) {
      dst[k] = std::exp(in[k] - hi);
      total += dst[k];
    }
    for (double& v : dst) v /= total;
  }
  return out;
}

PosteriorMatrix teacher_posterior(const TeacherModel& model, const EmbeddingTable& feats) {
  return softmax_rows(teacher_logits(model, feats));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double top1_accuracy(const PosteriorMatrix& posteriors, const LabelVector& labels) {
  if (posteriors.rows() != labels.size()) throw Error("top1_accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<Label>(argmax(posteriors.row(i))) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace ccma
