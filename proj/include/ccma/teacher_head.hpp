#pragma once

#include "ccma/feature_store.hpp"
#include "ccma/matrix.hpp"

namespace ccma {

/// Frozen zero-shot teacher: temperature-scaled cosine similarity against
/// normalized class prototypes.
struct TeacherModel {
  PrototypeTable prototypes;
  double tau = 0.01;

  /// Normalizes the prototypes if they are not flagged normalized.
  TeacherModel(PrototypeTable protos, double temperature);
};

Matrix teacher_logits(const TeacherModel& model, const EmbeddingTable& feats);

/// Max-shifted row softmax. Throws on non-finite input.
PosteriorMatrix softmax_rows(const Matrix& logits);

PosteriorMatrix teacher_posterior(const TeacherModel& model, const EmbeddingTable& feats);

/// Shannon entropy (natural log) of a probability row; 0 log 0 = 0.
double entropy(std::span<const double> p);

/// Fraction of rows whose argmax equals the label.
double top1_accuracy(const PosteriorMatrix& posteriors, const LabelVector& labels);

}  // namespace ccma
