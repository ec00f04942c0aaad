#pragma once

#include <cstdint>
#include <vector>

#include "ccma/feature_store.hpp"
#include "ccma/matrix.hpp"
#include "ccma/rng.hpp"

namespace ccma {

/// Linear softmax head over frozen student features. The feature adapter is
/// the identity composed with inverted dropout on the input features.
struct StudentModel {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  Matrix weights;             // C x D
  std::vector<double> bias;   // C
  double dropout = 0.0;       // rho in [0, 1)
  Rng rng;                    // dropout masks for training-mode forward()
};

struct TrainConfig {
  double lr = 1e-2;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 200;
  /// 0 selects min(512, n_train).
  std::size_t batch_size = 0;
  double dropout = 0.75;
  std::uint64_t seed = 0;

  void validate() const;
};

/// AdamW moments for W and b.
struct OptimizerState {
  Matrix m_weights;
  Matrix v_weights;
  std::vector<double> m_bias;
  std::vector<double> v_bias;
  std::uint64_t step = 0;

  OptimizerState(std::size_t c, std::size_t d)
      : m_weights(c, d), v_weights(c, d), m_bias(c, 0.0), v_bias(c, 0.0) {}
};

/// W ~ N(0, 1/D), b = 0.
StudentModel init_student(std::size_t num_classes, std::size_t dim, std::uint64_t seed,
                          double dropout = 0.0);

/// training=true draws a fresh inverted-dropout mask per row from model.rng.
PosteriorMatrix forward(StudentModel& model, const EmbeddingTable& feats, bool training);

/// Deterministic (no dropout) posterior.
PosteriorMatrix predict_proba(const StudentModel& model, const EmbeddingTable& feats);

/// Features after the adapter; the adapter is the identity at inference.
EmbeddingTable student_embeddings(const StudentModel& model, const EmbeddingTable& feats);

/// Row i is vec((p_i - onehot(argmax p_i)) x_i^T), laid out class-major.
Matrix grad_embedding(const StudentModel& model, const EmbeddingTable& feats);

std::vector<PosteriorMatrix> mc_dropout_posteriors(const StudentModel& model,
                                                   const EmbeddingTable& feats, std::size_t passes,
                                                   std::uint64_t seed);

/// Mean cross-entropy without dropout.
double cross_entropy(const StudentModel& model, const EmbeddingTable& feats,
                     const LabelVector& labels);

struct HeadGradient {
  Matrix weights;
  std::vector<double> bias;
};

/// Analytic gradient of cross_entropy() with respect to W and b.
HeadGradient cross_entropy_gradient(const StudentModel& model, const EmbeddingTable& feats,
                                    const LabelVector& labels);

/// One decoupled-weight-decay Adam update. Decay applies to W only.
void adamw_step(StudentModel& model, OptimizerState& state, const HeadGradient& grad,
                const TrainConfig& cfg);

struct TrainResult {
  StudentModel model;
  std::vector<double> epoch_loss;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

/// Minibatch cross-entropy training from `init`. Keeps the parameters with the
/// highest validation accuracy (ties go to the lower validation
/// cross-entropy, then the earlier epoch); with an empty validation
/// set the final-epoch parameters are returned.
TrainResult train_student(StudentModel init, const EmbeddingTable& feats, const LabelVector& labels,
                          const EmbeddingTable& val_feats, const LabelVector& val_labels,
                          const TrainConfig& cfg);

}  // namespace ccma
