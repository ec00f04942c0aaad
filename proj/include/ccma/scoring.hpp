#pragma once

#include <span>
#include <vector>

#include "ccma/conformal.hpp"
#include "ccma/matrix.hpp"

namespace ccma {

inline constexpr double kGateEpsilon = 1e-8;

/// Per-sample cross-modal disagreement score and its diagnostics.
struct ScoreRecord {
  double delta = 0.0;
  double w_js = 0.0;
  double js = 0.0;
  double h_s = 0.0;
  double conf_s = 0.0;
  double conf_t = 0.0;
  std::size_t omega_size = 0;
  std::size_t overlap = 0;
  std::size_t symdiff = 0;
  bool top1_disagree = false;
};

/// gs | gt; when both are empty, the two top-1 labels.
LabelSet union_support(const LabelSet& gs, const LabelSet& gt, std::size_t top_s,
                       std::size_t top_t);

/// p restricted to omega and rescaled to sum to one.
std::vector<double> renormalize(std::span<const double> p, const LabelSet& omega);

/// Jensen-Shannon divergence in nats, in [0, ln 2]. Symmetric bit-for-bit.
double js_divergence(std::span<const double> p, std::span<const double> r);

/// conf_t / (conf_t + conf_s + eps).
double confidence_gate(double conf_t, double conf_s, double eps = kGateEpsilon);

ScoreRecord ccma_score(std::span<const double> p_s, std::span<const double> p_t,
                       const LabelSet& gs, const LabelSet& gt, double eps = kGateEpsilon);

/// Scores every row of the paired posterior matrices.
std::vector<ScoreRecord> score_pool(const PosteriorMatrix& p_s, const PosteriorMatrix& p_t,
                                    const PredictionSets& gs, const PredictionSets& gt,
                                    double eps = kGateEpsilon);

struct PoolSummary {
  std::size_t count = 0;
  double mean_overlap = 0.0;
  double mean_symdiff = 0.0;
  double frac_top1_disagree = 0.0;
  double mean_js = 0.0;
  double mean_conf_s = 0.0;
  double mean_conf_t = 0.0;
  double mean_delta = 0.0;
};

PoolSummary pool_diagnostics(std::span<const ScoreRecord> records);

}  // namespace ccma
