#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ccma/conformal.hpp"
#include "ccma/feature_store.hpp"
#include "ccma/matrix.hpp"
#include "ccma/rng.hpp"
#include "ccma/scoring.hpp"
#include "ccma/student_head.hpp"

namespace ccma {

enum class SubpoolMode { kSelective, kRandom, kNone };

const char* to_string(SubpoolMode mode);
SubpoolMode parse_subpool_mode(const std::string& s);

struct SelectionConfig {
  double kappa = 20.0;
  /// Unset means min(|U|, 50 * batch).
  std::optional<std::size_t> subpool_size;
  SubpoolMode subpool_mode = SubpoolMode::kSelective;
  bool diversity = true;
  /// Unset means the median pairwise distance of a 1024-point subsample.
  std::optional<double> kernel_sigma;
  std::size_t batch = 10;
  /// Evaluate the coverage sum over the whole unlabeled pool instead of the
  /// scored subpool.
  bool full_pool_coverage = false;
  std::size_t kmeans_max_iter = 50;

  void validate() const;
  std::size_t resolved_subpool_size(std::size_t unlabeled) const;
};

/// V1 selective + diversity, V2 none + diversity, V3 random + diversity,
/// V4 selective without diversity, V5 none without diversity.
void apply_variant(SelectionConfig& cfg, const std::string& variant);

// ---------------------------------------------------------------------------
// k-means

struct KMeansResult {
  Matrix centroids;  // k x d
  std::vector<std::size_t> assignment;
  double inertia = 0.0;
  std::size_t iterations = 0;
};

Matrix to_matrix(const EmbeddingTable& table);

double squared_distance(std::span<const double> a, std::span<const double> b);

/// D^2 (k-means++) seeding: first row uniform, then proportional to the
/// squared distance to the nearest chosen row. When every remaining row has
/// zero distance, the next seed is uniform among unchosen rows.
std::vector<std::size_t> kmeanspp_seeds(const Matrix& points, std::size_t k, Rng& rng);

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter = 50);
KMeansResult kmeans(const EmbeddingTable& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter = 50);

// ---------------------------------------------------------------------------
// Subpool

struct Subpool {
  IndexSet indices;  // sorted train indices
  bool clamped = false;
};

/// `teacher_feats` is the full train table; `unlabeled` selects rows of it.
Subpool build_subpool(const EmbeddingTable& teacher_feats, const IndexSet& unlabeled,
                      const SelectionConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Ranking and coverage

/// Positions of the k largest scores, largest first; ties go to the smaller
/// position.
std::vector<std::size_t> rank_descending(std::span<const double> scores, std::size_t k);

/// ceil(kappa * B) clamped to the candidate count.
std::size_t oversampled_count(std::size_t batch, double kappa, std::size_t candidates);

std::vector<std::size_t> top_kappa(std::span<const double> scores, std::size_t batch,
                                   double kappa);

inline double gaussian_kernel(double sq_dist, double sigma) {
  return std::exp(-sq_dist / (2.0 * sigma * sigma));
}

double median_pairwise_distance(const EmbeddingTable& feats, std::uint64_t seed,
                                std::size_t max_points = 1024);

/// F(S) = (1/|P|) sum_u w(u) max_{s in S} k(u, s) over pool rows u.
double coverage_objective(std::span<const std::size_t> selected, const EmbeddingTable& pool_feats,
                          std::span<const double> weights, double sigma);

struct GreedyResult {
  std::vector<std::size_t> selected;  // pool positions in pick order
  std::vector<double> gains;
  double objective = 0.0;
  bool short_of_batch = false;
};

/// Greedy maximization of F over `candidates` (pool positions). Lazy
/// re-evaluation; identical picks to the naive greedy, ties to the smaller
/// position.
GreedyResult coverage_greedy(std::span<const std::size_t> candidates,
                             const EmbeddingTable& pool_feats, std::span<const double> weights,
                             std::size_t batch, double sigma);

// ---------------------------------------------------------------------------
// Composite CCMA selection

struct CalibratorPair {
  ConformalCalibrator student;
  ConformalCalibrator teacher;
  bool fell_back_to_size = false;
};

/// Size mode calibrates on `pool_*` (label-free). Coverage mode calibrates on
/// the labeled calibration rows and falls back to size mode when there are
/// none. Size targets above C are clamped to C.
CalibratorPair fit_calibrators(const ConformalConfig& cfg, const PosteriorMatrix& pool_s,
                               const PosteriorMatrix& pool_t, const PosteriorMatrix& cal_s,
                               const PosteriorMatrix& cal_t, const LabelVector& cal_labels);

struct CcmaInputs {
  const EmbeddingTable& train_teacher;  // normalized
  const EmbeddingTable& train_student;
  const PosteriorMatrix& teacher_posterior;  // over all train rows
  const StudentModel& student;
  const IndexSet& unlabeled;
  const IndexSet& calibration;
  const LabelVector& train_labels;  // read only at calibration indices
};

struct CcmaSelection {
  IndexSet batch;  // train indices in selection order
  std::size_t subpool_size = 0;
  std::size_t candidate_count = 0;
  bool subpool_clamped = false;
  bool short_of_batch = false;
  bool conformal_fallback = false;
  double sigma = 0.0;
  CalibratorPair calibrators;
};

CcmaSelection ccma_select(const CcmaInputs& in, const SelectionConfig& cfg,
                          const ConformalConfig& conformal, std::uint64_t seed);

}  // namespace ccma
