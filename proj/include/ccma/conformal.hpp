#pragma once

#include <bit>
#include <cstdint>
#include <vector>

#include "ccma/matrix.hpp"

namespace ccma {

/// Fixed-width set of class indices in [0, C).
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::size_t width) : width_(width), words_((width + 63) / 64, 0) {}

  std::size_t width() const { return width_; }

  void insert(std::size_t c) { words_[c / 64] |= std::uint64_t{1} << (c % 64); }
  void erase(std::size_t c) { words_[c / 64] &= ~(std::uint64_t{1} << (c % 64)); }
  bool contains(std::size_t c) const { return (words_[c / 64] >> (c % 64)) & 1u; }

  std::size_t size() const {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
  }
  bool empty() const { return size() == 0; }

  LabelSet& operator|=(const LabelSet& o) { return apply(o, [](auto a, auto b) { return a | b; }); }
  LabelSet& operator&=(const LabelSet& o) { return apply(o, [](auto a, auto b) { return a & b; }); }
  LabelSet& operator^=(const LabelSet& o) { return apply(o, [](auto a, auto b) { return a ^ b; }); }
  friend LabelSet operator|(LabelSet a, const LabelSet& b) { return a |= b; }
  friend LabelSet operator&(LabelSet a, const LabelSet& b) { return a &= b; }
  friend LabelSet operator^(LabelSet a, const LabelSet& b) { return a ^= b; }
  friend bool operator==(const LabelSet&, const LabelSet&) = default;

  std::vector<std::size_t> members() const {
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < width_; ++c) {
      if (contains(c)) out.push_back(c);
    }
    return out;
  }

 private:
  template <typename Op>
  LabelSet& apply(const LabelSet& o, Op op) {
    if (o.width_ != width_) throw Error("LabelSet: width mismatch");
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] = op(words_[i], o.words_[i]);
    return *this;
  }

  std::size_t width_ = 0;
  std::vector<std::uint64_t> words_;
};

struct PredictionSets {
  std::vector<LabelSet> sets;

  std::size_t size() const { return sets.size(); }
  const LabelSet& operator[](std::size_t i) const { return sets[i]; }
};

enum class CalibrationMode { kSizeTarget, kCoverageTarget };

/// Split-conformal threshold on -log p scores.
struct ConformalCalibrator {
  CalibrationMode mode = CalibrationMode::kSizeTarget;
  /// Target mean set size (size mode) or alpha (coverage mode).
  double target = 1.0;
  double q = 0.0;
  bool fitted = false;
  /// Bisection steps taken (size mode).
  std::size_t iterations = 0;
  /// Mean set size at q on the calibration rows (size mode).
  double achieved_size = 0.0;
};

/// Per-round calibration settings shared by the selector and the harness.
struct ConformalConfig {
  CalibrationMode mode = CalibrationMode::kSizeTarget;
  double s_teacher = 3.0;
  double s_student = 5.0;
  double alpha_teacher = 0.1;
  double alpha_student = 0.1;
  double tol = 0.05;
  /// Share of every purchased batch diverted to the calibration split.
  double cal_fraction = 0.2;

  void validate() const;
};

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr std::size_t kMaxBisectionIterations = 60;

/// Entrywise -log(max(p, 1e-12)).
Matrix nonconformity(const Matrix& posteriors);

/// Mean |{c : scores(i, c) <= q}| over rows.
double mean_set_size(const Matrix& scores, double q);

/// Bisection for q on [min score, max score] until the mean set size is
/// within `tol` of `s` or 60 iterations elapse. Uses no labels.
ConformalCalibrator calibrate_size_target(const Matrix& scores, double s, double tol = 0.05);

/// q = ceil((n+1)(1-alpha))-th smallest true-label score, clamped to the max.
ConformalCalibrator calibrate_coverage_target(std::span<const double> scores_at_truth,
                                              double alpha);

/// Scores of each row at its true label.
std::vector<double> scores_at_labels(const Matrix& scores, const LabelVector& labels);

/// Inclusive thresholding; empty sets are allowed.
PredictionSets predict_sets(const ConformalCalibrator& cal, const Matrix& scores);

struct AuditResult {
  double coverage = 0.0;
  double mean_size = 0.0;
};

AuditResult audit(const PredictionSets& sets, const LabelVector& labels);

}  // namespace ccma
