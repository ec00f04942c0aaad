#include "ccma/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ccma {

void ConformalConfig::validate() const {
  if (!(s_teacher >= 1.0) || !(s_student >= 1.0)) {
    throw Error("ConformalConfig: target set sizes must be at least 1");
  }
  if (!(alpha_teacher > 0.0 && alpha_teacher < 1.0) ||
      !(alpha_student > 0.0 && alpha_student < 1.0)) {
    throw Error("ConformalConfig: alphas must lie in (0, 1)");
  }
  if (!(tol >= 0.0)) throw Error("ConformalConfig: tol must be non-negative");
  if (!(cal_fraction >= 0.0 && cal_fraction < 1.0)) {
    throw Error("ConformalConfig: cal_fraction must lie in [0, 1)");
  }
}

Matrix nonconformity(const Matrix& posteriors) {
  Matrix out(posteriors.rows(), posteriors.cols());
  auto& dst = out.data();
  const auto& src = posteriors.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = -std::log(std::max(src[i], kProbabilityFloor));
  }
  return out;
}

double mean_set_size(const Matrix& scores, double q) {
  if (scores.rows() == 0) return 0.0;
  std::size_t total = 0;
  for (double a : scores.data()) {
    if (a <= q) ++total;
  }
  return static_cast<double>(total) / static_cast<double>(scores.rows());
}

ConformalCalibrator calibrate_size_target(const Matrix& scores, double s, double tol) {
  const auto c = static_cast<double>(scores.cols());
  if (!(s >= 1.0) || s > c) {
    throw Error("calibrate_size_target: target size must lie in [1, C]");
  }
  if (scores.rows() == 0) throw Error("calibrate_size_target: no calibration rows");
  if (!(tol >= 0.0)) throw Error("calibrate_size_target: tol must be non-negative");

  const auto [lo_it, hi_it] = std::minmax_element(scores.data().begin(), scores.data().end());
  double lo = *lo_it;
  double hi = *hi_it;

  ConformalCalibrator cal{CalibrationMode::kSizeTarget, s, hi, true, 0, c};
  auto accept = [&](double q, double size) {
    cal.q = q;
    cal.achieved_size = size;
    return std::abs(size - s) <= tol;
  };

  const double size_lo = mean_set_size(scores, lo);
  if (accept(lo, size_lo)) return cal;
  if (accept(hi, c)) return cal;

  // Invariant: size(lo) < s < size(hi); size is non-decreasing in q.
  double best_q = hi;
  double best_gap = c - s;
  if (s - size_lo < best_gap) {
    best_q = lo;
    best_gap = s - size_lo;
  }
  double best_size = best_q == lo ? size_lo : c;
  for (std::size_t it = 0; it < kMaxBisectionIterations; ++it) {
    const double mid = lo + 0.5 * (hi - lo);
    cal.iterations = it + 1;
    const double size = mean_set_size(scores, mid);
    const double gap = std::abs(size - s);
    if (gap < best_gap || (gap == best_gap && mid < best_q)) {
      best_gap = gap;
      best_q = mid;
      best_size = size;
    }
    if (gap <= tol) break;
    if (size < s) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  cal.q = best_q;
  cal.achieved_size = best_size;
  return cal;
}

ConformalCalibrator calibrate_coverage_target(std::span<const double> scores_at_truth,
                                              double alpha) {
  if (scores_at_truth.empty()) throw Error("calibrate_coverage_target: empty calibration set");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw Error("calibrate_coverage_target: alpha must lie in (0, 1)");
  }
  std::vector<double> sorted(scores_at_truth.begin(), scores_at_truth.end());
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  // Guard against (n+1)(1-alpha) landing a hair above an integer.
  const double raw = (n + 1.0) * (1.0 - alpha);
  auto rank = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  ConformalCalibrator cal;
  cal.mode = CalibrationMode::kCoverageTarget;
  cal.target = alpha;
  cal.q = sorted[rank - 1];
  cal.fitted = true;
  return cal;
}

std::vector<double> scores_at_labels(const Matrix& scores, const LabelVector& labels) {
  if (scores.rows() != labels.size()) throw Error("scores_at_labels: length mismatch");
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= scores.cols()) throw Error("scores_at_labels: label out of range");
    out[i] = scores(i, y);
  }
  return out;
}

PredictionSets predict_sets(const ConformalCalibrator& cal, const Matrix& scores) {
  if (!cal.fitted) throw Error("predict_sets: calibrator is not fitted");
  PredictionSets out;
  out.sets.reserve(scores.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    LabelSet set(scores.cols());
    auto row = scores.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (row[c] <= cal.q) set.insert(c);
    }
    out.sets.push_back(std::move(set));
  }
  return out;
}

AuditResult audit(const PredictionSets& sets, const LabelVector& labels) {
  if (sets.size() != labels.size()) throw Error("audit: length mismatch");
  if (labels.empty()) {
    return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  }
  std::size_t covered = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (sets[i].contains(static_cast<std::size_t>(labels[i]))) ++covered;
    total += sets[i].size();
  }
  const auto n = static_cast<double>(labels.size());
  return {static_cast<double>(covered) / n, static_cast<double>(total) / n};
}

}  // namespace ccma
