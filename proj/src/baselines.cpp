#include "ccma/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ccma/selection.hpp"
#include "ccma/teacher_head.hpp"

namespace ccma {

IndexSet select_random(const IndexSet& unlabeled, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  IndexSet out;
  for (auto pos : sample_without_replacement(unlabeled.size(), batch, rng)) {
    out.push_back(unlabeled[pos]);
  }
  return out;
}

std::vector<double> uncertainty_scores(const PosteriorMatrix& posteriors, UncertaintyMode mode) {
  std::vector<double> scores(posteriors.rows());
  for (std::size_t i = 0; i < posteriors.rows(); ++i) {
    auto p = posteriors.row(i);
    switch (mode) {
      case UncertaintyMode::kLeastConfidence:
        scores[i] = -*std::max_element(p.begin(), p.end());
        break;
      case UncertaintyMode::kEntropy:
        scores[i] = entropy(p);
        break;
      case UncertaintyMode::kMargins: {
        double first = -1.0;
        double second = -1.0;
        for (double v : p) {
          if (v > first) {
            second = first;
            first = v;
          } else if (v > second) {
            second = v;
          }
        }
        if (p.size() < 2) second = 0.0;
        scores[i] = -(first - second);
        break;
      }
    }
  }
  return scores;
}

std::vector<std::size_t> select_uncertainty(const PosteriorMatrix& posteriors, std::size_t batch,
                                            UncertaintyMode mode) {
  return rank_descending(uncertainty_scores(posteriors, mode), batch);
}

IndexSet select_coreset(const EmbeddingTable& embeds, const IndexSet& covered,
                        const IndexSet& unlabeled, std::size_t batch) {
  const std::size_t n = unlabeled.size();
  batch = std::min(batch, n);
  IndexSet out;
  if (batch == 0) return out;

  auto sq_dist = [&](std::size_t a, std::span<const double> b) {
    auto x = embeds.row(a);
    double s = 0.0;
    for (std::size_t j = 0; j < embeds.d; ++j) {
      const double diff = static_cast<double>(x[j]) - b[j];
      s += diff * diff;
    }
    return s;
  };
  auto as_double = [&](std::size_t row) {
    auto x = embeds.row(row);
    return std::vector<double>(x.begin(), x.end());
  };

  // min_d[i]: squared distance from unlabeled[i] to its nearest covered point.
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  for (auto c : covered) {
    const auto center = as_double(c);
    for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], sq_dist(unlabeled[i], center));
  }

  auto add = [&](std::size_t pos) {
    chosen[pos] = 1;
    out.push_back(unlabeled[pos]);
    const auto center = as_double(unlabeled[pos]);
    for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], sq_dist(unlabeled[i], center));
  };

  if (covered.empty()) {
    std::vector<double> centroid(embeds.d, 0.0);
    for (auto idx : unlabeled) {
      auto x = embeds.row(idx);
      for (std::size_t j = 0; j < embeds.d; ++j) centroid[j] += x[j];
    }
    for (auto& v : centroid) v /= static_cast<double>(n);
    std::size_t first = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double dd = sq_dist(unlabeled[i], centroid);
      if (dd > best) {
        best = dd;
        first = i;
      }
    }
    add(first);
  }

  while (out.size() < batch) {
    std::size_t arg = n;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!chosen[i] && min_d[i] > best) {
        best = min_d[i];
        arg = i;
      }
    }
    add(arg);
  }
  return out;
}

std::vector<double> bald_scores(const std::vector<PosteriorMatrix>& mc) {
  if (mc.size() < 2) throw Error("bald_scores: need at least two MC passes");
  const std::size_t n = mc.front().rows();
  const std::size_t c = mc.front().cols();
  for (const auto& m : mc) {
    if (m.rows() != n || m.cols() != c) throw Error("bald_scores: pass shapes differ");
  }
  const auto k = static_cast<double>(mc.size());
  std::vector<double> scores(n);
  std::vector<double> mean(c);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(mean.begin(), mean.end(), 0.0);
    double mean_h = 0.0;
    for (const auto& m : mc) {
      auto p = m.row(i);
      for (std::size_t j = 0; j < c; ++j) mean[j] += p[j];
      mean_h += entropy(p);
    }
    for (auto& v : mean) v /= k;
    scores[i] = std::max(0.0, entropy(mean) - mean_h / k);
  }
  return scores;
}

std::vector<std::size_t> select_bald(const std::vector<PosteriorMatrix>& mc_posteriors,
                                     std::size_t batch) {
  return rank_descending(bald_scores(mc_posteriors), batch);
}

BadgeSelection select_badge(const Matrix& grad_embeds, std::size_t batch, std::uint64_t seed) {
  BadgeSelection out;
  batch = std::min(batch, grad_embeds.rows());
  Rng rng(seed);
  const bool all_zero = std::all_of(grad_embeds.data().begin(), grad_embeds.data().end(),
                                    [](double v) { return v == 0.0; });
  if (all_zero) {
    out.fell_back_to_random = true;
    out.positions = sample_without_replacement(grad_embeds.rows(), batch, rng);
    return out;
  }
  out.positions = kmeanspp_seeds(grad_embeds, batch, rng);
  return out;
}

}  // namespace ccma
