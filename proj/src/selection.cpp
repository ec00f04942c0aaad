#include "ccma/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

#include "ccma/teacher_head.hpp"

namespace ccma {

const char* to_string(SubpoolMode mode) {
  switch (mode) {
    case SubpoolMode::kSelective: return "selective";
    case SubpoolMode::kRandom: return "random";
    case SubpoolMode::kNone: return "none";
  }
  return "unknown";
}

SubpoolMode parse_subpool_mode(const std::string& s) {
  if (s == "selective") return SubpoolMode::kSelective;
  if (s == "random") return SubpoolMode::kRandom;
  if (s == "none") return SubpoolMode::kNone;
  throw Error("unknown subpool mode '" + s + "' (expected selective|random|none)");
}

void SelectionConfig::validate() const {
  if (!(kappa >= 1.0) || !std::isfinite(kappa)) throw Error("SelectionConfig: kappa must be >= 1");
  if (batch == 0) throw Error("SelectionConfig: batch must be positive");
  if (kernel_sigma && !(*kernel_sigma > 0.0)) {
    throw Error("SelectionConfig: kernel_sigma must be positive");
  }
  if (subpool_mode != SubpoolMode::kNone && subpool_size && *subpool_size < batch) {
    throw Error("SelectionConfig: subpool_size must be at least the batch size");
  }
  if (kmeans_max_iter == 0) throw Error("SelectionConfig: kmeans_max_iter must be positive");
}

std::size_t SelectionConfig::resolved_subpool_size(std::size_t unlabeled) const {
  return subpool_size ? *subpool_size : std::min(unlabeled, 50 * batch);
}

void apply_variant(SelectionConfig& cfg, const std::string& variant) {
  if (variant == "V1") {
    cfg.subpool_mode = SubpoolMode::kSelective;
    cfg.diversity = true;
  } else if (variant == "V2") {
    cfg.subpool_mode = SubpoolMode::kNone;
    cfg.diversity = true;
  } else if (variant == "V3") {
    cfg.subpool_mode = SubpoolMode::kRandom;
    cfg.diversity = true;
  } else if (variant == "V4") {
    cfg.subpool_mode = SubpoolMode::kSelective;
    cfg.diversity = false;
  } else if (variant == "V5") {
    cfg.subpool_mode = SubpoolMode::kNone;
    cfg.diversity = false;
  } else {
    throw Error("unknown variant '" + variant + "' (expected V1..V5)");
  }
}

Matrix to_matrix(const EmbeddingTable& table) {
  Matrix m(table.n, table.d);
  std::copy(table.data.begin(), table.data.end(), m.data().begin());
  return m;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double diff = a[j] - b[j];
    s += diff * diff;
  }
  return s;
}

std::vector<std::size_t> kmeanspp_seeds(const Matrix& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.rows();
  if (k > n) throw Error("kmeanspp_seeds: k exceeds the number of points");
  std::vector<std::size_t> seeds;
  if (k == 0) return seeds;
  seeds.reserve(k);
  std::vector<char> chosen(n, 0);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());

  auto add = [&](std::size_t idx) {
    seeds.push_back(idx);
    chosen[idx] = 1;
    auto c = points.row(idx);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points.row(i), c));
    d2[idx] = 0.0;
  };

  add(static_cast<std::size_t>(rng.below(n)));
  while (seeds.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!chosen[i]) total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      std::size_t last_positive = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (chosen[i] || d2[i] <= 0.0) continue;
        last_positive = i;
        acc += d2[i];
        if (acc > target) {
          pick = i;
          break;
        }
      }
      if (pick == n) pick = last_positive;
    } else {
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i) {
        if (!chosen[i]) rest.push_back(i);
      }
      pick = rest[static_cast<std::size_t>(rng.below(rest.size()))];
    }
    add(pick);
  }
  return seeds;
}

namespace {

// Assigns each point to its nearest centroid (ties to the smaller index) and
// returns the per-point squared distances.
std::vector<double> assign_points(const Matrix& points, const Matrix& centroids,
                                  std::vector<std::size_t>& assignment) {
  const std::size_t n = points.rows();
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto x = points.row(i);
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
      const double d = squared_distance(x, centroids.row(c));
      if (d < best) {
        best = d;
        arg = c;
      }
    }
    assignment[i] = arg;
    dist[i] = best;
  }
  return dist;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iter) {
  const std::size_t n = points.rows();
  const std::size_t d = points.cols();
  if (k == 0) throw Error("kmeans: k must be positive");
  if (k > n) {
    throw Error("kmeans: k=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  }
  Rng rng(seed);
  KMeansResult res;
  res.centroids = Matrix(k, d);
  for (std::size_t c = 0; auto idx : kmeanspp_seeds(points, k, rng)) {
    auto src = points.row(idx);
    std::copy(src.begin(), src.end(), res.centroids.row(c++).begin());
  }
  res.assignment.assign(n, 0);
  std::vector<double> dist = assign_points(points, res.centroids, res.assignment);

  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < max_iter; ++it) {
    res.iterations = it + 1;
    std::fill(res.centroids.data().begin(), res.centroids.data().end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto dst = res.centroids.row(res.assignment[i]);
      auto x = points.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += x[j];
      ++counts[res.assignment[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (auto& v : res.centroids.row(c)) v /= static_cast<double>(counts[c]);
    }
    // Empty clusters take the point currently farthest from its centroid.
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      const auto far = static_cast<std::size_t>(
          std::distance(dist.begin(), std::max_element(dist.begin(), dist.end())));
      auto src = points.row(far);
      std::copy(src.begin(), src.end(), res.centroids.row(c).begin());
      dist[far] = 0.0;
    }
    const auto previous = res.assignment;
    dist = assign_points(points, res.centroids, res.assignment);
    if (res.assignment == previous) break;
  }
  res.inertia = std::accumulate(dist.begin(), dist.end(), 0.0);
  return res;
}

KMeansResult kmeans(const EmbeddingTable& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iter) {
  return kmeans(to_matrix(points), k, seed, max_iter);
}

Subpool build_subpool(const EmbeddingTable& teacher_feats, const IndexSet& unlabeled,
                      const SelectionConfig& cfg, std::uint64_t seed) {
  Subpool out;
  if (cfg.subpool_mode == SubpoolMode::kNone) {
    out.indices = unlabeled;
    return out;
  }
  std::size_t size = cfg.resolved_subpool_size(unlabeled.size());
  if (size > unlabeled.size()) {
    size = unlabeled.size();
    out.clamped = true;
  }
  if (size == unlabeled.size()) {
    out.indices = unlabeled;
    return out;
  }

  if (cfg.subpool_mode == SubpoolMode::kRandom) {
    Rng rng(seed);
    for (auto pos : sample_without_replacement(unlabeled.size(), size, rng)) {
      out.indices.push_back(unlabeled[pos]);
    }
  } else {
    const Matrix pts = to_matrix(take_rows(teacher_feats, unlabeled));
    const KMeansResult km = kmeans(pts, size, seed, cfg.kmeans_max_iter);
    // One representative per centroid: the nearest point not already taken.
    std::vector<char> taken(pts.rows(), 0);
    for (std::size_t c = 0; c < size; ++c) {
      auto centroid = km.centroids.row(c);
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = pts.rows();
      for (std::size_t i = 0; i < pts.rows(); ++i) {
        if (taken[i]) continue;
        const double dd = squared_distance(pts.row(i), centroid);
        if (dd < best) {
          best = dd;
          arg = i;
        }
      }
      taken[arg] = 1;
      out.indices.push_back(unlabeled[arg]);
    }
  }
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

std::vector<std::size_t> rank_descending(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  k = std::min(k, order.size());
  auto cmp = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), cmp);
  order.resize(k);
  return order;
}

std::size_t oversampled_count(std::size_t batch, double kappa, std::size_t candidates) {
  const double raw = kappa * static_cast<double>(batch);
  const auto want = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::min(want, candidates);
}

std::vector<std::size_t> top_kappa(std::span<const double> scores, std::size_t batch,
                                   double kappa) {
  for (double s : scores) {
    if (!std::isfinite(s)) throw Error("top_kappa: non-finite score");
  }
  return rank_descending(scores, oversampled_count(batch, kappa, scores.size()));
}

double median_pairwise_distance(const EmbeddingTable& feats, std::uint64_t seed,
                                std::size_t max_points) {
  if (feats.n < 2) return 1.0;
  std::vector<std::size_t> rows;
  if (feats.n > max_points) {
    Rng rng(seed);
    rows = sample_without_replacement(feats.n, max_points, rng);
  } else {
    rows.resize(feats.n);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
  }
  std::vector<double> dists;
  dists.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t a = 0; a < rows.size(); ++a) {
    auto x = feats.row(rows[a]);
    for (std::size_t b = a + 1; b < rows.size(); ++b) {
      auto y = feats.row(rows[b]);
      double s = 0.0;
      for (std::size_t j = 0; j < feats.d; ++j) {
        const double diff = static_cast<double>(x[j]) - y[j];
        s += diff * diff;
      }
      dists.push_back(std::sqrt(s));
    }
  }
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double median = dists[mid];
  if (dists.size() % 2 == 0) {
    const double lower = *std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  return median > 1e-12 ? median : 1.0;
}

namespace {

double table_sq_distance(const EmbeddingTable& t, std::size_t a, std::size_t b) {
  auto x = t.row(a);
  auto y = t.row(b);
  double s = 0.0;
  for (std::size_t j = 0; j < t.d; ++j) {
    const double diff = static_cast<double>(x[j]) - y[j];
    s += diff * diff;
  }
  return s;
}

}  // namespace

double coverage_objective(std::span<const std::size_t> selected, const EmbeddingTable& pool_feats,
                          std::span<const double> weights, double sigma) {
  if (weights.size() != pool_feats.n) throw Error("coverage_objective: weight count differs");
  if (selected.empty() || pool_feats.n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t u = 0; u < pool_feats.n; ++u) {
    double best = 0.0;
    for (auto s : selected) {
      best = std::max(best, gaussian_kernel(table_sq_distance(pool_feats, u, s), sigma));
    }
    total += weights[u] * best;
  }
  return total / static_cast<double>(pool_feats.n);
}

GreedyResult coverage_greedy(std::span<const std::size_t> candidates,
                             const EmbeddingTable& pool_feats, std::span<const double> weights,
                             std::size_t batch, double sigma) {
  if (candidates.empty()) throw Error("coverage_greedy: no candidates");
  if (!(sigma > 0.0)) throw Error("coverage_greedy: sigma must be positive");
  if (weights.size() != pool_feats.n) throw Error("coverage_greedy: weight count differs");
  const std::size_t pool = pool_feats.n;
  for (auto c : candidates) {
    if (c >= pool) throw Error("coverage_greedy: candidate outside the pool");
  }

  GreedyResult res;
  if (candidates.size() < batch) {
    res.short_of_batch = true;
    batch = candidates.size();
  }

  // kernel[i * pool + u] = k(candidate_i, u)
  const std::size_t m = candidates.size();
  std::vector<double> kernel(m * pool);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t u = 0; u < pool; ++u) {
      kernel[i * pool + u] =
          gaussian_kernel(table_sq_distance(pool_feats, candidates[i], u), sigma);
    }
  }

  std::vector<double> covered(pool, 0.0);
  const double inv_pool = 1.0 / static_cast<double>(pool);
  auto gain_of = [&](std::size_t i) {
    const double* k = kernel.data() + i * pool;
    double g = 0.0;
    for (std::size_t u = 0; u < pool; ++u) {
      const double improve = k[u] - covered[u];
      if (improve > 0.0) g += weights[u] * improve;
    }
    return g * inv_pool;
  };

  struct Entry {
    double gain;
    std::size_t pos;  // pool position, for tie-breaking
    std::size_t cand;
    std::size_t stamp;
  };
  auto worse = [](const Entry& a, const Entry& b) {
    if (a.gain != b.gain) return a.gain < b.gain;
    return a.pos > b.pos;
  };
  std::priority_queue<Entry, std::vector<Entry>, decltype(worse)> heap(worse);
  std::vector<char> used(m, 0);
  for (std::size_t i = 0; i < m; ++i) heap.push({gain_of(i), candidates[i], i, 0});

  // Gains only shrink as `covered` grows, so a freshly evaluated top entry
  // dominates every stale upper bound below it.
  for (std::size_t step = 0; step < batch; ++step) {
    while (true) {
      Entry top = heap.top();
      heap.pop();
      if (used[top.cand]) continue;
      if (top.stamp == step) {
        used[top.cand] = 1;
        res.selected.push_back(top.pos);
        res.gains.push_back(top.gain);
        res.objective += top.gain;
        const double* k = kernel.data() + top.cand * pool;
        for (std::size_t u = 0; u < pool; ++u) covered[u] = std::max(covered[u], k[u]);
        break;
      }
      top.gain = gain_of(top.cand);
      top.stamp = step;
      heap.push(top);
    }
  }
  return res;
}

CalibratorPair fit_calibrators(const ConformalConfig& cfg, const PosteriorMatrix& pool_s,
                               const PosteriorMatrix& pool_t, const PosteriorMatrix& cal_s,
                               const PosteriorMatrix& cal_t, const LabelVector& cal_labels) {
  CalibratorPair out;
  const bool coverage = cfg.mode == CalibrationMode::kCoverageTarget;
  if (coverage && !cal_labels.empty()) {
    out.student = calibrate_coverage_target(
        scores_at_labels(nonconformity(cal_s), cal_labels), cfg.alpha_student);
    out.teacher = calibrate_coverage_target(
        scores_at_labels(nonconformity(cal_t), cal_labels), cfg.alpha_teacher);
    return out;
  }
  out.fell_back_to_size = coverage;
  const auto c = static_cast<double>(pool_s.cols());
  out.student = calibrate_size_target(nonconformity(pool_s), std::min(cfg.s_student, c), cfg.tol);
  out.teacher = calibrate_size_target(nonconformity(pool_t), std::min(cfg.s_teacher, c), cfg.tol);
  return out;
}

CcmaSelection ccma_select(const CcmaInputs& in, const SelectionConfig& cfg,
                          const ConformalConfig& conformal, std::uint64_t seed) {
  cfg.validate();
  if (in.unlabeled.empty()) throw Error("ccma_select: unlabeled pool is empty");
  CcmaSelection out;

  const Subpool sub = build_subpool(in.train_teacher, in.unlabeled, cfg, derive_seed(seed, 0x5b));
  out.subpool_size = sub.indices.size();
  out.subpool_clamped = sub.clamped;

  // Conformal thresholds are fitted on the subpool (or the labeled
  // calibration split in coverage mode).
  const PosteriorMatrix sub_s = predict_proba(in.student, take_rows(in.train_student, sub.indices));
  const PosteriorMatrix sub_t = take_rows(in.teacher_posterior, sub.indices);
  LabelVector cal_labels;
  PosteriorMatrix cal_s;
  PosteriorMatrix cal_t;
  if (conformal.mode == CalibrationMode::kCoverageTarget && !in.calibration.empty()) {
    cal_s = predict_proba(in.student, take_rows(in.train_student, in.calibration));
    cal_t = take_rows(in.teacher_posterior, in.calibration);
    for (auto i : in.calibration) cal_labels.push_back(in.train_labels[i]);
  }
  out.calibrators = fit_calibrators(conformal, sub_s, sub_t, cal_s, cal_t, cal_labels);
  out.conformal_fallback = out.calibrators.fell_back_to_size;

  // The scored pool: the subpool itself, or all of U when requested.
  const bool full = cfg.full_pool_coverage && cfg.diversity &&
                    sub.indices.size() != in.unlabeled.size();
  const IndexSet& pool = full ? in.unlabeled : sub.indices;
  PosteriorMatrix pool_s = full ? predict_proba(in.student, take_rows(in.train_student, pool)) : sub_s;
  PosteriorMatrix pool_t = full ? take_rows(in.teacher_posterior, pool) : sub_t;

  const auto sets_s = predict_sets(out.calibrators.student, nonconformity(pool_s));
  const auto sets_t = predict_sets(out.calibrators.teacher, nonconformity(pool_t));
  const auto records = score_pool(pool_s, pool_t, sets_s, sets_t);
  std::vector<double> delta(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) delta[i] = records[i].delta;

  // Candidate positions within `pool` that belong to the subpool.
  std::vector<std::size_t> sub_pos;
  std::vector<double> sub_delta;
  if (full) {
    sub_pos.reserve(sub.indices.size());
    for (auto idx : sub.indices) {
      const auto it = std::lower_bound(pool.begin(), pool.end(), idx);
      sub_pos.push_back(static_cast<std::size_t>(std::distance(pool.begin(), it)));
    }
  } else {
    sub_pos.resize(pool.size());
    std::iota(sub_pos.begin(), sub_pos.end(), std::size_t{0});
  }
  sub_delta.reserve(sub_pos.size());
  for (auto p : sub_pos) sub_delta.push_back(delta[p]);

  const auto ranked = top_kappa(sub_delta, cfg.batch, cfg.kappa);
  std::vector<std::size_t> candidates;
  candidates.reserve(ranked.size());
  for (auto r : ranked) candidates.push_back(sub_pos[r]);
  out.candidate_count = candidates.size();

  std::vector<std::size_t> picked;
  if (cfg.diversity) {
    const EmbeddingTable pool_feats = take_rows(in.train_teacher, pool);
    out.sigma = cfg.kernel_sigma ? *cfg.kernel_sigma
                                 : median_pairwise_distance(pool_feats, derive_seed(seed, 0x519));
    const GreedyResult g = coverage_greedy(candidates, pool_feats, delta, cfg.batch, out.sigma);
    picked = g.selected;
    out.short_of_batch = g.short_of_batch;
  } else {
    picked.assign(candidates.begin(),
                  candidates.begin() + static_cast<std::ptrdiff_t>(std::min(cfg.batch, candidates.size())));
    out.short_of_batch = candidates.size() < cfg.batch;
  }
  out.batch.reserve(picked.size());
  for (auto p : picked) out.batch.push_back(pool[p]);
  return out;
}

}  // namespace ccma
