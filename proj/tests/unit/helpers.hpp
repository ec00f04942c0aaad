#pragma once

#include <cmath>
#include <vector>

#include "ccma/feature_store.hpp"
#include "ccma/matrix.hpp"
#include "ccma/rng.hpp"

namespace testing {

inline ccma::EmbeddingTable table_from(const std::vector<std::vector<double>>& rows,
                                       bool normalized = false) {
  ccma::EmbeddingTable t(rows.size(), rows.empty() ? 0 : rows[0].size(), normalized);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) t.row(i)[j] = static_cast<float>(rows[i][j]);
  }
  return t;
}

inline ccma::Matrix matrix_from(const std::vector<std::vector<double>>& rows) {
  ccma::Matrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  }
  return m;
}

inline ccma::EmbeddingTable random_table(std::size_t n, std::size_t d, ccma::Rng& rng) {
  ccma::EmbeddingTable t(n, d);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

// Random probability row; `sharp` > 1 concentrates mass, zeros appear with
// probability `zero_prob`.
inline std::vector<double> random_distribution(std::size_t c, ccma::Rng& rng, double sharp = 1.0,
                                               double zero_prob = 0.0) {
  std::vector<double> p(c);
  double total = 0.0;
  for (auto& v : p) {
    v = rng.uniform() < zero_prob ? 0.0 : std::pow(rng.uniform(), sharp);
    total += v;
  }
  if (total == 0.0) {
    p[rng.below(c)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= total;
  return p;
}

inline ccma::Matrix random_posteriors(std::size_t n, std::size_t c, ccma::Rng& rng,
                                      double sharp = 1.0) {
  ccma::Matrix m(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = random_distribution(c, rng, sharp);
    for (std::size_t j = 0; j < c; ++j) m(i, j) = p[j];
  }
  return m;
}

// Reference entropy and JS written out term by term.
inline double entropy_ref(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

inline double kl_ref(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

inline double js_ref(const std::vector<double>& p, const std::vector<double>& r) {
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + r[i]);
  return 0.5 * kl_ref(p, m) + 0.5 * kl_ref(r, m);
}

}  // namespace testing
