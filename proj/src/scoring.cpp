#include "ccma/scoring.hpp"

#include <algorithm>
#include <cmath>

#include "ccma/teacher_head.hpp"

namespace ccma {

LabelSet union_support(const LabelSet& gs, const LabelSet& gt, std::size_t top_s,
                       std::size_t top_t) {
  LabelSet omega = gs | gt;
  if (omega.empty()) {
    omega.insert(top_s);
    omega.insert(top_t);
  }
  return omega;
}

std::vector<double> renormalize(std::span<const double> p, const LabelSet& omega) {
  if (omega.width() != p.size()) throw Error("renormalize: support width differs from C");
  double mass = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (omega.contains(c)) mass += p[c];
  }
  if (!(mass >= 1e-12)) throw Error("renormalize: probability mass on the support is ~0");
  std::vector<double> out(p.size(), 0.0);
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (omega.contains(c)) out[c] = p[c] / mass;
  }
  return out;
}

double js_divergence(std::span<const double> p, std::span<const double> r) {
  if (p.size() != r.size()) throw Error("js_divergence: length mismatch");
  // Each class contributes f(p_c, r_c), with f symmetric in its arguments,
  // so swapping p and r yields the same rounding in every step.
  double total = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double a = p[c];
    const double b = r[c];
    const double m = 0.5 * (a + b);
    double ta = 0.0;
    double tb = 0.0;
    if (a > 0.0) ta = a * std::log(a / m);
    if (b > 0.0) tb = b * std::log(b / m);
    total += ta + tb;
  }
  return std::max(0.0, 0.5 * total);
}

double confidence_gate(double conf_t, double conf_s, double eps) {
  return conf_t / (conf_t + conf_s + eps);
}

ScoreRecord ccma_score(std::span<const double> p_s, std::span<const double> p_t,
                       const LabelSet& gs, const LabelSet& gt, double eps) {
  if (p_s.size() != p_t.size() || gs.width() != p_s.size() || gt.width() != p_s.size()) {
    throw Error("ccma_score: inconsistent class counts");
  }
  ScoreRecord rec;
  const std::size_t top_s = argmax(p_s);
  const std::size_t top_t = argmax(p_t);
  rec.conf_s = p_s[top_s];
  rec.conf_t = p_t[top_t];
  rec.top1_disagree = top_s != top_t;
  rec.overlap = (gs & gt).size();
  rec.symdiff = (gs ^ gt).size();

  const LabelSet omega = union_support(gs, gt, top_s, top_t);
  rec.omega_size = omega.size();
  const auto ps_omega = renormalize(p_s, omega);
  const auto pt_omega = renormalize(p_t, omega);
  rec.js = js_divergence(ps_omega, pt_omega);
  rec.h_s = entropy(p_s);
  rec.w_js = confidence_gate(rec.conf_t, rec.conf_s, eps);
  rec.delta = rec.w_js * rec.js + (1.0 - rec.w_js) * rec.h_s;
  return rec;
}

std::vector<ScoreRecord> score_pool(const PosteriorMatrix& p_s, const PosteriorMatrix& p_t,
                                    const PredictionSets& gs, const PredictionSets& gt,
                                    double eps) {
  const std::size_t n = p_s.rows();
  if (p_t.rows() != n || gs.size() != n || gt.size() != n) {
    throw Error("score_pool: row counts differ");
  }
  std::vector<ScoreRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(ccma_score(p_s.row(i), p_t.row(i), gs[i], gt[i], eps));
  }
  return out;
}

PoolSummary pool_diagnostics(std::span<const ScoreRecord> records) {
  if (records.empty()) throw Error("pool_diagnostics: no records");
  PoolSummary s;
  s.count = records.size();
  std::size_t disagree = 0;
  for (const auto& r : records) {
    s.mean_overlap += static_cast<double>(r.overlap);
    s.mean_symdiff += static_cast<double>(r.symdiff);
    s.mean_js += r.js;
    s.mean_conf_s += r.conf_s;
    s.mean_conf_t += r.conf_t;
    s.mean_delta += r.delta;
    if (r.top1_disagree) ++disagree;
  }
  const auto n = static_cast<double>(records.size());
  s.mean_overlap /= n;
  s.mean_symdiff /= n;
  s.mean_js /= n;
  s.mean_conf_s /= n;
  s.mean_conf_t /= n;
  s.mean_delta /= n;
  s.frac_top1_disagree = static_cast<double>(disagree) / n;
  return s;
}

}  // namespace ccma
