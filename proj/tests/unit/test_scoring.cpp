#include <doctest.h>

#include <numeric>

#include "ccma/scoring.hpp"
#include "ccma/teacher_head.hpp"
#include "helpers.hpp"

using namespace ccma;

namespace {

LabelSet set_of(std::size_t width, std::initializer_list<std::size_t> members) {
  LabelSet s(width);
  for (auto c : members) s.insert(c);
  return s;
}

}  // namespace

TEST_CASE("union support") {
  CHECK(union_support(set_of(3, {0, 1}), set_of(3, {1, 2}), 0, 0).members() ==
        std::vector<std::size_t>{0, 1, 2});
  CHECK(union_support(LabelSet(3), LabelSet(3), 0, 2).members() ==
        std::vector<std::size_t>{0, 2});
  const auto gt = set_of(5, {1, 2, 4});
  CHECK(union_support(set_of(5, {2, 4}), gt, 3, 3) == gt);
}

TEST_CASE("renormalize") {
  const std::vector<double> p{0.5, 0.3, 0.2};
  const auto r = renormalize(p, set_of(3, {0, 1}));
  CHECK(r[0] == doctest::Approx(0.625));
  CHECK(r[1] == doctest::Approx(0.375));
  CHECK(r[2] == 0.0);
  const auto same = renormalize(p, set_of(3, {0, 1, 2}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(same[i] == doctest::Approx(p[i]).epsilon(1e-15));
  CHECK_THROWS_AS(renormalize(std::vector<double>{1.0 - 1e-15, 1e-15}, set_of(2, {1})), Error);
}

TEST_CASE("JS examples") {
  const std::vector<double> p{0.2, 0.3, 0.5};
  CHECK(js_divergence(p, p) == 0.0);
  CHECK(js_divergence(std::vector<double>{1, 0}, std::vector<double>{0, 1}) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(std::abs(js_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 0}) -
                 0.215761) <= 1e-5);
}

TEST_CASE("JS matches a term-by-term oracle, is symmetric and bounded") {
  Rng rng(1);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::size_t c = 2 + rng.below(12);
    const auto p = testing::random_distribution(c, rng, 1.0 + 4.0 * rng.uniform(), 0.2);
    const auto r = testing::random_distribution(c, rng, 1.0 + 4.0 * rng.uniform(), 0.2);
    const double a = js_divergence(p, r);
    CHECK(a == js_divergence(r, p));
    CHECK(a >= 0.0);
    CHECK(a <= std::log(2.0) + 1e-9);
    CHECK(a == doctest::Approx(testing::js_ref(p, r)).epsilon(1e-9).scale(1.0));
    CHECK(js_divergence(p, p) == 0.0);
  }
}

TEST_CASE("confidence gate") {
  CHECK(confidence_gate(0.4, 0.4, 0.0) == 0.5);
  CHECK(std::abs(confidence_gate(0.9, 0.1, 1e-8) - 0.9) <= 1e-7);
  CHECK(std::abs(confidence_gate(0.1, 0.9, 1e-8) - 0.1) <= 1e-7);
}

TEST_CASE("ccma_score examples") {
  SUBCASE("agreement leaves only the entropy term") {
    const std::vector<double> p{0.6, 0.3, 0.1};
    const auto g = set_of(3, {0, 1});
    const auto rec = ccma_score(p, p, g, g);
    CHECK(rec.js == 0.0);
    CHECK(rec.delta == doctest::Approx((1.0 - rec.w_js) * testing::entropy_ref(p)));
    CHECK_FALSE(rec.top1_disagree);
    CHECK(rec.overlap == 2);
    CHECK(rec.symdiff == 0);
  }
  SUBCASE("uniform student over four classes") {
    const std::vector<double> ps{0.25, 0.25, 0.25, 0.25};
    const std::vector<double> pt{0.25, 0.25, 0.25, 0.25};
    const auto g = set_of(4, {0, 1, 2, 3});
    const auto rec = ccma_score(ps, pt, g, g);
    CHECK(rec.w_js == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(rec.delta == doctest::Approx(0.5 * std::log(4.0)).epsilon(1e-7));
  }
  SUBCASE("a confident disagreeing teacher dominates") {
    const std::vector<double> ps{0.9, 0.05, 0.05};
    const std::vector<double> pt{0.005, 0.99, 0.005};
    const auto rec = ccma_score(ps, pt, set_of(3, {0}), set_of(3, {1}));
    CHECK(rec.w_js > 0.5);
    CHECK(rec.w_js * rec.js > (1.0 - rec.w_js) * rec.h_s);
    CHECK(rec.top1_disagree);
    CHECK(rec.omega_size == 2);
    CHECK(rec.overlap == 0);
    CHECK(rec.symdiff == 2);
  }
  SUBCASE("empty sets fall back to the two top-1 labels") {
    const std::vector<double> ps{0.1, 0.7, 0.2};
    const std::vector<double> pt{0.1, 0.2, 0.7};
    const auto rec = ccma_score(ps, pt, LabelSet(3), LabelSet(3));
    CHECK(rec.omega_size == 2);
  }
}

TEST_CASE("score identity against an independent recomputation") {
  Rng rng(2);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t c = 2 + rng.below(9);
    const auto ps = testing::random_distribution(c, rng, 1.0 + 3.0 * rng.uniform());
    const auto pt = testing::random_distribution(c, rng, 1.0 + 3.0 * rng.uniform());
    LabelSet gs(c), gt(c);
    for (std::size_t k = 0; k < c; ++k) {
      if (rng.bernoulli(0.4)) gs.insert(k);
      if (rng.bernoulli(0.4)) gt.insert(k);
    }
    const auto rec = ccma_score(ps, pt, gs, gt);

    const std::size_t ts = static_cast<std::size_t>(std::max_element(ps.begin(), ps.end()) - ps.begin());
    const std::size_t tt = static_cast<std::size_t>(std::max_element(pt.begin(), pt.end()) - pt.begin());
    std::vector<bool> omega(c);
    bool any = false;
    for (std::size_t k = 0; k < c; ++k) {
      omega[k] = gs.contains(k) || gt.contains(k);
      any = any || omega[k];
    }
    if (!any) omega[ts] = omega[tt] = true;
    std::vector<double> rs(c, 0.0), rt(c, 0.0);
    double ms = 0.0, mt = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      if (omega[k]) {
        ms += ps[k];
        mt += pt[k];
      }
    }
    for (std::size_t k = 0; k < c; ++k) {
      if (omega[k]) {
        rs[k] = ps[k] / ms;
        rt[k] = pt[k] / mt;
      }
    }
    const double js = testing::js_ref(rs, rt);
    const double w = pt[tt] / (pt[tt] + ps[ts] + 1e-8);
    const double expected = w * js + (1.0 - w) * testing::entropy_ref(ps);
    CHECK(std::abs(rec.delta - expected) <= 1e-9);
    CHECK(std::abs(rec.delta - (rec.w_js * rec.js + (1.0 - rec.w_js) * rec.h_s)) <= 1e-9);
    CHECK(rec.delta >= 0.0);
  }
}

TEST_CASE("delta is invariant to a consistent class permutation") {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t c = 3 + rng.below(6);
    const auto ps = testing::random_distribution(c, rng, 2.0);
    const auto pt = testing::random_distribution(c, rng, 2.0);
    LabelSet gs(c), gt(c);
    for (std::size_t k = 0; k < c; ++k) {
      if (rng.bernoulli(0.5)) gs.insert(k);
      if (rng.bernoulli(0.5)) gt.insert(k);
    }
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> qs(c), qt(c);
    LabelSet hs(c), ht(c);
    for (std::size_t k = 0; k < c; ++k) {
      qs[k] = ps[perm[k]];
      qt[k] = pt[perm[k]];
      if (gs.contains(perm[k])) hs.insert(k);
      if (gt.contains(perm[k])) ht.insert(k);
    }
    // Ties in the top-1 could pick different fallback labels; skip those.
    if (gs.empty() && gt.empty()) continue;
    CHECK(ccma_score(ps, pt, gs, gt).delta ==
          doctest::Approx(ccma_score(qs, qt, hs, ht).delta).epsilon(1e-12));
  }
}

TEST_CASE("delta is zero exactly when both terms vanish") {
  const std::vector<double> onehot{0.0, 1.0, 0.0};
  const auto g = set_of(3, {1});
  CHECK(ccma_score(onehot, onehot, g, g).delta == 0.0);
  const std::vector<double> other{1.0, 0.0, 0.0};
  CHECK(ccma_score(onehot, other, g, set_of(3, {0})).delta > 0.0);
}

TEST_CASE("pool diagnostics") {
  ScoreRecord r;
  r.overlap = 2;
  r.symdiff = 1;
  r.js = 0.3;
  r.conf_s = 0.6;
  r.conf_t = 0.9;
  r.delta = 0.4;
  std::vector<ScoreRecord> same(4, r);
  const auto s = pool_diagnostics(same);
  CHECK(s.count == 4);
  CHECK(s.mean_overlap == doctest::Approx(2.0));
  CHECK(s.mean_symdiff == doctest::Approx(1.0));
  CHECK(s.mean_js == doctest::Approx(0.3));
  CHECK(s.mean_conf_s == doctest::Approx(0.6));
  CHECK(s.mean_conf_t == doctest::Approx(0.9));
  CHECK(s.frac_top1_disagree == 0.0);

  same[0].top1_disagree = same[1].top1_disagree = true;
  CHECK(pool_diagnostics(same).frac_top1_disagree == 0.5);
  CHECK_THROWS_AS(pool_diagnostics(std::vector<ScoreRecord>{}), Error);
}
