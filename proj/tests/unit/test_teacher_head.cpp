#include <doctest.h>

#include <numeric>

#include "ccma/teacher_head.hpp"
#include "helpers.hpp"

using namespace ccma;

namespace {

PrototypeTable protos(const std::vector<std::vector<double>>& rows) {
  return PrototypeTable{l2_normalize(testing::table_from(rows))};
}

}  // namespace

TEST_CASE("teacher logits are scaled dot products") {
  const auto feats = l2_normalize(testing::table_from({{1, 0}}));
  const TeacherModel unit(protos({{1, 0}, {0, 1}}), 1.0);
  const auto l1 = teacher_logits(unit, feats);
  CHECK(l1(0, 0) == doctest::Approx(1.0));
  CHECK(l1(0, 1) == doctest::Approx(0.0));

  const TeacherModel sharp(protos({{1, 0}, {0, 1}}), 0.01);
  const auto l2 = teacher_logits(sharp, feats);
  CHECK(l2(0, 0) == doctest::Approx(100.0));
  CHECK(l2(0, 1) == doctest::Approx(0.0));

  const TeacherModel orth(protos({{1, 0, 0}, {0, 1, 0}}), 0.01);
  const auto l3 = teacher_logits(orth, l2_normalize(testing::table_from({{0, 0, 1}})));
  CHECK(l3(0, 0) == 0.0);
  CHECK(l3(0, 1) == 0.0);
}

TEST_CASE("teacher logits validate inputs") {
  const TeacherModel m(protos({{1, 0}, {0, 1}}), 1.0);
  CHECK_THROWS_AS(teacher_logits(m, l2_normalize(testing::table_from({{1, 0, 0}}))), Error);
  CHECK_THROWS_AS(teacher_logits(m, testing::table_from({{3, 4}})), Error);
  CHECK_THROWS_AS(TeacherModel(protos({{1, 0}, {0, 1}}), 0.0), Error);
}

TEST_CASE("softmax examples") {
  const auto p = softmax_rows(testing::matrix_from({{0, 0, 0}, {1, 0, 0}}));
  for (std::size_t j = 0; j < 3; ++j) CHECK(p(0, j) == doctest::Approx(1.0 / 3.0));
  const auto q = softmax_rows(testing::matrix_from({{1, 0}}));
  CHECK(std::abs(q(0, 0) - 0.73106) <= 1e-5);
  CHECK(std::abs(q(0, 1) - 0.26894) <= 1e-5);
  const auto big = softmax_rows(testing::matrix_from({{1000, 0}}));
  CHECK(big(0, 0) == 1.0);
  CHECK(std::isfinite(big(0, 1)));
  CHECK(big(0, 1) < 1e-300);
  CHECK_THROWS_AS(softmax_rows(testing::matrix_from({{std::nan(""), 0}})), Error);
}

TEST_CASE("teacher posterior examples") {
  // Cosine 0.9 to its own prototype, at most 0.1 to the others.
  const double s = std::sqrt(1.0 - 0.81 - 0.01);
  const auto feats = l2_normalize(testing::table_from({{0.9, 0.1, 0.0, s}}));
  const auto P = protos({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
  const auto sharp = teacher_posterior(TeacherModel(P, 0.01), feats);
  CHECK(sharp(0, 0) >= 0.999);

  const auto soft = teacher_posterior(TeacherModel(P, 0.30), feats);
  CHECK(entropy(soft.row(0)) > entropy(sharp.row(0)));

  const auto same = teacher_posterior(TeacherModel(protos({{1, 1}, {1, 1}, {1, 1}}), 0.01),
                                      l2_normalize(testing::table_from({{0.3, 0.7}})));
  for (std::size_t j = 0; j < 3; ++j) CHECK(same(0, j) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("posterior properties on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 2 + rng.below(6);
    const std::size_t d = 2 + rng.below(8);
    const auto feats = l2_normalize(testing::random_table(20, d, rng));
    const PrototypeTable P{l2_normalize(testing::random_table(c, d, rng))};
    const auto p_warm = teacher_posterior(TeacherModel(P, 0.5), feats);
    const auto p_cold = teacher_posterior(TeacherModel(P, 0.05), feats);

    // Permuting prototype rows permutes posterior columns.
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    PrototypeTable Q{EmbeddingTable(c, d, true)};
    for (std::size_t k = 0; k < c; ++k) {
      std::copy(P.table.row(perm[k]).begin(), P.table.row(perm[k]).end(), Q.table.row(k).begin());
    }
    const auto p_perm = teacher_posterior(TeacherModel(Q, 0.5), feats);

    for (std::size_t i = 0; i < feats.n; ++i) {
      double sum = 0.0;
      for (double v : p_warm.row(i)) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-6);
      const double max_warm = *std::max_element(p_warm.row(i).begin(), p_warm.row(i).end());
      const double max_cold = *std::max_element(p_cold.row(i).begin(), p_cold.row(i).end());
      CHECK(max_cold >= max_warm - 1e-12);
      for (std::size_t k = 0; k < c; ++k) {
        CHECK(p_perm(i, k) == doctest::Approx(p_warm(i, perm[k])).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("entropy and accuracy helpers") {
  const std::vector<double> p{0.5, 0.5, 0.0};
  CHECK(entropy(p) == doctest::Approx(std::log(2.0)));
  const auto post = testing::matrix_from({{0.9, 0.1}, {0.2, 0.8}, {0.6, 0.4}});
  CHECK(top1_accuracy(post, LabelVector{0, 1, 1}) == doctest::Approx(2.0 / 3.0));
}
