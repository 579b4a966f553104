#include <cmath>
#include <vector>

#include "doctest.h"
#include "milfuse/errors.hpp"
#include "milfuse/metrics.hpp"
#include "milfuse/rng.hpp"

using namespace milfuse;

namespace {

// O(n_pos * n_neg) pair count: each correctly ordered pair scores 1, each tie
// 0.5. Slow but unarguable.
double auc_pair_oracle(std::span<const double> scores, std::span<const char> is_pos) {
  double num = 0;
  std::size_t pairs = 0;
  for (std::size_t p = 0; p < scores.size(); ++p) {
    if (!is_pos[p]) continue;
    for (std::size_t n = 0; n < scores.size(); ++n) {
      if (is_pos[n]) continue;
      ++pairs;
      if (scores[p] > scores[n])
        num += 1.0;
      else if (scores[p] == scores[n])
        num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

double auc_macro_oracle(const Matrix& scores, std::span<const int> labels) {
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    std::vector<double> col(scores.rows());
    std::vector<char> is_pos(scores.rows());
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      col[i] = scores(i, c);
      is_pos[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
      n_pos += is_pos[i];
    }
    if (n_pos == 0 || n_pos == scores.rows()) continue;
    sum += auc_pair_oracle(col, is_pos);
    ++used;
  }
  REQUIRE(used > 0);
  return sum / static_cast<double>(used);
}

}  // namespace

TEST_CASE("argmax_row picks the maximum, lowest index on ties") {
  const std::vector<double> a = {0.1, 0.7, 0.2};
  CHECK(argmax_row(a) == 1);
  const std::vector<double> tie = {0.5, 0.1, 0.5};
  CHECK(argmax_row(tie) == 0);
  const std::vector<double> single = {-2.0};
  CHECK(argmax_row(single) == 0);
  std::vector<double> empty;
  CHECK_THROWS_AS(argmax_row(empty), ContractError);
}

TEST_CASE("accuracy counts matches") {
  const std::vector<int> preds = {0, 1, 2, 2}, labels = {0, 1, 1, 2};
  CHECK(accuracy(preds, labels) == 0.75);
  CHECK(accuracy(labels, labels) == 1.0);
  const std::vector<int> wrong = {1, 0, 0, 0};
  CHECK(accuracy(wrong, labels) == 0.0);
  std::vector<int> empty;
  CHECK_THROWS_AS(accuracy(empty, empty), ContractError);
  const std::vector<int> shorter = {0, 1};
  CHECK_THROWS_AS(accuracy(shorter, labels), ContractError);
}

TEST_CASE("confusion matrix layout and the trace identity") {
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2, 2};
  const std::vector<int> preds = {0, 1, 1, 1, 2, 0, 2};
  const Matrix c = confusion_matrix(preds, labels, 3);
  CHECK(c(0, 0) == 1.0);
  CHECK(c(0, 1) == 1.0);
  CHECK(c(1, 1) == 2.0);
  CHECK(c(2, 2) == 2.0);
  CHECK(c(2, 0) == 1.0);
  CHECK(c(1, 0) == 0.0);

  double trace = 0, total = 0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == j) trace += c(i, j);
      total += c(i, j);
    }
  CHECK(total == 7.0);
  CHECK(trace / total == doctest::Approx(accuracy(preds, labels)).epsilon(1e-15));

  const std::vector<int> bad = {0, 3};
  const std::vector<int> lab2 = {0, 1};
  CHECK_THROWS_AS(confusion_matrix(bad, lab2, 3), ContractError);
}

TEST_CASE("binary auc known values") {
  Matrix scores(4, 2);
  const std::vector<double> pos_col = {0.1, 0.4, 0.35, 0.8};
  const std::vector<int> labels = {0, 0, 1, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    scores(i, 1) = pos_col[i];
    scores(i, 0) = 1.0 - pos_col[i];
  }
  const AucResult r = auc_macro_ovr(scores, labels);
  REQUIRE(r.computable[0] == 1);
  REQUIRE(r.computable[1] == 1);
  CHECK(r.per_class[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(r.per_class[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(r.macro == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("auc extremes: perfect separation and constant scores") {
  Matrix perfect(4, 2);
  const std::vector<int> labels = {0, 0, 1, 1};
  const std::vector<double> col = {0.1, 0.2, 0.8, 0.9};
  for (std::size_t i = 0; i < 4; ++i) {
    perfect(i, 1) = col[i];
    perfect(i, 0) = 1.0 - col[i];
  }
  CHECK(auc_macro_ovr(perfect, labels).macro == doctest::Approx(1.0).epsilon(1e-12));

  Matrix flat(4, 2);
  for (std::size_t i = 0; i < flat.size(); ++i) flat.data()[i] = 0.5;
  CHECK(auc_macro_ovr(flat, labels).macro == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("auc matches the pair-count oracle on random data with ties") {
  Rng rng(55);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t m = 4 + rng.below(30);
    const std::size_t n_cls = 2 + rng.below(3);
    Matrix scores(m, n_cls);
    std::vector<int> labels(m);
    // coarse quantization forces plenty of exact ties
    for (std::size_t i = 0; i < scores.size(); ++i)
      scores.data()[i] = static_cast<double>(rng.below(7)) / 6.0;
    for (std::size_t i = 0; i < m; ++i)
      labels[i] = static_cast<int>(rng.below(n_cls));
    bool two_classes = false;
    for (std::size_t i = 1; i < m; ++i)
      if (labels[i] != labels[0]) two_classes = true;
    if (!two_classes) labels[0] = (labels[0] + 1) % static_cast<int>(n_cls);

    const AucResult got = auc_macro_ovr(scores, labels);
    CHECK(got.macro == doctest::Approx(auc_macro_oracle(scores, labels)).epsilon(1e-12));
    for (std::size_t c = 0; c < n_cls; ++c) {
      if (!got.computable[c]) {
        CHECK(std::isnan(got.per_class[c]));
        continue;
      }
      std::vector<double> colv(m);
      std::vector<char> is_pos(m);
      for (std::size_t i = 0; i < m; ++i) {
        colv[i] = scores(i, c);
        is_pos[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
      }
      CHECK(got.per_class[c] ==
            doctest::Approx(auc_pair_oracle(colv, is_pos)).epsilon(1e-12));
    }
  }
}

TEST_CASE("auc skips classes without positives or negatives and flags them") {
  Matrix scores(4, 3);
  Rng rng(66);
  for (std::size_t i = 0; i < scores.size(); ++i) scores.data()[i] = rng.normal();
  const std::vector<int> labels = {0, 0, 1, 1};  // class 2 never appears
  const AucResult r = auc_macro_ovr(scores, labels);
  CHECK(r.computable[0] == 1);
  CHECK(r.computable[1] == 1);
  CHECK(r.computable[2] == 0);
  CHECK(std::isnan(r.per_class[2]));
  CHECK(r.macro ==
        doctest::Approx(0.5 * (r.per_class[0] + r.per_class[1])).epsilon(1e-15));
}

TEST_CASE("auc rejects degenerate inputs") {
  Matrix scores(4, 2);
  const std::vector<int> one_class = {1, 1, 1, 1};
  CHECK_THROWS_AS(auc_macro_ovr(scores, one_class), ContractError);

  Matrix single(1, 2);
  const std::vector<int> single_label = {0};
  CHECK_THROWS_AS(auc_macro_ovr(single, single_label), ContractError);

  const std::vector<int> mismatched = {0, 1};
  CHECK_THROWS_AS(auc_macro_ovr(scores, mismatched), ShapeError);
}

TEST_CASE("mean and sample std") {
  const std::vector<double> xs = {1.0, 2.0, 3.0, 4.0};
  CHECK(mean(xs) == 2.5);
  CHECK(sample_std(xs) == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-12));

  const std::vector<double> one = {7.0};
  CHECK(mean(one) == 7.0);
  CHECK(sample_std(one) == 0.0);

  const std::vector<double> constant = {2.0, 2.0, 2.0};
  CHECK(sample_std(constant) == 0.0);

  std::vector<double> empty;
  CHECK_THROWS_AS(mean(empty), ContractError);
  CHECK_THROWS_AS(sample_std(empty), ContractError);
}
