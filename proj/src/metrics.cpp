#include "milfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "milfuse/errors.hpp"
#include "milfuse/log.hpp"

namespace milfuse {

std::size_t argmax_row(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("argmax_row: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[best]) best = i;
  return best;
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.empty()) throw ContractError("accuracy: empty input");
  if (preds.size() != labels.size())
    throw ContractError("accuracy: size mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

Matrix confusion_matrix(std::span<const int> preds, std::span<const int> labels,
                        std::size_t num_classes) {
  if (preds.size() != labels.size())
    throw ContractError("confusion_matrix: size mismatch");
  Matrix c(num_classes, num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes ||
        preds[i] < 0 || static_cast<std::size_t>(preds[i]) >= num_classes)
      throw ContractError("confusion_matrix: class index out of range");
    c(static_cast<std::size_t>(labels[i]), static_cast<std::size_t>(preds[i])) += 1.0;
  }
  return c;
}

namespace {

double binary_auc_midrank(const std::vector<double>& scores, const std::vector<char>& is_pos) {
  const std::size_t m = scores.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0;
  std::size_t n_pos = 0, n_neg = 0;
  std::size_t i = 0;
  while (i < m) {
    std::size_t j = i;
    while (j < m && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t t = i; t < j; ++t) {
      if (is_pos[order[t]]) {
        rank_sum_pos += midrank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) *
                                      static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace

AucResult auc_macro_ovr(const Matrix& scores, std::span<const int> labels) {
  const std::size_t m = scores.rows(), n_cls = scores.cols();
  if (m != labels.size()) throw ShapeError("auc_macro_ovr: rows != labels");
  if (m < 2) throw ContractError("auc_macro_ovr: need at least 2 samples");

  AucResult res;
  res.per_class.assign(n_cls, std::numeric_limits<double>::quiet_NaN());
  res.computable.assign(n_cls, 0);

  double sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < n_cls; ++c) {
    std::vector<double> col(m);
    std::vector<char> is_pos(m);
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < m; ++i) {
      col[i] = scores(i, c);
      is_pos[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
      n_pos += is_pos[i];
    }
    if (n_pos == 0 || n_pos == m) {
      log::warn("auc_macro_ovr: class %zu has no %s samples, skipped", c,
                n_pos == 0 ? "positive" : "negative");
      continue;
    }
    res.per_class[c] = binary_auc_midrank(col, is_pos);
    res.computable[c] = 1;
    sum += res.per_class[c];
    ++used;
  }
  if (used == 0)
    throw ContractError("auc_macro_ovr: labels contain a single class, AUC undefined");
  res.macro = sum / static_cast<double>(used);
  return res;
}

double mean(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("mean: empty input");
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double sample_std(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("sample_std: empty input");
  if (xs.size() < 2) return 0.0;
  const double mu = mean(xs);
  double s = 0;
  for (double x : xs) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace milfuse
