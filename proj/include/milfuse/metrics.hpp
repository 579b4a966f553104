#pragma once

#include <span>
#include <vector>

#include "milfuse/matrix.hpp"

namespace milfuse {

std::size_t argmax_row(std::span<const double> xs);  // lowest index wins ties

double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Rows are true labels, columns predictions; entries are counts.
Matrix confusion_matrix(std::span<const int> preds, std::span<const int> labels,
                        std::size_t num_classes);

struct AucResult {
  double macro = 0;
  std::vector<double> per_class;   // NaN where not computable
  std::vector<char> computable;    // 0/1 per class
};

/// Macro one-vs-rest AUC from probability rows via the Mann-Whitney rank
/// statistic, ties counted 0.5. Classes with no positives or no negatives
/// are skipped and flagged; if no class is computable that is an error.
AucResult auc_macro_ovr(const Matrix& scores, std::span<const int> labels);

double mean(std::span<const double> xs);
double sample_std(std::span<const double> xs);  // n-1 denominator; 0 when n < 2

}  // namespace milfuse
