#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "milfuse/feature_store.hpp"
#include "milfuse/metrics.hpp"
#include "milfuse/mil_branch.hpp"

namespace milfuse {

struct MetricsReport {
  double acc = 0;
  double auc_macro = 0;
  std::vector<double> per_class_auc;
  Matrix confusion;  // rows true, cols predicted
  std::size_t fold_id = 0;
};

struct FoldReport {
  MetricsReport he, ihc, fused;
  std::size_t fold_id = 0;
};

struct TwoStageConfig {
  BranchDims dims;              // stage 1; stage 2 reuses hidden/attn dims
  std::size_t pooled_dim = 32;  // pooled_dim^2 becomes the stage-2 input dim
  TrainConfig train;            // per-stage seeds derived internally
  double fused_c2 = 0.0;        // stage-2 instance-loss weight
  bool l2_normalize = false;
  std::uint64_t seed = 7;
  std::size_t folds = 5;
  std::array<double, 3> fractions = {0.8, 0.1, 0.1};
  std::size_t jobs = 1;
};

BranchDims stage2_dims(const TwoStageConfig& cfg);

/// One fold of the two-stage protocol: train both stage-1 branches on the
/// split, extract embeddings with the frozen best checkpoints, build and
/// persist fused bags, train the stage-2 branch, and report test metrics for
/// all three routes. Writes split.txt, he/ihc/fused checkpoints (+ .opt +
/// history), fused bags + manifest, metrics.tsv, and per-test-slide
/// attention_<slide_id>.tsv into fold_dir.
FoldReport run_two_stage(const std::vector<PairedSample>& samples, const SplitSpec& split,
                         const TwoStageConfig& cfg, const std::filesystem::path& fold_dir,
                         std::size_t fold_id);

struct RouteSummary {
  double acc_mean = 0, acc_std = 0, auc_mean = 0, auc_std = 0;
};

struct CvResult {
  std::vector<FoldReport> folds;
  std::map<std::string, RouteSummary> summary;  // keys he, ihc, fused
};

/// Monte-Carlo cross-validation: fold i gets split seed cfg.seed + i. Folds
/// run on cfg.jobs workers, each isolated in out_dir/fold_<i>. Writes
/// summary.tsv.
CvResult monte_carlo_cv(const Manifest& manifest, const std::vector<PairedSample>& samples,
                        const TwoStageConfig& cfg, const std::filesystem::path& out_dir);

void write_summary(const CvResult& cv, const std::filesystem::path& path);

}  // namespace milfuse
