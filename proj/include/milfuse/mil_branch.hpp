#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "milfuse/feature_store.hpp"
#include "milfuse/matrix.hpp"
#include "milfuse/rng.hpp"

namespace milfuse {

struct BranchDims {
  std::size_t d_in = 1024;
  std::size_t d_hidden = 512;
  std::size_t d_attn = 256;
  std::size_t num_classes = 4;
};

/// One attention-MIL branch. w_attn and w_cls stack the per-class heads as
/// rows; the instance classifiers stay per-class (2 x d_hidden plus a
/// 2-vector bias each).
struct BranchParams {
  BranchDims dims;
  Matrix w_fc;                 // d_hidden x d_in
  Matrix v, u;                 // d_attn x d_hidden (shared attention backbone)
  Matrix w_attn;               // num_classes x d_attn
  Matrix w_cls;                // num_classes x d_hidden
  std::vector<Matrix> w_inst;  // per class: 2 x d_hidden
  std::vector<Matrix> b_inst;  // per class: 2 x 1
};

/// Gradients mirror the parameter shapes.
using BranchGrads = BranchParams;

/// Visits every tensor with its checkpoint-stable name, in a fixed order.
/// Stacked heads are visited whole (one W_atten tensor, not per class).
template <typename Params, typename Fn>
void visit_tensors(Params& p, Fn&& fn) {
  fn("W_fc", p.w_fc);
  fn("V", p.v);
  fn("U", p.u);
  fn("W_atten", p.w_attn);
  fn("W_c", p.w_cls);
  for (std::size_t n = 0; n < p.w_inst.size(); ++n)
    fn("W_inst." + std::to_string(n), p.w_inst[n]);
  for (std::size_t n = 0; n < p.b_inst.size(); ++n)
    fn("W_inst." + std::to_string(n) + ".bias", p.b_inst[n]);
}

BranchParams init_params(const BranchDims& dims, Rng& rng);
BranchGrads zero_grads(const BranchDims& dims);

struct ForwardTrace {
  Matrix h;            // K x d_hidden
  Matrix gate_t;       // K x d_attn, tanh branch
  Matrix gate_s;       // K x d_attn, sigmoid gate
  Matrix attn_logits;  // num_classes x K
  Matrix attn;         // num_classes x K, each row a distribution over instances
  Matrix z;            // num_classes x d_hidden
  std::vector<double> scores;  // length num_classes
  std::vector<double> probs;
};

ForwardTrace forward(const BranchParams& params, const FeatureBag& bag);

struct LossConfig {
  double c1 = 0.7, c2 = 0.3;
  std::size_t k_sample = 8;
  double tau = 1.0;
  bool patch_sum = false;  // sum instead of mean over selected instances
};

struct LossReport {
  double total = 0, slide = 0, patch = 0;
};

double slide_loss(std::span<const double> probs, int label);

/// Pseudo-label selection from the true class's attention row: indices of the
/// k_eff = min(k_sample, ceil(K/2)) highest-attention instances (label 1) and
/// the k_eff lowest (label 0). Ties broken by lower index.
struct InstanceSelection {
  std::vector<std::size_t> pos, neg;
};
InstanceSelection select_instances(const Matrix& attn, int label, std::size_t k_sample);

/// Binary smooth top-1 SVM loss with unit margin and temperature tau.
double smooth_svm_loss(double s0, double s1, int pseudo_label, double tau);

double instance_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                     const InstanceSelection& sel, const LossConfig& cfg);
double instance_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                     std::size_t k_sample, double tau);

LossReport total_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                      const InstanceSelection& sel, const LossConfig& cfg);
LossReport total_loss(const ForwardTrace& trace, const BranchParams& params, int label,
                      const LossConfig& cfg);

/// Analytic gradient of c1*slide + c2*patch. The top/bottom-k selection is
/// treated as constant; gradients flow through W_inst and the selected h_k.
BranchGrads backward(const BranchParams& params, const ForwardTrace& trace,
                     const FeatureBag& bag, int label, const InstanceSelection& sel,
                     const LossConfig& cfg);
BranchGrads backward(const BranchParams& params, const ForwardTrace& trace,
                     const FeatureBag& bag, int label, const LossConfig& cfg);

struct AdamConfig {
  double lr = 2e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-5;  // L2 term added to gradients
};

struct AdamState {
  std::vector<Matrix> m, v;  // tensor order of visit_tensors
  std::uint64_t t = 0;
};

AdamState init_adam(const BranchDims& dims);
void adam_step(BranchParams& params, const BranchGrads& grads, AdamState& state,
               const AdamConfig& cfg);

struct TrainConfig {
  AdamConfig adam;
  LossConfig loss;
  std::size_t min_epochs = 50, max_epochs = 200, patience = 20;
  double min_delta = 1e-5;
  std::uint64_t seed = 1;
};

struct LabeledBag {
  const FeatureBag* bag = nullptr;
  int label = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, val_acc = 0;
};

struct TrainState {
  BranchParams params;  // current (last completed step)
  BranchParams best_params;
  AdamState adam;
  std::size_t epoch = 0;  // completed epochs
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t streak = 0;  // consecutive epochs without improvement
  bool diverged = false;
  std::vector<EpochStats> history;  // epochs run by the last train_loop call
};

TrainState init_train_state(const BranchDims& dims, const TrainConfig& cfg);

/// Runs epochs state.epoch+1 .. until early stop or max_epochs. One bag per
/// optimizer step; epoch order from a stream derived from (seed, epoch), so a
/// resumed run replays the exact schedule of an uninterrupted one.
void train_loop(TrainState& state, std::span<const LabeledBag> train,
                std::span<const LabeledBag> val, const TrainConfig& cfg);

TrainState train_branch(std::span<const LabeledBag> train, std::span<const LabeledBag> val,
                        const BranchDims& dims, const TrainConfig& cfg);

struct BagEmbeddings {
  std::string slide_id;
  Matrix z;  // num_classes x d_hidden
};
BagEmbeddings extract_bag_embeddings(const BranchParams& params, const FeatureBag& bag);

struct EvalResult {
  double loss = 0, acc = 0;
  Matrix probs;  // M x num_classes
  std::vector<int> labels;
  std::vector<int> preds;
};
EvalResult evaluate_branch(const BranchParams& params, std::span<const LabeledBag> data,
                           const LossConfig& cfg);

void save_params(const BranchParams& params, const std::filesystem::path& path);
BranchParams load_params(const std::filesystem::path& path);

/// .opt companion bundle: Adam moments, current (last) params, and loop
/// counters, enough to resume bit-exactly alongside the best-params .ckpt.
void save_train_state(const TrainState& state, const std::filesystem::path& ckpt_path,
                      const std::filesystem::path& opt_path);
TrainState load_train_state(const std::filesystem::path& ckpt_path,
                            const std::filesystem::path& opt_path);

void write_history(std::span<const EpochStats> history, const std::filesystem::path& path);

}  // namespace milfuse
