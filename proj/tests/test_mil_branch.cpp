#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "milfuse/errors.hpp"
#include "milfuse/gradcheck_suite.hpp"
#include "milfuse/mil_branch.hpp"
#include "milfuse/rng.hpp"

using namespace milfuse;
namespace fs = std::filesystem;

namespace {

const BranchDims kSmall{12, 8, 6, 4};

FeatureBag random_bag(Rng& rng, std::size_t k, std::size_t d, const std::string& sid = "bag") {
  FeatureBag bag;
  bag.slide_id = sid;
  bag.features = Matrix(k, d);
  for (std::size_t i = 0; i < bag.features.size(); ++i)
    bag.features.data()[i] = rng.normal();
  return bag;
}

BranchParams random_params(std::uint64_t seed, const BranchDims& dims = kSmall) {
  Rng rng(seed);
  return init_params(dims, rng);
}

double glorot_limit(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace

TEST_CASE("init_params draws within glorot bounds, biases zero, deterministic") {
  const BranchParams a = random_params(3);
  const BranchParams b = random_params(3);
  const BranchParams c = random_params(4);

  CHECK(a.w_fc.rows() == kSmall.d_hidden);
  CHECK(a.w_fc.cols() == kSmall.d_in);
  CHECK(a.v.rows() == kSmall.d_attn);
  CHECK(a.v.cols() == kSmall.d_hidden);
  CHECK(a.w_attn.rows() == kSmall.num_classes);
  CHECK(a.w_attn.cols() == kSmall.d_attn);
  CHECK(a.w_cls.rows() == kSmall.num_classes);
  CHECK(a.w_cls.cols() == kSmall.d_hidden);
  REQUIRE(a.w_inst.size() == kSmall.num_classes);
  REQUIRE(a.b_inst.size() == kSmall.num_classes);

  CHECK(max_abs(a.w_fc) <= glorot_limit(kSmall.d_in, kSmall.d_hidden));
  CHECK(max_abs(a.v) <= glorot_limit(kSmall.d_hidden, kSmall.d_attn));
  CHECK(max_abs(a.w_attn) <= glorot_limit(kSmall.d_attn, 1));
  CHECK(max_abs(a.w_inst[0]) <= glorot_limit(kSmall.d_hidden, 2));
  for (const Matrix& bias : a.b_inst) CHECK(max_abs(bias) == 0.0);

  CHECK(a.w_fc == b.w_fc);
  CHECK(a.w_attn == b.w_attn);
  CHECK(a.w_inst[2] == b.w_inst[2]);
  CHECK(a.w_fc != c.w_fc);

  BranchDims bad = kSmall;
  bad.d_hidden = 0;
  Rng rng(1);
  CHECK_THROWS_AS(init_params(bad, rng), ValidationError);
}

TEST_CASE("visit_tensors order is stable and covers every tensor") {
  BranchParams p = random_params(5);
  std::vector<std::string> names;
  visit_tensors(p, [&](const std::string& name, Matrix&) { names.push_back(name); });
  const std::vector<std::string> expected = {
      "W_fc", "V", "U", "W_atten", "W_c", "W_inst.0", "W_inst.1", "W_inst.2", "W_inst.3",
      "W_inst.0.bias", "W_inst.1.bias", "W_inst.2.bias", "W_inst.3.bias"};
  CHECK(names == expected);
}

TEST_CASE("forward: attention rows are distributions for K in {1,2,17,256}") {
  const BranchParams p = random_params(11);
  Rng rng(12);
  for (std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{17}, std::size_t{256}}) {
    const FeatureBag bag = random_bag(rng, k, kSmall.d_in);
    const ForwardTrace tr = forward(p, bag);
    REQUIRE(tr.attn.rows() == kSmall.num_classes);
    REQUIRE(tr.attn.cols() == k);
    for (std::size_t n = 0; n < tr.attn.rows(); ++n) {
      double sum = 0;
      for (std::size_t j = 0; j < k; ++j) {
        CHECK(tr.attn(n, j) > 0.0);
        sum += tr.attn(n, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    double psum = 0;
    for (double v : tr.probs) psum += v;
    CHECK(psum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("forward: single-instance bag gets all the attention") {
  const BranchParams p = random_params(21);
  Rng rng(22);
  const FeatureBag bag = random_bag(rng, 1, kSmall.d_in);
  const ForwardTrace tr = forward(p, bag);
  for (std::size_t n = 0; n < tr.attn.rows(); ++n) CHECK(tr.attn(n, 0) == 1.0);
  for (std::size_t n = 0; n < tr.z.rows(); ++n)
    for (std::size_t j = 0; j < tr.z.cols(); ++j)
      CHECK(tr.z(n, j) == doctest::Approx(tr.h(0, j)).epsilon(1e-12));
}

TEST_CASE("forward: identical instances share attention uniformly") {
  const BranchParams p = random_params(31);
  Rng rng(32);
  FeatureBag bag = random_bag(rng, 9, kSmall.d_in);
  for (std::size_t i = 1; i < 9; ++i)
    for (std::size_t j = 0; j < kSmall.d_in; ++j) bag.features(i, j) = bag.features(0, j);
  const ForwardTrace tr = forward(p, bag);
  for (std::size_t n = 0; n < tr.attn.rows(); ++n)
    for (std::size_t j = 0; j < 9; ++j)
      CHECK(tr.attn(n, j) == doctest::Approx(1.0 / 9).epsilon(1e-12));
}

TEST_CASE("forward: outputs are invariant to instance permutation") {
  const BranchParams p = random_params(41);
  Rng rng(42);
  const FeatureBag bag = random_bag(rng, 13, kSmall.d_in);

  std::vector<std::size_t> perm(13);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  FeatureBag shuffled = bag;
  for (std::size_t i = 0; i < 13; ++i)
    for (std::size_t j = 0; j < kSmall.d_in; ++j)
      shuffled.features(i, j) = bag.features(perm[i], j);

  const ForwardTrace a = forward(p, bag);
  const ForwardTrace b = forward(p, shuffled);
  for (std::size_t n = 0; n < kSmall.num_classes; ++n) {
    CHECK(a.scores[n] == doctest::Approx(b.scores[n]).epsilon(1e-9));
    CHECK(a.probs[n] == doctest::Approx(b.probs[n]).epsilon(1e-9));
    for (std::size_t j = 0; j < kSmall.d_hidden; ++j)
      CHECK(a.z(n, j) == doctest::Approx(b.z(n, j)).epsilon(1e-9));
    for (std::size_t i = 0; i < 13; ++i)
      CHECK(a.attn(n, perm[i]) == doctest::Approx(b.attn(n, i)).epsilon(1e-9));
  }
}

TEST_CASE("forward rejects bad bags") {
  const BranchParams p = random_params(51);
  Rng rng(52);
  CHECK_THROWS_AS(forward(p, random_bag(rng, 3, kSmall.d_in + 1)), ShapeError);
  FeatureBag empty;
  empty.features = Matrix(0, kSmall.d_in);
  CHECK_THROWS_AS(forward(p, empty), ContractError);
}

TEST_CASE("slide loss known values") {
  const std::vector<double> uniform = {0.25, 0.25, 0.25, 0.25};
  CHECK(slide_loss(uniform, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const std::vector<double> sure = {1.0, 0.0, 0.0, 0.0};
  CHECK(slide_loss(sure, 0) == 0.0);
  const std::vector<double> half = {0.5, 0.5, 0.0, 0.0};
  CHECK(slide_loss(half, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(slide_loss(sure, 1) == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  CHECK_THROWS_AS(slide_loss(uniform, 4), ContractError);
  CHECK_THROWS_AS(slide_loss(uniform, -1), ContractError);
}

TEST_CASE("smooth top-1 SVM loss known values") {
  // Equal zero logits, true label 0: ln(e^0 + e^1) = ln(1 + e).
  CHECK(smooth_svm_loss(0, 0, 0, 1.0) ==
        doctest::Approx(1.3132616875182228).epsilon(1e-12));
  CHECK(smooth_svm_loss(0, 0, 1, 1.0) ==
        doctest::Approx(1.3132616875182228).epsilon(1e-12));
  // Saturated correct prediction: loss vanishes.
  CHECK(smooth_svm_loss(20, -20, 0, 1.0) <= 1e-12);
  // Saturated wrong prediction: approaches the hinge value 1 + (s0 - s1).
  CHECK(smooth_svm_loss(20, -20, 1, 1.0) == doctest::Approx(41.0).epsilon(1e-12));
  // Temperature scaling: tau * ln(1 + e^{1/tau}).
  for (double tau : {0.5, 2.0, 3.0}) {
    CHECK(smooth_svm_loss(0, 0, 0, tau) ==
          doctest::Approx(tau * std::log(1.0 + std::exp(1.0 / tau))).epsilon(1e-12));
  }
  CHECK_THROWS_AS(smooth_svm_loss(0, 0, 0, 0.0), ContractError);
  CHECK_THROWS_AS(smooth_svm_loss(0, 0, 0, -1.0), ContractError);
}

TEST_CASE("select_instances picks top and bottom attention, ties to lower index") {
  Matrix attn(2, 6);
  const double row1[6] = {0.05, 0.30, 0.05, 0.25, 0.30, 0.05};
  for (std::size_t j = 0; j < 6; ++j) {
    attn(0, j) = 1.0 / 6;
    attn(1, j) = row1[j];
  }
  const InstanceSelection sel = select_instances(attn, 1, 2);
  CHECK(sel.pos == std::vector<std::size_t>{1, 4});
  CHECK(sel.neg == std::vector<std::size_t>{0, 2});

  // k_eff caps at ceil(K/2).
  const InstanceSelection capped = select_instances(attn, 1, 8);
  CHECK(capped.pos.size() == 3);
  CHECK(capped.neg.size() == 3);
  CHECK(capped.pos == std::vector<std::size_t>{1, 4, 3});
  CHECK(capped.neg == std::vector<std::size_t>{0, 2, 5});

  Matrix single(1, 1, 1.0);
  const InstanceSelection one = select_instances(single, 0, 3);
  CHECK(one.pos == std::vector<std::size_t>{0});
  CHECK(one.neg == std::vector<std::size_t>{0});

  CHECK_THROWS_AS(select_instances(attn, 2, 2), ContractError);
  CHECK_THROWS_AS(select_instances(attn, 0, 0), ContractError);
}

TEST_CASE("instance loss reduces by mean, or sum when configured") {
  const BranchParams zero = [] {
    BranchParams p = random_params(61);
    visit_tensors(p, [](const std::string&, Matrix& t) {
      for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.0;
    });
    return p;
  }();
  Rng rng(62);
  const FeatureBag bag = random_bag(rng, 10, kSmall.d_in);
  const ForwardTrace tr = forward(zero, bag);

  // All instance logits are (0, 0), so every term is ln(1 + e).
  LossConfig cfg;
  cfg.k_sample = 3;
  const InstanceSelection sel = select_instances(tr.attn, 1, cfg.k_sample);
  const double term = 1.3132616875182228;
  CHECK(instance_loss(tr, zero, 1, sel, cfg) == doctest::Approx(term).epsilon(1e-12));

  LossConfig sum_cfg = cfg;
  sum_cfg.patch_sum = true;
  CHECK(instance_loss(tr, zero, 1, sel, sum_cfg) == doctest::Approx(6 * term).epsilon(1e-12));

  // The (trace, params, label, k_sample, tau) signature selects internally.
  CHECK(instance_loss(tr, zero, 1, std::size_t{3}, 1.0) ==
        doctest::Approx(term).epsilon(1e-12));

  CHECK_THROWS_AS(instance_loss(tr, zero, 1, InstanceSelection{}, cfg), ContractError);
}

TEST_CASE("total loss decomposes as c1*slide + c2*patch") {
  const BranchParams p = random_params(71);
  Rng rng(72);
  const FeatureBag bag = random_bag(rng, 14, kSmall.d_in);
  const ForwardTrace tr = forward(p, bag);
  LossConfig cfg;
  cfg.c1 = 0.7;
  cfg.c2 = 0.3;
  cfg.k_sample = 4;
  const LossReport rep = total_loss(tr, p, 2, cfg);
  CHECK(rep.total ==
        doctest::Approx(cfg.c1 * rep.slide + cfg.c2 * rep.patch).epsilon(1e-12));
  CHECK(rep.slide == doctest::Approx(slide_loss(tr.probs, 2)).epsilon(1e-12));

  LossConfig slide_only = cfg;
  slide_only.c2 = 0;
  const LossReport rep2 = total_loss(tr, p, 2, slide_only);
  CHECK(rep2.total == doctest::Approx(cfg.c1 * rep2.slide).epsilon(1e-12));
}

TEST_CASE("analytic gradients agree with finite differences") {
  GradCheckConfig cfg;
  cfg.num_configs = 12;
  cfg.seed = 5;
  const GradCheckReport rep = run_gradcheck(cfg);
  INFO("max rel err ", rep.max_rel_err, " worst tensor ", rep.worst_tensor, " config ",
       rep.worst_config);
  CHECK(rep.passed(cfg.tolerance));
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("c2=0 leaves instance-head gradients exactly zero") {
  const BranchParams p = random_params(81);
  Rng rng(82);
  const FeatureBag bag = random_bag(rng, 9, kSmall.d_in);
  const ForwardTrace tr = forward(p, bag);
  LossConfig cfg;
  cfg.c2 = 0;
  const BranchGrads g = backward(p, tr, bag, 1, cfg);
  for (const Matrix& gw : g.w_inst) CHECK(max_abs(gw) == 0.0);
  for (const Matrix& gb : g.b_inst) CHECK(max_abs(gb) == 0.0);
  CHECK(max_abs(g.w_fc) > 0.0);
  CHECK(max_abs(g.w_cls) > 0.0);
}

TEST_CASE("duplicating every instance preserves shared-tensor gradients") {
  const BranchParams p = random_params(91);
  Rng rng(92);
  const FeatureBag bag = random_bag(rng, 7, kSmall.d_in);
  FeatureBag doubled;
  doubled.slide_id = bag.slide_id;
  doubled.features = Matrix(14, kSmall.d_in);
  for (std::size_t i = 0; i < 14; ++i)
    for (std::size_t j = 0; j < kSmall.d_in; ++j)
      doubled.features(i, j) = bag.features(i % 7, j);

  LossConfig cfg;
  cfg.c2 = 0;  // isolate the shared path; selection sets differ by construction
  const ForwardTrace ta = forward(p, bag);
  const ForwardTrace tb = forward(p, doubled);
  for (std::size_t n = 0; n < kSmall.num_classes; ++n)
    for (std::size_t j = 0; j < kSmall.d_hidden; ++j)
      CHECK(ta.z(n, j) == doctest::Approx(tb.z(n, j)).epsilon(1e-9));

  const BranchGrads ga = backward(p, ta, bag, 3, cfg);
  const BranchGrads gb = backward(p, tb, doubled, 3, cfg);
  CHECK(max_abs_diff(ga.w_cls, gb.w_cls) <= 1e-9);
  CHECK(max_abs_diff(ga.w_fc, gb.w_fc) <= 1e-9);
  CHECK(max_abs_diff(ga.v, gb.v) <= 1e-9);
  CHECK(max_abs_diff(ga.u, gb.u) <= 1e-9);
  CHECK(max_abs_diff(ga.w_attn, gb.w_attn) <= 1e-9);
}

TEST_CASE("backward rejects a stale trace") {
  const BranchParams p = random_params(101);
  Rng rng(102);
  const FeatureBag a = random_bag(rng, 5, kSmall.d_in);
  const FeatureBag b = random_bag(rng, 6, kSmall.d_in);
  const ForwardTrace tr = forward(p, a);
  CHECK_THROWS_AS(backward(p, tr, b, 0, LossConfig{}), ContractError);
  CHECK_THROWS_AS(backward(p, tr, a, 7, LossConfig{}), ContractError);
}

TEST_CASE("adam: zero gradients with zero weight decay change nothing") {
  BranchParams p = random_params(111);
  const BranchParams before = p;
  AdamState st = init_adam(kSmall);
  AdamConfig cfg;
  cfg.weight_decay = 0;
  const BranchGrads g = zero_grads(kSmall);
  adam_step(p, g, st, cfg);
  CHECK(st.t == 1);
  CHECK(p.w_fc == before.w_fc);
  CHECK(p.w_attn == before.w_attn);
  CHECK(p.w_inst[0] == before.w_inst[0]);
  CHECK(p.b_inst[3] == before.b_inst[3]);
}

TEST_CASE("adam: first step moves by about lr in the gradient direction") {
  BranchParams p = random_params(121);
  const double w0 = p.w_fc(2, 3);
  AdamState st = init_adam(kSmall);
  AdamConfig cfg;
  cfg.weight_decay = 0;
  BranchGrads g = zero_grads(kSmall);
  g.w_fc(2, 3) = 0.37;
  adam_step(p, g, st, cfg);
  // Bias-corrected m-hat = g, v-hat = g^2, so the step is lr * g / (|g| + eps).
  CHECK(p.w_fc(2, 3) == doctest::Approx(w0 - cfg.lr).epsilon(1e-6));
}

TEST_CASE("adam: weight decay shrinks parameters with zero gradients") {
  BranchParams p = random_params(131);
  p.w_fc(0, 0) = 0.5;
  AdamState st = init_adam(kSmall);
  AdamConfig cfg;
  cfg.weight_decay = 1e-2;
  const BranchGrads g = zero_grads(kSmall);
  adam_step(p, g, st, cfg);
  CHECK(p.w_fc(0, 0) < 0.5);
  CHECK(p.w_fc(0, 0) > 0.5 - 2 * cfg.lr);
}

TEST_CASE("adam: identical runs are bit-identical") {
  auto run = [] {
    BranchParams p = random_params(141);
    AdamState st = init_adam(kSmall);
    AdamConfig cfg;
    Rng rng(142);
    for (int step = 0; step < 10; ++step) {
      const FeatureBag bag = random_bag(rng, 6, kSmall.d_in);
      const ForwardTrace tr = forward(p, bag);
      const BranchGrads g = backward(p, tr, bag, step % 4, LossConfig{});
      adam_step(p, g, st, cfg);
    }
    return p;
  };
  const BranchParams a = run();
  const BranchParams b = run();
  CHECK(a.w_fc == b.w_fc);
  CHECK(a.v == b.v);
  CHECK(a.u == b.u);
  CHECK(a.w_attn == b.w_attn);
  CHECK(a.w_cls == b.w_cls);
  for (std::size_t n = 0; n < kSmall.num_classes; ++n) {
    CHECK(a.w_inst[n] == b.w_inst[n]);
    CHECK(a.b_inst[n] == b.b_inst[n]);
  }
}

TEST_CASE("adam rejects non-finite gradients, naming the tensor") {
  BranchParams p = random_params(151);
  AdamState st = init_adam(kSmall);
  BranchGrads g = zero_grads(kSmall);
  g.v(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(adam_step(p, g, st, AdamConfig{}), doctest::Contains("V"),
                       NumericError);
}

TEST_CASE("evaluate_branch with zero params is uniform") {
  BranchParams p = random_params(161);
  visit_tensors(p, [](const std::string&, Matrix& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.0;
  });
  Rng rng(162);
  std::vector<FeatureBag> bags;
  for (int i = 0; i < 4; ++i) bags.push_back(random_bag(rng, 8, kSmall.d_in));
  std::vector<LabeledBag> data;
  for (int i = 0; i < 4; ++i) data.push_back({&bags[static_cast<std::size_t>(i)], i});

  LossConfig cfg;
  const EvalResult res = evaluate_branch(p, data, cfg);
  CHECK(res.acc == 0.25);  // every argmax resolves to class 0
  CHECK(res.preds == std::vector<int>{0, 0, 0, 0});
  CHECK(res.labels == std::vector<int>{0, 1, 2, 3});
  const double expect = cfg.c1 * std::log(4.0) + cfg.c2 * 1.3132616875182228;
  CHECK(res.loss == doctest::Approx(expect).epsilon(1e-12));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t n = 0; n < 4; ++n)
      CHECK(res.probs(i, n) == doctest::Approx(0.25).epsilon(1e-12));

  CHECK_THROWS_AS(evaluate_branch(p, std::span<const LabeledBag>{}, cfg), ContractError);
}

TEST_CASE("checkpoint round-trip preserves every tensor exactly") {
  const fs::path dir = fs::temp_directory_path() / "milfuse_branch_tests";
  fs::create_directories(dir);
  const BranchParams p = random_params(171);
  const fs::path path = dir / "branch.ckpt";
  save_params(p, path);
  const BranchParams back = load_params(path);
  CHECK(back.dims.d_in == kSmall.d_in);
  CHECK(back.dims.d_hidden == kSmall.d_hidden);
  CHECK(back.dims.d_attn == kSmall.d_attn);
  CHECK(back.dims.num_classes == kSmall.num_classes);
  CHECK(back.w_fc == p.w_fc);
  CHECK(back.v == p.v);
  CHECK(back.u == p.u);
  CHECK(back.w_attn == p.w_attn);
  CHECK(back.w_cls == p.w_cls);
  for (std::size_t n = 0; n < kSmall.num_classes; ++n) {
    CHECK(back.w_inst[n] == p.w_inst[n]);
    CHECK(back.b_inst[n] == p.b_inst[n]);
  }

  // Write → read → write is byte-identical.
  const fs::path path2 = dir / "branch2.ckpt";
  save_params(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::ostringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
}

TEST_CASE("train-state round-trip resumes counters and moments exactly") {
  const fs::path dir = fs::temp_directory_path() / "milfuse_branch_tests";
  fs::create_directories(dir);

  TrainConfig cfg;
  cfg.seed = 9;
  TrainState st = init_train_state(kSmall, cfg);
  CHECK(std::isinf(st.best_val_loss));

  // Fresh state: infinity must survive the round trip.
  save_train_state(st, dir / "fresh.ckpt", dir / "fresh.opt");
  const TrainState fresh = load_train_state(dir / "fresh.ckpt", dir / "fresh.opt");
  CHECK(std::isinf(fresh.best_val_loss));
  CHECK(fresh.epoch == 0);

  Rng rng(10);
  const FeatureBag bag = random_bag(rng, 6, kSmall.d_in);
  for (int step = 0; step < 3; ++step) {
    const ForwardTrace tr = forward(st.params, bag);
    const BranchGrads g = backward(st.params, tr, bag, 1, cfg.loss);
    adam_step(st.params, g, st.adam, cfg.adam);
  }
  st.epoch = 17;
  st.best_epoch = 9;
  st.best_val_loss = 0.4375;
  st.streak = 8;
  st.best_params = random_params(172);

  save_train_state(st, dir / "state.ckpt", dir / "state.opt");
  const TrainState back = load_train_state(dir / "state.ckpt", dir / "state.opt");
  CHECK(back.epoch == 17);
  CHECK(back.best_epoch == 9);
  CHECK(back.best_val_loss == 0.4375);
  CHECK(back.streak == 8);
  CHECK(back.adam.t == st.adam.t);
  CHECK(back.params.w_fc == st.params.w_fc);
  CHECK(back.best_params.w_fc == st.best_params.w_fc);
  for (std::size_t i = 0; i < back.adam.m.size(); ++i) {
    CHECK(back.adam.m[i] == st.adam.m[i]);
    CHECK(back.adam.v[i] == st.adam.v[i]);
  }
}

TEST_CASE("load_params rejects corrupt checkpoints") {
  const fs::path dir = fs::temp_directory_path() / "milfuse_branch_tests";
  fs::create_directories(dir);
  const fs::path path = dir / "trunc.ckpt";
  save_params(random_params(181), path);
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    bytes = std::move(ss).str();
  }
  bytes.resize(bytes.size() / 2);
  {
    std::ofstream out(dir / "cut.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_params(dir / "cut.ckpt"), FormatError);
  CHECK_THROWS_AS(load_params(dir / "does_not_exist.ckpt"), FormatError);
}
