#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "milfuse/errors.hpp"
#include "milfuse/fusion.hpp"
#include "milfuse/pipeline.hpp"

using namespace milfuse;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("milfuse_pipe_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

struct SmallWorld {
  fs::path data_dir;
  Manifest manifest;
  std::vector<PairedSample> samples;
};

SmallWorld small_world(const std::string& name, std::uint64_t seed) {
  SmallWorld w;
  w.data_dir = fresh_dir("data_" + name);
  SynthConfig synth;
  synth.samples_per_class = 10;
  synth.dim = 64;
  synth.bag_min = 4;
  synth.bag_max = 8;
  w.manifest = generate_synthetic_dataset(synth, seed, w.data_dir);
  w.samples = load_manifest(w.manifest, w.data_dir, w.manifest.num_classes);
  return w;
}

TwoStageConfig small_config() {
  TwoStageConfig cfg;
  cfg.dims = BranchDims{64, 32, 16, 4};
  cfg.pooled_dim = 8;
  cfg.train.min_epochs = 3;
  cfg.train.max_epochs = 5;
  cfg.train.patience = 100;
  cfg.seed = 11;
  cfg.folds = 2;
  cfg.fractions = {0.6, 0.2, 0.2};
  return cfg;
}

bool reports_equal(const MetricsReport& a, const MetricsReport& b) {
  if (a.acc != b.acc || a.auc_macro != b.auc_macro) return false;
  if (a.per_class_auc.size() != b.per_class_auc.size()) return false;
  for (std::size_t i = 0; i < a.per_class_auc.size(); ++i) {
    const bool na = std::isnan(a.per_class_auc[i]), nb = std::isnan(b.per_class_auc[i]);
    if (na != nb) return false;
    if (!na && a.per_class_auc[i] != b.per_class_auc[i]) return false;
  }
  return a.confusion == b.confusion;
}

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("stage2 dims square the pooled dim and keep the head geometry") {
  TwoStageConfig cfg = small_config();
  const BranchDims d2 = stage2_dims(cfg);
  CHECK(d2.d_in == 64);
  CHECK(d2.d_hidden == cfg.dims.d_hidden);
  CHECK(d2.d_attn == cfg.dims.d_attn);
  CHECK(d2.num_classes == cfg.dims.num_classes);

  cfg.pooled_dim = 7;
  CHECK_THROWS_AS(stage2_dims(cfg), ValidationError);
}

TEST_CASE("one fold writes the complete documented layout") {
  SmallWorld w = small_world("layout", 3);
  TwoStageConfig cfg = small_config();
  const SplitSpec split = stratified_split(w.manifest, cfg.fractions, 19);
  const fs::path fold = fresh_dir("layout_fold");

  const FoldReport rep = run_two_stage(w.samples, split, cfg, fold, 4);

  CHECK(rep.fold_id == 4);
  for (const MetricsReport* r : {&rep.he, &rep.ihc, &rep.fused}) {
    CHECK(r->acc >= 0.0);
    CHECK(r->acc <= 1.0);
    CHECK(r->auc_macro >= 0.0);
    CHECK(r->auc_macro <= 1.0);
    CHECK(r->per_class_auc.size() == 4);
    CHECK(r->confusion.rows() == 4);
    CHECK(r->confusion.cols() == 4);
    double total = 0;
    for (std::size_t i = 0; i < r->confusion.size(); ++i) total += r->confusion.data()[i];
    CHECK(total == static_cast<double>(split.test_ids.size()));
  }

  for (const char* stage : {"he", "ihc", "fused"}) {
    CHECK(fs::exists(fold / (std::string(stage) + ".ckpt")));
    CHECK(fs::exists(fold / (std::string(stage) + ".opt")));
    const std::string hist = slurp(fold / (std::string(stage) + ".history.tsv"));
    CHECK(hist.rfind("epoch\ttrain_loss\tval_loss\tval_acc\n", 0) == 0);
    CHECK(count_lines(hist) >= 2);
  }
  CHECK(fs::exists(fold / "split.txt"));
  const SplitSpec reread = read_split(fold / "split.txt");
  CHECK(reread.train_ids == split.train_ids);
  CHECK(reread.val_ids == split.val_ids);
  CHECK(reread.test_ids == split.test_ids);

  const std::string metrics = slurp(fold / "metrics.tsv");
  CHECK(metrics.rfind("route\tacc\tauc_macro", 0) == 0);
  CHECK(count_lines(metrics) == 4);

  const Manifest fused_manifest = read_manifest(fold / "fused" / "manifest.tsv");
  CHECK(fused_manifest.entries.size() == w.samples.size());
  for (const ManifestEntry& e : fused_manifest.entries) {
    const FeatureBag bag = read_bag(fold / "fused" / e.he_path, Modality::Fused);
    CHECK(bag.features.rows() == 4);
    CHECK(bag.features.cols() == 64);
  }

  for (const std::string& sid : split.test_ids) {
    const fs::path att = fold / ("attention_" + sid + ".tsv");
    REQUIRE(fs::exists(att));
    std::istringstream in(slurp(att));
    std::string header;
    std::getline(in, header);
    CHECK(header == "modality\tinstance\tattention");
    double he_sum = 0, ihc_sum = 0;
    std::size_t he_rows = 0, ihc_rows = 0;
    std::string modality;
    std::size_t instance;
    double attn;
    while (in >> modality >> instance >> attn) {
      CHECK(attn > 0.0);
      if (modality == "he") {
        he_sum += attn;
        ++he_rows;
      } else {
        CHECK(modality == "ihc");
        ihc_sum += attn;
        ++ihc_rows;
      }
    }
    CHECK(he_rows >= 4);
    CHECK(ihc_rows >= 4);
    CHECK(he_sum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(ihc_sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("a fold is deterministic down to the bytes on disk") {
  SmallWorld w = small_world("det", 5);
  TwoStageConfig cfg = small_config();
  const SplitSpec split = stratified_split(w.manifest, cfg.fractions, 23);
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");

  const FoldReport ra = run_two_stage(w.samples, split, cfg, a, 0);
  const FoldReport rb = run_two_stage(w.samples, split, cfg, b, 0);

  CHECK(reports_equal(ra.he, rb.he));
  CHECK(reports_equal(ra.ihc, rb.ihc));
  CHECK(reports_equal(ra.fused, rb.fused));
  for (const char* name :
       {"metrics.tsv", "he.ckpt", "he.opt", "ihc.ckpt", "fused.ckpt", "he.history.tsv",
        "fused.history.tsv", "split.txt"})
    CHECK(slurp(a / name) == slurp(b / name));
  for (const std::string& sid : split.test_ids)
    CHECK(slurp(a / ("attention_" + sid + ".tsv")) ==
          slurp(b / ("attention_" + sid + ".tsv")));
}

TEST_CASE("cross-validation writes per-fold dirs and an honest summary") {
  SmallWorld w = small_world("cv", 7);
  TwoStageConfig cfg = small_config();
  const fs::path out = fresh_dir("cv_out");

  const CvResult cv = monte_carlo_cv(w.manifest, w.samples, cfg, out);

  REQUIRE(cv.folds.size() == 2);
  CHECK(cv.folds[0].fold_id == 0);
  CHECK(cv.folds[1].fold_id == 1);
  CHECK(fs::exists(out / "fold_0" / "metrics.tsv"));
  CHECK(fs::exists(out / "fold_1" / "metrics.tsv"));
  CHECK(slurp(out / "fold_0" / "split.txt") != slurp(out / "fold_1" / "split.txt"));

  REQUIRE(cv.summary.count("he") == 1);
  REQUIRE(cv.summary.count("ihc") == 1);
  REQUIRE(cv.summary.count("fused") == 1);
  auto check_route = [&](const char* route, auto pick) {
    std::vector<double> accs, aucs;
    for (const FoldReport& f : cv.folds) {
      accs.push_back(pick(f).acc);
      aucs.push_back(pick(f).auc_macro);
    }
    const RouteSummary& s = cv.summary.at(route);
    CHECK(s.acc_mean == doctest::Approx(mean(accs)).epsilon(1e-15));
    CHECK(s.acc_std == doctest::Approx(sample_std(accs)).epsilon(1e-15));
    CHECK(s.auc_mean == doctest::Approx(mean(aucs)).epsilon(1e-15));
    CHECK(s.auc_std == doctest::Approx(sample_std(aucs)).epsilon(1e-15));
  };
  check_route("he", [](const FoldReport& f) -> const MetricsReport& { return f.he; });
  check_route("ihc", [](const FoldReport& f) -> const MetricsReport& { return f.ihc; });
  check_route("fused", [](const FoldReport& f) -> const MetricsReport& { return f.fused; });

  const std::string summary = slurp(out / "summary.tsv");
  CHECK(summary.rfind("route\tacc_mean\tacc_std\tauc_mean\tauc_std\n", 0) == 0);
  CHECK(count_lines(summary) == 4);

  SUBCASE("a single fold reports zero spread") {
    TwoStageConfig one = cfg;
    one.folds = 1;
    const fs::path out1 = fresh_dir("cv_one");
    const CvResult cv1 = monte_carlo_cv(w.manifest, w.samples, one, out1);
    REQUIRE(cv1.folds.size() == 1);
    CHECK(cv1.summary.at("fused").acc_std == 0.0);
    CHECK(cv1.summary.at("fused").acc_mean == cv1.folds[0].fused.acc);
  }
}

TEST_CASE("parallel folds reproduce the sequential run byte for byte") {
  SmallWorld w = small_world("jobs", 9);
  TwoStageConfig cfg = small_config();
  const fs::path seq = fresh_dir("jobs_seq"), par = fresh_dir("jobs_par");

  cfg.jobs = 1;
  monte_carlo_cv(w.manifest, w.samples, cfg, seq);
  cfg.jobs = 2;
  monte_carlo_cv(w.manifest, w.samples, cfg, par);

  CHECK(slurp(seq / "summary.tsv") == slurp(par / "summary.tsv"));
  for (const char* fold : {"fold_0", "fold_1"})
    for (const char* name : {"metrics.tsv", "split.txt", "he.ckpt", "ihc.ckpt", "fused.ckpt"})
      CHECK(slurp(seq / fold / name) == slurp(par / fold / name));
}

TEST_CASE("l2 normalization yields unit fused rows on disk") {
  SmallWorld w = small_world("l2", 13);
  TwoStageConfig cfg = small_config();
  cfg.l2_normalize = true;
  const SplitSpec split = stratified_split(w.manifest, cfg.fractions, 29);
  const fs::path fold = fresh_dir("l2_fold");

  run_two_stage(w.samples, split, cfg, fold, 0);

  const Manifest fused_manifest = read_manifest(fold / "fused" / "manifest.tsv");
  REQUIRE(!fused_manifest.entries.empty());
  for (const ManifestEntry& e : fused_manifest.entries) {
    const FeatureBag bag = read_bag(fold / "fused" / e.he_path, Modality::Fused);
    for (std::size_t n = 0; n < bag.features.rows(); ++n) {
      double sq = 0;
      for (std::size_t j = 0; j < bag.features.cols(); ++j)
        sq += bag.features(n, j) * bag.features(n, j);
      CHECK(std::sqrt(sq) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}
