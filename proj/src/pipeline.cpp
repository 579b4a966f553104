#include "milfuse/pipeline.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <thread>

#include "milfuse/errors.hpp"
#include "milfuse/fusion.hpp"
#include "milfuse/log.hpp"

namespace milfuse {

namespace fs = std::filesystem;

BranchDims stage2_dims(const TwoStageConfig& cfg) {
  PoolingSpec{cfg.dims.d_hidden, cfg.pooled_dim}.window();
  BranchDims d = cfg.dims;
  d.d_in = cfg.pooled_dim * cfg.pooled_dim;
  return d;
}

namespace {

struct SplitSets {
  std::vector<const PairedSample*> train, val, test;
};

SplitSets resolve_split(const std::vector<PairedSample>& samples, const SplitSpec& split) {
  std::map<std::string, const PairedSample*> by_id;
  for (const auto& s : samples) by_id[s.slide_id] = &s;
  auto gather = [&](const std::vector<std::string>& ids) {
    std::vector<const PairedSample*> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) {
        log::warn("split references slide '%s' not in the loaded dataset, skipping",
                  id.c_str());
        continue;
      }
      out.push_back(it->second);
    }
    return out;
  };
  SplitSets sets;
  sets.train = gather(split.train_ids);
  sets.val = gather(split.val_ids);
  sets.test = gather(split.test_ids);
  if (sets.train.empty() || sets.val.empty() || sets.test.empty())
    throw ValidationError("split resolves to an empty train, val, or test set");
  return sets;
}

std::vector<LabeledBag> modality_bags(const std::vector<const PairedSample*>& set,
                                      Modality modality) {
  std::vector<LabeledBag> out;
  out.reserve(set.size());
  for (const PairedSample* s : set)
    out.push_back({modality == Modality::HE ? &s->he : &s->ihc, s->label});
  return out;
}

MetricsReport report_from_eval(const EvalResult& ev, std::size_t num_classes,
                               std::size_t fold_id) {
  MetricsReport rep;
  rep.fold_id = fold_id;
  rep.acc = accuracy(ev.preds, ev.labels);
  const AucResult auc = auc_macro_ovr(ev.probs, ev.labels);
  rep.auc_macro = auc.macro;
  rep.per_class_auc = auc.per_class;
  rep.confusion = confusion_matrix(ev.preds, ev.labels, num_classes);
  return rep;
}

TrainState train_stage(std::span<const LabeledBag> train, std::span<const LabeledBag> val,
                       const BranchDims& dims, TrainConfig cfg, std::uint64_t fold_seed,
                       const char* stage, const fs::path& fold_dir) {
  cfg.seed = Rng::derive_seed(fold_seed, std::string("train.") + stage);
  log::info("training %s branch (seed %llu)", stage,
            static_cast<unsigned long long>(cfg.seed));
  TrainState st = train_branch(train, val, dims, cfg);
  save_train_state(st, fold_dir / (std::string(stage) + ".ckpt"),
                   fold_dir / (std::string(stage) + ".opt"));
  write_history(st.history, fold_dir / (std::string(stage) + ".history.tsv"));
  if (st.diverged)
    throw NumericError(std::string("stage '") + stage +
                       "' diverged; best checkpoint saved at " +
                       (fold_dir / (std::string(stage) + ".ckpt")).string());
  return st;
}

void write_metrics_tsv(const FoldReport& rep, std::size_t num_classes, const fs::path& path) {
  std::string out = "route\tacc\tauc_macro";
  for (std::size_t c = 0; c < num_classes; ++c)
    out += "\tauc_class" + std::to_string(c);
  out += "\n";
  char buf[64];
  auto row = [&](const char* name, const MetricsReport& r) {
    out += name;
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f", r.acc, r.auc_macro);
    out += buf;
    for (std::size_t c = 0; c < num_classes; ++c) {
      std::snprintf(buf, sizeof buf, "\t%.6f", r.per_class_auc[c]);
      out += buf;
    }
    out += "\n";
  };
  row("he", rep.he);
  row("ihc", rep.ihc);
  row("fused", rep.fused);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

void write_attention_tsv(const PairedSample& s, const BranchParams& he,
                         const BranchParams& ihc, const fs::path& path) {
  std::string out = "modality\tinstance\tattention\n";
  char buf[64];
  auto dump = [&](const char* name, const BranchParams& params, const FeatureBag& bag) {
    const ForwardTrace tr = forward(params, bag);
    const std::size_t pred = argmax_row(tr.probs);
    for (std::size_t k = 0; k < tr.attn.cols(); ++k) {
      std::snprintf(buf, sizeof buf, "%s\t%zu\t%.9f\n", name, k, tr.attn(pred, k));
      out += buf;
    }
  };
  dump("he", he, s.he);
  dump("ihc", ihc, s.ihc);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace

FoldReport run_two_stage(const std::vector<PairedSample>& samples, const SplitSpec& split,
                         const TwoStageConfig& cfg, const fs::path& fold_dir,
                         std::size_t fold_id) {
  if (cfg.dims.d_hidden % cfg.pooled_dim != 0)
    throw ValidationError("d_hidden must be divisible by pooled_dim");
  fs::create_directories(fold_dir);
  write_split(split, fold_dir / "split.txt");
  const std::uint64_t fold_seed = cfg.seed + fold_id;

  const SplitSets sets = resolve_split(samples, split);
  const auto he_train = modality_bags(sets.train, Modality::HE);
  const auto he_val = modality_bags(sets.val, Modality::HE);
  const auto ihc_train = modality_bags(sets.train, Modality::IHC);
  const auto ihc_val = modality_bags(sets.val, Modality::IHC);

  const TrainState he_st =
      train_stage(he_train, he_val, cfg.dims, cfg.train, fold_seed, "he", fold_dir);
  const TrainState ihc_st =
      train_stage(ihc_train, ihc_val, cfg.dims, cfg.train, fold_seed, "ihc", fold_dir);

  // Fused bags for every split member, from the frozen best checkpoints.
  const PoolingSpec pool{cfg.dims.d_hidden, cfg.pooled_dim};
  pool.window();
  const fs::path fused_dir = fold_dir / "fused";
  fs::create_directories(fused_dir);
  std::map<std::string, FeatureBag> fused_bags;
  Manifest fused_manifest;
  fused_manifest.num_classes = static_cast<int>(cfg.dims.num_classes);
  auto fuse_set = [&](const std::vector<const PairedSample*>& set) {
    for (const PairedSample* s : set) {
      const BagEmbeddings zhe = extract_bag_embeddings(he_st.best_params, s->he);
      const BagEmbeddings zihc = extract_bag_embeddings(ihc_st.best_params, s->ihc);
      const FusedBag fb = build_fused_bag(zhe, zihc, s->label, pool, cfg.l2_normalize);
      FeatureBag bag = to_feature_bag(fb);
      write_bag(bag, fused_dir / (s->slide_id + ".milf"));
      ManifestEntry e;
      e.slide_id = s->slide_id;
      e.label = s->label;
      e.he_path = s->slide_id + ".milf";
      e.ihc_path = e.he_path;
      fused_manifest.entries.push_back(std::move(e));
      fused_bags.emplace(s->slide_id, std::move(bag));
    }
  };
  fuse_set(sets.train);
  fuse_set(sets.val);
  fuse_set(sets.test);
  write_manifest(fused_manifest, fused_dir / "manifest.tsv");

  auto fused_set = [&](const std::vector<const PairedSample*>& set) {
    std::vector<LabeledBag> out;
    out.reserve(set.size());
    for (const PairedSample* s : set)
      out.push_back({&fused_bags.at(s->slide_id), s->label});
    return out;
  };
  const auto fused_train = fused_set(sets.train);
  const auto fused_val = fused_set(sets.val);

  TwoStageConfig s2cfg = cfg;
  s2cfg.train.loss.c2 = cfg.fused_c2;
  const TrainState fused_st = train_stage(fused_train, fused_val, stage2_dims(cfg),
                                          s2cfg.train, fold_seed, "fused", fold_dir);

  const auto he_test = modality_bags(sets.test, Modality::HE);
  const auto ihc_test = modality_bags(sets.test, Modality::IHC);
  const auto fused_test = fused_set(sets.test);

  FoldReport rep;
  rep.fold_id = fold_id;
  rep.he = report_from_eval(evaluate_branch(he_st.best_params, he_test, cfg.train.loss),
                            cfg.dims.num_classes, fold_id);
  rep.ihc = report_from_eval(evaluate_branch(ihc_st.best_params, ihc_test, cfg.train.loss),
                             cfg.dims.num_classes, fold_id);
  rep.fused =
      report_from_eval(evaluate_branch(fused_st.best_params, fused_test, s2cfg.train.loss),
                       cfg.dims.num_classes, fold_id);
  write_metrics_tsv(rep, cfg.dims.num_classes, fold_dir / "metrics.tsv");

  for (const PairedSample* s : sets.test)
    write_attention_tsv(*s, he_st.best_params, ihc_st.best_params,
                        fold_dir / ("attention_" + s->slide_id + ".tsv"));

  log::info("fold %zu: acc he %.3f ihc %.3f fused %.3f", fold_id, rep.he.acc, rep.ihc.acc,
            rep.fused.acc);
  return rep;
}

CvResult monte_carlo_cv(const Manifest& manifest, const std::vector<PairedSample>& samples,
                        const TwoStageConfig& cfg, const fs::path& out_dir) {
  if (cfg.folds < 1) throw ValidationError("folds must be >= 1");
  fs::create_directories(out_dir);

  CvResult cv;
  cv.folds.resize(cfg.folds);
  std::vector<std::exception_ptr> errors(cfg.folds);

  auto run_fold = [&](std::size_t i) {
    try {
      const SplitSpec split = stratified_split(manifest, cfg.fractions, cfg.seed + i);
      cv.folds[i] =
          run_two_stage(samples, split, cfg, out_dir / ("fold_" + std::to_string(i)), i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, cfg.folds));
  if (jobs == 1) {
    for (std::size_t i = 0; i < cfg.folds; ++i) run_fold(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w)
      pool.emplace_back([&] {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= cfg.folds) return;
          run_fold(i);
        }
      });
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < cfg.folds; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      log::error("fold %zu failed: %s", i, e.what());
      std::rethrow_exception(errors[i]);
    }
  }

  auto summarize = [&](auto select) {
    std::vector<double> accs, aucs;
    for (const FoldReport& f : cv.folds) {
      accs.push_back(select(f).acc);
      aucs.push_back(select(f).auc_macro);
    }
    RouteSummary s;
    s.acc_mean = mean(accs);
    s.acc_std = sample_std(accs);
    s.auc_mean = mean(aucs);
    s.auc_std = sample_std(aucs);
    return s;
  };
  cv.summary["he"] = summarize([](const FoldReport& f) -> const MetricsReport& { return f.he; });
  cv.summary["ihc"] =
      summarize([](const FoldReport& f) -> const MetricsReport& { return f.ihc; });
  cv.summary["fused"] =
      summarize([](const FoldReport& f) -> const MetricsReport& { return f.fused; });

  write_summary(cv, out_dir / "summary.tsv");
  return cv;
}

void write_summary(const CvResult& cv, const fs::path& path) {
  std::string out = "route\tacc_mean\tacc_std\tauc_mean\tauc_std\n";
  char buf[96];
  for (const char* route : {"he", "ihc", "fused"}) {
    const RouteSummary& s = cv.summary.at(route);
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%.6f\n", route, s.acc_mean,
                  s.acc_std, s.auc_mean, s.auc_std);
    out += buf;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot open " + path.string() + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

}  // namespace milfuse
