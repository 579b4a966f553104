#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "milfuse/config.hpp"
#include "milfuse/errors.hpp"
#include "milfuse/feature_store.hpp"
#include "milfuse/fusion.hpp"
#include "milfuse/gradcheck_suite.hpp"
#include "milfuse/log.hpp"
#include "milfuse/metrics.hpp"
#include "milfuse/mil_branch.hpp"
#include "milfuse/pipeline.hpp"

namespace fs = std::filesystem;
using namespace milfuse;

namespace {

// 0 success, 1 check failure, 2 validation/usage, 3 divergence
constexpr int kExitCheckFailure = 1;
constexpr int kExitValidation = 2;
constexpr int kExitDivergence = 3;

struct PathArgs {
  std::string manifest, features, split, out, ckpt, config;
  std::string modality = "he";
  std::string section = "test";
  bool force = false;
  bool resume = false;
};

void add_hyper_options(CLI::App* cmd, CliConfig& cfg) {
  cmd->add_option("--seed", cfg.seed)->capture_default_str();
  cmd->add_option("--classes", cfg.classes)->capture_default_str();
  cmd->add_option("--dim", cfg.dim)->capture_default_str();
  cmd->add_option("--hidden", cfg.hidden)->capture_default_str();
  cmd->add_option("--attn", cfg.attn)->capture_default_str();
  cmd->add_option("--pooled-dim", cfg.pooled_dim)->capture_default_str();
  cmd->add_option("--lr", cfg.lr)->capture_default_str();
  cmd->add_option("--weight-decay", cfg.weight_decay)->capture_default_str();
  cmd->add_option("--beta1", cfg.beta1)->capture_default_str();
  cmd->add_option("--beta2", cfg.beta2)->capture_default_str();
  cmd->add_option("--eps", cfg.eps)->capture_default_str();
  cmd->add_option("--c1", cfg.c1)->capture_default_str();
  cmd->add_option("--c2", cfg.c2)->capture_default_str();
  cmd->add_option("--fused-c2", cfg.fused_c2)->capture_default_str();
  cmd->add_option("--tau", cfg.tau)->capture_default_str();
  cmd->add_option("--k-sample", cfg.k_sample)->capture_default_str();
  cmd->add_option("--patch-reduce", cfg.patch_reduce)->capture_default_str();
  cmd->add_option("--min-epochs", cfg.min_epochs)->capture_default_str();
  cmd->add_option("--max-epochs", cfg.max_epochs)->capture_default_str();
  cmd->add_option("--patience", cfg.patience)->capture_default_str();
  cmd->add_option("--min-delta", cfg.min_delta)->capture_default_str();
  cmd->add_option("--l2-normalize", cfg.l2_normalize)->capture_default_str();
}

void add_config_option(CLI::App* cmd, PathArgs& paths) {
  // The file is applied before parsing (see main), so flags win.
  cmd->add_option("--config", paths.config, "key = value config file");
}

void write_effective_config(const CliConfig& cfg, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::ofstream f(dir / "effective_config.txt", std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot write effective_config.txt in " + dir.string());
  const std::string text = render_config(cfg);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

void refuse_existing(const fs::path& target, bool force) {
  if (force) return;
  if (fs::exists(target) && (!fs::is_directory(target) || !fs::is_empty(target)))
    throw ValidationError(target.string() + " already exists; pass --force to overwrite");
}

TwoStageConfig make_pipeline_cfg(const CliConfig& c) {
  TwoStageConfig p;
  p.dims.d_in = c.dim;
  p.dims.d_hidden = c.hidden;
  p.dims.d_attn = c.attn;
  p.dims.num_classes = c.classes;
  p.pooled_dim = c.pooled_dim;
  p.train.adam.lr = c.lr;
  p.train.adam.beta1 = c.beta1;
  p.train.adam.beta2 = c.beta2;
  p.train.adam.eps = c.eps;
  p.train.adam.weight_decay = c.weight_decay;
  p.train.loss.c1 = c.c1;
  p.train.loss.c2 = c.c2;
  p.train.loss.k_sample = c.k_sample;
  p.train.loss.tau = c.tau;
  p.train.loss.patch_sum = c.patch_reduce == "sum";
  p.train.min_epochs = c.min_epochs;
  p.train.max_epochs = c.max_epochs;
  p.train.patience = c.patience;
  p.train.min_delta = c.min_delta;
  p.fused_c2 = c.fused_c2;
  p.l2_normalize = c.l2_normalize;
  p.seed = c.seed;
  p.folds = c.folds;
  p.jobs = c.jobs;
  p.fractions = {c.train_frac, c.val_frac, c.test_frac};
  return p;
}

std::vector<const PairedSample*> resolve_ids(const std::vector<PairedSample>& samples,
                                             const std::vector<std::string>& ids) {
  std::map<std::string, const PairedSample*> by_id;
  for (const auto& s : samples) by_id[s.slide_id] = &s;
  std::vector<const PairedSample*> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      log::warn("split references slide '%s' not in the loaded dataset, skipping", id.c_str());
      continue;
    }
    out.push_back(it->second);
  }
  return out;
}

std::vector<LabeledBag> bags_for(const std::vector<const PairedSample*>& set,
                                 Modality modality) {
  std::vector<LabeledBag> out;
  out.reserve(set.size());
  for (const PairedSample* s : set)
    out.push_back({modality == Modality::IHC ? &s->ihc : &s->he, s->label});
  return out;
}

void check_bag_dims(const std::vector<LabeledBag>& bags, std::size_t dim) {
  for (const auto& b : bags)
    if (b.bag->dim() != dim)
      throw ValidationError("bag '" + b.bag->slide_id + "' has dim " +
                            std::to_string(b.bag->dim()) + " but --dim is " +
                            std::to_string(dim));
}

int cmd_synth(const CliConfig& cfg, const PathArgs& paths) {
  validate_config(cfg);
  if (cfg.classes != 4)
    throw ValidationError("synth: the parity/coarse cue design requires exactly 4 classes");
  const fs::path out = paths.out;
  refuse_existing(out, paths.force);

  SynthConfig scfg;
  scfg.num_classes = static_cast<int>(cfg.classes);
  scfg.samples_per_class = static_cast<int>(cfg.per_class);
  scfg.dim = static_cast<int>(cfg.dim);
  scfg.signal_fraction = cfg.signal_fraction;
  scfg.signal_strength = cfg.signal_strength;
  scfg.noise_scale = cfg.noise_scale;
  scfg.bag_min = static_cast<int>(cfg.bag_min);
  scfg.bag_max = static_cast<int>(cfg.bag_max);

  const Manifest m = generate_synthetic_dataset(scfg, cfg.seed, out);
  write_effective_config(cfg, out);
  std::printf("manifest: %s\n", (out / "manifest.tsv").string().c_str());
  std::map<int, int> counts;
  for (const auto& e : m.entries) ++counts[e.label];
  for (const auto& [label, count] : counts)
    std::printf("class %d: %d slides\n", label, count);
  return 0;
}

int train_one_branch(const CliConfig& cfg, const PathArgs& paths, Modality modality,
                     double c2_effective) {
  validate_config(cfg);
  const fs::path ckpt_path = paths.out;
  fs::path opt_path = ckpt_path;
  opt_path.replace_extension(".opt");
  fs::path hist_path = ckpt_path;
  hist_path.replace_extension(".history.tsv");
  if (!paths.resume) refuse_existing(ckpt_path, paths.force);

  if (!fs::exists(paths.split))
    throw ValidationError("split file not found: " + paths.split);
  const SplitSpec split = read_split(paths.split);
  const auto samples = load_manifest(fs::path(paths.manifest), fs::path(paths.features),
                                     static_cast<int>(cfg.classes));

  const auto train_set = resolve_ids(samples, split.train_ids);
  const auto val_set = resolve_ids(samples, split.val_ids);
  if (train_set.empty() || val_set.empty())
    throw ValidationError("split resolves to an empty train or val set");
  const auto train_bags = bags_for(train_set, modality);
  const auto val_bags = bags_for(val_set, modality);
  check_bag_dims(train_bags, cfg.dim);
  check_bag_dims(val_bags, cfg.dim);

  TwoStageConfig pcfg = make_pipeline_cfg(cfg);
  TrainConfig tcfg = pcfg.train;
  tcfg.loss.c2 = c2_effective;
  tcfg.seed = Rng::derive_seed(cfg.seed, "train." + modality_name(modality));

  TrainState st;
  if (paths.resume) {
    if (!fs::exists(ckpt_path) || !fs::exists(opt_path))
      throw ValidationError("--resume needs both " + ckpt_path.string() + " and " +
                            opt_path.string());
    st = load_train_state(ckpt_path, opt_path);
    log::info("resuming from epoch %zu", st.epoch);
  } else {
    st = init_train_state(pcfg.dims, tcfg);
  }

  train_loop(st, train_bags, val_bags, tcfg);
  save_train_state(st, ckpt_path, opt_path);

  const bool append = paths.resume && fs::exists(hist_path);
  {
    std::ofstream f(hist_path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
    if (!f) throw ValidationError("cannot open " + hist_path.string() + " for writing");
    if (!append) f << "epoch\ttrain_loss\tval_loss\tval_acc\n";
    char buf[128];
    for (const EpochStats& e : st.history) {
      std::snprintf(buf, sizeof buf, "%zu\t%.9f\t%.9f\t%.6f\n", e.epoch, e.train_loss,
                    e.val_loss, e.val_acc);
      f << buf;
    }
  }
  write_effective_config(cfg, ckpt_path.parent_path().empty() ? fs::path(".")
                                                              : ckpt_path.parent_path());

  if (st.diverged)
    throw NumericError("stage '" + modality_name(modality) +
                       "' diverged; best checkpoint saved at " + ckpt_path.string());
  std::printf("best epoch %zu, val loss %.6f, checkpoint %s\n", st.best_epoch,
              st.best_val_loss, ckpt_path.string().c_str());
  return 0;
}

int cmd_extract(const CliConfig& cfg, const PathArgs& paths) {
  validate_config(cfg);
  const fs::path out = paths.out;
  refuse_existing(out, paths.force);
  const BranchParams params = load_params(paths.ckpt);
  const Modality modality = parse_modality(paths.modality);
  const auto samples = load_manifest(fs::path(paths.manifest), fs::path(paths.features),
                                     static_cast<int>(cfg.classes));
  fs::create_directories(out);
  for (const auto& s : samples) {
    const FeatureBag& bag = modality == Modality::IHC ? s.ihc : s.he;
    const BagEmbeddings emb = extract_bag_embeddings(params, bag);
    FeatureBag out_bag;
    out_bag.slide_id = s.slide_id;
    out_bag.modality = modality;
    out_bag.features = emb.z;
    write_bag(out_bag, out / (s.slide_id + ".milf"));
  }
  write_effective_config(cfg, out);
  std::printf("wrote %zu embedding bags to %s\n", samples.size(), out.string().c_str());
  return 0;
}

int cmd_fuse(const CliConfig& cfg, const PathArgs& paths, const std::string& he_dir,
             const std::string& ihc_dir) {
  validate_config(cfg);
  const fs::path out = paths.out;
  refuse_existing(out, paths.force);
  const Manifest manifest = read_manifest(paths.manifest);
  const PoolingSpec pool{cfg.hidden, cfg.pooled_dim};
  pool.window();

  fs::create_directories(out / "bags");
  Manifest fused_manifest;
  fused_manifest.num_classes = manifest.num_classes;
  for (const auto& e : manifest.entries) {
    const FeatureBag he = read_bag(fs::path(he_dir) / (e.slide_id + ".milf"), Modality::HE);
    const FeatureBag ihc =
        read_bag(fs::path(ihc_dir) / (e.slide_id + ".milf"), Modality::IHC);
    BagEmbeddings zhe{e.slide_id, he.features};
    BagEmbeddings zihc{e.slide_id, ihc.features};
    const FusedBag fused = build_fused_bag(zhe, zihc, e.label, pool, cfg.l2_normalize);
    write_bag(to_feature_bag(fused), out / "bags" / (e.slide_id + ".milf"));
    ManifestEntry fe;
    fe.slide_id = e.slide_id;
    fe.label = e.label;
    fe.he_path = "bags/" + e.slide_id + ".milf";
    fe.ihc_path = fe.he_path;
    fused_manifest.entries.push_back(std::move(fe));
  }
  write_manifest(fused_manifest, out / "manifest.tsv");
  write_effective_config(cfg, out);
  std::printf("wrote %zu fused bags, manifest %s\n", fused_manifest.entries.size(),
              (out / "manifest.tsv").string().c_str());
  return 0;
}

int cmd_evaluate(const CliConfig& cfg, const PathArgs& paths) {
  validate_config(cfg);
  const BranchParams params = load_params(paths.ckpt);
  const Modality modality = parse_modality(paths.modality);
  if (!fs::exists(paths.split)) throw ValidationError("split file not found: " + paths.split);
  const SplitSpec split = read_split(paths.split);
  const auto samples = load_manifest(fs::path(paths.manifest), fs::path(paths.features),
                                     static_cast<int>(cfg.classes));
  const std::vector<std::string>* ids = nullptr;
  if (paths.section == "train") ids = &split.train_ids;
  else if (paths.section == "val") ids = &split.val_ids;
  else if (paths.section == "test") ids = &split.test_ids;
  else throw ValidationError("--section must be train, val, or test");

  const auto set = resolve_ids(samples, *ids);
  if (set.empty()) throw ValidationError("section resolves to no slides");
  const auto bags = bags_for(set, modality);

  TwoStageConfig pcfg = make_pipeline_cfg(cfg);
  const EvalResult ev = evaluate_branch(params, bags, pcfg.train.loss);
  const AucResult auc = auc_macro_ovr(ev.probs, ev.labels);
  std::printf("%s %s: n=%zu acc=%.6f auc_macro=%.6f loss=%.6f\n", paths.modality.c_str(),
              paths.section.c_str(), bags.size(), ev.acc, auc.macro, ev.loss);
  for (std::size_t c = 0; c < auc.per_class.size(); ++c) {
    if (auc.computable[c])
      std::printf("  class %zu auc %.6f\n", c, auc.per_class[c]);
    else
      std::printf("  class %zu auc skipped (single-class section)\n", c);
  }
  if (!paths.out.empty()) {
    std::ofstream f(paths.out, std::ios::binary | std::ios::trunc);
    if (!f) throw ValidationError("cannot open " + paths.out + " for writing");
    f << "route\tacc\tauc_macro\n";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\n", paths.modality.c_str(), ev.acc,
                  auc.macro);
    f << buf;
  }
  return 0;
}

int cmd_crossval(const CliConfig& cfg, const PathArgs& paths) {
  validate_config(cfg);
  const fs::path out = paths.out;
  refuse_existing(out, paths.force);
  const Manifest manifest = read_manifest(paths.manifest);
  const auto samples =
      load_manifest(manifest, fs::path(paths.features), static_cast<int>(cfg.classes));
  const TwoStageConfig pcfg = make_pipeline_cfg(cfg);

  fs::create_directories(out);
  write_effective_config(cfg, out);
  const CvResult cv = monte_carlo_cv(manifest, samples, pcfg, out);

  std::printf("route\tacc_mean\tacc_std\tauc_mean\tauc_std\n");
  for (const char* route : {"he", "ihc", "fused"}) {
    const RouteSummary& s = cv.summary.at(route);
    std::printf("%s\t%.6f\t%.6f\t%.6f\t%.6f\n", route, s.acc_mean, s.acc_std, s.auc_mean,
                s.auc_std);
  }
  return 0;
}

int cmd_gradcheck(const GradCheckConfig& gcfg) {
  const GradCheckReport rep = run_gradcheck(gcfg);
  std::printf("%-16s %-14s %s\n", "tensor", "max_rel_err", "config");
  for (const auto& t : rep.tensors)
    std::printf("%-16s %-14.3e %d\n", t.name.c_str(), t.max_rel_err, t.config);
  std::printf("configs: %d  max_rel_err: %.3e  tolerance: %.3e\n", rep.num_configs,
              rep.max_rel_err, gcfg.tolerance);
  if (!rep.passed(gcfg.tolerance)) {
    std::printf("FAIL: tensor %s in config %d (seed %llu) exceeds tolerance\n",
                rep.worst_tensor.c_str(), rep.worst_config,
                static_cast<unsigned long long>(rep.worst_config_seed));
    return kExitCheckFailure;
  }
  std::printf("PASS\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CliConfig cfg;
  PathArgs paths;

  // Apply --config before CLI11 so explicit flags override file values.
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    std::string file;
    if (arg == "--config" && i + 1 < argc) file = argv[i + 1];
    else if (arg.rfind("--config=", 0) == 0) file = arg.substr(9);
    if (!file.empty()) {
      try {
        apply_config_file(cfg, file);
      } catch (const std::exception& e) {
        log::error("%s", e.what());
        return kExitValidation;
      }
    }
  }

  CLI::App app{"two-stage multimodal attention-MIL fusion for whole-slide grading"};
  app.require_subcommand(1);

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic paired dataset");
  synth->add_option("--out", paths.out, "output directory")->required();
  synth->add_flag("--force", paths.force, "overwrite existing outputs");
  add_config_option(synth, paths);
  synth->add_option("--per-class", cfg.per_class)->capture_default_str();
  synth->add_option("--bag-min", cfg.bag_min)->capture_default_str();
  synth->add_option("--bag-max", cfg.bag_max)->capture_default_str();
  synth->add_option("--signal-fraction", cfg.signal_fraction)->capture_default_str();
  synth->add_option("--signal-strength", cfg.signal_strength)->capture_default_str();
  synth->add_option("--noise-scale", cfg.noise_scale)->capture_default_str();
  add_hyper_options(synth, cfg);

  auto add_data_options = [&](CLI::App* cmd, bool with_split) {
    cmd->add_option("--manifest", paths.manifest, "manifest.tsv path")->required();
    cmd->add_option("--features", paths.features, "feature root directory")->required();
    if (with_split) cmd->add_option("--split", paths.split, "split file")->required();
  };

  CLI::App* train = app.add_subcommand("train-branch", "train one MIL branch");
  add_data_options(train, true);
  train->add_option("--modality", paths.modality, "he | ihc | fused")->required();
  train->add_option("--out", paths.out, "checkpoint path (.ckpt)")->required();
  train->add_flag("--force", paths.force, "overwrite existing outputs");
  train->add_flag("--resume", paths.resume, "continue from checkpoint + .opt state");
  add_config_option(train, paths);
  add_hyper_options(train, cfg);
  CLI::Option* train_c2 = train->get_option("--c2");

  CLI::App* extract = app.add_subcommand("extract-embeddings",
                                         "write per-slide bag embeddings with a checkpoint");
  add_data_options(extract, false);
  extract->add_option("--ckpt", paths.ckpt, "branch checkpoint")->required();
  extract->add_option("--modality", paths.modality, "he | ihc")->required();
  extract->add_option("--out", paths.out, "output directory")->required();
  extract->add_flag("--force", paths.force, "overwrite existing outputs");
  add_config_option(extract, paths);
  add_hyper_options(extract, cfg);

  CLI::App* fuse = app.add_subcommand("fuse", "build fused bags from extracted embeddings");
  fuse->add_option("--manifest", paths.manifest, "manifest.tsv path")->required();
  std::string he_dir, ihc_dir;
  fuse->add_option("--he-embeddings", he_dir, "directory from extract-embeddings")->required();
  fuse->add_option("--ihc-embeddings", ihc_dir, "directory from extract-embeddings")
      ->required();
  fuse->add_option("--out", paths.out, "output directory")->required();
  fuse->add_flag("--force", paths.force, "overwrite existing outputs");
  add_config_option(fuse, paths);
  add_hyper_options(fuse, cfg);

  CLI::App* train_fused =
      app.add_subcommand("train-fused", "train the stage-2 branch on fused bags");
  add_data_options(train_fused, true);
  train_fused->add_option("--out", paths.out, "checkpoint path (.ckpt)")->required();
  train_fused->add_flag("--force", paths.force, "overwrite existing outputs");
  train_fused->add_flag("--resume", paths.resume, "continue from checkpoint + .opt state");
  add_config_option(train_fused, paths);
  add_hyper_options(train_fused, cfg);
  CLI::Option* train_fused_c2 = train_fused->get_option("--c2");

  CLI::App* evaluate = app.add_subcommand("evaluate", "metrics for a checkpoint on a split");
  add_data_options(evaluate, true);
  evaluate->add_option("--ckpt", paths.ckpt, "branch checkpoint")->required();
  evaluate->add_option("--modality", paths.modality, "he | ihc | fused")->required();
  evaluate->add_option("--section", paths.section, "train | val | test")
      ->capture_default_str();
  evaluate->add_option("--out", paths.out, "optional metrics tsv path");
  add_config_option(evaluate, paths);
  add_hyper_options(evaluate, cfg);

  CLI::App* crossval = app.add_subcommand("crossval", "Monte-Carlo cross-validation");
  crossval->add_option("--manifest", paths.manifest, "manifest.tsv path")->required();
  crossval->add_option("--features", paths.features, "feature root directory")->required();
  crossval->add_option("--out", paths.out, "output directory")->required();
  crossval->add_flag("--force", paths.force, "overwrite existing outputs");
  crossval->add_option("--folds", cfg.folds)->capture_default_str();
  crossval->add_option("--jobs", cfg.jobs)->capture_default_str();
  crossval->add_option("--train-frac", cfg.train_frac)->capture_default_str();
  crossval->add_option("--val-frac", cfg.val_frac)->capture_default_str();
  crossval->add_option("--test-frac", cfg.test_frac)->capture_default_str();
  add_config_option(crossval, paths);
  add_hyper_options(crossval, cfg);

  GradCheckConfig gcfg;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--configs", gcfg.num_configs)->capture_default_str();
  gradcheck->add_option("--seed", gcfg.seed)->capture_default_str();
  gradcheck->add_option("--fd-step", gcfg.h)->capture_default_str();
  gradcheck->add_option("--tolerance", gcfg.tolerance)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (synth->parsed()) return cmd_synth(cfg, paths);
    if (train->parsed()) {
      const Modality modality = parse_modality(paths.modality);
      double c2 = cfg.c2;
      if (modality == Modality::Fused && train_c2->count() == 0) c2 = cfg.fused_c2;
      return train_one_branch(cfg, paths, modality, c2);
    }
    if (extract->parsed()) return cmd_extract(cfg, paths);
    if (fuse->parsed()) return cmd_fuse(cfg, paths, he_dir, ihc_dir);
    if (train_fused->parsed()) {
      double c2 = cfg.fused_c2;
      if (train_fused_c2->count() > 0) c2 = cfg.c2;
      return train_one_branch(cfg, paths, Modality::Fused, c2);
    }
    if (evaluate->parsed()) return cmd_evaluate(cfg, paths);
    if (crossval->parsed()) return cmd_crossval(cfg, paths);
    if (gradcheck->parsed()) return cmd_gradcheck(gcfg);
  } catch (const NumericError& e) {
    log::error("%s", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    log::error("%s", e.what());
    return kExitValidation;
  }
  return kExitValidation;
}
