#include "milfuse/config.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "milfuse/errors.hpp"

namespace milfuse {

namespace {

struct Knob {
  std::function<void(CliConfig&, const std::string&)> parse;
  std::function<std::string(const CliConfig&)> print;
};

std::uint64_t parse_u64(const std::string& s) {
  std::size_t used = 0;
  const std::uint64_t v = std::stoull(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters");
  return v;
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters");
  return v;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument("expected true/false");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::map<std::string, Knob>& knob_table() {
  static const std::map<std::string, Knob> table = [] {
    std::map<std::string, Knob> t;
    auto u64 = [&](const std::string& key, std::uint64_t CliConfig::* field) {
      t[key] = {[field](CliConfig& c, const std::string& s) { c.*field = parse_u64(s); },
                [field](const CliConfig& c) { return std::to_string(c.*field); }};
    };
    auto size = [&](const std::string& key, std::size_t CliConfig::* field) {
      t[key] = {[field](CliConfig& c, const std::string& s) {
                  c.*field = static_cast<std::size_t>(parse_u64(s));
                },
                [field](const CliConfig& c) { return std::to_string(c.*field); }};
    };
    auto real = [&](const std::string& key, double CliConfig::* field) {
      t[key] = {[field](CliConfig& c, const std::string& s) { c.*field = parse_double(s); },
                [field](const CliConfig& c) { return fmt_double(c.*field); }};
    };
    auto boolean = [&](const std::string& key, bool CliConfig::* field) {
      t[key] = {[field](CliConfig& c, const std::string& s) { c.*field = parse_bool(s); },
                [field](const CliConfig& c) { return c.*field ? "true" : "false"; }};
    };
    auto str = [&](const std::string& key, std::string CliConfig::* field) {
      t[key] = {[field](CliConfig& c, const std::string& s) { c.*field = s; },
                [field](const CliConfig& c) { return c.*field; }};
    };

    u64("seed", &CliConfig::seed);
    size("classes", &CliConfig::classes);
    size("dim", &CliConfig::dim);
    size("hidden", &CliConfig::hidden);
    size("attn", &CliConfig::attn);
    size("pooled_dim", &CliConfig::pooled_dim);
    real("lr", &CliConfig::lr);
    real("weight_decay", &CliConfig::weight_decay);
    real("beta1", &CliConfig::beta1);
    real("beta2", &CliConfig::beta2);
    real("eps", &CliConfig::eps);
    real("c1", &CliConfig::c1);
    real("c2", &CliConfig::c2);
    real("fused_c2", &CliConfig::fused_c2);
    real("tau", &CliConfig::tau);
    size("k_sample", &CliConfig::k_sample);
    str("patch_reduce", &CliConfig::patch_reduce);
    size("min_epochs", &CliConfig::min_epochs);
    size("max_epochs", &CliConfig::max_epochs);
    size("patience", &CliConfig::patience);
    real("min_delta", &CliConfig::min_delta);
    size("folds", &CliConfig::folds);
    size("jobs", &CliConfig::jobs);
    real("train_frac", &CliConfig::train_frac);
    real("val_frac", &CliConfig::val_frac);
    real("test_frac", &CliConfig::test_frac);
    size("per_class", &CliConfig::per_class);
    size("bag_min", &CliConfig::bag_min);
    size("bag_max", &CliConfig::bag_max);
    real("signal_fraction", &CliConfig::signal_fraction);
    real("signal_strength", &CliConfig::signal_strength);
    real("noise_scale", &CliConfig::noise_scale);
    boolean("l2_normalize", &CliConfig::l2_normalize);
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void apply_config_file(CliConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ValidationError(where + ": empty key");
    const auto& table = knob_table();
    auto it = table.find(key);
    if (it == table.end()) throw ValidationError(where + ": unknown key '" + key + "'");
    try {
      it->second.parse(cfg, value);
    } catch (const std::exception&) {
      throw ValidationError(where + ": bad value '" + value + "' for key '" + key + "'");
    }
  }
}

std::string render_config(const CliConfig& cfg) {
  std::ostringstream out;
  for (const auto& [key, knob] : knob_table()) out << key << " = " << knob.print(cfg) << "\n";
  return std::move(out).str();
}

void validate_config(const CliConfig& cfg) {
  if (cfg.classes < 2) throw ValidationError("classes must be >= 2");
  if (cfg.dim < 1 || cfg.hidden < 1 || cfg.attn < 1)
    throw ValidationError("dims must be positive");
  if (cfg.pooled_dim < 1 || cfg.hidden % cfg.pooled_dim != 0)
    throw ValidationError("hidden must be divisible by pooled_dim");
  if (cfg.lr <= 0) throw ValidationError("lr must be > 0");
  if (cfg.weight_decay < 0) throw ValidationError("weight_decay must be >= 0");
  if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1)
    throw ValidationError("beta1/beta2 must be in [0, 1)");
  if (cfg.eps <= 0) throw ValidationError("eps must be > 0");
  if (cfg.c1 < 0 || cfg.c2 < 0 || cfg.fused_c2 < 0)
    throw ValidationError("loss weights must be >= 0");
  if (cfg.tau <= 0) throw ValidationError("tau must be > 0");
  if (cfg.k_sample < 1) throw ValidationError("k_sample must be >= 1");
  if (cfg.patch_reduce != "mean" && cfg.patch_reduce != "sum")
    throw ValidationError("patch_reduce must be mean or sum");
  if (cfg.max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
  if (cfg.min_delta < 0) throw ValidationError("min_delta must be >= 0");
  if (cfg.folds < 1) throw ValidationError("folds must be >= 1");
  if (cfg.jobs < 1) throw ValidationError("jobs must be >= 1");
  const double fsum = cfg.train_frac + cfg.val_frac + cfg.test_frac;
  if (cfg.train_frac <= 0 || cfg.val_frac <= 0 || cfg.test_frac <= 0 ||
      std::abs(fsum - 1.0) > 1e-9)
    throw ValidationError("split fractions must be positive and sum to 1");
  if (cfg.bag_min < 1 || cfg.bag_max < cfg.bag_min)
    throw ValidationError("need 1 <= bag_min <= bag_max");
  if (cfg.signal_fraction < 0 || cfg.signal_fraction > 1)
    throw ValidationError("signal_fraction must be in [0, 1]");
  if (cfg.signal_strength < 0) throw ValidationError("signal_strength must be >= 0");
  if (cfg.noise_scale <= 0) throw ValidationError("noise_scale must be > 0");
}

}  // namespace milfuse
