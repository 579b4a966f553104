#include "milfuse/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "milfuse/errors.hpp"
#include "milfuse/log.hpp"
#include "milfuse/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "bag and checkpoint files are little-endian; big-endian hosts are unsupported");

namespace milfuse {

namespace fs = std::filesystem;

std::string modality_name(Modality m) {
  switch (m) {
    case Modality::HE: return "he";
    case Modality::IHC: return "ihc";
    case Modality::Fused: return "fused";
  }
  throw ContractError("modality_name: bad enum value");
}

Modality parse_modality(const std::string& s) {
  if (s == "he") return Modality::HE;
  if (s == "ihc") return Modality::IHC;
  if (s == "fused") return Modality::Fused;
  throw ValidationError("unknown modality '" + s + "' (expected he, ihc, or fused)");
}

namespace {

constexpr char kBagMagic[4] = {'M', 'I', 'L', 'F'};
constexpr std::uint32_t kBagVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

struct ByteReader {
  const std::string& data;
  std::size_t pos = 0;
  const std::string context;

  ByteReader(const std::string& d, std::string ctx) : data(d), context(std::move(ctx)) {}

  void need(std::size_t n, const char* what) const {
    if (pos + n > data.size())
      throw FormatError(context + ": truncated while reading " + std::string(what), pos);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, data.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v;
    std::memcpy(&v, data.data() + pos, 2);
    pos += 2;
    return v;
  }
};

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void write_file_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("short write to " + path.string());
}

}  // namespace

void write_bag(const FeatureBag& bag, const fs::path& path) {
  const std::size_t k = bag.features.rows(), d = bag.features.cols();
  if (k == 0 || d == 0)
    throw ValidationError("write_bag: empty bag for slide '" + bag.slide_id + "'");
  if (!bag.features.all_finite())
    throw NumericError("write_bag: non-finite feature in slide '" + bag.slide_id + "'");

  std::string out;
  out.reserve(16 + k * d * 4);
  out.append(kBagMagic, 4);
  put_u32(out, kBagVersion);
  put_u32(out, static_cast<std::uint32_t>(k));
  put_u32(out, static_cast<std::uint32_t>(d));
  std::vector<float> row(d);
  for (std::size_t i = 0; i < k; ++i) {
    const double* src = bag.features.row_ptr(i);
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(src[j]);
    out.append(reinterpret_cast<const char*>(row.data()), d * 4);
  }
  write_file_bytes(path, out);
}

FeatureBag read_bag(const fs::path& path, Modality modality) {
  const std::string bytes = read_file_bytes(path);
  ByteReader r(bytes, path.string());

  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kBagMagic, 4) != 0)
    throw FormatError(path.string() + ": bad magic (expected MILF)", 0);
  r.pos = 4;
  const std::uint32_t version = r.u32("version");
  if (version != kBagVersion)
    throw FormatError(path.string() + ": unsupported version " + std::to_string(version), 4);
  const std::uint32_t k = r.u32("instance count");
  const std::uint32_t d = r.u32("feature dim");
  if (k == 0) throw FormatError(path.string() + ": zero instances", 8);
  if (d == 0) throw FormatError(path.string() + ": zero feature dim", 12);

  const std::size_t payload = static_cast<std::size_t>(k) * d * 4;
  if (bytes.size() < 16 + payload)
    throw FormatError(path.string() + ": truncated payload (need " +
                          std::to_string(16 + payload) + " bytes, have " +
                          std::to_string(bytes.size()) + ")",
                      bytes.size());
  if (bytes.size() > 16 + payload)
    throw FormatError(path.string() + ": trailing data after payload", 16 + payload);

  FeatureBag bag;
  bag.slide_id = path.stem().string();
  bag.modality = modality;
  bag.features = Matrix(k, d);
  const char* src = bytes.data() + 16;
  for (std::size_t i = 0; i < k; ++i) {
    double* dst = bag.features.row_ptr(i);
    for (std::size_t j = 0; j < d; ++j) {
      float f;
      std::memcpy(&f, src + (i * d + j) * 4, 4);
      if (!std::isfinite(f))
        throw FormatError(path.string() + ": non-finite value at instance " +
                              std::to_string(i) + ", dim " + std::to_string(j),
                          16 + (i * d + j) * 4);
      dst[j] = static_cast<double>(f);
    }
  }
  return bag;
}

namespace {

constexpr const char* kManifestHeader = "slide_id\tlabel\the_path\tihc_path";

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

std::string strip_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest " + path.string());

  std::string line;
  if (!std::getline(in, line))
    throw FormatError(path.string() + ": empty manifest", 0);
  if (strip_cr(line) != kManifestHeader)
    throw FormatError(path.string() + ": bad header (expected '" +
                          std::string(kManifestHeader) + "')",
                      0);

  Manifest m;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != 4)
      throw ValidationError(where + ": expected 4 tab-separated fields, got " +
                            std::to_string(fields.size()));
    ManifestEntry e;
    e.slide_id = fields[0];
    if (e.slide_id.empty()) throw ValidationError(where + ": empty slide_id");
    try {
      std::size_t used = 0;
      e.label = std::stoi(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ValidationError(where + ": bad label '" + fields[1] + "'");
    }
    if (e.label < 0) throw ValidationError(where + ": negative label");
    e.he_path = fields[2];
    e.ihc_path = fields[3];
    if (e.he_path.empty() || e.ihc_path.empty())
      throw ValidationError(where + ": empty path");
    if (auto [it, inserted] = seen.emplace(e.slide_id, line_no); !inserted)
      throw ValidationError(where + ": duplicate slide_id '" + e.slide_id +
                            "' (first at line " + std::to_string(it->second) + ")");
    m.entries.push_back(std::move(e));
  }
  if (m.entries.empty()) throw ValidationError(path.string() + ": manifest has no rows");

  int max_label = 0;
  for (const auto& e : m.entries) max_label = std::max(max_label, e.label);
  m.num_classes = max_label + 1;
  std::vector<int> counts(static_cast<std::size_t>(m.num_classes), 0);
  for (const auto& e : m.entries) ++counts[static_cast<std::size_t>(e.label)];
  for (int c = 0; c < m.num_classes; ++c)
    if (counts[static_cast<std::size_t>(c)] == 0)
      throw ValidationError(path.string() + ": no samples for class " + std::to_string(c) +
                            " (labels must cover 0..max)");
  return m;
}

void write_manifest(const Manifest& m, const fs::path& path) {
  std::ostringstream out;
  out << kManifestHeader << "\n";
  for (const auto& e : m.entries)
    out << e.slide_id << '\t' << e.label << '\t' << e.he_path << '\t' << e.ihc_path << "\n";
  write_file_bytes(path, std::move(out).str());
}

std::vector<PairedSample> load_manifest(const Manifest& manifest, const fs::path& feature_root,
                                        int num_classes) {
  if (num_classes > 0) {
    for (const auto& e : manifest.entries)
      if (e.label >= num_classes)
        throw ValidationError("slide '" + e.slide_id + "' has label " +
                              std::to_string(e.label) + " but only " +
                              std::to_string(num_classes) + " classes are configured");
  }
  std::vector<PairedSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    PairedSample s;
    s.slide_id = e.slide_id;
    s.label = e.label;
    try {
      s.he = read_bag(feature_root / e.he_path, Modality::HE);
      s.ihc = read_bag(feature_root / e.ihc_path, Modality::IHC);
    } catch (const FormatError& err) {
      log::warn("dropping slide '%s': %s", e.slide_id.c_str(), err.what());
      continue;
    }
    s.he.slide_id = e.slide_id;
    s.ihc.slide_id = e.slide_id;
    out.push_back(std::move(s));
  }
  if (out.empty())
    throw ValidationError("no usable slide pairs (all " +
                          std::to_string(manifest.entries.size()) + " rows were dropped)");
  return out;
}

std::vector<PairedSample> load_manifest(const fs::path& manifest_path,
                                        const fs::path& feature_root, int num_classes) {
  return load_manifest(read_manifest(manifest_path), feature_root, num_classes);
}

SplitSpec stratified_split(const Manifest& manifest, const std::array<double, 3>& fractions,
                           std::uint64_t seed) {
  double fsum = 0;
  for (double f : fractions) {
    if (f < 0) throw ValidationError("stratified_split: negative fraction");
    fsum += f;
  }
  if (std::abs(fsum - 1.0) > 1e-9)
    throw ValidationError("stratified_split: fractions must sum to 1");

  std::map<int, std::vector<std::string>> by_class;
  for (const auto& e : manifest.entries) by_class[e.label].push_back(e.slide_id);
  for (auto& [label, ids] : by_class) {
    if (ids.size() < 3)
      throw ValidationError("stratified_split: class " + std::to_string(label) + " has only " +
                            std::to_string(ids.size()) + " samples (need at least 3)");
    std::sort(ids.begin(), ids.end());
  }

  SplitSpec split;
  split.seed = seed;
  Rng rng = Rng(seed).derive("split");
  for (auto& [label, ids] : by_class) {
    rng.shuffle(ids);
    const std::size_t n = ids.size();

    // Largest-remainder apportionment of n over the three fractions.
    std::array<std::size_t, 3> counts;
    std::array<double, 3> rema;
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
      const double exact = fractions[static_cast<std::size_t>(i)] * static_cast<double>(n);
      counts[static_cast<std::size_t>(i)] = static_cast<std::size_t>(std::floor(exact));
      rema[static_cast<std::size_t>(i)] = exact - std::floor(exact);
      assigned += counts[static_cast<std::size_t>(i)];
    }
    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return rema[static_cast<std::size_t>(a)] >
                                                rema[static_cast<std::size_t>(b)]; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned)
      ++counts[static_cast<std::size_t>(order[i % 3])];

    std::size_t pos = 0;
    for (std::size_t i = 0; i < counts[0]; ++i) split.train_ids.push_back(ids[pos++]);
    for (std::size_t i = 0; i < counts[1]; ++i) split.val_ids.push_back(ids[pos++]);
    for (std::size_t i = 0; i < counts[2]; ++i) split.test_ids.push_back(ids[pos++]);
  }
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.val_ids.begin(), split.val_ids.end());
  std::sort(split.test_ids.begin(), split.test_ids.end());
  return split;
}

void write_split(const SplitSpec& split, const fs::path& path) {
  std::ostringstream out;
  out << "seed=" << split.seed << "\n";
  const std::pair<const char*, const std::vector<std::string>*> sections[] = {
      {"train", &split.train_ids}, {"val", &split.val_ids}, {"test", &split.test_ids}};
  for (const auto& [name, ids] : sections) {
    out << "[" << name << "]\n";
    for (const auto& id : *ids) out << id << "\n";
  }
  write_file_bytes(path, std::move(out).str());
}

SplitSpec read_split(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open split file " + path.string());
  SplitSpec split;
  std::vector<std::string>* current = nullptr;
  bool saw_seed = false;
  std::string line;
  std::size_t line_no = 0;
  std::array<bool, 3> seen_section = {false, false, false};
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (line[0] == '[') {
      int idx;
      if (line == "[train]") { current = &split.train_ids; idx = 0; }
      else if (line == "[val]") { current = &split.val_ids; idx = 1; }
      else if (line == "[test]") { current = &split.test_ids; idx = 2; }
      else throw ValidationError(where + ": unknown section " + line);
      if (seen_section[static_cast<std::size_t>(idx)])
        throw ValidationError(where + ": duplicate section " + line);
      seen_section[static_cast<std::size_t>(idx)] = true;
    } else if (line.rfind("seed=", 0) == 0) {
      if (saw_seed) throw ValidationError(where + ": duplicate seed line");
      try {
        split.seed = std::stoull(line.substr(5));
      } catch (const std::exception&) {
        throw ValidationError(where + ": bad seed '" + line.substr(5) + "'");
      }
      saw_seed = true;
    } else {
      if (!current) throw ValidationError(where + ": slide id outside any section");
      current->push_back(line);
    }
  }
  if (!saw_seed) throw ValidationError(path.string() + ": missing seed line");
  if (!seen_section[0] || !seen_section[1] || !seen_section[2])
    throw ValidationError(path.string() + ": missing train/val/test section");

  std::map<std::string, int> membership;
  const std::vector<std::string>* sections[] = {&split.train_ids, &split.val_ids,
                                                &split.test_ids};
  for (const auto* ids : sections)
    for (const auto& id : *ids)
      if (++membership[id] > 1)
        throw ValidationError(path.string() + ": slide '" + id +
                              "' appears in more than one section");
  return split;
}

namespace {

// Each (modality, bit) pair gets its own 16-coordinate block so the four
// signal directions are mutually orthogonal. Using a direction and its
// negation instead would collapse under the downstream outer product, since
// (-a) x (-b) == a x b.
void add_block_signal(Matrix& bag, const std::vector<std::size_t>& rows, int bit,
                      double strength) {
  const std::size_t base = bit ? 16 : 0;
  const double per_coord = strength / 4.0;  // unit-norm direction over 16 coords
  for (std::size_t r : rows)
    for (std::size_t c = base; c < base + 16; ++c) bag(r, c) += per_coord;
}

Matrix make_synthetic_bag(Rng& rng, int k, int dim, int bit, const SynthConfig& cfg) {
  Matrix bag(static_cast<std::size_t>(k), static_cast<std::size_t>(dim));
  for (std::size_t i = 0; i < bag.rows(); ++i) {
    double* row = bag.row_ptr(i);
    for (std::size_t j = 0; j < bag.cols(); ++j) row[j] = cfg.noise_scale * rng.normal();
  }
  int m = 0;
  if (cfg.signal_fraction > 0)
    m = std::max(1, static_cast<int>(std::lround(cfg.signal_fraction * k)));
  m = std::min(m, k);
  std::vector<std::size_t> idx(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(m));
  add_block_signal(bag, idx, bit, cfg.signal_strength);
  return bag;
}

}  // namespace

Manifest generate_synthetic_dataset(const SynthConfig& cfg, std::uint64_t seed,
                                    const fs::path& out_dir) {
  if (cfg.num_classes != 4)
    throw ValidationError("synthetic generator supports exactly 4 classes (two binary cues)");
  if (cfg.samples_per_class < 10)
    throw ValidationError("samples_per_class must be >= 10");
  if (cfg.dim < 32) throw ValidationError("dim must be >= 32 (two 16-coordinate blocks)");
  if (cfg.signal_fraction < 0 || cfg.signal_fraction > 1)
    throw ValidationError("signal_fraction must be in [0, 1]");
  if (cfg.signal_strength < 0) throw ValidationError("signal_strength must be >= 0");
  if (cfg.noise_scale <= 0) throw ValidationError("noise_scale must be > 0");
  if (cfg.bag_min < 1 || cfg.bag_max < cfg.bag_min)
    throw ValidationError("need 1 <= bag_min <= bag_max");

  fs::create_directories(out_dir / "bags");
  const Rng root = Rng(seed).derive("synth");

  Manifest manifest;
  manifest.num_classes = cfg.num_classes;
  int index = 0;
  for (int label = 0; label < cfg.num_classes; ++label) {
    const int he_bit = label >= 2 ? 1 : 0;
    const int ihc_bit = label % 2;
    for (int s = 0; s < cfg.samples_per_class; ++s, ++index) {
      char buf[16];
      std::snprintf(buf, sizeof buf, "s%04d", index);
      const std::string sid(buf);
      Rng slide_rng = root.derive(sid);

      const int span = cfg.bag_max - cfg.bag_min + 1;
      const int k_he = cfg.bag_min + static_cast<int>(slide_rng.below(
                                         static_cast<std::uint64_t>(span)));
      const int k_ihc = cfg.bag_min + static_cast<int>(slide_rng.below(
                                          static_cast<std::uint64_t>(span)));

      FeatureBag he;
      he.slide_id = sid;
      he.modality = Modality::HE;
      he.features = make_synthetic_bag(slide_rng, k_he, cfg.dim, he_bit, cfg);
      FeatureBag ihc;
      ihc.slide_id = sid;
      ihc.modality = Modality::IHC;
      ihc.features = make_synthetic_bag(slide_rng, k_ihc, cfg.dim, ihc_bit, cfg);

      ManifestEntry e;
      e.slide_id = sid;
      e.label = label;
      e.he_path = "bags/" + sid + "_he.milf";
      e.ihc_path = "bags/" + sid + "_ihc.milf";
      write_bag(he, out_dir / e.he_path);
      write_bag(ihc, out_dir / e.ihc_path);
      manifest.entries.push_back(std::move(e));
    }
  }
  write_manifest(manifest, out_dir / "manifest.tsv");
  return manifest;
}

}  // namespace milfuse
