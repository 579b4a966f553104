#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "milfuse/matrix.hpp"

namespace milfuse {

enum class Modality { HE, IHC, Fused };

std::string modality_name(Modality m);
Modality parse_modality(const std::string& s);

/// One slide's bag of patch embeddings, K instances x D dims. Stored on disk
/// as "MILF" v1: magic, u32 version, u32 K, u32 D, K*D float32 row-major,
/// little-endian, no padding.
struct FeatureBag {
  std::string slide_id;
  Modality modality = Modality::HE;
  Matrix features;  // K x D

  std::size_t num_instances() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
};

/// A labeled H&E/IHC pair. Bag sizes may differ between the modalities.
struct PairedSample {
  std::string slide_id;
  int label = 0;
  FeatureBag he;
  FeatureBag ihc;
};

struct ManifestEntry {
  std::string slide_id;
  int label = 0;
  std::string he_path;   // relative to the feature root
  std::string ihc_path;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  int num_classes = 0;
};

struct SplitSpec {
  std::vector<std::string> train_ids, val_ids, test_ids;
  std::uint64_t seed = 0;
};

void write_bag(const FeatureBag& bag, const std::filesystem::path& path);
FeatureBag read_bag(const std::filesystem::path& path, Modality modality = Modality::HE);

/// Parse and validate a tab-separated manifest (header
/// slide_id\tlabel\the_path\tihc_path). Duplicate ids or a label gap make it
/// invalid. num_classes is inferred as max label + 1.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

/// Load all pairs whose files read cleanly; rows with a missing or corrupt
/// bag are dropped with a logged warning. Throws ValidationError if a label
/// is >= num_classes (when num_classes > 0) or if nothing loads.
std::vector<PairedSample> load_manifest(const Manifest& manifest,
                                        const std::filesystem::path& feature_root,
                                        int num_classes = 0);
std::vector<PairedSample> load_manifest(const std::filesystem::path& manifest_path,
                                        const std::filesystem::path& feature_root,
                                        int num_classes = 0);

/// Seeded per-class split. Class counts follow largest-remainder rounding of
/// the fractions, so every count is within one sample of the exact
/// proportion. Requires at least 3 samples per class.
SplitSpec stratified_split(const Manifest& manifest,
                           const std::array<double, 3>& fractions, std::uint64_t seed);

void write_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec read_split(const std::filesystem::path& path);

/// Synthetic paired-modality dataset. The label is a joint function of the
/// two modalities: the H&E bags carry a signal separating labels {0,1} from
/// {2,3}, the IHC bags one separating {0,2} from {1,3}, so either modality
/// alone pins the label only up to a 2-way ambiguity. Signal instances are a
/// minority of each bag; the rest are isotropic noise.
struct SynthConfig {
  int num_classes = 4;         // the cue design requires exactly 4
  int samples_per_class = 50;  // >= 10
  int dim = 1024;
  double signal_fraction = 0.25;
  double signal_strength = 12.0;
  double noise_scale = 1.0;
  int bag_min = 8;
  int bag_max = 24;
};

/// Writes bags/<id>_he.milf, bags/<id>_ihc.milf and manifest.tsv under
/// out_dir. Generation is deterministic per (cfg, seed): each slide draws
/// from its own derived stream, so regenerating yields byte-identical files.
Manifest generate_synthetic_dataset(const SynthConfig& cfg, std::uint64_t seed,
                                    const std::filesystem::path& out_dir);

}  // namespace milfuse
