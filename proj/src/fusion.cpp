#include "milfuse/fusion.hpp"

#include <cmath>

#include "milfuse/errors.hpp"

namespace milfuse {

std::size_t PoolingSpec::window() const {
  if (in_dim == 0 || out_dim == 0)
    throw ValidationError("pooling dims must be positive");
  if (in_dim % out_dim != 0)
    throw ValidationError("pooling in_dim " + std::to_string(in_dim) +
                          " not divisible by out_dim " + std::to_string(out_dim));
  return in_dim / out_dim;
}

std::vector<double> average_pool(std::span<const double> z, const PoolingSpec& spec) {
  const std::size_t w = spec.window();
  if (z.size() != spec.in_dim)
    throw ShapeError("average_pool: input length " + std::to_string(z.size()) +
                     " != in_dim " + std::to_string(spec.in_dim));
  std::vector<double> out(spec.out_dim);
  for (std::size_t i = 0; i < spec.out_dim; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < w; ++j) sum += z[i * w + j];
    out[i] = sum / static_cast<double>(w);
  }
  return out;
}

std::vector<double> kronecker(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("kronecker: empty input");
  std::vector<double> out(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double ai = a[i];
    double* dst = out.data() + i * b.size();
    for (std::size_t j = 0; j < b.size(); ++j) dst[j] = ai * b[j];
  }
  return out;
}

FusedBag build_fused_bag(const BagEmbeddings& z_he, const BagEmbeddings& z_ihc, int label,
                         const PoolingSpec& spec, bool l2_normalize) {
  if (z_he.slide_id != z_ihc.slide_id)
    throw ValidationError("build_fused_bag: modality slide ids differ ('" + z_he.slide_id +
                          "' vs '" + z_ihc.slide_id + "')");
  if (z_he.z.rows() != z_ihc.z.rows())
    throw ShapeError("build_fused_bag: class count mismatch between modalities");
  if (z_he.z.cols() != spec.in_dim || z_ihc.z.cols() != spec.in_dim)
    throw ShapeError("build_fused_bag: embedding dim does not match pooling in_dim");

  const std::size_t n_cls = z_he.z.rows();
  FusedBag fused;
  fused.slide_id = z_he.slide_id;
  fused.label = label;
  fused.features = Matrix(n_cls, spec.out_dim * spec.out_dim);
  for (std::size_t n = 0; n < n_cls; ++n) {
    const auto ph = average_pool({z_he.z.row_ptr(n), spec.in_dim}, spec);
    const auto pi = average_pool({z_ihc.z.row_ptr(n), spec.in_dim}, spec);
    const auto kr = kronecker(ph, pi);
    double* dst = fused.features.row_ptr(n);
    std::copy(kr.begin(), kr.end(), dst);
    if (l2_normalize) {
      double sq = 0;
      for (double x : kr) sq += x * x;
      const double norm = std::sqrt(sq);
      if (norm > 0)
        for (std::size_t j = 0; j < kr.size(); ++j) dst[j] /= norm;
    }
  }
  return fused;
}

FeatureBag to_feature_bag(const FusedBag& fused) {
  FeatureBag bag;
  bag.slide_id = fused.slide_id;
  bag.modality = Modality::Fused;
  bag.features = fused.features;
  return bag;
}

}  // namespace milfuse
