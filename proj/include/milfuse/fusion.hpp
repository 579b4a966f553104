#pragma once

#include <span>
#include <vector>

#include "milfuse/feature_store.hpp"
#include "milfuse/mil_branch.hpp"

namespace milfuse {

/// Non-overlapping mean pooling, in_dim -> out_dim (in_dim must divide evenly).
struct PoolingSpec {
  std::size_t in_dim = 512;
  std::size_t out_dim = 32;

  std::size_t window() const;  // validates divisibility
};

std::vector<double> average_pool(std::span<const double> z, const PoolingSpec& spec);

/// out[i*p + j] = a[i] * b[j]
std::vector<double> kronecker(std::span<const double> a, std::span<const double> b);

/// Per-class bilinear fusion: row n of the result is
/// kronecker(average_pool(z_he row n), average_pool(z_ihc row n)), giving a
/// num_classes x out_dim^2 matrix consumed downstream as a bag of
/// num_classes instances.
struct FusedBag {
  std::string slide_id;
  int label = 0;
  Matrix features;  // num_classes x out_dim^2
};

FusedBag build_fused_bag(const BagEmbeddings& z_he, const BagEmbeddings& z_ihc, int label,
                         const PoolingSpec& spec, bool l2_normalize = false);

FeatureBag to_feature_bag(const FusedBag& fused);

}  // namespace milfuse
