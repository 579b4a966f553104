#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "milfuse/mil_branch.hpp"

namespace milfuse {

struct GradCheckConfig {
  int num_configs = 100;
  std::uint64_t seed = 1;
  double h = 1e-5;
  double tolerance = 1e-4;
};

struct GradCheckReport {
  struct TensorStat {
    std::string name;
    double max_rel_err = 0;
    int config = -1;  // configuration where the max occurred
  };
  std::vector<TensorStat> tensors;
  double max_rel_err = 0;
  std::string worst_tensor;
  int worst_config = -1;
  std::uint64_t worst_config_seed = 0;
  int num_configs = 0;

  bool passed(double tolerance) const { return max_rel_err <= tolerance; }
};

/// Compares backward() against central finite differences of the total loss
/// over randomized small configurations (K in {1,2,5,17}, N in {2,3,4},
/// reduced dims). The instance selection is frozen at the base point on both
/// sides, matching backward's piecewise-constant treatment of the top-k
/// indices. Relative error per element: |a-f| / max(1e-5, |a|+|f|).
GradCheckReport run_gradcheck(const GradCheckConfig& cfg);

}  // namespace milfuse
