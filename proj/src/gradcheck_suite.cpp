#include "milfuse/gradcheck_suite.hpp"

#include <cmath>
#include <map>

#include "milfuse/errors.hpp"
#include "milfuse/rng.hpp"

namespace milfuse {

GradCheckReport run_gradcheck(const GradCheckConfig& cfg) {
  if (cfg.num_configs < 1) throw ValidationError("gradcheck: num_configs must be >= 1");
  if (cfg.h <= 0) throw ValidationError("gradcheck: h must be > 0");

  GradCheckReport report;
  report.num_configs = cfg.num_configs;
  std::map<std::string, GradCheckReport::TensorStat> stats;

  constexpr std::size_t k_choices[] = {1, 2, 5, 17};
  constexpr std::size_t d_in_choices[] = {6, 10, 16};
  constexpr std::size_t d_hidden_choices[] = {8, 12};
  constexpr std::size_t d_attn_choices[] = {4, 6};
  constexpr double tau_choices[] = {0.5, 1.0, 2.0};

  for (int c = 0; c < cfg.num_configs; ++c) {
    const std::uint64_t config_seed = Rng::derive_seed(cfg.seed, "gradcheck." + std::to_string(c));
    Rng rng(config_seed);

    BranchDims dims;
    dims.d_in = d_in_choices[rng.below(3)];
    dims.d_hidden = d_hidden_choices[rng.below(2)];
    dims.d_attn = d_attn_choices[rng.below(2)];
    dims.num_classes = 2 + rng.below(3);
    const std::size_t k = k_choices[static_cast<std::size_t>(c) % 4];
    const int label = static_cast<int>(rng.below(dims.num_classes));

    LossConfig loss;
    loss.c1 = 0.3 + 0.7 * rng.uniform();
    loss.c2 = (c % 7 == 3) ? 0.0 : 0.2 + 0.8 * rng.uniform();
    loss.tau = tau_choices[rng.below(3)];
    loss.k_sample = 1 + rng.below(3);
    loss.patch_sum = (c % 5 == 2);

    FeatureBag bag;
    bag.slide_id = "gc";
    bag.features = Matrix(k, dims.d_in);
    for (std::size_t i = 0; i < bag.features.size(); ++i)
      bag.features.data()[i] = 1.2 * rng.normal();

    BranchParams params = init_params(dims, rng);

    const ForwardTrace base = forward(params, bag);
    const InstanceSelection sel = select_instances(base.attn, label, loss.k_sample);
    const BranchGrads analytic = backward(params, base, bag, label, sel, loss);

    auto loss_at = [&]() {
      const ForwardTrace tr = forward(params, bag);
      return total_loss(tr, params, label, sel, loss).total;
    };

    std::vector<std::pair<std::string, Matrix*>> p_tensors;
    visit_tensors(params,
                  [&](const std::string& n, Matrix& m) { p_tensors.emplace_back(n, &m); });
    std::vector<std::pair<std::string, const Matrix*>> g_tensors;
    visit_tensors(analytic, [&](const std::string& n, const Matrix& m) {
      g_tensors.emplace_back(n, &m);
    });

    for (std::size_t t = 0; t < p_tensors.size(); ++t) {
      Matrix& theta = *p_tensors[t].second;
      const Matrix& grad = *g_tensors[t].second;
      const std::string& name = p_tensors[t].first;
      auto& stat = stats[name];
      stat.name = name;
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double orig = theta.data()[i];
        theta.data()[i] = orig + cfg.h;
        const double up = loss_at();
        theta.data()[i] = orig - cfg.h;
        const double down = loss_at();
        theta.data()[i] = orig;
        const double fd = (up - down) / (2.0 * cfg.h);
        const double a = grad.data()[i];
        const double rel = std::abs(a - fd) / std::max(1e-5, std::abs(a) + std::abs(fd));
        if (rel > stat.max_rel_err) {
          stat.max_rel_err = rel;
          stat.config = c;
        }
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_tensor = name;
          report.worst_config = c;
          report.worst_config_seed = config_seed;
        }
      }
    }
  }

  for (auto& [name, stat] : stats) report.tensors.push_back(stat);
  return report;
}

}  // namespace milfuse
