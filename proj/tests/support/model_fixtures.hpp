#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "deformpic/dataset.hpp"
#include "deformpic/geometry.hpp"
#include "deformpic/model.hpp"
#include "deformpic/rng.hpp"

namespace deformpic::testing {

/// One patched record of the given task and level.
inline geometry::JointPatches make_patches(Task task, int level, std::uint64_t seed, int n_points = 256,
                                           std::size_t m = 16, std::size_t k = 8) {
  dataset::DatasetConfig cfg;
  cfg.samples_per_cell = 1;
  cfg.n_points = n_points;
  cfg.seed = seed;
  cfg.tasks = {task};
  cfg.levels = {level};
  return geometry::joint_sample(dataset::generate_record(cfg, 0), m, k);
}

/// Adds uniform noise to every parameter so zero-initialised paths carry signal.
template <typename T>
void perturb_params(model::ParameterSet<T>& params, std::uint64_t seed, double amplitude = 0.05) {
  Rng rng(seed);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (T& v : params[i].value.mutable_data()) v += static_cast<T>(rng.uniform(-amplitude, amplitude));
}

/// Central-difference check of the forward loss on a random `fraction` of all
/// parameter entries: max|a - n| / max(max|n|, 1e-8) over the sample.
inline double sampled_param_gradcheck(const model::Model<double>& net, model::ParameterSet<double>& params,
                                      const geometry::JointPatches& jp, Task task, double fraction,
                                      std::uint64_t seed, double step = 1e-4) {
  const model::ForwardOptions opt;
  std::vector<std::vector<double>> analytic;
  {
    auto p = params.views();
    auto r = net.forward(jp, task, p, opt);
    r.loss.backward();
    for (const auto& v : p) {
      std::vector<double> g(v.numel(), 0.0);
      if (v.has_grad()) std::copy(v.grad().begin(), v.grad().end(), g.begin());
      analytic.push_back(std::move(g));
    }
  }
  auto loss_at = [&] {
    NoGradGuard guard;
    return net.forward(jp, task, params.views(), opt).loss.item();
  };
  Rng rng(seed);
  double max_num = 0.0, max_diff = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].value.mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (rng.uniform() >= fraction) continue;
      const double saved = values[j];
      values[j] = saved + step;
      const double fp = loss_at();
      values[j] = saved - step;
      const double fm = loss_at();
      values[j] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      max_num = std::max(max_num, std::abs(numeric));
      max_diff = std::max(max_diff, std::abs(numeric - analytic[i][j]));
    }
  }
  return max_diff / std::max(max_num, 1e-8);
}

}  // namespace deformpic::testing
