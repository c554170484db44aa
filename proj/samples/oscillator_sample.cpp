// Fits constrained and unconstrained GPs to one noisy harmonic oscillator
// trajectory and prints how far each prediction strays from constant energy.

#include "sumgp/sumgp.hpp"

#include <cstdio>

int main() {
  using namespace sumgp;
  for (ModelKind model : {ModelKind::Constrained, ModelKind::Unconstrained}) {
    ExperimentConfig cfg = default_config(ExperimentKind::HO, model);
    cfg.replicates = 1;
    cfg.seed = 7;
    const ReplicateResult r = run_replicate(cfg, 0);
    if (!r.ok) {
      std::printf("%s: failed (%s)\n", to_string(model).c_str(), r.error.c_str());
      continue;
    }
    std::printf("%-14s RMSE %.4f  mean |energy - 0.8| %.2e  (%zu virtual points)\n", to_string(model).c_str(), r.metrics.rmse,
                r.metrics.abs_dC, r.curves.virtual_points.size());
  }
  return 0;
}
