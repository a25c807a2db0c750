"""Population trends along a continuous covariate, with pointwise bands.

For every posterior draw, each sample's latent score is moved to a common
covariate value with a fresh residual, the compositions are averaged over
samples, and this is repeated along a grid.  The resulting curves are compared
with the generating trend.  Writes trend_w1.csv next to the script's cwd.

    python3 demos/02_population_trends.py [n_iterations]
"""

import sys

import numpy as np

from dirfactor import Hyperparams, SamplerConfig, preset_spec, run_chain, simulate_dataset
from dirfactor.summaries import population_trend, truth_trend

n_iter = int(sys.argv[1]) if len(sys.argv) > 1 else 6000
data = simulate_dataset(preset_spec("desk", seed=1))
chain = run_chain(data.table, data.covariates, Hyperparams(K=4),
                  SamplerConfig(n_iterations=n_iter, burn_in=n_iter // 2, thin=10, seed=1))

grid = np.linspace(-2, 2, 20)
rng = np.random.default_rng(2)
trend = population_trend(chain, data.covariates, "w1", grid, {"w2": 0.0}, 0.95, rng,
                         data.table.species_ids)
true = truth_trend(data.truth, data.covariates, "w1", grid, {"w2": 0.0}, n_mc=300, rng=rng)

inside = (true >= trend.lower) & (true <= trend.upper)
print(f"band coverage of the generating trend: {inside.mean():.2f}")

# the species with the steepest generating trend
i = int(np.argmax(np.abs(true[-1] - true[0])))
print(f"{data.table.species_ids[i]}: w1   true    mean   [lower, upper]")
for g in range(0, grid.size, 4):
    print(f"   {grid[g]:5.2f}  {true[g, i]:.4f}  {trend.mean[g, i]:.4f}  "
          f"[{trend.lower[g, i]:.4f}, {trend.upper[g, i]:.4f}]")
trend.to_csv("trend_w1.csv")
