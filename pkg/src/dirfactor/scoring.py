"""Recovery metrics against a known generating state."""

from __future__ import annotations

import numpy as np

from .summaries import (population_trend, posterior_mean, rescaled_v, rv_coefficient,
                        sample_correlation, truth_trend)


def score_chain(chain, truth, covariates=None, covariate=None, grid=None, fixed=None,
                level=0.95, n_mc=200, rng=None):
    """RV of S, MSE and sign agreement of rescaled v, and optionally trend RMSE/coverage.

    Sign agreement is computed over the nonzero entries of the generating v.
    Trend metrics compare the posterior population trend (fresh residuals)
    with the generating state's trend averaged over ``n_mc`` residual draws.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    S_hat = posterior_mean(chain, sample_correlation)
    S_true = sample_correlation(truth)
    v_hat = posterior_mean(chain, rescaled_v)
    v_true = rescaled_v(truth)
    err = (v_hat - v_true) ** 2
    active = truth.v != 0
    out = {
        "rv_S": rv_coefficient(S_hat, S_true),
        "mse_rescaled_v": float(err.mean()),
        "mse_rescaled_v_per_species": err.mean(axis=0).tolist(),
        "max_species_mse": float(err.mean(axis=0).max()),
        "sign_agreement_active": (float(np.mean(np.sign(v_hat[active]) == np.sign(v_true[active])))
                                  if active.any() else float("nan")),
        "n_draws": len(chain),
    }
    if covariate is not None and covariates is not None:
        grid = np.linspace(-2, 2, 20) if grid is None else np.asarray(grid, float)
        trend = population_trend(chain, covariates, covariate, grid, fixed, level, rng)
        true = truth_trend(truth, covariates, covariate, grid, fixed, n_mc, rng)
        inside = (true >= trend.lower) & (true <= trend.upper)
        out.update({
            "trend_covariate": trend.covariate,
            "trend_rmse": float(np.sqrt(np.mean((trend.mean - true) ** 2))),
            "trend_coverage": float(inside.mean()),
            "trend_level": level,
        })
    return out
