"""Independent oracles shared by the unit and acceptance tests."""

import numpy as np
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from dirfactor.model import LatentState


def moment_z(draws, mean, var):
    """z-scores of the sample mean and variance against closed forms (per column)."""
    x = np.asarray(draws, float)
    n = x.shape[0]
    m = x.mean(axis=0)
    v = x.var(axis=0)
    m4 = ((x - m) ** 4).mean(axis=0)
    z_mean = (m - mean) / np.sqrt(v / n)
    z_var = (v - var) / np.sqrt(np.maximum(m4 - v * v, 1e-300) / n)
    return np.abs(z_mean), np.abs(z_var)


def grid_cdf(logdens, lo, hi, n=10_000, window=40.0):
    """CDF of an unnormalized log density, normalized on an ``n``-point grid.

    A coarse pass locates the region within ``window`` log-units of the
    maximum; the returned CDF is built on ``n`` points spanning it.
    """
    coarse = np.linspace(lo, hi, 200_001)
    ld = logdens(coarse)
    keep = np.flatnonzero(ld > np.max(ld) - window)
    step = coarse[1] - coarse[0]
    a = max(lo, coarse[keep[0]] - step)
    b = min(hi, coarse[keep[-1]] + step)
    x = np.linspace(a, b, n)
    ld = logdens(x)
    d = np.exp(ld - np.max(ld[np.isfinite(ld)]))
    d[~np.isfinite(d)] = 0.0
    c = cumulative_trapezoid(d, x, initial=0.0)
    c /= c[-1]

    def cdf(q):
        return np.interp(q, x, c, left=0.0, right=1.0)

    return cdf


def ks_pvalue(samples, cdf):
    return stats.kstest(np.asarray(samples, float), cdf).pvalue


def replicate_state(I, J, K=1, P=1, sigma=0.3, q=1.0, T=1.0, seed=0):
    """State with identical species/samples, so one sweep yields many iid draws."""
    rng = np.random.default_rng(seed)
    return LatentState(sigma=np.full(I, sigma), X=rng.normal(size=(K, I)),
                       Y=rng.normal(size=(K, J)), v=rng.normal(size=(P, I)),
                       Q=np.full((I, J), q), T=np.full(J, T), delta=np.ones(K))
