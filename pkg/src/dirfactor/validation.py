"""Permutation testing, PSIS leave-one-out predictive checks and the
successive-conditional (prior reproduction) test of the sampler."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import softmax

from .design import CovariateMatrix
from .errors import DataError, DegenerateSampleError
from .model import Hyperparams, OtuTable, composition_from_state, multinomial_logpmf
from .sampler import SamplerConfig, draw_prior, gibbs_sweep, run_chain
from .summaries import rescaled_v

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- permutation test

@dataclass
class PermutationResult:
    covariate: str
    observed_norm: float
    null_norms: np.ndarray
    p_value: float
    seeds: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["kind", "index", "norm"])
            out.writerow(["observed", 0, repr(float(self.observed_norm))])
            for k, x in enumerate(self.null_norms):
                out.writerow(["null", k + 1, repr(float(x))])

    def to_dict(self):
        return {"covariate": self.covariate, "observed_norm": float(self.observed_norm),
                "p_value": float(self.p_value), "n_perm": int(len(self.null_norms))}


def permutation_p_value(observed, null):
    """(1 + #{null >= observed}) / (1 + n_perm)."""
    null = np.asarray(null, dtype=float)
    return (1.0 + np.sum(null >= observed)) / (1.0 + null.size)


def effect_norm(chain, covariates, l):
    """|| posterior mean of rescaled v restricted to covariate l's design rows ||."""
    rows = covariates.rows_for(l)
    if not rows:
        raise DataError(f"covariate {covariates.names[l]!r} has no main-effect design rows")
    acc = np.zeros((len(rows), chain.draws["v"].shape[2]))
    for state in chain:
        acc += rescaled_v(state)[rows]
    return float(np.linalg.norm(acc / len(chain)))


def _fit_norm(args):
    table, covariates, l, hyper, config, n_chains = args
    norms = []
    seeds = np.random.SeedSequence(config.seed).spawn(n_chains)
    chains = []
    for ss in seeds:
        cfg = replace(config, seed=int(ss.generate_state(1)[0]))
        chains.append(run_chain(table, covariates, hyper, cfg))
    from .sampler import Chain
    draws = {f: np.concatenate([c.draws[f] for c in chains]) for f in chains[0].draws}
    pooled = Chain(draws, config, hyper, chains[0].grouping, chains[0].data_fingerprint)
    norms.append(effect_norm(pooled, covariates, l))
    return norms[0]


def permutation_test(table, covariates, l, n_perm, fit_config=None, hyper=None,
                     seed=0, n_chains=1, n_jobs=1, persist_path=None):
    """Permutation test of the effect of raw covariate ``l``.

    Column ``l`` of the raw covariates is permuted across samples and the
    design re-expanded (interactions follow the permuted values).  Every fit
    gets its own seed spawned from ``seed``, so the result does not depend on
    ``n_jobs``.  With ``persist_path`` the norms are written after every fit;
    a failing fit re-raises after the partial results are on disk.
    """
    if n_perm < 0:
        raise DataError("n_perm must be >= 0")
    l = covariates.resolve(l)
    hyper = hyper or Hyperparams()
    fit_config = fit_config or SamplerConfig(n_iterations=20_000, burn_in=10_000, thin=10)
    children = np.random.SeedSequence(seed).spawn(n_perm + 2)
    perm_rng = np.random.default_rng(children[0])
    fit_seeds = [int(c.generate_state(1)[0]) for c in children[1:]]
    datasets = [covariates]
    for _ in range(n_perm):
        raw = covariates.raw.copy()
        raw[l] = raw[l, perm_rng.permutation(raw.shape[1])]
        datasets.append(covariates.with_raw(raw))
    tasks = [(table, cov, l, hyper, replace(fit_config, seed=s), n_chains)
             for cov, s in zip(datasets, fit_seeds)]

    norms = []

    def persist():
        if persist_path:
            with open(persist_path, "w", newline="") as fh:
                out = csv.writer(fh)
                out.writerow(["kind", "index", "norm"])
                for k, x in enumerate(norms):
                    out.writerow(["observed" if k == 0 else "null", k, repr(float(x))])

    try:
        if n_jobs == 1:
            for t in tasks:
                norms.append(_fit_norm(t))
                persist()
        else:
            with ProcessPoolExecutor(max_workers=n_jobs) as ex:
                for x in ex.map(_fit_norm, tasks):
                    norms.append(x)
                    persist()
    except Exception:
        persist()
        log.error("permutation test aborted after %d of %d fits", len(norms), len(tasks))
        raise
    null = np.asarray(norms[1:])
    return PermutationResult(covariates.names[l], norms[0], null,
                             permutation_p_value(norms[0], null), fit_seeds)


# ---------------------------------------------------------------- PSIS

def gpd_fit(x):
    """Generalized Pareto fit (location 0) by the Zhang-Stephens empirical Bayes
    estimator, with the shape shrunk toward 1/2 by a weak prior (10 pseudo-points).

    Returns (k, sigma) in the parametrization F(x) = 1 - (1 + k x / sigma)^(-1/k).
    """
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    m = 30 + int(n ** 0.5)
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1, dtype=float) - 0.5))
    b /= 3.0 * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-(b / k)) - k - 1.0)
    w = softmax(profile)
    keep = w >= 10 * np.finfo(float).eps
    w, b = w[keep], b[keep]
    w /= w.sum()
    b_post = np.sum(b * w)
    k_post = np.log1p(-b_post * x).mean()
    sigma = -k_post / b_post
    k_post = (n * k_post + 10 * 0.5) / (n + 10)
    return float(k_post), float(sigma)


def gpd_quantile(p, k, sigma):
    p = np.asarray(p, dtype=float)
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_weights):
    """Pareto-smooth importance log-weights.

    The largest M = ceil(min(S/5, 3 sqrt(S))) weights are replaced by the
    quantiles of a generalized Pareto fitted to their excess over the
    cutoff, capped at the largest raw weight.  Returns (smoothed log
    weights on the input's scale, k_hat).  Equal weights come back unchanged
    with k_hat = -inf.
    """
    lw = np.asarray(log_weights, dtype=float).copy()
    S = lw.size
    if S < 25:
        raise DataError("psis_smooth needs at least 25 weights")
    if not np.all(np.isfinite(lw)):
        raise DataError("log weights must be finite")
    top = lw.max()
    if np.all(lw == top):
        return lw, -np.inf
    x = lw - top
    order = np.argsort(x, kind="stable")
    M = int(np.ceil(min(S / 5.0, 3.0 * np.sqrt(S))))
    cutoff = max(x[order[-M - 1]], np.log(np.finfo(float).tiny))
    tail = order[x[order] > cutoff]
    if tail.size <= 4:
        return lw, np.inf
    excess = np.exp(x[tail]) - np.exp(cutoff)
    k, sigma = gpd_fit(excess)
    if np.isfinite(k) and sigma > 0:
        probs = (np.arange(tail.size) + 0.5) / tail.size
        smoothed = np.log(gpd_quantile(probs, k, sigma) + np.exp(cutoff))
        x[tail] = np.minimum(smoothed, 0.0)
    return x + top, k


def weighted_quantile(values, weights, q):
    """Quantiles of a weighted sample (inverse of the weighted ECDF).

    ``values`` is (S, ...) with draws on axis 0; returns (len(q), ...).
    """
    values = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    q = np.atleast_1d(np.asarray(q, dtype=float))
    order = np.argsort(values, axis=0, kind="stable")
    v_sorted = np.take_along_axis(values, order, axis=0)
    cw = np.cumsum(w[order], axis=0)
    out = np.empty((q.size,) + values.shape[1:])
    flat_cw = cw.reshape(cw.shape[0], -1)
    flat_v = v_sorted.reshape(v_sorted.shape[0], -1)
    res = out.reshape(q.size, -1)
    for c in range(flat_cw.shape[1]):
        idx = np.searchsorted(flat_cw[:, c], q - 1e-12, side="left")
        res[:, c] = flat_v[np.minimum(idx, flat_v.shape[0] - 1), c]
    return out


# ---------------------------------------------------------------- LOO

@dataclass
class LooSample:
    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray
    covered: np.ndarray
    k_hat: float
    unreliable: bool


@dataclass
class LooReport:
    """Leave-one-out predictive intervals for every (species, sample)."""

    level: float
    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray
    covered: np.ndarray
    k_hat: np.ndarray
    species_ids: list = None
    sample_ids: list = None

    @property
    def species_coverage(self):
        return self.covered.mean(axis=1)

    @property
    def mean_coverage(self):
        return float(self.covered.mean())

    @property
    def unreliable(self):
        return self.k_hat > 0.7

    def to_csv(self, path):
        I, J = self.lower.shape
        sp = self.species_ids or [f"species{i + 1}" for i in range(I)]
        sa = self.sample_ids or [f"sample{j + 1}" for j in range(J)]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["species", "sample", "observed", "lower", "upper", "covered",
                          "k_hat", "unreliable"])
            for j in range(J):
                for i in range(I):
                    out.writerow([sp[i], sa[j], repr(float(self.observed[i, j])),
                                  repr(float(self.lower[i, j])), repr(float(self.upper[i, j])),
                                  int(self.covered[i, j]), repr(float(self.k_hat[j])),
                                  int(self.k_hat[j] > 0.7)])

    def to_dict(self):
        return {"level": self.level, "mean_coverage": self.mean_coverage,
                "species_coverage": self.species_coverage.tolist(),
                "n_unreliable_samples": int(np.sum(self.unreliable))}


def _counts(table):
    return table.counts if isinstance(table, OtuTable) else np.asarray(table)


def loo_log_lik(chain, table, j):
    """Full multinomial log-likelihood of sample j under every draw -> (S,)."""
    counts = _counts(table)[:, j]
    sig = chain.draws["sigma"]
    q = np.maximum(chain.draws["Q"][:, :, j], 0.0)
    w = sig * q * q
    P = w / w.sum(axis=1, keepdims=True)
    return multinomial_logpmf(counts[:, None], P.T)


def loo_predictive(chain, table, j, level=0.95, rng=None):
    """Leave-one-out predictive interval for the relative abundances of sample j.

    Each posterior draw contributes its composition of sample j pushed
    through one multinomial draw at the observed depth; draws are weighted
    by the PSIS-smoothed reciprocal of sample j's likelihood.  ``level=1``
    gives the trivial interval [0, 1].
    """
    if not 0 < level <= 1:
        raise DataError("level must lie in (0, 1]")
    rng = np.random.default_rng(0) if rng is None else rng
    counts = _counts(table)
    depth = int(counts[:, j].sum())
    observed = counts[:, j] / depth
    ll = loo_log_lik(chain, table, j)
    S = ll.size
    if S >= 25:
        lw, k_hat = psis_smooth(-ll)
    else:
        lw, k_hat = -ll, np.inf
    w = np.exp(lw - lw.max())
    sig = chain.draws["sigma"]
    q = np.maximum(chain.draws["Q"][:, :, j], 0.0)
    P = sig * q * q
    P /= P.sum(axis=1, keepdims=True)
    rel = rng.multinomial(depth, P) / depth
    if level >= 1:
        lower, upper = np.zeros_like(observed), np.ones_like(observed)
    else:
        a = (1.0 - level) / 2.0
        lower, upper = weighted_quantile(rel, w, [a, 1.0 - a])
    covered = (observed >= lower) & (observed <= upper)
    return LooSample(lower, upper, observed, covered, float(k_hat), bool(k_hat > 0.7))


def loo_coverage(chain, table, level=0.95, rng=None):
    """Aggregate :func:`loo_predictive` over all samples."""
    rng = np.random.default_rng(0) if rng is None else rng
    counts = _counts(table)
    I, J = counts.shape
    lo, hi, obs, cov = (np.empty((I, J)) for _ in range(4))
    k = np.empty(J)
    for j in range(J):
        r = loo_predictive(chain, table, j, level, rng)
        lo[:, j], hi[:, j], obs[:, j], cov[:, j], k[j] = (
            r.lower, r.upper, r.observed, r.covered, r.k_hat)
    sp = table.species_ids if isinstance(table, OtuTable) else None
    sa = table.sample_ids if isinstance(table, OtuTable) else None
    return LooReport(level, lo, hi, obs, cov.astype(bool), k, sp, sa)


# ---------------------------------------------------------------- prior reproduction

FUNCTIONALS = ("sigma_1", "sigma_1^2", "Y_11", "tanh(Y_11^2)", "v_11", "v_11^2",
               "log_gamma_1", "log_gamma_1^2")


def _functionals(state):
    s = state.sigma[0]
    y = state.Y[0, 0]
    v = state.v[0, 0]
    g = np.log(state.gamma[0])
    return np.array([s, s * s, y, np.tanh(y * y), v, v * v, g, g * g])


def batch_means_se(x, n_batches=None):
    """Standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x, dtype=float)
    n = x.size
    b = n_batches or max(int(np.sqrt(n)), 2)
    size = n // b
    means = x[: b * size].reshape(b, size).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(b))


@dataclass
class PriorReproductionResult:
    names: tuple
    z: np.ndarray
    mcmc_mean: np.ndarray
    prior_mean: np.ndarray
    n_cycles: int
    negative_control: bool

    @property
    def max_abs_z(self):
        return float(np.max(np.abs(self.z)))

    def passed(self, threshold=4.0):
        return bool(self.max_abs_z < threshold)


def _nondegenerate_prior(dims, hyper, rng, grouping, design):
    while True:
        state = draw_prior(dims, hyper, rng, grouping, design)
        if np.all((state.Q > 0).any(axis=0)):
            return state


def _simulate_counts(state, depth, rng):
    P = composition_from_state(state.sigma, state.Q)
    return rng.multinomial(depth, P.T).T


def prior_reproduction_test(hyper=None, dims=None, n_cycles=50_000, seed=0,
                            negative_control=False, depth=10, n_prior=None, config=None):
    """Successive-conditional check of the Gibbs sweep.

    Alternates one sweep given the data with a fresh data draw given the
    parameters.  If every update targets its true conditional, the parameter
    marginals stay at the prior (restricted to states in which every sample
    has a positive score); they are compared with independent prior draws.
    With ``negative_control`` the sigma update uses a shape exponent off by one.
    """
    if n_cycles < 1:
        raise DataError("n_cycles must be positive")
    dims = dict({"I": 5, "J": 4, "K": 2, "L": 1}, **(dims or {}))
    I, J, K, L = dims["I"], dims["J"], dims["K"], dims["L"]
    hyper = hyper or Hyperparams(alpha=1.0, K=K)
    hyper = replace(hyper, K=K)
    hyper.check(I)
    config = config or SamplerConfig(n_iterations=1, burn_in=0, thin=1)
    rng = np.random.default_rng(seed)
    covariates = CovariateMatrix(rng.standard_normal((L, J)),
                                 [f"w{l + 1}" for l in range(L)])
    grouping = np.arange(J)
    full = {"I": I, "J": J, "K": K, "U": J, "P": covariates.n_design}
    state = _nondegenerate_prior(full, hyper, rng, grouping, covariates.design)
    counts = _simulate_counts(state, depth, rng)
    offset = 1.0 if negative_control else 0.0
    trace = np.empty((n_cycles, len(FUNCTIONALS)))
    for c in range(n_cycles):
        gibbs_sweep(state, counts, covariates, hyper, config, rng, sigma_shape_offset=offset)
        counts = _simulate_counts(state, depth, rng)
        trace[c] = _functionals(state)
    n_prior = n_prior or n_cycles
    direct = np.array([_functionals(_nondegenerate_prior(full, hyper, rng, grouping,
                                                         covariates.design))
                       for _ in range(n_prior)])
    m_mcmc = trace.mean(axis=0)
    m_prior = direct.mean(axis=0)
    se_mcmc = np.array([batch_means_se(trace[:, k]) for k in range(trace.shape[1])])
    se_prior = direct.std(axis=0, ddof=1) / np.sqrt(n_prior)
    z = (m_mcmc - m_prior) / np.sqrt(se_mcmc ** 2 + se_prior ** 2)
    return PriorReproductionResult(FUNCTIONALS, z, m_mcmc, m_prior, n_cycles,
                                   negative_control)
