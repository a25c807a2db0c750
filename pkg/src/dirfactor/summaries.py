"""Identifiable summaries and covariate-effect quantities.

Counterfactual compositions replace the design column of a sample by f(w0)
and keep its latent factor and residual term:

    Q_ij(w0) = <X_i, Y_{u_j}> + <v_i, f(w0)> + eps_ij.

The residual ``eps`` is resolved the same way everywhere: an explicit
``eps`` argument wins, otherwise a fresh standard-normal draw when ``rng`` is
given, otherwise the state's own residual Q - E[Q] (which reproduces the
state's composition at the observed covariates).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CovariateError, DataError, DegenerateSampleError
from .model import composition_from_state


def trace_sigma(state):
    """trace(Y^T Y + I) over samples: J + sum_j ||Y_{u_j}||^2."""
    norms = np.sum(state.Y ** 2, axis=0)
    return state.grouping.size + float(np.sum(norms[state.grouping]))


def rescaled_v(state):
    """v / sqrt(trace(Sigma)), the scale-identified regression coefficients."""
    return state.v / np.sqrt(trace_sigma(state))


def _correlation(M):
    d = np.sqrt(np.diag(M))
    S = M / np.outer(d, d)
    np.fill_diagonal(S, 1.0)
    return np.clip(S, -1.0, 1.0)


def sample_correlation(state, level="individuals"):
    """Correlation matrix of Sigma = Y^T Y + I.

    ``level="individuals"`` gives U x U; ``"samples"`` expands through the
    grouping to J x J.
    """
    Y = state.Y if level == "individuals" else state.Y[:, state.grouping]
    if level not in ("individuals", "samples"):
        raise ValueError("level must be 'individuals' or 'samples'")
    return _correlation(Y.T @ Y + np.eye(Y.shape[1]))


def species_gram(state, which="X"):
    """Cosine-similarity matrix of the species vectors X_i or v_i (I x I).

    A zero-norm column has zero similarity with every other species (its
    diagonal entry stays 1); a RuntimeWarning names the offending species.
    """
    if which not in ("X", "v"):
        raise ValueError("which must be 'X' or 'v'")
    A = np.asarray(getattr(state, which), dtype=float)
    norms = np.linalg.norm(A, axis=0)
    zero = norms == 0
    if np.any(zero):
        warnings.warn(f"zero-norm {which} column(s) for species "
                      f"{np.flatnonzero(zero).tolist()}; similarities set to 0",
                      RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    B = A / safe
    S = B.T @ B
    np.fill_diagonal(S, 1.0)
    return np.clip(S, -1.0, 1.0)


def rv_coefficient(A, B):
    """tr(AB) / sqrt(tr(AA) tr(BB)) for symmetric PSD matrices."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("rv_coefficient needs two square matrices of equal size")
    aa, bb = np.sum(A * A.T), np.sum(B * B.T)
    if aa == 0 or bb == 0:
        raise ValueError("rv_coefficient is undefined for a zero matrix")
    return float(np.sum(A * B.T) / np.sqrt(aa * bb))


# ---------------------------------------------------------------- counterfactuals

def _resolve_eps(state, design, j, rng, eps):
    if eps is not None:
        return np.asarray(eps, dtype=float)
    if rng is not None:
        return rng.standard_normal(state.Q.shape[0])
    mean = state.X.T @ state.Y[:, state.grouping[j]] + state.v.T @ design[:, j]
    return state.Q[:, j] - mean


def _raw_point(covariates, j, w0):
    if w0 is None:
        return covariates.raw[:, j].copy()
    if isinstance(w0, dict):
        out = covariates.raw[:, j].copy()
        for k, val in w0.items():
            out[covariates.resolve(k)] = val
        return out
    return np.asarray(w0, dtype=float).reshape(-1)


def composition_at(state, covariates, j, w0=None, rng=None, eps=None):
    """Composition of sample ``j`` had its raw covariates been ``w0``.

    ``w0`` is a raw covariate vector (length L), a mapping of covariate
    name/index to value (others stay at sample j's values) or None (observed).
    """
    f0 = covariates.expand_point(_raw_point(covariates, j, w0))
    e = _resolve_eps(state, covariates.design, j, rng, eps)
    q = state.X.T @ state.Y[:, state.grouping[j]] + state.v.T @ f0 + e
    return composition_from_state(state.sigma, q)


def derivative(state, covariates, j, l, rng=None, eps=None):
    """dP^j / dw_{l,j}: quotient rule through the design expansion."""
    l = covariates.resolve(l)
    raw = covariates.raw[:, [j]]
    e = _resolve_eps(state, covariates.design, j, rng, eps)
    f = covariates.expand(raw)[:, 0]
    df = covariates.jacobian(raw, l)[:, 0]
    q = state.X.T @ state.Y[:, state.grouping[j]] + state.v.T @ f + e
    g = state.v.T @ df
    qp = np.maximum(q, 0.0)
    w = state.sigma * qp * qp
    D = w.sum()
    if D <= 0:
        raise DegenerateSampleError(f"all latent scores are nonpositive in sample {j}")
    dw = 2.0 * state.sigma * qp * g
    return (dw * D - w * dw.sum()) / (D * D)


def discrete_difference(state, covariates, j, l, rng=None, eps=None):
    """P^j(w_l = 1) - P^j(w_l = 0) for a binary covariate, sharing eps."""
    l = covariates.resolve(l)
    if not covariates.is_binary(l):
        raise CovariateError(f"covariate {covariates.names[l]!r} is not binary (0/1)")
    e = _resolve_eps(state, covariates.design, j, rng, eps)
    hi = composition_at(state, covariates, j, {l: 1.0}, eps=e)
    lo = composition_at(state, covariates, j, {l: 0.0}, eps=e)
    return hi - lo


def _population_matrix(state, covariates, F0, eps):
    """Average composition over samples for each design column of F0 (P x G) -> G x I.

    Samples whose scores are all nonpositive at a grid point have no
    composition there and are left out of that grid point's average.
    """
    base = state.X.T @ state.Y[:, state.grouping] + eps            # I x J
    shift = state.v.T @ F0                                         # I x G
    Q = base[None, :, :] + shift.T[:, :, None]                     # G x I x J
    qp = np.maximum(Q, 0.0)
    w = state.sigma[None, :, None] * qp * qp
    total = w.sum(axis=1, keepdims=True)                           # G x 1 x J
    ok = total > 0
    n_ok = ok.sum(axis=2)
    if np.any(n_ok == 0):
        raise DegenerateSampleError("all latent scores are nonpositive in every sample")
    P = np.where(ok, w / np.where(ok, total, 1.0), 0.0)
    return P.sum(axis=2) / n_ok


def population_average(state, covariates, w0, rng=None, eps=None):
    """J^-1 sum_j P^j(w0): every sample evaluated at the same raw covariates."""
    f0 = covariates.expand_point(np.asarray(w0, dtype=float))
    if eps is None:
        eps = (rng.standard_normal(state.Q.shape) if rng is not None
               else state.residual(covariates.design))
    return _population_matrix(state, covariates, f0[:, None], eps)[0]


@dataclass
class TrendGrid:
    """Posterior population trends of every species along one covariate.

    ``draws`` has shape (n_draws, n_grid, I); ``mean``, ``lower`` and
    ``upper`` have shape (n_grid, I).
    """

    covariate: str
    grid: np.ndarray
    fixed: np.ndarray
    level: float
    draws: np.ndarray
    species_ids: list = field(default=None)

    def __post_init__(self):
        self.mean = self.draws.mean(axis=0)
        self.lower, self.upper = self.band(self.level)

    def band(self, level):
        a = (1.0 - level) / 2.0
        lo, hi = np.quantile(self.draws, [a, 1.0 - a], axis=0)
        return lo, hi

    def to_csv(self, path):
        ids = self.species_ids or [f"species{i + 1}" for i in range(self.mean.shape[1])]
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["species", "grid_value", "mean", "lower", "upper"])
            for i, sid in enumerate(ids):
                for g, x in enumerate(self.grid):
                    out.writerow([sid, repr(float(x)), repr(float(self.mean[g, i])),
                                  repr(float(self.lower[g, i])), repr(float(self.upper[g, i]))])

    def to_dict(self):
        return {"covariate": self.covariate, "grid": self.grid.tolist(),
                "fixed": self.fixed.tolist(), "level": self.level,
                "n_draws": int(self.draws.shape[0])}


def _fixed_vector(covariates, l, fixed):
    if fixed is None:
        return covariates.raw.mean(axis=1)
    if isinstance(fixed, dict):
        out = covariates.raw.mean(axis=1)
        for k, val in fixed.items():
            out[covariates.resolve(k)] = val
        return out
    out = np.asarray(fixed, dtype=float).reshape(-1).copy()
    if out.size != len(covariates.names):
        raise DataError(f"fixed covariate vector needs {len(covariates.names)} entries")
    return out


def trend_design(covariates, l, grid, fixed=None):
    """Raw (L x G) and expanded (P x G) covariates along the grid of covariate l."""
    l = covariates.resolve(l)
    w0 = _fixed_vector(covariates, l, fixed)
    raw = np.repeat(w0[:, None], len(grid), axis=1)
    raw[l] = grid
    return raw, covariates.expand(raw)


def population_trend(chain, covariates, l, grid, fixed=None, level=0.95, rng=None,
                     species_ids=None):
    """Population average along ``grid`` for covariate ``l`` across posterior draws.

    Each posterior draw gets one eps matrix (fresh if ``rng`` is given,
    otherwise its own residuals), shared across grid points.
    """
    if len(chain) == 0:
        raise DataError("population_trend needs a nonempty chain")
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise DataError("grid must be sorted")
    l = covariates.resolve(l)
    raw, F0 = trend_design(covariates, l, grid, fixed)
    out = np.empty((len(chain), grid.size, chain.draws["sigma"].shape[1]))
    for k, state in enumerate(chain):
        eps = (rng.standard_normal(state.Q.shape) if rng is not None
               else state.residual(covariates.design))
        out[k] = _population_matrix(state, covariates, F0, eps)
    return TrendGrid(covariates.names[l], grid, raw[:, 0].copy(), level, out, species_ids)


def truth_trend(state, covariates, l, grid, fixed=None, n_mc=1000, rng=None):
    """Generating trend: the population average at a fixed state, averaged over eps draws."""
    rng = np.random.default_rng(0) if rng is None else rng
    raw, F0 = trend_design(covariates, covariates.resolve(l), np.asarray(grid, float), fixed)
    acc = np.zeros((F0.shape[1], state.Q.shape[0]))
    for _ in range(n_mc):
        acc += _population_matrix(state, covariates, F0, rng.standard_normal(state.Q.shape))
    return acc / n_mc


def sample_differences(chain, covariates, l, rng=None):
    """Discrete differences for every draw and sample -> (n_draws, J, I)."""
    l = covariates.resolve(l)
    J = covariates.n_samples
    out = np.empty((len(chain), J, chain.draws["sigma"].shape[1]))
    for k, state in enumerate(chain):
        for j in range(J):
            out[k, j] = discrete_difference(state, covariates, j, l, rng=rng)
    return out


def sample_derivatives(chain, covariates, l, rng=None):
    """Derivatives for every draw and sample -> (n_draws, J, I)."""
    l = covariates.resolve(l)
    J = covariates.n_samples
    out = np.empty((len(chain), J, chain.draws["sigma"].shape[1]))
    for k, state in enumerate(chain):
        for j in range(J):
            out[k, j] = derivative(state, covariates, j, l, rng=rng)
    return out


def age_group_average(differences, values, boundaries):
    """Average per-sample differences within consecutive groups of ``values``.

    ``boundaries`` are the group edges b_0 < ... < b_G; sample j belongs to
    group g when b_g <= values[j] < b_{g+1} (the last group is closed).
    Returns (n_draws, G, I).
    """
    differences = np.asarray(differences, dtype=float)
    values = np.asarray(values, dtype=float)
    b = np.asarray(boundaries, dtype=float)
    if b.ndim != 1 or b.size < 2 or np.any(np.diff(b) <= 0):
        raise DataError("boundaries must be strictly increasing with at least two edges")
    groups = np.searchsorted(b, values, side="right") - 1
    groups[values == b[-1]] = b.size - 2
    member = (groups >= 0) & (groups < b.size - 1)
    if not np.all(member):
        raise DataError(f"{np.sum(~member)} sample(s) fall outside the group boundaries")
    counts = np.bincount(groups, minlength=b.size - 1)
    assert counts.sum() == values.size, "groups must partition the samples"
    if np.any(counts == 0):
        raise DataError(f"empty group(s) {np.flatnonzero(counts == 0).tolist()}")
    out = np.stack([differences[:, groups == g].mean(axis=1) for g in range(b.size - 1)],
                   axis=1)
    return out


def lowess_smooth(x, y, frac=2.0 / 3.0):
    """LOWESS fit of y on x evaluated at x (input order kept)."""
    from statsmodels.nonparametric.smoothers_lowess import lowess

    return lowess(np.asarray(y, float), np.asarray(x, float), frac=frac,
                  return_sorted=False)


def posterior_mean(chain, fn):
    """Average of ``fn(state)`` over the chain's draws."""
    acc = None
    for state in chain:
        val = np.asarray(fn(state), dtype=float)
        acc = val.copy() if acc is None else acc + val
    if acc is None:
        raise DataError("empty chain")
    return acc / len(chain)


def write_matrix_csv(path, M, labels=None):
    """Square matrix in long format: row, col, value."""
    n = M.shape[0]
    labels = labels or [str(k + 1) for k in range(n)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["row", "col", "value"])
        for a in range(n):
            for b in range(n):
                out.writerow([labels[a], labels[b], repr(float(M[a, b]))])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
