"""Data-augmented Gibbs sampler.

One sweep updates, in order: the augmentation variables T, the species
weights sigma, the latent scores Q, the species vectors X, the individual
factors Y, the regression coefficients v and the shrinkage increments delta.

Full conditionals
-----------------
With D_j = sum_i sigma_i (Q_ij)_+^2 and counts n_ij (depth n_j):

* T_j ~ Gamma(shape n_j, rate D_j).
* sigma_i has density proportional to
  sigma^(alpha/I - 1 + sum_j n_ij) (1 - sigma)^(-1/2 - alpha/I)
  exp(-sigma sum_j T_j (Q_ij)_+^2) on (0, 1): the Beta(alpha/I, 1/2 - alpha/I)
  prior times the sigma-dependent factors of the augmented likelihood.  It is
  slice sampled on the log scale.
* Q_ij has density proportional to
  (Q)_+^(2 n_ij) exp(-T_j sigma_i (Q)_+^2) exp(-(Q - mu_ij)^2 / 2).
  For n_ij = 0 this is a two-piece Gaussian (untilted on Q <= 0, precision
  1 + 2 T_j sigma_i on Q > 0) and is drawn exactly; for n_ij > 0 the support
  is Q > 0 and the log-concave density is slice sampled.
* X_i, Y_u, v_i are Gaussian linear-model posteriors with unit residual
  variance; Y_u pools all samples of individual u.
* delta_h (multiplicative gamma process) are conditionally Gamma.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import log_ndtr, ndtri_exp

from .design import CovariateMatrix
from .errors import DataError, DegenerateSampleError, NumericalError
from .model import Hyperparams, LatentState, OtuTable, q_mean
from .slice import slice_sample

log = logging.getLogger(__name__)

# floor on log(sigma); truncates a prior tail of mass ~ exp(-700 alpha/I)
LOG_SIGMA_MIN = -700.0


@dataclass
class SamplerConfig:
    """Chain length, slice tuning and initialization.

    ``slice_width`` and ``sigma_slice_width`` are expressed in units of a
    local scale computed from the conditioning variables (a Laplace-type
    standard deviation), so the same value works across read depths.
    """

    n_iterations: int = 100_000
    burn_in: int = 60_000
    thin: int = 10
    slice_width: float = 3.0
    sigma_slice_width: float = 3.0
    slice_max_steps: int = 500
    init_strategy: str = "prior-draw"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_iterations < 1:
            raise DataError("n_iterations must be positive")
        if not 0 <= self.burn_in < self.n_iterations:
            raise DataError("burn_in must satisfy 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise DataError("thin must be >= 1")
        if self.init_strategy not in ("prior-draw", "data-informed"):
            raise DataError(f"unknown init_strategy {self.init_strategy!r}")
        if self.slice_width <= 0 or self.sigma_slice_width <= 0:
            raise DataError("slice widths must be positive")

    @property
    def n_draws(self):
        return (self.n_iterations - self.burn_in) // self.thin

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _design(covariates):
    if isinstance(covariates, CovariateMatrix):
        return covariates.design
    return np.atleast_2d(np.asarray(covariates, dtype=float))


def _counts(table):
    return table.counts if isinstance(table, OtuTable) else np.asarray(table)


def _positive_weights(state):
    qp = np.maximum(state.Q, 0.0)
    return state.sigma[:, None] * qp * qp


# ---------------------------------------------------------------- conditionals

def sample_T(state, table, rng):
    """T_j ~ Gamma(n_j, rate D_j) independently over samples."""
    depths = _counts(table).sum(axis=0)
    D = _positive_weights(state).sum(axis=0)
    if np.any(D <= 0):
        raise DegenerateSampleError(
            f"zero denominator in sample(s) {np.flatnonzero(D <= 0)[:10].tolist()}")
    if np.any(depths <= 0):
        raise DataError("every sample needs a positive read depth")
    T = rng.gamma(depths, 1.0 / D)
    state.T = np.maximum(T, np.finfo(float).tiny)
    return state.T


def sigma_log_density(log_sigma, shape, tilt, b_exp):
    """Log density of log(sigma) (Jacobian included), up to a constant.

    shape = alpha/I + sum_j n_ij (+ offset), tilt = sum_j T_j (Q_ij)_+^2,
    b_exp = -1/2 - alpha/I.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * log_sigma + b_exp * np.log(-np.expm1(log_sigma)) - tilt * np.exp(log_sigma)
    return np.where(log_sigma < 0, out, -np.inf)


def sample_sigma(state, table, hyper, rng, width=3.0, max_steps=500, shape_offset=0.0):
    """Slice-sample each sigma_i from its full conditional (on the log scale).

    ``shape_offset`` shifts the sigma exponent; it exists only to build a
    deliberately wrong kernel for sampler-validation negative controls.
    """
    counts = _counts(table)
    I = counts.shape[0]
    a = hyper.alpha / I
    shape = a + counts.sum(axis=1) + shape_offset
    qp = np.maximum(state.Q, 0.0)
    tilt = (qp * qp) @ state.T
    b_exp = -0.5 - a
    if not (np.all(np.isfinite(shape)) and np.all(np.isfinite(tilt))):
        raise NumericalError("non-finite sigma conditional parameters")
    # sd of log(sigma) under the Gamma(shape, tilt) approximation
    scale = 1.0 / np.sqrt(np.maximum(shape, a))
    x0 = np.clip(np.log(state.sigma), LOG_SIGMA_MIN, np.log(np.nextafter(1.0, 0.0)))

    def logdens(x, idx):
        return sigma_log_density(x, shape[idx], tilt[idx], b_exp)

    x1 = slice_sample(x0, logdens, width * scale, rng, lower=LOG_SIGMA_MIN,
                      upper=0.0, max_steps=max_steps, name="sigma")
    state.sigma = np.clip(np.exp(x1), np.exp(LOG_SIGMA_MIN), np.nextafter(1.0, 0.0))
    return state.sigma


def q_log_density(q, n, tilt, mu):
    """Log density of Q_ij given the rest (n = n_ij, tilt = T_j sigma_i)."""
    qp = np.maximum(q, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(n > 0, 2.0 * n * np.log(qp), 0.0)
    out = out - tilt * qp * qp - 0.5 * (q - mu) ** 2
    return np.where((n > 0) & (q <= 0), -np.inf, out)


def _draw_q_untilted_zero(mu, tilt, rng):
    """Exact draw for cells with n_ij = 0: two truncated-Gaussian pieces."""
    a = 1.0 + 2.0 * tilt
    log_left = log_ndtr(-mu)
    root_a = np.sqrt(a)
    log_right = 0.5 * mu * mu * (1.0 / a - 1.0) - np.log(root_a) + log_ndtr(mu / root_a)
    p_right = np.exp(log_right - np.logaddexp(log_left, log_right))
    go_right = rng.random(mu.size) < p_right
    log_u = np.log1p(-rng.random(mu.size))
    q = np.empty_like(mu)
    left = ~go_right
    q[left] = np.minimum(mu[left] + ndtri_exp(log_u[left] + log_left[left]), 0.0)
    m = mu[go_right] / a[go_right]
    s = 1.0 / root_a[go_right]
    q[go_right] = np.maximum(
        m - s * ndtri_exp(log_u[go_right] + log_ndtr(m / s)), 0.0)
    return q


def sample_Q(state, table, covariates, rng, width=3.0, max_steps=500):
    """Redraw every Q_ij from its univariate full conditional."""
    counts = _counts(table)
    mu = q_mean(state.X, state.Y, state.v, _design(covariates), state.grouping)
    tilt = state.sigma[:, None] * state.T[None, :]
    Q = state.Q
    zero = counts == 0
    Q[zero] = _draw_q_untilted_zero(mu[zero], tilt[zero], rng)

    pos = ~zero
    n = counts[pos].astype(float)
    m, t = mu[pos], tilt[pos]
    a = 1.0 + 2.0 * t
    mode = (m + np.sqrt(m * m + 8.0 * a * n)) / (2.0 * a)
    scale = 1.0 / np.sqrt(2.0 * n / (mode * mode) + a)
    x0 = Q[pos]
    x0 = np.where(x0 > 0, x0, mode)

    def logdens(x, idx):
        return q_log_density(x, n[idx], t[idx], m[idx])

    Q[pos] = slice_sample(x0, logdens, width * scale, rng, lower=0.0,
                          max_steps=max_steps, name="Q")
    state.Q = Q
    return Q


def gaussian_moments(precision, linear):
    """Mean (columns) and covariance of N(precision^-1 linear, precision^-1)."""
    L = cholesky(precision, lower=True)
    return cho_solve((L, True), linear), cho_solve((L, True), np.eye(precision.shape[0]))


def _gaussian_draws(precision, linear, rng):
    """Columns ~ N(precision^-1 linear[:, c], precision^-1)."""
    try:
        L = cholesky(precision, lower=True)
    except np.linalg.LinAlgError as exc:  # cannot happen with the identity floor
        raise NumericalError("posterior precision is not positive definite") from exc
    mean = cho_solve((L, True), linear)
    z = rng.standard_normal(linear.shape)
    return mean + solve_triangular(L.T, z, lower=False)


def x_conditional(state, covariates):
    """(precision, linear) of X | rest; column i of linear belongs to species i."""
    F = _design(covariates)
    Yj = state.Y[:, state.grouping]
    R = state.Q - state.v.T @ F
    return np.eye(state.Y.shape[0]) + Yj @ Yj.T, Yj @ R.T


def y_conditional(state, covariates):
    """[(individuals, precision, linear)] of Y | rest, one entry per group size m_u.

    Individual u has precision diag(1/gamma) + m_u sum_i X_i X_i^T.
    """
    F = _design(covariates)
    K, U = state.Y.shape
    R = state.Q - state.v.T @ F
    XR = state.X @ R
    linear = np.stack([np.bincount(state.grouping, weights=row, minlength=U) for row in XR])
    m = np.bincount(state.grouping, minlength=U)
    XXt = state.X @ state.X.T
    prior_prec = np.diag(1.0 / state.gamma)
    out = []
    for count in np.unique(m):
        cols = np.flatnonzero(m == count)
        out.append((cols, prior_prec + count * XXt, linear[:, cols]))
    return out


def v_conditional(state, covariates):
    """(precision, linear) of v | rest; column i of linear belongs to species i."""
    F = _design(covariates)
    R = state.Q - state.X.T @ state.Y[:, state.grouping]
    return np.eye(F.shape[0]) + F @ F.T, F @ R.T


def sample_X(state, table, covariates, rng):
    """X_i | rest: precision I_K + sum_j Y_{u_j} Y_{u_j}^T (shared by all species)."""
    state.X = _gaussian_draws(*x_conditional(state, covariates), rng)
    return state.X


def sample_Y(state, table, covariates, hyper, rng):
    """Y_u | rest: prior precision diag(1/gamma) plus m_u sum_i X_i X_i^T."""
    Y = np.empty_like(state.Y, dtype=float)
    for cols, precision, linear in y_conditional(state, covariates):
        Y[:, cols] = _gaussian_draws(precision, linear, rng)
    state.Y = Y
    return Y


def sample_v(state, table, covariates, rng):
    """v_i | rest: precision I_P + sum_j f(w_j) f(w_j)^T (shared by all species)."""
    state.v = _gaussian_draws(*v_conditional(state, covariates), rng)
    return state.v


def sample_shrinkage(state, hyper, rng):
    """Multiplicative gamma process: update each delta_h from its Gamma conditional."""
    K, U = state.Y.shape
    ss = np.sum(state.Y ** 2, axis=1)
    delta = state.delta.copy()
    for h in range(K):
        tau = np.cumprod(delta)
        shape = (hyper.mgp_a1 if h == 0 else hyper.mgp_a2) + 0.5 * U * (K - h)
        rate = 1.0 + 0.5 * np.sum(tau[h:] * ss[h:]) / delta[h]
        delta[h] = rng.gamma(shape, 1.0 / rate)
    state.delta = delta
    return delta


def gibbs_sweep(state, table, covariates, hyper, config, rng, sigma_shape_offset=0.0):
    """One full scan in the order T, sigma, Q, X, Y, v, shrinkage (in place)."""
    sample_T(state, table, rng)
    sample_sigma(state, table, hyper, rng, width=config.sigma_slice_width,
                 max_steps=config.slice_max_steps, shape_offset=sigma_shape_offset)
    sample_Q(state, table, covariates, rng, width=config.slice_width,
             max_steps=config.slice_max_steps)
    sample_X(state, table, covariates, rng)
    sample_Y(state, table, covariates, hyper, rng)
    sample_v(state, table, covariates, rng)
    sample_shrinkage(state, hyper, rng)
    return state


# ---------------------------------------------------------------- initialization

def draw_prior(dims, hyper, rng, grouping=None, design=None):
    """Draw (sigma, X, Y, v, delta) and Q from the prior.

    ``dims`` needs I, J, K, U, P.  T is set to ones (it is not part of the prior).
    """
    I, J, K, U, P = (dims[k] for k in ("I", "J", "K", "U", "P"))
    a = hyper.alpha / I
    sigma = rng.beta(a, 0.5 - a, size=I)
    sigma = np.clip(sigma, np.exp(LOG_SIGMA_MIN), np.nextafter(1.0, 0.0))
    delta = np.concatenate([[rng.gamma(hyper.mgp_a1)], rng.gamma(hyper.mgp_a2, size=K - 1)])
    gamma = 1.0 / np.cumprod(delta)
    Y = rng.standard_normal((K, U)) * np.sqrt(gamma)[:, None]
    X = rng.standard_normal((K, I))
    v = rng.standard_normal((P, I))
    grouping = np.arange(J) if grouping is None else np.asarray(grouping)
    design = np.zeros((P, J)) if design is None else design
    Q = q_mean(X, Y, v, design, grouping) + rng.standard_normal((I, J))
    return LatentState(sigma, X, Y, v, Q, np.ones(J), delta, grouping)


def initial_state(table, covariates, hyper, config, rng):
    counts = _counts(table)
    I, J = counts.shape
    F = _design(covariates)
    grouping = table.grouping if isinstance(table, OtuTable) else np.arange(J)
    U = int(grouping.max()) + 1
    K = hyper.resolved_K(I, J)
    state = draw_prior({"I": I, "J": J, "K": K, "U": U, "P": F.shape[0]}, hyper, rng,
                       grouping, F)
    mu = q_mean(state.X, state.Y, state.v, F, grouping)
    pos = counts > 0
    if config.init_strategy == "prior-draw":
        Q = mu + 0.1 * rng.standard_normal((I, J))
        Q = np.where(pos & (Q <= 0), np.abs(Q) + 0.1, Q)
        sigma = np.full(I, 0.5)
    else:
        rel = counts / counts.sum(axis=0)
        sigma = np.clip(rel.mean(axis=1), 1e-12, None)
        sigma = 0.5 * sigma / sigma.max()
        Q = np.where(pos, np.sqrt(rel / sigma[:, None]), -0.5)
    # Prior draws of sigma with alpha/I << 1 sit tens of log-units away from
    # the data, and so can positive-count Q cells; both are beyond the reach of
    # a mode-scaled slice width.  Move (sigma, T, Q on positive cells) to the
    # joint fixed point of their conditional modes, with the free global scale
    # pinned by max(sigma) = 1/2.
    shape = hyper.alpha / I + counts.sum(axis=1)
    depths = counts.sum(axis=0)
    n_pos = counts[pos].astype(float)
    for _ in range(500):
        q2 = np.maximum(Q, 0.0) ** 2
        T = depths / np.maximum(sigma @ q2, 1e-300)
        new = shape / np.maximum(q2 @ T, 1e-300)
        new = np.clip(0.5 * new / new.max(), 1e-300, 0.5)
        a = 1.0 + 2.0 * (new[:, None] * T[None, :])[pos]
        m = mu[pos]
        Q[pos] = (m + np.sqrt(m * m + 8.0 * a * n_pos)) / (2.0 * a)
        done = np.allclose(np.log(new), np.log(sigma), atol=1e-8)
        sigma = new
        if done:
            break
    state.Q = Q
    state.sigma = sigma
    sample_T(state, table, rng)
    return state


# ---------------------------------------------------------------- chains

FIELDS = ("sigma", "X", "Y", "v", "Q", "T", "delta")


@dataclass
class Chain:
    """Retained (burned-in, thinned) draws plus provenance.

    ``draws`` maps each field of :class:`LatentState` to an array whose first
    axis indexes retained draws.
    """

    draws: dict
    config: SamplerConfig
    hyper: Hyperparams
    grouping: np.ndarray
    data_fingerprint: str = ""
    complete: bool = True
    iterations_done: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.draws["sigma"].shape[0]

    def state(self, k):
        return LatentState(**{f: self.draws[f][k].copy() for f in FIELDS},
                           grouping=self.grouping)

    def __iter__(self):
        for k in range(len(self)):
            yield self.state(k)

    @classmethod
    def from_states(cls, states, config=None, hyper=None, fingerprint=""):
        states = list(states)
        draws = {f: np.stack([getattr(s, f) for s in states]) for f in FIELDS}
        return cls(draws, config or SamplerConfig(n_iterations=len(states) or 1, burn_in=0),
                   hyper or Hyperparams(), states[0].grouping, fingerprint)

    def subset(self, index):
        draws = {f: a[index] for f, a in self.draws.items()}
        return Chain(draws, self.config, self.hyper, self.grouping,
                     self.data_fingerprint, self.complete, self.iterations_done,
                     dict(self.meta))


def data_fingerprint(table, covariates):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(_counts(table)).tobytes())
    h.update(np.ascontiguousarray(_design(covariates)).tobytes())
    if isinstance(table, OtuTable):
        h.update(np.ascontiguousarray(table.grouping).tobytes())
    return h.hexdigest()


def _save_checkpoint(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, path)


def run_chain(table, covariates, hyper, config, *, record_path=None,
              checkpoint_path=None, max_sweeps=None, sigma_shape_offset=0.0,
              progress=None):
    """Run one chain and return its retained draws.

    Draw ``k`` is retained after sweep ``burn_in + (k + 1) * thin``.

    record_path : append-only chain record file (see :mod:`dirfactor.chainio`)
    checkpoint_path : full sampler state (including the RNG) is pickled here
        every ``config.checkpoint_every`` sweeps, when ``max_sweeps`` stops
        the run early, and when a sweep fails.  If the file exists on entry
        the run resumes from it.
    max_sweeps : stop after this many sweeps in this call (returns a chain
        with ``complete=False``)
    """
    from .chainio import ChainWriter

    counts = _counts(table)
    if counts.sum(axis=0).min() <= 0:
        raise DataError("every sample needs a positive read depth")
    hyper.check(counts.shape[0])
    fingerprint = data_fingerprint(table, covariates)

    if checkpoint_path and os.path.exists(checkpoint_path):
        with open(checkpoint_path, "rb") as fh:
            ck = pickle.load(fh)
        if ck["fingerprint"] != fingerprint or ck["config"] != config.to_dict():
            raise DataError("checkpoint does not match the data or configuration")
        rng = np.random.default_rng()
        rng.bit_generator.state = ck["rng"]
        state, start, kept = ck["state"], ck["iteration"], ck["kept"]
    else:
        rng = np.random.default_rng(config.seed)
        state = initial_state(table, covariates, hyper, config, rng)
        start, kept = 0, {f: [] for f in FIELDS}

    writer = None
    if record_path:
        writer = ChainWriter(record_path, state.dims, config, hyper, fingerprint,
                             state.grouping)
        writer.open(existing=[{f: kept[f][k] for f in FIELDS}
                              for k in range(len(kept["sigma"]))])

    def checkpoint(it):
        if checkpoint_path:
            _save_checkpoint(checkpoint_path, {
                "iteration": it, "state": state, "rng": rng.bit_generator.state,
                "kept": kept, "fingerprint": fingerprint, "config": config.to_dict()})

    stop = config.n_iterations if max_sweeps is None else min(
        config.n_iterations, start + max_sweeps)
    it = start
    try:
        while it < stop:
            gibbs_sweep(state, table, covariates, hyper, config, rng,
                        sigma_shape_offset=sigma_shape_offset)
            it += 1
            if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
                for f in FIELDS:
                    kept[f].append(np.array(getattr(state, f), copy=True))
                if writer:
                    writer.append(state)
            if config.checkpoint_every and it % config.checkpoint_every == 0:
                checkpoint(it)
            if progress is not None and it % 1000 == 0:
                progress(it)
    except Exception:
        checkpoint(it)
        log.error("chain aborted at sweep %d; checkpoint written to %s", it, checkpoint_path)
        raise
    finally:
        if writer:
            writer.close()
    complete = it >= config.n_iterations
    if not complete:
        checkpoint(it)

    if kept["sigma"]:
        draws = {f: np.stack(kept[f]) for f in FIELDS}
    else:
        d = state.dims
        shapes = {"sigma": (d["I"],), "X": (d["K"], d["I"]), "Y": (d["K"], d["U"]),
                  "v": (d["P"], d["I"]), "Q": (d["I"], d["J"]), "T": (d["J"],),
                  "delta": (d["K"],)}
        draws = {f: np.empty((0,) + shapes[f]) for f in FIELDS}
    return Chain(draws, config, hyper, state.grouping, fingerprint, complete, it)
