"""Model core: domain types, link functions, likelihood and data simulation.

Conventions used throughout the package (I species, J samples, U
individuals, K latent factors, P design columns):

* ``counts`` and ``Q`` are I x J
* ``X`` is K x I, ``Y`` is K x U, ``v`` is P x I
* ``grouping[j]`` is the 0-based individual of sample ``j``
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .design import CovariateMatrix, Term, reference_effects
from .errors import DataError, DegenerateSampleError

LINKS = ("squared-positive", "linear-positive", "logistic-normal")


@dataclass
class OtuTable:
    """Integer read counts, I species x J samples.

    ``index_name`` is the header of the species-ID column in the TSV form.
    """

    counts: np.ndarray
    species_ids: list = None
    sample_ids: list = None
    grouping: np.ndarray = None
    index_name: str = "species"

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise DataError("counts must be a 2-d species x samples matrix")
        if counts.size and (np.any(counts < 0) or np.any(counts != np.round(counts))):
            raise DataError("counts must be nonnegative integers")
        self.counts = counts.astype(np.int64)
        I, J = self.counts.shape
        if self.species_ids is None:
            self.species_ids = [f"species{i + 1}" for i in range(I)]
        if self.sample_ids is None:
            self.sample_ids = [f"sample{j + 1}" for j in range(J)]
        self.species_ids = list(self.species_ids)
        self.sample_ids = list(self.sample_ids)
        if len(self.species_ids) != I or len(self.sample_ids) != J:
            raise DataError("label lengths do not match the count matrix")
        if len(set(self.species_ids)) != I:
            raise DataError("duplicate species ids")
        if len(set(self.sample_ids)) != J:
            raise DataError("duplicate sample ids")
        self.grouping = normalize_grouping(self.grouping, J)

    @property
    def depths(self):
        return self.counts.sum(axis=0)

    @property
    def shape(self):
        return self.counts.shape

    @property
    def n_individuals(self):
        return int(self.grouping.max()) + 1 if self.grouping.size else 0

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.counts).tobytes())
        h.update(np.ascontiguousarray(self.grouping).tobytes())
        return h.hexdigest()


def normalize_grouping(grouping, J):
    """Map arbitrary individual labels onto contiguous 0..U-1 (first-seen order).

    ``None`` means one sample per individual.
    """
    if grouping is None:
        return np.arange(J)
    labels = list(np.asarray(grouping).tolist())
    if len(labels) != J:
        raise DataError(f"grouping has {len(labels)} entries for {J} samples")
    seen = {}
    out = np.empty(J, dtype=np.int64)
    for j, lab in enumerate(labels):
        out[j] = seen.setdefault(lab, len(seen))
    return out


@dataclass
class Hyperparams:
    """Prior hyperparameters.  The residual variance is fixed at one."""

    alpha: float = 1.0
    K: int = None
    mgp_a1: float = 2.0
    mgp_a2: float = 3.0

    error_variance = 1.0

    def check(self, n_species):
        if self.alpha <= 0:
            raise DataError("alpha must be positive")
        if self.alpha >= n_species / 2:
            raise DataError(
                f"alpha={self.alpha} must be below I/2={n_species / 2} so that the "
                "Beta(alpha/I, 1/2 - alpha/I) prior on sigma is proper")
        if self.K is not None and self.K < 1:
            raise DataError("K must be a positive integer")
        if self.mgp_a1 <= 0 or self.mgp_a2 <= 0:
            raise DataError("shrinkage hyperparameters must be positive")

    def resolved_K(self, n_species, n_samples):
        return int(self.K) if self.K is not None else min(n_species, n_samples, 30)

    def to_dict(self):
        return {"alpha": self.alpha, "K": self.K, "mgp_a1": self.mgp_a1,
                "mgp_a2": self.mgp_a2}


@dataclass
class LatentState:
    """One joint configuration of the model's unknowns.

    ``delta`` are the multiplicative increments of the shrinkage process;
    ``gamma`` (the per-factor prior variances of Y) is derived from them.
    """

    sigma: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    v: np.ndarray
    Q: np.ndarray
    T: np.ndarray
    delta: np.ndarray
    grouping: np.ndarray = None

    def __post_init__(self):
        if self.grouping is None:
            self.grouping = np.arange(self.Q.shape[1])

    @property
    def gamma(self):
        return 1.0 / np.cumprod(self.delta)

    @property
    def dims(self):
        I, J = self.Q.shape
        return {"I": I, "J": J, "K": self.X.shape[0], "U": self.Y.shape[1],
                "P": self.v.shape[0]}

    def copy(self):
        return copy.deepcopy(self)

    def check(self):
        assert np.all((self.sigma > 0) & (self.sigma < 1)), "sigma outside (0, 1)"
        assert np.all(self.T > 0), "T must be positive"
        assert np.all(self.gamma > 0), "gamma must be positive"

    def residual(self, design):
        return self.Q - q_mean(self.X, self.Y, self.v, design, self.grouping)


@dataclass
class ScenarioSpec:
    """Declarative description of a synthetic dataset.

    ``v_matrix`` rows follow ``design`` ("full": w1, w2, w1*w2; "main": w1, w2).
    ``y_blocks`` lists, for consecutive equal-sized groups of individuals,
    which latent coordinates are nonzero; ``None`` keeps all coordinates.
    ``depth_law`` is ``{"law": "fixed"|"poisson"|"negbin", "mean": m,
    "variance": s2}``.  ``sigma_law`` is ``{"mean", "variance"}`` or ``{"a", "b"}``.
    """

    I: int = 100
    J: int = 300
    U: int = 50
    K: int = 4
    v_matrix: np.ndarray = None
    design: str = "full"
    y_blocks: list = field(default_factory=lambda: [[0, 1], [2, 3]])
    link: str = "squared-positive"
    error_variance: float = 1.0
    zero_threshold: float = 0.0
    depth_law: dict = field(default_factory=lambda: {"law": "fixed", "mean": 100_000})
    sigma_law: dict = field(default_factory=lambda: {"mean": 0.2, "variance": 0.1})
    seed: int = 0

    def __post_init__(self):
        if self.v_matrix is None:
            v = reference_effects(self.I)
            self.v_matrix = v if self.design == "full" else v[:2]
        self.v_matrix = np.asarray(self.v_matrix, dtype=float)
        self.validate()

    def validate(self):
        if self.link not in LINKS:
            raise DataError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if not 0 <= self.zero_threshold < 1:
            raise DataError("zero_threshold must lie in [0, 1)")
        if self.design not in ("full", "main"):
            raise DataError("design must be 'full' or 'main'")
        n_rows = 3 if self.design == "full" else 2
        if self.v_matrix.shape != (n_rows, self.I):
            raise DataError(f"v_matrix must be {n_rows} x {self.I}")
        if self.J % self.U:
            raise DataError("J must be a multiple of U (equal samples per individual)")
        if self.error_variance <= 0:
            raise DataError("error_variance must be positive")
        law = self.depth_law.get("law", "fixed")
        if law not in ("fixed", "poisson", "negbin"):
            raise DataError(f"unknown depth law {law!r}")
        if law == "negbin" and self.depth_law["variance"] < self.depth_law["mean"]:
            raise DataError("negative-binomial depth variance must be >= mean")
        a, b = self.sigma_beta
        if a <= 0 or b <= 0:
            raise DataError("sigma Beta law is infeasible")
        if self.y_blocks is not None:
            for blk in self.y_blocks:
                if any(k >= self.K for k in blk):
                    raise DataError("y_blocks refers to a factor beyond K")

    @property
    def sigma_beta(self):
        law = self.sigma_law
        if "a" in law:
            return float(law["a"]), float(law["b"])
        m, s2 = float(law["mean"]), float(law["variance"])
        if not 0 < m < 1 or not 0 < s2 < m * (1 - m):
            raise DataError(f"no Beta law has mean {m} and variance {s2}")
        total = m * (1 - m) / s2 - 1
        return m * total, (1 - m) * total

    def covariate_terms(self):
        terms = [Term("linear", ("w1",)), Term("linear", ("w2",), binary=True)]
        if self.design == "full":
            terms.append(Term("interaction", ("w1", "w2")))
        return terms

    def to_dict(self):
        return {
            "I": self.I, "J": self.J, "U": self.U, "K": self.K,
            "v_matrix": self.v_matrix.tolist(), "design": self.design,
            "y_blocks": self.y_blocks, "link": self.link,
            "error_variance": self.error_variance,
            "zero_threshold": self.zero_threshold,
            "depth_law": dict(self.depth_law), "sigma_law": dict(self.sigma_law),
            "seed": self.seed,
        }


# ---------------------------------------------------------------- links

def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0) or np.any(sigma >= 1):
        raise DataError("sigma entries must lie in (0, 1)")
    return sigma


def _normalize(weights):
    total = weights.sum(axis=0)
    if np.any(total <= 0):
        bad = np.flatnonzero(np.atleast_1d(total <= 0))
        raise DegenerateSampleError(
            f"all latent scores are nonpositive in sample(s) {bad.tolist()[:10]}")
    return weights / total


def composition_from_state(sigma, Q):
    """Squared-positive link: P_i = sigma_i (Q_i)_+^2 / sum_i' sigma_i' (Q_i')_+^2.

    ``Q`` may be one column (length I) or an I x J matrix (columns normalized
    independently).
    """
    sigma = _check_sigma(sigma)
    Q = np.asarray(Q, dtype=float)
    qp = np.maximum(Q, 0.0)
    s = sigma if Q.ndim == 1 else sigma[:, None]
    return _normalize(s * qp * qp)


def composition_linear_positive(sigma, Q):
    """Misspecified link with (Q)_+ in place of (Q)_+^2."""
    sigma = _check_sigma(sigma)
    Q = np.asarray(Q, dtype=float)
    s = sigma if Q.ndim == 1 else sigma[:, None]
    return _normalize(s * np.maximum(Q, 0.0))


def composition_logistic_normal(Q):
    """Softmax of Q over species (strictly positive compositions)."""
    Q = np.asarray(Q, dtype=float)
    e = np.exp(Q - Q.max(axis=0))
    return e / e.sum(axis=0)


def composition(link, sigma, Q):
    if link == "squared-positive":
        return composition_from_state(sigma, Q)
    if link == "linear-positive":
        return composition_linear_positive(sigma, Q)
    if link == "logistic-normal":
        return composition_logistic_normal(Q)
    raise DataError(f"unknown link {link!r}")


def apply_zero_inflation(P, threshold):
    """Zero every entry below ``threshold`` and renormalize (columnwise for 2-d)."""
    if not 0 <= threshold < 1:
        raise DataError("threshold must lie in [0, 1)")
    P = np.asarray(P, dtype=float)
    if threshold == 0:
        return P.copy()
    out = np.where(P < threshold, 0.0, P)
    return _normalize(out)


def q_mean(X, Y, v, design, grouping=None):
    """Gaussian mean of Q: <X_i, Y_{u_j}> + <v_i, f(w_j)>  (I x J)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    design = np.atleast_2d(np.asarray(design, dtype=float))
    J = design.shape[1]
    grouping = np.arange(J) if grouping is None else np.asarray(grouping)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} factors but Y has {Y.shape[0]}")
    if v.shape[0] != design.shape[0]:
        raise ValueError(f"v has {v.shape[0]} rows but the design has {design.shape[0]}")
    if v.shape[1] != X.shape[1]:
        raise ValueError("X and v disagree on the number of species")
    if grouping.shape[0] != J or (J and grouping.max() >= Y.shape[1]):
        raise ValueError("grouping does not conform to Y and the design")
    return X.T @ Y[:, grouping] + v.T @ design


def log_likelihood(table, sigma, Q):
    """Multinomial log-likelihood of the counts, without the multinomial coefficient.

    sum_j sum_i n_ij log(sigma_i (Q_ij)_+^2) - sum_j n_j log(sum_i sigma_i (Q_ij)_+^2).
    Returns ``-inf`` when a positive count meets a nonpositive score.
    """
    counts = table.counts if isinstance(table, OtuTable) else np.asarray(table)
    sigma = np.asarray(sigma, dtype=float)
    Q = np.asarray(Q, dtype=float)
    qp = np.maximum(Q, 0.0)
    w = sigma[:, None] * qp * qp
    pos = counts > 0
    if np.any(w[pos] <= 0):
        return -np.inf
    depth = counts.sum(axis=0)
    total = w.sum(axis=0)
    used = depth > 0
    ll = np.sum(counts[pos] * np.log(w[pos]))
    ll -= np.sum(depth[used] * np.log(total[used]))
    return float(ll)


def multinomial_logpmf(counts, P):
    """Full multinomial log-pmf for each column (vectorized over trailing axes)."""
    counts = np.asarray(counts)
    P = np.asarray(P, dtype=float)
    n = counts.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(counts > 0, counts * np.log(P), 0.0)
    return gammaln(n + 1) - gammaln(counts + 1).sum(axis=0) + term.sum(axis=0)


# ---------------------------------------------------------------- simulation

@dataclass
class SimulatedData:
    table: OtuTable
    covariates: CovariateMatrix
    truth: LatentState
    compositions: np.ndarray
    spec: ScenarioSpec

    def __iter__(self):
        return iter((self.table, self.covariates, self.truth))


def draw_depths(law, J, rng):
    kind = law.get("law", "fixed")
    mean = float(law["mean"])
    if kind == "fixed":
        return np.full(J, int(round(mean)), dtype=np.int64)
    depths = np.zeros(J, dtype=np.int64)
    todo = np.arange(J)
    # a sample needs at least one read; zero draws are redrawn
    while todo.size:
        if kind == "poisson":
            d = rng.poisson(mean, size=todo.size)
        else:
            var = float(law["variance"])
            if var == mean:
                d = rng.poisson(mean, size=todo.size)
            else:
                size = mean * mean / (var - mean)
                d = rng.negative_binomial(size, size / (size + mean), size=todo.size)
        depths[todo] = d
        todo = todo[d == 0]
    return depths


def simulate_latent(spec, rng):
    """Draw sigma, X, Y, v-design inputs and standardized residuals.

    Kept separate from the observation layer so that different links,
    residual variances and thresholds reuse one latent draw.
    """
    a, b = spec.sigma_beta
    sigma = rng.beta(a, b, size=spec.I)
    sigma = np.clip(sigma, np.finfo(float).tiny, np.nextafter(1.0, 0.0))
    X = rng.standard_normal((spec.K, spec.I))
    Y = rng.standard_normal((spec.K, spec.U))
    if spec.y_blocks:
        groups = np.array_split(np.arange(spec.U), len(spec.y_blocks))
        for members, active in zip(groups, spec.y_blocks):
            mask = np.ones(spec.K, dtype=bool)
            mask[list(active)] = False
            Y[np.ix_(mask, members)] = 0.0
    w1 = rng.standard_normal(spec.J)
    w2 = rng.binomial(1, 0.5, size=spec.J).astype(float)
    z = rng.standard_normal((spec.I, spec.J))
    return sigma, X, Y, np.vstack([w1, w2]), z


def simulate_dataset(spec, rng=None):
    """Simulate an OTU table, covariates and the generating state.

    ``rng`` defaults to ``np.random.default_rng(spec.seed)``.  Latent draws and
    the observation layer use separate child streams, so two specs differing
    only in link, residual variance, threshold or depth law share their
    sigma, X, Y, w and standardized residuals.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    latent_rng, obs_rng = rng.spawn(2)
    sigma, X, Y, raw, z = simulate_latent(spec, latent_rng)

    per = spec.J // spec.U
    grouping = np.repeat(np.arange(spec.U), per)
    covariates = CovariateMatrix(raw, ["w1", "w2"], spec.covariate_terms(),
                                 [f"s{j + 1}" for j in range(spec.J)])
    v = spec.v_matrix.copy()
    mean = q_mean(X, Y, v, covariates.design, grouping)
    Q = mean + np.sqrt(spec.error_variance) * z

    P = composition(spec.link, sigma, Q)
    P = apply_zero_inflation(P, spec.zero_threshold)
    depths = draw_depths(spec.depth_law, spec.J, obs_rng)
    counts = np.empty((spec.I, spec.J), dtype=np.int64)
    for j in range(spec.J):
        counts[:, j] = obs_rng.multinomial(depths[j], P[:, j])

    table = OtuTable(counts, [f"otu{i + 1}" for i in range(spec.I)],
                     covariates.sample_ids, grouping)
    qp = np.maximum(Q, 0.0)
    D = (sigma[:, None] * qp * qp).sum(axis=0)
    # T is an augmentation variable; store its conditional mean
    T = np.where(D > 0, depths / np.where(D > 0, D, 1.0), 1.0)
    truth = LatentState(sigma, X, Y, v, Q, T, np.ones(spec.K), grouping)
    return SimulatedData(table, covariates, truth, P, spec)


PRESETS = {
    "paper-sec4": dict(I=100, J=300, U=50, K=4,
                       depth_law={"law": "fixed", "mean": 100_000}),
    "desk": dict(I=30, J=90, U=30, K=4,
                 depth_law={"law": "fixed", "mean": 10_000}),
}


def preset_spec(name, **overrides):
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ScenarioSpec(**kw)
