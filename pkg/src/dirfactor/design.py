"""Covariate design matrices: raw covariates, interactions and B-spline terms.

A design is an ordered list of *terms*, each mapping the raw covariate
vector ``w_j`` (length L) to one or more design columns.  The expanded
design ``f(w_j)`` is what multiplies the regression coefficients ``v_i``.
Every term also knows its derivative with respect to each raw coordinate,
which the covariate-effect summaries need for the chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import CovariateError


def _full_knots(degree, internal_knots, boundary_knots):
    lo, hi = boundary_knots
    internal = np.sort(np.asarray(internal_knots, dtype=float))
    if not lo < hi:
        raise ValueError("boundary knots must satisfy lo < hi")
    if internal.size and (internal[0] <= lo or internal[-1] >= hi):
        raise ValueError("boundary knots must bracket the internal knots")
    return np.concatenate([np.full(degree + 1, lo), internal, np.full(degree + 1, hi)])


def spline_basis(values, degree=3, internal_knots=(), boundary_knots=(0.0, 1.0),
                 derivative=0, extrapolate=False):
    """Evaluate a B-spline basis at ``values``.

    Returns an array of shape ``(degree + 1 + len(internal_knots), len(values))``
    whose column ``j`` holds every basis function evaluated at ``values[j]``.
    With ``derivative > 0`` the derivatives of the basis functions are returned.

    Values outside ``boundary_knots`` raise ``ValueError`` unless
    ``extrapolate`` is set, in which case the polynomial pieces of the end
    intervals are continued.
    """
    x = np.atleast_1d(np.asarray(values, dtype=float))
    t = _full_knots(degree, internal_knots, boundary_knots)
    lo, hi = boundary_knots
    if not extrapolate and (np.any(x < lo) or np.any(x > hi)):
        bad = x[(x < lo) | (x > hi)]
        raise ValueError(
            f"{bad.size} value(s) outside boundary knots [{lo}, {hi}] "
            f"(e.g. {bad[0]:g}); widen the boundary or pass extrapolate=True")
    n_basis = len(t) - degree - 1
    spline = BSpline(t, np.eye(n_basis), degree, extrapolate=True)
    if derivative:
        spline = spline.derivative(derivative)
    return np.asarray(spline(x)).T


@dataclass(frozen=True)
class Term:
    """One block of design columns.

    ``kind`` is ``"linear"`` (identity on one raw column), ``"interaction"``
    (product of raw columns) or ``"spline"`` (B-spline basis of one raw column).
    """

    kind: str
    columns: tuple
    degree: int = 3
    knots: tuple = ()
    boundary: tuple = (0.0, 1.0)
    binary: bool = False
    extrapolate: bool = False

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", "linear")
        if "column" in d:
            cols = (d.pop("column"),)
        else:
            cols = tuple(d.pop("columns"))
        kw = {}
        if "degree" in d:
            kw["degree"] = int(d.pop("degree"))
        if "knots" in d:
            kw["knots"] = tuple(float(k) for k in d.pop("knots"))
        if "boundary" in d:
            kw["boundary"] = tuple(float(b) for b in d.pop("boundary"))
        if "binary" in d:
            kw["binary"] = bool(d.pop("binary"))
        if "extrapolate" in d:
            kw["extrapolate"] = bool(d.pop("extrapolate"))
        if d:
            raise CovariateError(f"unknown design term keys: {sorted(d)}")
        term = cls(kind, cols, **kw)
        term._check()
        return term

    def to_dict(self):
        d = {"kind": self.kind}
        if self.kind == "interaction":
            d["columns"] = list(self.columns)
        else:
            d["column"] = self.columns[0]
        if self.kind == "spline":
            d.update(degree=self.degree, knots=list(self.knots),
                     boundary=list(self.boundary), extrapolate=self.extrapolate)
        if self.binary:
            d["binary"] = True
        return d

    def _check(self):
        if self.kind not in ("linear", "interaction", "spline"):
            raise CovariateError(f"unknown design term kind {self.kind!r}")
        if self.kind in ("linear", "spline") and len(self.columns) != 1:
            raise CovariateError(f"{self.kind} term takes exactly one column")
        if self.kind == "interaction" and len(self.columns) < 2:
            raise CovariateError("interaction term needs at least two columns")

    @property
    def width(self):
        if self.kind == "spline":
            return self.degree + 1 + len(self.knots)
        return 1

    def names(self):
        if self.kind == "linear":
            return [self.columns[0]]
        if self.kind == "interaction":
            return ["*".join(self.columns)]
        return [f"bs({self.columns[0]})[{k}]" for k in range(self.width)]

    def evaluate(self, raw, index):
        """Design block for raw matrix ``raw`` (L x J); ``index`` maps names to rows."""
        if self.kind == "linear":
            return raw[[index[self.columns[0]]]]
        if self.kind == "interaction":
            out = np.ones((1, raw.shape[1]))
            for c in self.columns:
                out = out * raw[index[c]]
            return out
        return spline_basis(raw[index[self.columns[0]]], self.degree, self.knots,
                            self.boundary, extrapolate=self.extrapolate)

    def jacobian(self, raw, index, l):
        """d(block)/d(raw row l), same shape as :meth:`evaluate`."""
        target = None
        for name, row in index.items():
            if row == l:
                target = name
        if target not in self.columns:
            return np.zeros((self.width, raw.shape[1]))
        if self.kind == "linear":
            return np.ones((1, raw.shape[1]))
        if self.kind == "interaction":
            out = np.ones((1, raw.shape[1]))
            seen = False
            for c in self.columns:
                # product rule; a column repeated k times contributes k * x^(k-1)
                if c == target and not seen:
                    seen = True
                    k = self.columns.count(c)
                    out = out * k * raw[index[c]] ** (k - 1)
                elif c != target:
                    out = out * raw[index[c]]
            return out
        return spline_basis(raw[index[self.columns[0]]], self.degree, self.knots,
                            self.boundary, derivative=1, extrapolate=self.extrapolate)


def default_terms(names):
    return [Term("linear", (n,)) for n in names]


@dataclass
class CovariateMatrix:
    """Raw per-sample covariates plus the expanded design used by the model.

    Attributes
    ----------
    raw : (L, J) array
    names : raw covariate names (length L)
    terms : design terms; ``design`` is their row-wise concatenation
    sample_ids : optional sample labels (length J)
    """

    raw: np.ndarray
    names: list
    terms: list = field(default=None)
    sample_ids: list = field(default=None)

    def __post_init__(self):
        self.raw = np.atleast_2d(np.asarray(self.raw, dtype=float))
        self.names = list(self.names)
        if len(self.names) != self.raw.shape[0]:
            raise CovariateError(
                f"{len(self.names)} covariate names for {self.raw.shape[0]} rows")
        if len(set(self.names)) != len(self.names):
            raise CovariateError("duplicate covariate names")
        if self.terms is None:
            self.terms = default_terms(self.names)
        self.terms = [t if isinstance(t, Term) else Term.from_dict(t) for t in self.terms]
        for t in self.terms:
            for c in t.columns:
                if c not in self.index:
                    raise CovariateError(f"design term refers to unknown covariate {c!r}")
            if t.binary:
                self._check_binary(t.columns[0])
        self.design = self.expand(self.raw)

    @property
    def index(self):
        return {n: k for k, n in enumerate(self.names)}

    @property
    def n_samples(self):
        return self.raw.shape[1]

    @property
    def design_names(self):
        return [n for t in self.terms for n in t.names()]

    @property
    def n_design(self):
        return sum(t.width for t in self.terms)

    def _check_binary(self, name):
        vals = set(np.unique(self.raw[self.index[name]]).tolist())
        if not vals <= {0.0, 1.0}:
            hint = ""
            if vals <= {1.0, 2.0}:
                hint = " (looks 1/2-coded; subtract 1 to recode as 0/1)"
            raise CovariateError(
                f"covariate {name!r} is declared binary but takes values "
                f"{sorted(vals)}; expected 0/1{hint}")

    def is_binary(self, l):
        vals = np.unique(self.raw[l])
        return bool(np.all(np.isin(vals, (0.0, 1.0))))

    def expand(self, raw):
        """Expanded design f(w) for a raw matrix (L x n) -> (P x n)."""
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        if raw.shape[0] != len(self.names):
            raw = raw.reshape(len(self.names), -1)
        idx = self.index
        return np.vstack([t.evaluate(raw, idx) for t in self.terms])

    def expand_point(self, w0):
        """Expanded design for one raw covariate vector -> length P."""
        return self.expand(np.asarray(w0, dtype=float).reshape(-1, 1))[:, 0]

    def jacobian(self, raw, l):
        """d f(w) / d w_l evaluated at each column of ``raw`` -> (P x n)."""
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        idx = self.index
        return np.vstack([t.jacobian(raw, idx, l) for t in self.terms])

    def rows_for(self, l):
        """Design rows owned by raw covariate ``l`` alone (linear or spline terms)."""
        name = self.names[l]
        rows, start = [], 0
        for t in self.terms:
            if t.kind in ("linear", "spline") and t.columns[0] == name:
                rows.extend(range(start, start + t.width))
            start += t.width
        return rows

    def with_raw(self, raw):
        """Same terms, different raw values (used by permutation refits)."""
        return CovariateMatrix(raw, self.names, self.terms, self.sample_ids)

    def resolve(self, l):
        if isinstance(l, str):
            if l not in self.index:
                raise CovariateError(f"unknown covariate {l!r}")
            return self.index[l]
        return int(l)


def reference_effects(n_species):
    """Effect matrix of the reference simulation scenario (3 x n_species).

    Rows: continuous covariate, binary covariate, their interaction.  The
    first 16 species carry effects; the rest are zero.
    """
    if n_species < 16:
        raise ValueError("the reference effect pattern needs at least 16 species")
    v = np.zeros((3, n_species))
    v[0, :8] = 5
    v[0, 8:16] = -5
    v[1, :16] = [5, 5, 5, 5, -5, -5, -5, -5, 5, 5, 5, 5, -5, -5, -5, -5]
    v[2, :16] = [10, -5, -5, -10, 10, -5, -5, -10, -10, 5, 5, 10, -10, 5, 5, 10]
    return v

