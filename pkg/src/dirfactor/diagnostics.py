"""Convergence diagnostics: split R-hat, Geweke z-scores, effective sample size."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import DataError, DegenerateVarianceError
from .summaries import rescaled_v, sample_correlation


@dataclass(frozen=True)
class Rhat:
    """Split-chain R-hat; unpacks as ``(rhat, upper)``."""

    rhat: float
    upper: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.rhat, self.upper))


def _as_chains(traces):
    rows = [np.asarray(t, dtype=float).reshape(-1) for t in traces]
    if len({r.size for r in rows}) > 1:
        raise DataError("traces must all have the same length")
    return np.asarray(rows)


def split_rhat(traces, confidence=0.95):
    """Potential scale reduction of >= 2 equal-length traces after splitting each in half.

    Point estimate: sqrt(pooled variance / mean within-chain variance), both
    with divisor n, which is >= 1 by the law of total variance.  Upper limit:
    the classical F-based bound with the degrees-of-freedom correction
    (df.V + 3) / (df.V + 1), evaluated on the split chains.  Zero variance
    everywhere gives R-hat = 1 flagged as degenerate.
    """
    x = _as_chains(traces)
    m0, n0 = x.shape
    if m0 < 2 or n0 < 4:
        raise DataError("split_rhat needs at least 2 traces of length >= 4")
    half = n0 // 2
    x = np.concatenate([x[:, :half], x[:, n0 - half:]], axis=0)
    m, n = x.shape
    means = x.mean(axis=1)
    within0 = x.var(axis=1).mean()
    between0 = means.var()
    if within0 == 0:
        if between0 == 0:
            warnings.warn("zero-variance traces; R-hat set to 1", RuntimeWarning, stacklevel=2)
            return Rhat(1.0, 1.0, True)
        return Rhat(np.inf, np.inf, True)
    rhat = float(np.sqrt(1.0 + between0 / within0))

    s2 = x.var(axis=1, ddof=1)
    w = s2.mean()
    b = n * means.var(ddof=1)
    var_w = s2.var(ddof=1) / m
    var_b = 2.0 * b * b / (m - 1)
    mu = means.mean()
    cov_wb = (n / m) * (np.cov(s2, means ** 2)[0, 1] - 2.0 * mu * np.cov(s2, means)[0, 1])
    V = (n - 1) / n * w + (1 + 1 / m) * b / n
    var_V = ((n - 1) ** 2 * var_w + (1 + 1 / m) ** 2 * var_b
             + 2 * (n - 1) * (1 + 1 / m) * cov_wb) / n ** 2
    df_V = 2 * V * V / var_V if var_V > 0 else np.inf
    df_adj = (df_V + 3) / (df_V + 1) if np.isfinite(df_V) else 1.0
    W_df = 2 * w * w / var_w if var_w > 0 else np.inf
    r_fixed = (n - 1) / n
    r_random = (1 + 1 / m) * b / (n * w)
    q = stats.f.ppf((1 + confidence) / 2, m - 1, W_df)
    upper = float(np.sqrt(df_adj * (r_fixed + q * r_random)))
    return Rhat(rhat, max(upper, rhat), False)


def spectral_density_zero(x):
    """Bartlett-windowed spectral density at frequency zero, window floor(n^0.5)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    M = int(np.floor(n ** 0.5))
    d = x - x.mean()
    acov = np.array([np.dot(d[: n - k], d[k:]) / n for k in range(M + 1)])
    lags = np.arange(1, M + 1)
    return float(acov[0] + 2.0 * np.sum((1.0 - lags / (M + 1.0)) * acov[1:]))


def geweke_z(trace, first_frac=0.1, last_frac=0.5):
    """Standardized difference between the means of an early and a late window."""
    x = np.asarray(trace, dtype=float)
    if not (0 < first_frac < 1 and 0 < last_frac < 1 and first_frac + last_frac <= 1):
        raise DataError("window fractions must be positive and sum to at most 1")
    n = x.size
    na, nb = int(np.floor(first_frac * n)), int(np.floor(last_frac * n))
    if na < 2 or nb < 2:
        raise DataError("trace too short for the Geweke windows")
    a, b = x[:na], x[n - nb:]
    var = spectral_density_zero(a) / na + spectral_density_zero(b) / nb
    if not var > 0:
        raise DegenerateVarianceError("Geweke variance estimate is zero (constant trace?)")
    return float((a.mean() - b.mean()) / np.sqrt(var))


def autocorrelation(x):
    x = np.asarray(x, dtype=float)
    n = x.size
    d = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(d, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    if ac[0] <= 0:
        raise DegenerateVarianceError("zero-variance trace")
    return ac / ac[0]


def ess(trace):
    """Effective sample size by Geyer's initial positive sequence.

    Paired autocorrelation sums are accumulated up to the first negative one.
    Antithetic traces can give ESS > N; the estimate is capped at N ln N.
    A 2-d input (chains x draws) returns the sum over chains.
    """
    x = np.asarray(trace, dtype=float)
    if x.ndim == 2:
        return float(sum(ess(row) for row in x))
    n = x.size
    if n < 2:
        raise DataError("ESS needs at least two draws")
    rho = autocorrelation(x)
    if n % 2:
        rho = rho[:-1]
    pairs = rho[0::2] + rho[1::2]
    neg = np.flatnonzero(pairs < 0)
    stop = neg[0] if neg.size else pairs.size
    tau = -1.0 + 2.0 * np.sum(pairs[:stop])
    tau = max(tau, 1.0 / np.log(n))
    return float(n / tau)


# ---------------------------------------------------------------- report

def monitored_traces(chain, covariates=None, species_ids=None, n_eigen=4):
    """Default monitored scalars: every rescaled v entry and the top eigenvalues of S."""
    n = len(chain)
    v = np.stack([rescaled_v(s) for s in chain]) if n else np.empty((0,) + chain.draws["v"].shape[1:])
    P, I = chain.draws["v"].shape[1:]
    rows = covariates.design_names if covariates is not None else [f"f{p + 1}" for p in range(P)]
    sp = species_ids or [f"species{i + 1}" for i in range(I)]
    out = {}
    for p in range(P):
        for i in range(I):
            out[f"v[{rows[p]},{sp[i]}]"] = v[:, p, i]
    eig = np.stack([np.sort(np.linalg.eigvalsh(sample_correlation(s)))[::-1][:n_eigen]
                    for s in chain]) if n else np.empty((0, n_eigen))
    for k in range(eig.shape[1]):
        out[f"eig_S[{k + 1}]"] = eig[:, k]
    return out


@dataclass
class DiagnosticRow:
    parameter: str
    rhat: float
    rhat_upper: float
    geweke_z: float
    ess: float


def diagnose(chains, covariates=None, species_ids=None):
    """Diagnostics for the default monitored parameters over one or more chains.

    R-hat needs at least two chains (NaN otherwise); the Geweke column holds
    the largest |z| over chains (with its sign); ESS is summed over chains.
    """
    traces = [monitored_traces(c, covariates, species_ids) for c in chains]
    rows = []
    for name in traces[0]:
        series = [t[name] for t in traces]
        if len(series) >= 2:
            r = split_rhat(series)
            rh, up = r.rhat, r.upper
        else:
            rh = up = float("nan")
        zs = []
        for s in series:
            try:
                zs.append(geweke_z(s))
            except DegenerateVarianceError:
                zs.append(float("nan"))
        zs = np.asarray(zs)
        gz = float(zs[np.nanargmax(np.abs(zs))]) if np.any(np.isfinite(zs)) else float("nan")
        try:
            e = sum(ess(s) for s in series)
        except DegenerateVarianceError:
            e = float("nan")
        rows.append(DiagnosticRow(name, rh, up, gz, e))
    return rows


def write_report(rows, csv_path=None, text_path=None):
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["parameter", "rhat", "rhat_upper", "geweke_z", "ess"])
            for r in rows:
                out.writerow([r.parameter, repr(r.rhat), repr(r.rhat_upper),
                              repr(r.geweke_z), repr(r.ess)])
    text = report_text(rows)
    if text_path:
        with open(text_path, "w") as fh:
            fh.write(text)
    return text


def report_text(rows):
    up = np.array([r.rhat_upper for r in rows])
    gz = np.array([r.geweke_z for r in rows])
    es = np.array([r.ess for r in rows])
    lines = [f"monitored parameters: {len(rows)}"]
    if np.any(np.isfinite(up)):
        lines.append(f"max R-hat upper limit: {np.nanmax(up):.4f} "
                     f"({int(np.sum(up > 1.1))} above 1.1)")
    if np.any(np.isfinite(gz)):
        lines.append(f"|Geweke z| > 1.96: {int(np.sum(np.abs(gz) > 1.96))} of {len(rows)}")
    if np.any(np.isfinite(es)):
        lines.append(f"min ESS: {np.nanmin(es):.1f}")
    worst = sorted(rows, key=lambda r: -np.nan_to_num(r.rhat_upper, nan=-1))[:5]
    lines.append("worst R-hat upper limits:")
    lines += [f"  {r.parameter}: {r.rhat:.4f} (upper {r.rhat_upper:.4f})" for r in worst]
    return "\n".join(lines) + "\n"
