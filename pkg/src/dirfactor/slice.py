"""Vectorized univariate slice sampling (stepping-out and shrinkage).

Many independent univariate targets are updated at once: element ``k`` of
``x0`` is moved by a slice-sampling transition that leaves the density
``exp(logdens(x, idx))`` of element ``k`` invariant.  Random numbers are
drawn only for elements still in play, in index order, so the result is a
deterministic function of the generator state.
"""

import numpy as np

from .errors import SliceSamplerError


def slice_sample(x0, logdens, widths, rng, lower=-np.inf, upper=np.inf,
                 max_steps=500, name="x"):
    """One slice-sampling update for each element of ``x0``.

    Parameters
    ----------
    x0 : (n,) array of current values, each with finite log density
    logdens : callable ``(x, idx) -> (len(idx),)`` log densities of the
        elements ``idx`` evaluated at ``x``.  May return ``-inf``.
    widths : scalar or (n,) initial interval widths
    lower, upper : scalars or (n,) hard support limits
    max_steps : budget for each of the stepping-out and shrinkage loops

    Widths must not depend on ``x0`` itself, only on conditioning variables.
    """
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    widths = np.broadcast_to(np.asarray(widths, dtype=float), (n,))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (n,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (n,))
    all_idx = np.arange(n)

    f0 = logdens(x0, all_idx)
    if not np.all(np.isfinite(f0)):
        bad = np.flatnonzero(~np.isfinite(f0))
        raise SliceSamplerError(
            f"{name}: starting point outside the support for {bad.size} element(s)",
            dump={"index": bad[:20].tolist(), "x": x0[bad[:20]].tolist()})
    log_y = f0 - rng.standard_exponential(n)

    left = x0 - widths * rng.random(n)
    right = left + widths

    def step_out(edge, direction):
        idx = all_idx
        for _ in range(max_steps):
            inside = edge[idx] * direction < (upper[idx] if direction > 0 else -lower[idx])
            idx = idx[inside]
            if not idx.size:
                return
            above = logdens(edge[idx], idx) > log_y[idx]
            idx = idx[above]
            if not idx.size:
                return
            edge[idx] += direction * widths[idx]
        raise SliceSamplerError(
            f"{name}: stepping out exceeded {max_steps} steps",
            dump={"index": idx[:20].tolist(), "x": x0[idx[:20]].tolist(),
                  "edge": edge[idx[:20]].tolist(), "width": widths[idx[:20]].tolist()})

    step_out(left, -1.0)
    step_out(right, 1.0)
    np.maximum(left, lower, out=left)
    np.minimum(right, upper, out=right)

    x1 = x0.copy()
    idx = all_idx
    for _ in range(max_steps):
        prop = left[idx] + rng.random(idx.size) * (right[idx] - left[idx])
        ok = logdens(prop, idx) > log_y[idx]
        x1[idx[ok]] = prop[ok]
        rej = ~ok
        idx, prop = idx[rej], prop[rej]
        if not idx.size:
            return x1
        below = prop < x0[idx]
        left[idx[below]] = prop[below]
        right[idx[~below]] = prop[~below]
    raise SliceSamplerError(
        f"{name}: shrinkage exceeded {max_steps} steps",
        dump={"index": idx[:20].tolist(), "x": x0[idx[:20]].tolist(),
              "left": left[idx[:20]].tolist(), "right": right[idx[:20]].tolist()})
