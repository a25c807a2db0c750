"""Run configuration: one YAML document drives every command.

Keys (all optional except where a command needs them)::

    data:
      otu: counts.tsv            # paths are relative to the config file
      covariates: covariates.csv
      grouping_column: individual
    model:
      K: 4
      alpha: 1.0
      mgp_a1: 2.0
      mgp_a2: 3.0
      terms:                     # design; default: one linear term per column
        - {kind: linear, column: w1}
        - {kind: linear, column: w2, binary: true}
        - {kind: interaction, columns: [w1, w2]}
        - {kind: spline, column: age, knots: [-1, 0, 1], boundary: [-2, 2]}
    sampler: {n_iterations: 100000, burn_in: 60000, thin: 10, seed: 0, ...}
    chains: 1
    seed: 0                      # chain k uses a seed spawned from this
    summarize: {covariate: w1, grid: [-2, 2, 20], fixed: {w2: 0}, level: 0.95,
                lowess_frac: 0.6667, differences: [w2], age_groups: null}
    permtest: {covariate: w1, n_perm: 100, n_iterations: 20000, burn_in: 10000,
               thin: 10, n_jobs: 1}
    loocheck: {level: 0.95}
    score: {covariate: w1, grid: [-2, 2, 20], fixed: {w2: 0}, n_mc: 200}
    scenario: {preset: desk, seed: 0, ...}   # ScenarioSpec fields for simulate

Command-line ``--set a.b=value`` overrides any key; values are parsed as YAML
scalars (``--set sampler.thin=5``, ``--set model.K=null``).
"""

from __future__ import annotations

import copy
import os
from dataclasses import fields

import yaml

from .errors import UsageError

DEFAULTS = {
    "data": {"otu": None, "covariates": None, "grouping_column": None},
    "model": {"K": None, "alpha": 1.0, "mgp_a1": 2.0, "mgp_a2": 3.0, "terms": None},
    "sampler": {},
    "chains": 1,
    "seed": 0,
    "summarize": {"covariate": None, "grid": [-2.0, 2.0, 20], "fixed": None,
                  "level": 0.95, "lowess_frac": 2.0 / 3.0, "differences": [],
                  "age_column": None, "age_groups": None},
    "permtest": {"covariate": None, "n_perm": 100, "n_iterations": 20_000,
                 "burn_in": 10_000, "thin": 10, "n_jobs": 1},
    "loocheck": {"level": 0.95},
    "score": {"covariate": None, "grid": [-2.0, 2.0, 20], "fixed": None, "n_mc": 200,
              "level": 0.95},
    "scenario": {},
}


def merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg, assignment):
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise UsageError(f"empty key in override {assignment!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse value in {assignment!r}: {exc}") from None
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return cfg


def load_config(path=None, overrides=()):
    """Defaults <- YAML file <- overrides.  Data paths become absolute."""
    doc = {}
    base = os.getcwd()
    if path:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise UsageError(f"invalid YAML in {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError(f"config {path} must be a mapping")
        base = os.path.dirname(os.path.abspath(path))
    cfg = merge(DEFAULTS, doc)
    for o in overrides or ():
        apply_override(cfg, o)
    for k in ("otu", "covariates"):
        p = cfg["data"].get(k)
        if p and not os.path.isabs(p):
            cfg["data"][k] = os.path.normpath(os.path.join(base, p))
    check(cfg)
    return cfg


def check(cfg):
    from .sampler import SamplerConfig

    if not isinstance(cfg.get("chains"), int) or cfg["chains"] < 1:
        raise UsageError("chains must be an integer >= 1")
    allowed = {f.name for f in fields(SamplerConfig)}
    unknown = set(cfg["sampler"]) - allowed
    if unknown:
        raise UsageError(f"unknown sampler keys: {sorted(unknown)}")
    unknown = set(cfg["model"]) - set(DEFAULTS["model"])
    if unknown:
        raise UsageError(f"unknown model keys: {sorted(unknown)}")


def sampler_config(cfg, **extra):
    from .sampler import SamplerConfig

    kw = dict(cfg["sampler"])
    kw.update(extra)
    return SamplerConfig(**kw)


def hyperparams(cfg):
    from .model import Hyperparams

    m = cfg["model"]
    return Hyperparams(alpha=float(m["alpha"]), K=m["K"], mgp_a1=float(m["mgp_a1"]),
                       mgp_a2=float(m["mgp_a2"]))


def grid_values(spec):
    """``[start, stop, num]`` or an explicit list of at least 4 values."""
    import numpy as np

    if isinstance(spec, dict):
        return np.linspace(spec["start"], spec["stop"], int(spec["num"]))
    if len(spec) == 3 and float(spec[2]).is_integer() and spec[2] > 3:
        return np.linspace(float(spec[0]), float(spec[1]), int(spec[2]))
    return np.asarray(spec, dtype=float)


def dump(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)
