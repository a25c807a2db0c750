"""Command-line interface.

    dirfactor simulate  --preset desk --out DIR
    dirfactor fit       --config DIR/config.yaml --out FIT
    dirfactor diagnose  --chains FIT --out DIAG
    dirfactor summarize --config DIR/config.yaml --chains FIT --out SUM
    dirfactor permtest  --config DIR/config.yaml --covariate w1 --n-perm 100 --out PERM
    dirfactor loocheck  --config DIR/config.yaml --chains FIT --out LOO
    dirfactor score     --config DIR/config.yaml --chains FIT --truth DIR/truth.json --out SCORE

Every command writes ``manifest.json`` into its output directory listing the
SHA-256 of each emitted file.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .config import dump, grid_values, hyperparams, load_config, sampler_config
from .errors import DataError, DirFactorError, NumericalError, UsageError

log = logging.getLogger("dirfactor")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Output:
    """Output directory with overwrite protection and a hashed manifest."""

    def __init__(self, path, overwrite=False):
        self.path = path
        if os.path.isdir(path) and os.listdir(path) and not overwrite:
            raise UsageError(f"output directory {path} is not empty (pass --overwrite)")
        os.makedirs(path, exist_ok=True)
        self.files = []
        self.t0 = time.perf_counter()

    def file(self, name):
        self.files.append(name)
        return os.path.join(self.path, name)

    def manifest(self, command, cfg=None):
        doc = {
            "command": command,
            "version": __version__,
            "files": {name: _sha256(os.path.join(self.path, name)) for name in sorted(self.files)},
        }
        if cfg is not None:
            doc["config_sha256"] = hashlib.sha256(dump(cfg).encode()).hexdigest()
        # wall-clock is kept apart from the hashed content
        doc["wall_clock_seconds"] = round(time.perf_counter() - self.t0, 3)
        with open(os.path.join(self.path, "manifest.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return doc


# ---------------------------------------------------------------- helpers

def load_data(cfg):
    from .io import load_covariates, load_otu
    from .model import OtuTable

    d = cfg["data"]
    if not d.get("otu"):
        raise UsageError("data.otu is required")
    table = load_otu(d["otu"])
    if d.get("covariates"):
        cov, grouping = load_covariates(d["covariates"], table.sample_ids,
                                        cfg["model"].get("terms"), d.get("grouping_column"))
    else:
        raise UsageError("data.covariates is required")
    if grouping is not None:
        table = OtuTable(table.counts, table.species_ids, table.sample_ids, grouping,
                         table.index_name)
    return table, cov


def chain_paths(specs):
    paths = []
    for s in specs or ():
        if os.path.isdir(s):
            paths += sorted(glob.glob(os.path.join(s, "chain_*.dfc")))
        else:
            paths.append(s)
    if not paths:
        raise UsageError("no chain files given")
    return paths


def load_chains(specs):
    from .chainio import read_chain

    return [read_chain(p) for p in chain_paths(specs)]


def pooled(chains):
    from .sampler import Chain

    draws = {f: np.concatenate([c.draws[f] for c in chains]) for f in chains[0].draws}
    c0 = chains[0]
    return Chain(draws, c0.config, c0.hyper, c0.grouping, c0.data_fingerprint)


def chain_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    from .io import save_covariates, save_otu, save_truth
    from .model import ScenarioSpec, preset_spec, simulate_dataset

    cfg = load_config(args.config, args.set)
    scen = dict(cfg["scenario"])
    preset = args.preset or scen.pop("preset", None)
    scen.pop("preset", None)
    if args.seed is not None:
        scen["seed"] = args.seed
    spec = preset_spec(preset, **scen) if preset else ScenarioSpec(**scen)
    data = simulate_dataset(spec)
    out = Output(args.out, args.overwrite)
    save_otu(data.table, out.file("otu.tsv"))
    save_covariates(data.covariates, out.file("covariates.csv"),
                    grouping=[f"u{g + 1}" for g in data.table.grouping])
    save_truth(out.file("truth.json"), data.truth,
               {"scenario": spec.to_dict(), "compositions": data.compositions.tolist()})
    run = {
        "data": {"otu": "otu.tsv", "covariates": "covariates.csv",
                 "grouping_column": "individual"},
        "model": {"K": spec.K, "terms": [t.to_dict() for t in spec.covariate_terms()]},
        "summarize": {"covariate": "w1", "fixed": {"w1": 0.0, "w2": 0.0}, "differences": ["w2"]},
        "permtest": {"covariate": "w1"},
        "score": {"covariate": "w1", "fixed": {"w1": 0.0, "w2": 0.0}},
        "seed": spec.seed,
    }
    with open(out.file("config.yaml"), "w") as fh:
        fh.write(dump(run))
    out.manifest("simulate", cfg)
    return 0


def cmd_fit(args):
    from .chainio import write_chain
    from .diagnostics import diagnose, write_report
    from .sampler import run_chain

    cfg = load_config(args.config, args.set)
    table, cov = load_data(cfg)
    hyper = hyperparams(cfg)
    base = sampler_config(cfg)
    out = Output(args.out, args.overwrite)
    chains = []
    for k, seed in enumerate(chain_seeds(cfg["seed"], cfg["chains"])):
        from dataclasses import replace

        scfg = replace(base, seed=seed)
        name = f"chain_{k + 1}.dfc"
        ckpt = os.path.join(out.path, f"chain_{k + 1}.ckpt") if scfg.checkpoint_every else None
        chain = run_chain(table, cov, hyper, scfg, record_path=out.file(name),
                          checkpoint_path=ckpt)
        if ckpt and os.path.exists(ckpt):
            os.remove(ckpt)
        chains.append(chain)
        log.info("chain %d: %d draws", k + 1, len(chain))
    rows = diagnose(chains, cov, table.species_ids)
    text = write_report(rows, out.file("diagnostics.csv"), out.file("diagnostics.txt"))
    with open(out.file("run_config.yaml"), "w") as fh:
        fh.write(dump(cfg))
    out.manifest("fit", cfg)
    print(text, end="")
    return 0


def cmd_diagnose(args):
    from .diagnostics import diagnose, write_report

    cfg = load_config(args.config, args.set) if args.config else None
    chains = load_chains(args.chains)
    cov = species = None
    if cfg and cfg["data"].get("otu"):
        table, cov = load_data(cfg)
        species = table.species_ids
    out = Output(args.out, args.overwrite)
    rows = diagnose(chains, cov, species)
    text = write_report(rows, out.file("diagnostics.csv"), out.file("diagnostics.txt"))
    out.manifest("diagnose", cfg)
    print(text, end="")
    return 0


def cmd_summarize(args):
    import csv

    from . import summaries as sm

    cfg = load_config(args.config, args.set)
    table, cov = load_data(cfg)
    chain = pooled(load_chains(args.chains))
    s = cfg["summarize"]
    rng = np.random.default_rng(cfg["seed"])
    out = Output(args.out, args.overwrite)
    species = table.species_ids
    summary = {"n_draws": len(chain)}

    S = sm.posterior_mean(chain, sm.sample_correlation)
    sm.write_matrix_csv(out.file("similarity_S.csv"), S,
                        [f"u{u + 1}" for u in range(S.shape[0])])
    for which in ("X", "v"):
        G = sm.posterior_mean(chain, lambda st: sm.species_gram(st, which))
        sm.write_matrix_csv(out.file(f"gram_{which}.csv"), G, species)
    rv = np.stack([sm.rescaled_v(st) for st in chain])
    lo, hi = np.quantile(rv, [0.025, 0.975], axis=0)
    with open(out.file("rescaled_v.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "species", "mean", "lower", "upper"])
        for p, term in enumerate(cov.design_names):
            for i, sp in enumerate(species):
                w.writerow([term, sp, repr(float(rv[:, p, i].mean())),
                            repr(float(lo[p, i])), repr(float(hi[p, i]))])

    if s.get("covariate"):
        l = cov.resolve(s["covariate"])
        grid = grid_values(s["grid"])
        trend = sm.population_trend(chain, cov, l, grid, s.get("fixed"), float(s["level"]),
                                    rng, species)
        trend.to_csv(out.file(f"trend_{cov.names[l]}.csv"))
        summary["trend"] = trend.to_dict()
        if not cov.is_binary(l):
            d = sm.sample_derivatives(chain, cov, l, rng).mean(axis=0)
            x = cov.raw[l]
            with open(out.file(f"derivative_{cov.names[l]}.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["sample", "species", "covariate_value", "derivative", "lowess"])
                smooth = np.stack([sm.lowess_smooth(x, d[:, i], s["lowess_frac"])
                                   for i in range(d.shape[1])], axis=1)
                for j, sid in enumerate(cov.sample_ids):
                    for i, sp in enumerate(species):
                        w.writerow([sid, sp, repr(float(x[j])), repr(float(d[j, i])),
                                    repr(float(smooth[j, i]))])
    for name in s.get("differences") or []:
        l = cov.resolve(name)
        diffs = sm.sample_differences(chain, cov, l, rng)
        mean = diffs.mean(axis=0)
        with open(out.file(f"difference_{cov.names[l]}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "species", "difference"])
            for j, sid in enumerate(cov.sample_ids):
                for i, sp in enumerate(species):
                    w.writerow([sid, sp, repr(float(mean[j, i]))])
        if s.get("age_column") and s.get("age_groups"):
            ages = cov.raw[cov.resolve(s["age_column"])]
            groups = sm.age_group_average(diffs, ages, s["age_groups"])
            q = np.quantile(groups, [0.025, 0.25, 0.5, 0.75, 0.975], axis=0)
            with open(out.file(f"age_groups_{cov.names[l]}.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["group", "species", "mean", "q025", "q25", "q50", "q75", "q975"])
                for g in range(groups.shape[1]):
                    for i, sp in enumerate(species):
                        w.writerow([g + 1, sp, repr(float(groups[:, g, i].mean()))]
                                   + [repr(float(v)) for v in q[:, g, i]])
    sm.write_json(out.file("summary.json"), summary)
    out.manifest("summarize", cfg)
    return 0


def cmd_permtest(args):
    from .summaries import write_json
    from .validation import permutation_test

    cfg = load_config(args.config, args.set)
    table, cov = load_data(cfg)
    p = cfg["permtest"]
    covariate = args.covariate or p.get("covariate")
    if covariate is None:
        raise UsageError("no covariate given (--covariate or permtest.covariate)")
    n_perm = args.n_perm if args.n_perm is not None else int(p["n_perm"])
    fit = sampler_config(cfg, n_iterations=int(p["n_iterations"]),
                         burn_in=int(p["burn_in"]), thin=int(p["thin"]))
    out = Output(args.out, args.overwrite)
    res = permutation_test(table, cov, covariate, n_perm, fit, hyperparams(cfg),
                           seed=cfg["seed"], n_jobs=int(p["n_jobs"]),
                           persist_path=out.file("permutation.csv"))
    res.to_csv(os.path.join(out.path, "permutation.csv"))
    write_json(out.file("permutation.json"), res.to_dict())
    out.manifest("permtest", cfg)
    print(f"{res.covariate}: observed norm {res.observed_norm:.4g}, p = {res.p_value:.4g}")
    return 0


def cmd_loocheck(args):
    import csv

    from .summaries import write_json
    from .validation import loo_coverage

    cfg = load_config(args.config, args.set)
    table, cov = load_data(cfg)
    chain = pooled(load_chains(args.chains))
    level = float(cfg["loocheck"]["level"])
    out = Output(args.out, args.overwrite)
    rep = loo_coverage(chain, table, level, np.random.default_rng(cfg["seed"]))
    rep.to_csv(out.file("loo.csv"))
    with open(out.file("loo_species.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["species", "coverage"])
        for sp, c in zip(table.species_ids, rep.species_coverage):
            w.writerow([sp, repr(float(c))])
    write_json(out.file("loo.json"), rep.to_dict())
    out.manifest("loocheck", cfg)
    print(f"mean coverage at level {level}: {rep.mean_coverage:.4f} "
          f"({int(rep.unreliable.sum())} samples with k_hat > 0.7)")
    return 0


def cmd_score(args):
    from .io import load_truth
    from .scoring import score_chain
    from .summaries import write_json

    cfg = load_config(args.config, args.set)
    table, cov = load_data(cfg)
    chain = pooled(load_chains(args.chains))
    truth, _ = load_truth(args.truth)
    s = cfg["score"]
    out = Output(args.out, args.overwrite)
    res = score_chain(chain, truth, cov, s.get("covariate"), grid_values(s["grid"]),
                      s.get("fixed"), float(s["level"]), int(s["n_mc"]),
                      np.random.default_rng(cfg["seed"]))
    write_json(out.file("scores.json"), res)
    out.manifest("score", cfg)
    print(json.dumps({k: v for k, v in res.items() if not isinstance(v, list)}, indent=2))
    return 0


# ---------------------------------------------------------------- entry point

def build_parser():
    p = _Parser(prog="dirfactor", description="Dirichlet-factor regression for OTU tables")
    p.add_argument("--version", action="version", version=f"dirfactor {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, chains=False, config_required=True):
        sp.add_argument("--config", required=config_required)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", required=True)
        sp.add_argument("--overwrite", action="store_true")
        if chains:
            sp.add_argument("--chains", nargs="+", required=True,
                            help="chain record files or fit directories")

    sp = sub.add_parser("simulate", help="simulate a dataset with ground truth")
    common(sp, config_required=False)
    sp.add_argument("--preset")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="run the Gibbs sampler")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("diagnose", help="convergence diagnostics for chain files")
    common(sp, chains=True, config_required=False)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("summarize", help="trends, derivatives, similarity matrices")
    common(sp, chains=True)
    sp.set_defaults(func=cmd_summarize)

    sp = sub.add_parser("permtest", help="permutation test for one covariate")
    common(sp)
    sp.add_argument("--covariate")
    sp.add_argument("--n-perm", type=int)
    sp.set_defaults(func=cmd_permtest)

    sp = sub.add_parser("loocheck", help="PSIS leave-one-out predictive coverage")
    common(sp, chains=True)
    sp.set_defaults(func=cmd_loocheck)

    sp = sub.add_parser("score", help="recovery metrics against ground truth")
    common(sp, chains=True)
    sp.add_argument("--truth", required=True)
    sp.set_defaults(func=cmd_score)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not getattr(args, "func", None):
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DirFactorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
