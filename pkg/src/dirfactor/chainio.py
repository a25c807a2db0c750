"""Chain record files.

Layout::

    DIRFACTOR-CHAIN 1
    dims {"I": .., "J": .., "K": .., "U": .., "P": ..}
    seed 0
    config_hash <sha256 of the sampler config>
    config {...}
    hyper {...}
    data <sha256 of counts, design and grouping>
    grouping 0 0 1 1 ...
    fields sigma X Y v Q T delta
    END

followed by one fixed-size binary record per retained draw: the fields in
the order listed, each flattened in C order, as little-endian float64.
Records are appended as draws are retained, so a truncated run leaves a
readable prefix.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .errors import ParseError
from .model import Hyperparams

VERSION = 1
MAGIC = "DIRFACTOR-CHAIN"
FIELDS = ("sigma", "X", "Y", "v", "Q", "T", "delta")


def field_shapes(dims):
    I, J, K, U, P = (dims[k] for k in ("I", "J", "K", "U", "P"))
    return {"sigma": (I,), "X": (K, I), "Y": (K, U), "v": (P, I), "Q": (I, J),
            "T": (J,), "delta": (K,)}


def record_size(dims):
    return sum(int(np.prod(s)) for s in field_shapes(dims).values())


def _header(dims, config, hyper, fingerprint, grouping):
    lines = [
        f"{MAGIC} {VERSION}",
        "dims " + json.dumps(dims, sort_keys=True),
        f"seed {config.seed}",
        f"config_hash {config.digest()}",
        "config " + json.dumps(config.to_dict(), sort_keys=True),
        "hyper " + json.dumps(hyper.to_dict(), sort_keys=True),
        f"data {fingerprint}",
        "grouping " + " ".join(str(int(g)) for g in grouping),
        "fields " + " ".join(FIELDS),
        "END",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


class ChainWriter:
    """Append-only writer; ``open(existing)`` rewrites the header plus any
    draws kept before a resume so the file always matches the chain."""

    def __init__(self, path, dims, config, hyper, fingerprint, grouping):
        self.path = path
        self.dims = dict(dims)
        self.header = _header(self.dims, config, hyper, fingerprint, grouping)
        self.fh = None

    def open(self, existing=()):
        self.fh = open(self.path, "wb")
        self.fh.write(self.header)
        for draw in existing:
            self._write(draw)
        self.fh.flush()

    def _write(self, draw):
        buf = np.concatenate([np.asarray(draw[f], dtype="<f8").ravel() for f in FIELDS])
        self.fh.write(buf.tobytes())

    def append(self, state):
        self._write({f: getattr(state, f) for f in FIELDS})
        self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()
            self.fh = None


def read_header(fh, path=None):
    meta = {}
    for lineno in range(1, 100):
        raw = fh.readline()
        if not raw:
            raise ParseError("chain header ended before END", line=lineno, path=path)
        line = raw.decode("ascii").rstrip("\n")
        if lineno == 1:
            magic, _, ver = line.partition(" ")
            if magic != MAGIC:
                raise ParseError("not a chain record file", line=1, path=path)
            if int(ver) != VERSION:
                raise ParseError(f"unsupported chain version {ver}", line=1, path=path)
            meta["version"] = int(ver)
            continue
        if line == "END":
            return meta
        key, _, val = line.partition(" ")
        if key in ("dims", "config", "hyper"):
            meta[key] = json.loads(val)
        elif key == "seed":
            meta[key] = int(val)
        elif key == "grouping":
            meta[key] = np.array([int(x) for x in val.split()], dtype=np.int64)
        elif key == "fields":
            meta[key] = val.split()
        else:
            meta[key] = val
    raise ParseError("chain header too long", path=path)


def read_chain(path):
    """Load a chain record file into a :class:`~dirfactor.sampler.Chain`.

    A trailing partial record (interrupted write) is dropped.
    """
    from .sampler import Chain, SamplerConfig

    with open(path, "rb") as fh:
        meta = read_header(fh, path)
        body = fh.read()
    if meta.get("fields") != list(FIELDS):
        raise ParseError(f"unexpected field order {meta.get('fields')}", path=path)
    dims = meta["dims"]
    shapes = field_shapes(dims)
    size = record_size(dims)
    n = len(body) // (8 * size)
    data = np.frombuffer(body[: n * size * 8], dtype="<f8").reshape(n, size)
    draws, start = {}, 0
    for f in FIELDS:
        width = int(np.prod(shapes[f]))
        draws[f] = data[:, start:start + width].reshape((n,) + shapes[f]).astype(float)
        start += width
    config = SamplerConfig(**meta["config"])
    hyper = Hyperparams(**meta["hyper"])
    chain = Chain(draws, config, hyper, meta["grouping"], meta.get("data", ""),
                  complete=n == config.n_draws, iterations_done=0,
                  meta={"path": str(path), "config_hash": meta.get("config_hash")})
    return chain


def write_chain(path, chain):
    """Write an in-memory chain as a record file."""
    dims = {"I": chain.draws["sigma"].shape[1], "J": chain.draws["Q"].shape[2],
            "K": chain.draws["X"].shape[1], "U": chain.draws["Y"].shape[2],
            "P": chain.draws["v"].shape[1]}
    w = ChainWriter(path, dims, chain.config, chain.hyper, chain.data_fingerprint,
                    chain.grouping)
    w.open([{f: chain.draws[f][k] for f in FIELDS} for k in range(len(chain))])
    w.close()


def export_csv(chain, path, fields=FIELDS):
    """One row per draw per parameter block: draw, block, then the flattened values."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["draw", "block", "shape", "values"])
        for k in range(len(chain)):
            for f in fields:
                a = chain.draws[f][k]
                out.writerow([k, f, "x".join(map(str, a.shape)),
                              " ".join(repr(float(x)) for x in a.ravel())])
