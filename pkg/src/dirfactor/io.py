"""Reading and writing OTU tables, covariates and ground-truth states.

OTU table: tab-separated; the header row holds a label for the species
column followed by the sample IDs; every other row holds a species ID
followed by one nonnegative integer count per sample.

Covariates: comma-separated; the header row holds a label for the sample
column followed by covariate names; one row per sample, matched to the OTU
table by sample ID.  An optional grouping column (individual labels, any
strings) is split off rather than treated as a covariate.
"""

from __future__ import annotations

import csv
import json
import re

import numpy as np

from .design import CovariateMatrix
from .errors import CovariateError, ParseError
from .model import LatentState, OtuTable

_INT = re.compile(r"^[+]?\d+$")


def load_otu(path):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    rows = [(k + 1, line) for k, line in enumerate(lines) if line.strip()]
    if not rows:
        raise ParseError("empty OTU table", path=path)
    head_no, head = rows[0]
    header = [c.strip() for c in head.split("\t")]
    if len(header) < 2:
        raise ParseError("header needs a species column and at least one sample",
                         line=head_no, path=path)
    samples = header[1:]
    seen = {}
    for s in samples:
        if s in seen:
            raise ParseError(f"duplicate sample ID {s!r}", line=head_no, path=path)
        seen[s] = True
    species, counts, first_line = [], [], {}
    for lineno, line in rows[1:]:
        cells = [c.strip() for c in line.split("\t")]
        if len(cells) != len(header):
            raise ParseError(f"ragged row: {len(cells)} fields, expected {len(header)}",
                             line=lineno, path=path)
        sid = cells[0]
        if sid in first_line:
            raise ParseError(f"duplicate species ID {sid!r} (first seen on line "
                             f"{first_line[sid]})", line=lineno, path=path)
        first_line[sid] = lineno
        row = []
        for c in cells[1:]:
            if not _INT.match(c):
                raise ParseError(f"non-integer count {c!r}", line=lineno, path=path)
            row.append(int(c))
        species.append(sid)
        counts.append(row)
    if not species:
        raise ParseError("OTU table has no species rows", path=path)
    return OtuTable(np.array(counts, dtype=np.int64), species, samples,
                    index_name=header[0])


def save_otu(table, path):
    with open(path, "w", newline="") as fh:
        fh.write("\t".join([table.index_name] + list(table.sample_ids)) + "\n")
        for sid, row in zip(table.species_ids, table.counts):
            fh.write("\t".join([sid] + [str(int(x)) for x in row]) + "\n")


def load_covariates(path, sample_ids=None, terms=None, grouping_column=None):
    """Read a covariate CSV, reordered to ``sample_ids`` when given.

    Returns ``(CovariateMatrix, grouping)``; ``grouping`` is the list of
    individual labels from ``grouping_column`` (None without one).
    """
    with open(path, newline="") as fh:
        reader = list(csv.reader(fh))
    rows = [(k + 1, r) for k, r in enumerate(reader) if any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty covariate file", path=path)
    head_no, header = rows[0]
    header = [c.strip() for c in header]
    names = header[1:]
    if grouping_column is not None and grouping_column not in names:
        raise CovariateError(f"grouping column {grouping_column!r} not in {path}")
    numeric = [n for n in names if n != grouping_column]
    by_id, groups = {}, {}
    for lineno, r in rows[1:]:
        if len(r) != len(header):
            raise ParseError(f"ragged row: {len(r)} fields, expected {len(header)}",
                             line=lineno, path=path)
        sid = r[0].strip()
        if sid in by_id:
            raise ParseError(f"duplicate sample ID {sid!r}", line=lineno, path=path)
        vals = []
        for name, cell in zip(names, r[1:]):
            cell = cell.strip()
            if name == grouping_column:
                groups[sid] = cell
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r} in column {name!r}",
                                 line=lineno, path=path) from None
        by_id[sid] = vals
    order = list(sample_ids) if sample_ids is not None else list(by_id)
    missing = [s for s in order if s not in by_id]
    if missing:
        raise CovariateError(f"{len(missing)} sample(s) missing from {path}: {missing[:5]}")
    raw = np.array([by_id[s] for s in order], dtype=float).T.reshape(len(numeric), len(order))
    cov = CovariateMatrix(raw, numeric, terms, order)
    grouping = [groups[s] for s in order] if grouping_column is not None else None
    return cov, grouping


def save_covariates(covariates, path, grouping=None, grouping_column="individual",
                    index_name="sample"):
    ids = covariates.sample_ids or [f"sample{j + 1}" for j in range(covariates.n_samples)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        head = [index_name] + list(covariates.names)
        if grouping is not None:
            head.append(grouping_column)
        out.writerow(head)
        for j, sid in enumerate(ids):
            row = [sid] + [repr(float(x)) for x in covariates.raw[:, j]]
            if grouping is not None:
                row.append(str(grouping[j]))
            out.writerow(row)


def state_to_dict(state):
    return {"sigma": state.sigma.tolist(), "X": state.X.tolist(), "Y": state.Y.tolist(),
            "v": state.v.tolist(), "Q": state.Q.tolist(), "T": state.T.tolist(),
            "delta": state.delta.tolist(), "grouping": np.asarray(state.grouping).tolist()}


def state_from_dict(d):
    arr = {k: np.asarray(d[k], dtype=float) for k in ("sigma", "X", "Y", "v", "Q", "T", "delta")}
    for k in ("X", "Y", "v", "Q"):
        arr[k] = np.atleast_2d(arr[k])
    return LatentState(**arr, grouping=np.asarray(d["grouping"], dtype=np.int64))


def save_truth(path, state, extra=None):
    doc = {"state": state_to_dict(state)}
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_truth(path):
    with open(path) as fh:
        doc = json.load(fh)
    return state_from_dict(doc["state"]), doc
