"""Delimited-text data files and result tables."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError

__all__ = ["DataTable", "read_data", "write_data", "write_fit_table", "format_float", "config_digest"]

REQUIRED = ("area_id", "y", "offset")
AREA_COLUMNS = ("area_id", "phi_median", "phi_lo", "phi_hi", "mu_median", "risk_median")


def format_float(v):
    v = float(v)
    if np.isnan(v):
        return "NA"
    return f"{v:.10g}"


def config_digest(config):
    """Short sha256 of a JSON-serialisable mapping (keys sorted)."""
    blob = json.dumps(config, sort_keys=True, default=str, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DataTable:
    """Per-area columns ordered by area index 0..n-1."""

    y: np.ndarray
    offset: np.ndarray
    trials: np.ndarray | None
    covariates: np.ndarray
    covariate_names: tuple

    @property
    def n(self):
        return len(self.y)

    def design(self, with_covariates=True):
        cols = [np.ones(self.n)]
        if with_covariates:
            cols += [self.covariates[:, j] for j in range(self.covariates.shape[1])]
        return np.column_stack(cols)

    def names(self, with_covariates=True):
        return ("intercept",) + (self.covariate_names if with_covariates else ())


def _split(line, delim):
    return [f.strip() for f in line.rstrip("\r\n").split(delim)]


def read_data(path, n=None):
    """Parse a data file with header ``area_id,y,offset[,trials][,covariates...]``.

    Comma or tab delimited.  Rows may come in any order but the area ids
    must be exactly ``0..n-1``.  Problems raise :class:`ParseError` with
    the line number.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    if not lines:
        raise ParseError("empty data file", path)
    delim = "\t" if "\t" in lines[0] else ","
    header = [h.lower() for h in _split(lines[0], delim)]
    if tuple(header[:3]) != REQUIRED:
        raise ParseError(f"header must start with {','.join(REQUIRED)}; got {','.join(header[:3])}", path, 1)
    if len(set(header)) != len(header) or any(not h for h in header):
        raise ParseError("empty or duplicate column names in header", path, 1)
    has_trials = len(header) > 3 and header[3] == "trials"
    cov_names = tuple(header[4:] if has_trials else header[3:])
    width = len(header)
    rows = {}
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        fields = _split(raw, delim)
        if len(fields) != width:
            raise ParseError(f"expected {width} fields, found {len(fields)}", path, ln)
        try:
            k = int(fields[0])
        except ValueError:
            raise ParseError(f"area_id {fields[0]!r} is not an integer", path, ln) from None
        try:
            vals = [float(f) for f in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric value ({exc})", path, ln) from None
        if not all(np.isfinite(vals)):
            raise ParseError("non-finite value", path, ln)
        if k in rows:
            raise ParseError(f"duplicate area_id {k}", path, ln)
        if k < 0:
            raise ParseError(f"negative area_id {k}", path, ln)
        rows[k] = (ln, vals)
    if not rows:
        raise ParseError("no data rows", path)
    count = len(rows)
    if n is not None and count != n:
        raise ParseError(f"file has {count} areas but the adjacency has {n}", path)
    missing = sorted(set(range(count)) - set(rows))
    if missing:
        bad = max(rows)
        raise ParseError(f"area ids must be 0..{count - 1}; id {bad} out of range, {missing[0]} missing",
                         path, rows[bad][0])
    arr = np.array([rows[k][1] for k in range(count)]).reshape(count, width - 1)
    y = arr[:, 0]
    offset = arr[:, 1]
    trials = arr[:, 2] if has_trials else None
    cov = arr[:, 3:] if has_trials else arr[:, 2:]
    return DataTable(y, offset, trials, np.ascontiguousarray(cov), cov_names)


def write_data(path, y, offset, covariates=None, names=(), trials=None, header_lines=()):
    y = np.asarray(y, dtype=float)
    cov = np.zeros((len(y), 0)) if covariates is None else np.asarray(covariates, dtype=float).reshape(len(y), -1)
    names = tuple(names) or tuple(f"x{j + 1}" for j in range(cov.shape[1]))
    cols = list(REQUIRED) + (["trials"] if trials is not None else []) + list(names)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(y)):
            vals = [str(k), format_float(y[k]), format_float(offset[k])]
            if trials is not None:
                vals.append(format_float(trials[k]))
            vals += [format_float(v) for v in cov[k]]
            fh.write(",".join(vals) + "\n")


def write_fit_table(path, fit_result, header_lines=()):
    """Per-area table in the fixed column order of :data:`AREA_COLUMNS`."""
    n = fit_result.n
    nan = np.full(n, np.nan)
    phi = fit_result.phi
    cols = [
        np.arange(n),
        phi.median if phi is not None else nan,
        phi.lo if phi is not None else nan,
        phi.hi if phi is not None else nan,
        fit_result.mu.median,
        fit_result.risk.median if fit_result.risk is not None else nan,
    ]
    with open(path, "w", encoding="utf-8") as fh:
        for h in header_lines:
            fh.write(f"# {h}\n")
        fh.write(",".join(AREA_COLUMNS) + "\n")
        for k in range(n):
            fh.write(",".join([str(k)] + [format_float(c[k]) for c in cols[1:]]) + "\n")
