"""File formats: triplet CSV and MatrixMarket coordinate observations,
feature CSVs, trace and report CSVs.

All writers go through a temp-file-plus-rename so partial output never
lands at the target path.  Readers report line numbers on parse errors
and name both lines of a duplicate entry.
"""

from __future__ import annotations

import csv
import os
import tempfile

import numpy as np

from .errors import DataError
from .operators import ObservedMatrix
from .sideinfo import FeatureMatrix

TRIPLET_CSV = "triplet-csv"
MATRIX_MARKET = "matrix-market"


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sniff_format(path):
    with open(path) as f:
        first = f.readline()
    if first.startswith("%%MatrixMarket"):
        return MATRIX_MARKET
    return TRIPLET_CSV


def read_observations(path, fmt=None, n_rows=None, n_cols=None) -> ObservedMatrix:
    fmt = fmt or sniff_format(path)
    if fmt == MATRIX_MARKET:
        return _read_matrix_market(path)
    if fmt == TRIPLET_CSV:
        return _read_triplet_csv(path, n_rows, n_cols)
    raise DataError(f"unknown observation format {fmt!r}")


def _read_triplet_csv(path, n_rows=None, n_cols=None):
    rows, cols, vals, lines = [], [], [], []
    declared = (n_rows, n_cols)
    header_seen = False
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["dims"]:
                    if len(parts) != 3:
                        raise DataError(f"{path}:{lineno}: malformed '# dims n m' line")
                    file_dims = (int(parts[1]), int(parts[2]))
                    # flags override the file's declaration
                    declared = (
                        declared[0] if declared[0] is not None else file_dims[0],
                        declared[1] if declared[1] is not None else file_dims[1],
                    )
                continue
            fields = next(csv.reader([line]))
            if not header_seen:
                if [s.strip().lower() for s in fields] != ["row", "col", "value"]:
                    raise DataError(f"{path}:{lineno}: expected header 'row,col,value'")
                header_seen = True
                continue
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(fields)}")
            try:
                i, j, v = int(fields[0]), int(fields[1]), float(fields[2])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            rows.append(i)
            cols.append(j)
            vals.append(v)
            lines.append(lineno)
    if not header_seen:
        raise DataError(f"{path}: missing 'row,col,value' header")
    if not rows:
        raise DataError(f"{path}: no observations")
    _check_duplicates(path, rows, cols, lines)
    nr = declared[0] if declared[0] is not None else max(rows) + 1
    nc = declared[1] if declared[1] is not None else max(cols) + 1
    for k, (i, j) in enumerate(zip(rows, cols)):
        if not (0 <= i < nr and 0 <= j < nc):
            raise DataError(
                f"{path}:{lines[k]}: entry ({i}, {j}) outside declared dims {nr} x {nc}"
            )
    return ObservedMatrix(nr, nc, rows, cols, vals)


def _check_duplicates(path, rows, cols, lines):
    seen = {}
    for k, key in enumerate(zip(rows, cols)):
        if key in seen:
            raise DataError(
                f"{path}: duplicate entry {key} at lines {seen[key]} and {lines[k]}"
            )
        seen[key] = lines[k]


def _read_matrix_market(path):
    with open(path) as f:
        header = f.readline().strip().split()
        if (len(header) != 5 or header[0] != "%%MatrixMarket"
                or header[1] != "matrix" or header[2] != "coordinate"
                or header[3] not in ("real", "integer") or header[4] != "general"):
            raise DataError(
                f"{path}:1: expected '%%MatrixMarket matrix coordinate real|integer general'"
            )
        size = None
        rows, cols, vals, lines = [], [], [], []
        for lineno, raw in enumerate(f, start=2):
            line = raw.strip()
            if not line or line.startswith("%"):
                continue
            parts = line.split()
            try:
                if size is None:
                    nr, nc, nnz = int(parts[0]), int(parts[1]), int(parts[2])
                    size = (nr, nc, nnz)
                    continue
                i, j, v = int(parts[0]), int(parts[1]), float(parts[2])
            except (ValueError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            # MatrixMarket coordinate entries are 1-based
            rows.append(i - 1)
            cols.append(j - 1)
            vals.append(v)
            lines.append(lineno)
    if size is None or not rows:
        raise DataError(f"{path}: no observations")
    if len(rows) != size[2]:
        raise DataError(f"{path}: header declares {size[2]} entries, found {len(rows)}")
    _check_duplicates(path, rows, cols, lines)
    for k, (i, j) in enumerate(zip(rows, cols)):
        if not (0 <= i < size[0] and 0 <= j < size[1]):
            raise DataError(
                f"{path}:{lines[k]}: entry outside declared dims {size[0]} x {size[1]}"
            )
    return ObservedMatrix(size[0], size[1], rows, cols, vals)


def format_observations(y: ObservedMatrix, fmt=TRIPLET_CSV):
    out = []
    if fmt == TRIPLET_CSV:
        out.append(f"# dims {y.n_rows} {y.n_cols}")
        out.append("row,col,value")
        for i, j, v in zip(y.rows, y.cols, y.values):
            out.append(f"{i},{j},{v!r}")
    elif fmt == MATRIX_MARKET:
        out.append("%%MatrixMarket matrix coordinate real general")
        out.append(f"{y.n_rows} {y.n_cols} {y.nnz}")
        for i, j, v in zip(y.rows, y.cols, y.values):
            out.append(f"{i + 1} {j + 1} {v!r}")
    else:
        raise DataError(f"unknown observation format {fmt!r}")
    return "\n".join(out) + "\n"


def write_observations(y: ObservedMatrix, path, fmt=TRIPLET_CSV):
    atomic_write(path, format_observations(y, fmt))


def read_features(path, expected_rows=None) -> FeatureMatrix:
    """Feature CSV: header, first column the unit index, the rest numeric.

    Indices must cover 0..n-1 exactly (categoricals are expected to be
    pre-expanded to dummies; see the `dummies` subcommand).
    """
    with open(path) as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty feature file") from None
        labels = tuple(h.strip() for h in header[1:])
        idx, feats = [], []
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            try:
                idx.append(int(fields[0]))
                feats.append([float(v) for v in fields[1:]])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
    if not idx:
        raise DataError(f"{path}: no feature rows")
    idx = np.asarray(idx)
    feats = np.asarray(feats, dtype=np.float64)
    n = expected_rows if expected_rows is not None else idx.max() + 1
    if np.unique(idx).size != idx.size:
        raise DataError(f"{path}: duplicate indices in feature file")
    if idx.min() < 0 or idx.max() >= n or idx.size != n:
        raise DataError(f"{path}: feature indices must cover 0..{n - 1} exactly")
    out = np.empty_like(feats)
    out[idx] = feats
    return FeatureMatrix(out, labels)


def write_trace_csv(trace, path):
    out = ["iteration,seconds,objective,rank,svd_iters,step"]
    for r in trace.rows:
        out.append(f"{r.iteration},{r.seconds!r},{r.objective!r},{r.rank},"
                   f"{r.svd_iterations},{r.step!r}")
    atomic_write(path, "\n".join(out) + "\n")


_REPORT_FIELDS = ("lam", "train_objective", "test_deviance", "test_mse",
                  "test_misclass", "test_logloss", "rank", "seconds", "converged")


def write_report_csv(points, path, extra_cols=None):
    """One row per evaluation point; extra_cols maps names to per-row lists."""
    extra = extra_cols or {}
    header = ",".join(_REPORT_FIELDS + tuple(extra))
    out = [header]
    for k, p in enumerate(points):
        vals = []
        for name in _REPORT_FIELDS:
            v = getattr(p, name)
            vals.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
        for name in extra:
            vals.append(str(extra[name][k]))
        out.append(",".join(vals))
    atomic_write(path, "\n".join(out) + "\n")
