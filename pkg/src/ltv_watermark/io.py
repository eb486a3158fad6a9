"""File formats: long-form matrix CSV, atomic writes, key-value reports."""

import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_text(path, text):
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def fmt(v):
    return format(float(v), ".17g")


def matrix_csv(mats, path=None, meta=None):
    """Matrix sequences as long-form CSV: ``name,n,row,col,value``.

    Indices are row-major; ``meta`` entries go in leading ``# key=value`` lines.
    """
    lines = [f"# {k}={v}" for k, v in sorted((meta or {}).items())]
    lines.append("name,n,row,col,value")
    for name, arr in mats.items():
        arr = np.asarray(arr, float)
        if arr.ndim == 2:
            arr = arr[None]
        N, R, C = arr.shape
        for n in range(N):
            for i in range(R):
                for j in range(C):
                    lines.append(f"{name},{n},{i},{j},{fmt(arr[n, i, j])}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text


def read_matrix_csv(path):
    meta = {}
    entries = {}
    with open(path) as fh:
        rows = []
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            else:
                rows.append(line)
    for rec in csv.DictReader(rows):
        entries.setdefault(rec["name"], []).append(
            (int(rec["n"]), int(rec["row"]), int(rec["col"]), float(rec["value"]))
        )
    mats = {}
    for name, recs in entries.items():
        N = max(r[0] for r in recs) + 1
        R = max(r[1] for r in recs) + 1
        C = max(r[2] for r in recs) + 1
        arr = np.zeros((N, R, C))
        for n, i, j, v in recs:
            arr[n, i, j] = v
        mats[name] = arr
    return mats, meta


def table_csv(columns, path=None):
    """Tidy CSV from an ordered mapping of column name to 1-D array."""
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    lines = [",".join(names)]
    for row in zip(*cols):
        out = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                out.append("" if np.isnan(v) else fmt(v))
            elif isinstance(v, (bool, np.bool_)):
                out.append("1" if v else "0")
            else:
                out.append(str(v))
        lines.append(",".join(out))
    text = "\n".join(lines) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text


def key_value_text(report):
    """``key = value`` lines; lists and arrays rendered as JSON."""
    out = []
    for k, v in report.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        if isinstance(v, (list, tuple, dict)):
            v = json.dumps(v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"
