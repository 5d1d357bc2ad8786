"""CSV ingestion, iris preprocessing, and result/trace serialization."""

from __future__ import annotations

import csv
import json
import math
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .model import Assignment, Dataset, MapSolution, Params

TRACE_HEADER = ("t_seconds", "ubd", "glbd", "nodes", "queue_len")


class DataError(ValueError):
    pass


def load_csv(path) -> Dataset:
    """Read a headed CSV: numeric feature columns plus optional ``id`` and ``label``.

    Blank feature cells become 0 and are counted in ``Dataset.missing``.
    Labels are 1-based in the file and 0-based in the returned dataset.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    lower = [h.lower() for h in header]
    id_col = lower.index("id") if "id" in lower else None
    label_col = lower.index("label") if "label" in lower else None
    feat_cols = [j for j in range(len(header)) if j not in (id_col, label_col)]
    if not feat_cols:
        raise DataError(f"{path}: no feature columns")
    points, ids, labels = [], [], {}
    missing = 0
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        vals = []
        for j in feat_cols:
            cell = row[j].strip()
            if cell == "":
                vals.append(0.0)
                missing += 1
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {r}, column {header[j]!r}: not a number: {cell!r}") from None
        i = len(points)
        points.append(vals)
        if id_col is not None:
            ids.append(row[id_col].strip())
        if label_col is not None and row[label_col].strip():
            try:
                lab = int(row[label_col])
            except ValueError:
                raise DataError(f"{path}: row {r}: label must be an integer") from None
            if lab < 1:
                raise DataError(f"{path}: row {r}: labels are 1-based")
            labels[i] = lab - 1
    if not points:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(points), ids=tuple(ids) if id_col is not None else None,
                   known_labels=labels, missing=missing)


def write_csv(data: Dataset, path, feature_names=None) -> None:
    names = list(feature_names or ([f"x{j + 1}" for j in range(data.d)] if data.d > 1 else ["x"]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["id"] if data.ids else []) + names + (["label"] if data.known_labels else []))
        for i in range(data.n):
            row = ([data.ids[i]] if data.ids else []) + [repr(float(v)) for v in data.points[i]]
            if data.known_labels:
                row.append(data.known_labels[i] + 1 if i in data.known_labels else "")
            w.writerow(row)


def bundled_iris() -> Path:
    return Path(str(resources.files("mapcluster") / "data" / "iris.csv"))


def prep_iris1d(path=None, per_class: Optional[int] = None) -> Dataset:
    """First principal component of the centred (unscaled) iris features.

    The sign makes the largest-magnitude loading positive.  ``per_class``
    keeps the first that many samples of each class in file order, after
    projecting the full table.
    """
    data = load_csv(path or bundled_iris())
    if data.d != 4:
        raise DataError(f"iris table must have 4 feature columns, got {data.d}")
    X = data.points - data.points.mean(axis=0)
    cov = X.T @ X / (data.n - 1)
    w, V = np.linalg.eigh(cov)
    v = V[:, -1]
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    proj = X @ v
    keep = np.arange(data.n)
    if per_class is not None:
        if len(data.known_labels) != data.n:
            raise DataError("subsetting by class needs a label on every row")
        seen: dict[int, int] = {}
        keep = []
        for i in range(data.n):
            k = data.known_labels[i]
            if seen.get(k, 0) < per_class:
                keep.append(i)
                seen[k] = seen.get(k, 0) + 1
        keep = np.array(keep)
    labels = {j: data.known_labels[i] for j, i in enumerate(keep) if i in data.known_labels}
    ids = tuple(data.ids[i] for i in keep) if data.ids else tuple(str(i + 1) for i in keep)
    return Dataset(proj[keep][:, None], ids=ids, known_labels=labels)


def avg_label_precision(data: Dataset) -> np.ndarray:
    """Inverse of the pooled within-label covariance (needs every label known)."""
    if len(data.known_labels) != data.n:
        raise DataError("avg-labels precision needs a label on every row")
    labs = np.array([data.known_labels[i] for i in range(data.n)])
    resid = data.points.copy()
    for k in np.unique(labs):
        resid[labs == k] -= data.points[labs == k].mean(axis=0)
    dof = data.n - np.unique(labs).size
    if dof <= 0:
        raise DataError("not enough samples to pool a within-label covariance")
    return np.linalg.inv(np.atleast_2d(resid.T @ resid / dof))


# -- results ---------------------------------------------------------------------


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isfinite(x):
        return x
    return "inf" if x > 0 else "-inf" if x < 0 else "nan"


def _unnum(x):
    return float(x) if isinstance(x, str) else x


def solution_fields(sol: Optional[MapSolution]) -> dict:
    if sol is None:
        return {"objective_ubd": None, "assignment": None, "mu": None, "pi": None}
    return {
        "objective_ubd": _num(sol.objective),
        "assignment": [int(k) + 1 for k in sol.labels],
        "mu": sol.params.mu.tolist(),
        "pi": sol.params.pi.tolist(),
    }


def write_result(path, record: dict) -> None:
    text = json.dumps({k: (_num(v) if isinstance(v, float) else v) for k, v in record.items()},
                      indent=2, sort_keys=True)
    if path is None or str(path) == "-":
        print(text)
        return
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_result(path) -> dict:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("objective_ubd", "glbd", "true_glbd", "gap", "e_max"):
        if key in rec:
            rec[key] = _unnum(rec[key])
    return rec


def solution_from_result(rec: dict, K: Optional[int] = None) -> MapSolution:
    """Rebuild a MapSolution (0-based) from a result or truth record."""
    if rec.get("assignment") is None:
        raise DataError("record has no assignment")
    mu = np.atleast_2d(np.asarray(rec["mu"], dtype=float))
    K = K or mu.shape[0]
    labels = np.asarray(rec["assignment"], dtype=int) - 1
    a = Assignment.from_labels(labels, K)
    obj = rec.get("objective_ubd")
    return MapSolution(a, Params(mu, np.asarray(rec["pi"], dtype=float)),
                       float("nan") if obj is None else float(obj))


def write_trace(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for r in records:
            w.writerow([repr(float(r.t)), repr(float(r.ubd)), repr(float(r.glbd)), int(r.nodes), int(r.queue_len)])


def read_trace(path) -> list[tuple]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != TRACE_HEADER:
        raise DataError(f"unexpected trace header {rows[0]}")
    return [(float(t), float(u), float(g), int(n), int(q)) for t, u, g, n, q in rows[1:]]
