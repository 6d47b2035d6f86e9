"""CSV ingestion, CLR preprocessing, and dataset / truth / model serialization.

Dataset CSV: one row per sample, a header, metadata columns ``sample_id``,
``task_id``, ``label`` (0 or 1) and optionally a group column; every other
column is a feature. Model archives are JSON documents with a sha256
checksum over the canonical payload.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baselines import L1LogisticModel
from .core import Hyperparameters, MultitaskDataset, TaskData, VariationalState
from .errors import ArchiveError, DomainError, ParseError, ShapeError
from .synthgen import GroundTruth

REQUIRED_COLUMNS = ("sample_id", "task_id", "label")
DEFAULT_GROUP_COLUMN = "group_id"
INTERCEPT_NAME = "intercept"
FORMAT_VERSION = 1
MODEL_KINDS = ("bayes-mtl", "stl-lc", "pooled-lc")
FLOAT_FORMAT = "%.17g"


def clr_transform(counts):
    """Centered log ratio: log(x) - mean(log(x)). Works row-wise on 2-D input."""
    x = np.asarray(counts, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("CLR needs strictly positive finite entries; add a pseudocount first")
    logs = np.log(x)
    return logs - logs.mean(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class AbundanceTable:
    """Parsed CSV contents in file order."""

    sample_ids: tuple
    task_ids: tuple
    labels: np.ndarray
    values: np.ndarray  # (N, d)
    feature_names: tuple
    groups: Optional[tuple] = None


def _parse_float(text, line, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"row {line}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"row {line}: column {column!r} is not finite: {text!r}")
    return value


def read_table(path, group_column=None) -> AbundanceTable:
    """Parse a dataset CSV. Row numbers in errors count the header as row 1."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise ParseError("row 1: duplicate column names")
        meta = list(REQUIRED_COLUMNS)
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if group_column is not None:
            meta.append(group_column)
            if group_column not in header:
                missing.append(group_column)
        if missing:
            raise ParseError(f"row 1: missing required column(s) {missing}")
        if DEFAULT_GROUP_COLUMN in header and DEFAULT_GROUP_COLUMN not in meta:
            meta.append(DEFAULT_GROUP_COLUMN)
        pos = {name: i for i, name in enumerate(header)}
        feat_cols = [i for i, name in enumerate(header) if name not in meta]
        if not feat_cols:
            raise ParseError("row 1: no feature columns")

        sample_ids, task_ids, labels, groups, rows = [], [], [], [], []
        for line, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                raise ParseError(f"row {line}: expected {len(header)} fields, found {len(rec)}")
            label = _parse_float(rec[pos["label"]], line, "label")
            if label not in (0.0, 1.0):
                raise ParseError(f"row {line}: label must be 0 or 1, got {rec[pos['label']]!r}")
            sample_ids.append(rec[pos["sample_id"]])
            task_ids.append(rec[pos["task_id"]])
            labels.append(label)
            if group_column is not None:
                groups.append(rec[pos[group_column]])
            rows.append([_parse_float(rec[i], line, header[i]) for i in feat_cols])
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return AbundanceTable(
        sample_ids=tuple(sample_ids),
        task_ids=tuple(task_ids),
        labels=np.array(labels),
        values=np.array(rows, dtype=float),
        feature_names=tuple(header[i] for i in feat_cols),
        groups=tuple(groups) if group_column is not None else None,
    )


def preprocess(values, pseudocount=1.0, apply_clr=False, add_intercept=False):
    values = np.asarray(values, dtype=float)
    if apply_clr:
        if pseudocount < 0:
            raise DomainError("pseudocount must be non-negative")
        if np.any(values < 0):
            raise DomainError("counts must be non-negative before CLR")
        values = clr_transform(values + pseudocount)
    if add_intercept:
        values = np.hstack([values, np.ones((values.shape[0], 1))])
    return values


def _first_seen(items):
    return list(dict.fromkeys(items))


def _build(table, rows, values, names):
    # values[k] belongs to file row rows[k]
    task_ids = [table.task_ids[i] for i in rows]
    tasks, ids = [], []
    for tid in _first_seen(task_ids):
        local = [k for k, t in enumerate(task_ids) if t == tid]
        sel = [rows[k] for k in local]
        tasks.append(TaskData(values[local], table.labels[sel], tid))
        ids.extend(table.sample_ids[i] for i in sel)
    return MultitaskDataset(tuple(tasks), names), tuple(ids)


def table_to_datasets(table: AbundanceTable, pseudocount=1.0, apply_clr=False, add_intercept=False):
    """Split a table into datasets.

    Returns ``{group: (dataset, sample_ids)}`` keyed by group in order of
    first appearance, or ``{None: ...}`` for an ungrouped table. Tasks appear
    in order of first appearance and rows keep file order within a task;
    ``sample_ids`` follow the stacked row order of the dataset.
    """
    names = table.feature_names + ((INTERCEPT_NAME,) if add_intercept else ())
    values = preprocess(table.values, pseudocount, apply_clr, add_intercept)
    if table.groups is None:
        rows = list(range(len(table.sample_ids)))
        return {None: _build(table, rows, values, names)}
    out = {}
    for group in _first_seen(table.groups):
        rows = [i for i, g in enumerate(table.groups) if g == group]
        out[group] = _build(table, rows, values[rows], names)
    return out


def load_dataset(path, pseudocount=1.0, apply_clr=False, group_column=None, add_intercept=False):
    """Read a dataset CSV.

    With ``group_column`` the result is a dict mapping each group to its own
    MultitaskDataset; otherwise a single MultitaskDataset. CLR (with the
    pseudocount added first) is opt-in; the intercept column is appended
    after CLR.
    """
    table = read_table(path, group_column)
    parts = table_to_datasets(table, pseudocount, apply_clr, add_intercept)
    if group_column is None:
        return parts[None][0]
    return {group: ds for group, (ds, _) in parts.items()}


def _fmt(x):
    return FLOAT_FORMAT % x


def atomic_write_text(path, text):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    """CSV with floats at 17 significant digits; written atomically."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def save_dataset(data: MultitaskDataset, path, sample_ids=None, group=None):
    """Write ``data`` in the CSV layout read by ``load_dataset``."""
    if sample_ids is None:
        sample_ids = [f"{task.task_id}-{i}" for task in data.tasks for i in range(task.n)]
    if len(sample_ids) != sum(data.n_per_task):
        raise ShapeError("one sample id per row is required")
    header = list(REQUIRED_COLUMNS) + ([DEFAULT_GROUP_COLUMN] if group is not None else []) + list(data.names)
    rows, k = [], 0
    for task in data.tasks:
        for x, y in zip(task.design, task.labels):
            meta = [sample_ids[k], task.task_id, int(y)] + ([group] if group is not None else [])
            rows.append(meta + [float(v) for v in x])
            k += 1
    write_csv(path, header, rows)


def save_truth(truth: GroundTruth, path):
    """Long format ``param,row,col,value``."""
    rows = []
    for t, j in np.ndindex(*truth.W0.shape):
        rows.append(["W0", t, j, float(truth.W0[t, j])])
    for j, z in enumerate(truth.z0):
        rows.append(["z0", 0, j, float(z)])
    rows.append(["theta0", 0, 0, float(truth.theta0)])
    if truth.Sigma0 is not None:
        for a, b in np.ndindex(*truth.Sigma0.shape):
            rows.append(["Sigma0", a, b, float(truth.Sigma0[a, b])])
    write_csv(path, ["param", "row", "col", "value"], rows)


def load_truth(path) -> GroundTruth:
    entries = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["param", "row", "col", "value"]:
            raise ParseError(f"row 1: expected header param,row,col,value, got {header}")
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise ParseError(f"row {line}: expected 4 fields, found {len(rec)}")
            try:
                key = (int(rec[1]), int(rec[2]))
            except ValueError:
                raise ParseError(f"row {line}: row/col must be integers") from None
            entries.setdefault(rec[0], {})[key] = _parse_float(rec[3], line, "value")
    for need in ("W0", "z0", "theta0"):
        if need not in entries:
            raise ParseError(f"truth file lacks parameter {need!r}")

    def dense(name):
        cells = entries[name]
        shape = (max(r for r, _ in cells) + 1, max(c for _, c in cells) + 1)
        out = np.zeros(shape)
        for (r, c), v in cells.items():
            out[r, c] = v
        return out

    Sigma0 = dense("Sigma0") if "Sigma0" in entries else None
    return GroundTruth(dense("W0"), dense("z0")[0], float(entries["theta0"][(0, 0)]), Sigma0)


# ---- model archives ----


@dataclass(frozen=True, eq=False)
class ModelArchive:
    """A fitted model plus what is needed to reuse and audit it.

    ``state`` is set for ``bayes-mtl``; ``baselines`` holds one L1 model per
    task for ``stl-lc`` or a single model for ``pooled-lc``.
    """

    kind: str
    feature_names: tuple
    task_ids: tuple
    fingerprint: str
    config: dict = field(default_factory=dict)
    hyperparameters: Optional[Hyperparameters] = None
    state: Optional[VariationalState] = None
    elbo_trace: tuple = ()
    baselines: tuple = ()

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ArchiveError(f"unknown model kind {self.kind!r}")
        if self.kind == "bayes-mtl" and self.state is None:
            raise ArchiveError("bayes-mtl archive needs a state")
        if self.kind != "bayes-mtl" and not self.baselines:
            raise ArchiveError(f"{self.kind} archive needs fitted baseline models")

    @property
    def T(self):
        return len(self.task_ids)

    @property
    def d(self):
        return len(self.feature_names)

    def _baseline(self, task_index):
        if not 0 <= task_index < self.T:
            raise ShapeError(f"task index {task_index} out of range for T={self.T}")
        return self.baselines[0] if self.kind == "pooled-lc" else self.baselines[task_index]

    def predict_proba(self, task_index, X):
        if self.kind == "bayes-mtl":
            from .prediction import predict_proba

            return predict_proba(self.state, task_index, X)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise ShapeError(f"X has {X.shape[1]} columns, model has d={self.d}")
        return self._baseline(task_index).predict_proba(X)

    @property
    def effective_weights(self):
        """(T, d) weights used for prediction."""
        if self.kind == "bayes-mtl":
            return self.state.effective_weights
        return np.stack([self._baseline(t).weights for t in range(self.T)])

    @property
    def selected(self):
        """Boolean support: phi >= 0.5, or nonzero weight in any task."""
        if self.kind == "bayes-mtl":
            return self.state.phi >= 0.5
        return np.any(np.stack([m.selected for m in self.baselines]), axis=0)

    def sparse_weights(self):
        """Weights with deselected entries set to exactly zero."""
        if self.kind == "bayes-mtl":
            return self.state.M * self.selected
        return self.effective_weights


def bayes_archive(result, hyper, data: MultitaskDataset, config=None) -> ModelArchive:
    return ModelArchive(
        kind="bayes-mtl",
        feature_names=data.names,
        task_ids=data.task_ids,
        fingerprint=data.fingerprint(),
        config=dict(config or {}),
        hyperparameters=hyper,
        state=result.state,
        elbo_trace=tuple(float(v) for v in result.elbo_trace),
    )


def baseline_archive(kind, models, data: MultitaskDataset, config=None) -> ModelArchive:
    models = (models,) if isinstance(models, L1LogisticModel) else tuple(models)
    return ModelArchive(
        kind=kind,
        feature_names=data.names,
        task_ids=data.task_ids,
        fingerprint=data.fingerprint(),
        config=dict(config or {}),
        baselines=models,
    )


def _arr(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(obj):
    return np.array(obj["data"], dtype=float).reshape(obj["shape"])


def _payload(archive: ModelArchive):
    out = {
        "kind": archive.kind,
        "feature_names": list(archive.feature_names),
        "task_ids": list(archive.task_ids),
        "data_fingerprint": archive.fingerprint,
        "config": archive.config,
    }
    if archive.kind == "bayes-mtl":
        h, s = archive.hyperparameters, archive.state
        out["hyperparameters"] = {"alpha0": h.alpha0, "beta0": h.beta0, "v0": h.v0, "V0": _arr(h.V0)}
        out["state"] = {
            "alpha": s.alpha, "beta": s.beta, "v": s.v, "V": _arr(s.V),
            "phi": _arr(s.phi), "M": _arr(s.M), "Sigmas": _arr(s.Sigmas),
        }
        out["elbo_trace"] = list(archive.elbo_trace)
    else:
        out["models"] = [
            {
                "weights": _arr(m.weights),
                "intercept": m.intercept,
                "lam": m.lam,
                "task_scope": m.task_scope,
                "objective_trace": [float(v) for v in m.objective_trace],
            }
            for m in archive.baselines
        ]
    return out


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def archive_to_text(archive: ModelArchive) -> str:
    payload = _payload(archive)
    doc = {
        "format_version": FORMAT_VERSION,
        "checksum": "sha256:" + hashlib.sha256(_canonical(payload).encode()).hexdigest(),
        "payload": payload,
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def archive_from_text(text) -> ModelArchive:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"archive is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "payload" not in doc:
        raise ArchiveError("archive lacks a payload")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported archive format_version {version!r}; expected {FORMAT_VERSION}")
    payload = doc["payload"]
    digest = "sha256:" + hashlib.sha256(_canonical(payload).encode()).hexdigest()
    if doc.get("checksum") != digest:
        raise ArchiveError("archive checksum mismatch; the file is corrupted or was edited")
    try:
        return _from_payload(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"malformed archive payload: {exc}") from None


def _from_payload(p) -> ModelArchive:
    common = dict(
        kind=p["kind"],
        feature_names=tuple(p["feature_names"]),
        task_ids=tuple(p["task_ids"]),
        fingerprint=p["data_fingerprint"],
        config=p["config"],
    )
    if p["kind"] == "bayes-mtl":
        h, s = p["hyperparameters"], p["state"]
        hyper = Hyperparameters(h["alpha0"], h["beta0"], h["v0"], _unarr(h["V0"]))
        state = VariationalState(
            s["alpha"], s["beta"], s["v"], _unarr(s["V"]),
            _unarr(s["phi"]), _unarr(s["M"]), _unarr(s["Sigmas"]),
        )
        return ModelArchive(hyperparameters=hyper, state=state, elbo_trace=tuple(p["elbo_trace"]), **common)
    models = tuple(
        L1LogisticModel(_unarr(m["weights"]), float(m["intercept"]), float(m["lam"]),
                        m["task_scope"], tuple(m["objective_trace"]))
        for m in p["models"]
    )
    return ModelArchive(baselines=models, **common)


def save_model(archive: ModelArchive, path):
    atomic_write_text(path, archive_to_text(archive))


def load_model(path) -> ModelArchive:
    with open(path, encoding="utf-8") as fh:
        return archive_from_text(fh.read())


def predict_archive(archive: ModelArchive, data: MultitaskDataset):
    """Probabilities for every row of ``data``, matched to the archive's tasks by id."""
    if tuple(data.names) != tuple(archive.feature_names):
        raise ShapeError("dataset features do not match the model's feature names")
    index = {tid: t for t, tid in enumerate(archive.task_ids)}
    out = []
    for task in data.tasks:
        if task.task_id not in index:
            raise ShapeError(f"task {task.task_id!r} was not seen during fitting")
        out.append(archive.predict_proba(index[task.task_id], task.design))
    return out


__all__ = [
    "AbundanceTable", "ModelArchive", "clr_transform", "read_table", "table_to_datasets",
    "load_dataset", "save_dataset", "save_truth", "load_truth", "bayes_archive",
    "baseline_archive", "save_model", "load_model", "archive_to_text", "archive_from_text",
    "predict_archive", "write_csv", "atomic_write_text",
]
