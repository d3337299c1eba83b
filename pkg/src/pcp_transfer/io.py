"""Data files, fit snapshots and run configuration.

Snapshots are JSON text.  Python writes floats with the shortest repr that
round-trips, so saved parameter vectors reload bit-identically.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .network import Architecture, NetworkParams, ShapeError
from .training import SourceFit

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

FIT_FORMAT = "pcp-transfer-fit"
FIT_VERSION = 1
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    """A data or snapshot file that cannot be parsed; carries the line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


# ---------------------------------------------------------------- datasets


@dataclass
class LoadReport:
    rows_read: int
    rows_dropped: int
    dropped_lines: list[int] = field(default_factory=list)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()
    report: LoadReport | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, float)
        self.y = np.asarray(self.y, float)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ShapeError("feature matrix and response must have matching row counts")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset entries must be finite")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=str)
            if self.split.shape != self.y.shape or not set(self.split) <= set(SPLITS):
                raise ValueError(f"split labels must be one of {SPLITS}, one per row")
        if not self.feature_names:
            self.feature_names = tuple(f"x{j + 1}" for j in range(self.X.shape[1]))

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, label: str) -> Dataset:
        if self.split is None:
            raise ValueError("dataset has no split column")
        keep = self.split == label
        return Dataset(self.X[keep], self.y[keep], None, self.feature_names)


def load_csv(path, response: str = "y", features=None, *, drop_nonfinite: bool = True) -> Dataset:
    """Read a header-first CSV into a :class:`Dataset`.

    ``features`` defaults to every column except the response and an optional
    ``split`` column.  Rows with non-finite values are dropped and counted in
    the report unless ``drop_nonfinite`` is false, in which case they raise.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataFormatError("empty file, expected a header row", 1)
        header = [h.strip() for h in header]
        if response not in header:
            raise DataFormatError(f"response column {response!r} not found", 1)
        has_split = "split" in header
        if features is None:
            features = [h for h in header if h not in (response, "split")]
        missing = [f for f in features if f not in header]
        if missing:
            raise DataFormatError(f"feature columns {missing} not found", 1)
        idx_x = [header.index(f) for f in features]
        idx_y = header.index(response)
        idx_s = header.index("split") if has_split else None
        X, y, split, dropped = [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", line)
            try:
                xs = [float(row[i]) for i in idx_x]
                yv = float(row[idx_y])
            except ValueError as exc:
                raise DataFormatError(f"cannot parse number ({exc})", line) from None
            if not (all(math.isfinite(v) for v in xs) and math.isfinite(yv)):
                if not drop_nonfinite:
                    raise DataFormatError("non-finite value", line)
                dropped.append(line)
                continue
            if has_split:
                label = row[idx_s].strip()
                if label not in SPLITS:
                    raise DataFormatError(f"split label {label!r} not in {SPLITS}", line)
                split.append(label)
            X.append(xs)
            y.append(yv)
    report = LoadReport(len(y) + len(dropped), len(dropped), dropped)
    X_arr = np.array(X, float).reshape(len(y), len(features))
    return Dataset(X_arr, np.array(y, float), np.array(split) if has_split else None, tuple(features), report)


def load_features(path, response: str = "y") -> tuple[np.ndarray, np.ndarray | None]:
    """Feature matrix and, when the file has one, the response column.

    Used for prediction inputs, where the response may be absent.  Non-finite
    values are rejected rather than dropped so outputs stay row-aligned.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header:
        raise DataFormatError("empty file, expected a header row", 1)
    header = [h.strip() for h in header]
    if response in header:
        data = load_csv(path, response, drop_nonfinite=False)
        return data.X, data.y
    return load_csv_columns(path, header), None


def load_csv_columns(path, columns) -> np.ndarray:
    """Numeric columns of a header-first CSV, excluding a ``split`` column."""
    columns = [c for c in columns if c != "split"]
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        idx = [header.index(c) for c in columns]
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, found {len(row)}", reader.line_num)
            try:
                vals = [float(row[i]) for i in idx]
            except ValueError as exc:
                raise DataFormatError(f"cannot parse number ({exc})", reader.line_num) from None
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError("non-finite value", reader.line_num)
            rows.append(vals)
    return np.array(rows, float).reshape(len(rows), len(columns))


def save_csv(data: Dataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(data.feature_names) + ["y"] + (["split"] if data.split is not None else []))
        for i in range(len(data)):
            row = [repr(float(v)) for v in data.X[i]] + [repr(float(data.y[i]))]
            if data.split is not None:
                row.append(str(data.split[i]))
            writer.writerow(row)
    return path


def write_table(path, columns, rows) -> Path:
    """Write a CSV after checking every row carries exactly ``columns`` with finite numbers."""
    columns = tuple(columns)
    for i, row in enumerate(rows):
        if len(row) != len(columns):
            raise ValueError(f"row {i} has {len(row)} fields, schema has {len(columns)}")
        for v in row:
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"row {i} holds a non-finite value")
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


# ---------------------------------------------------------------- snapshots


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def save_fit(fit: SourceFit, path) -> Path:
    """Write a versioned snapshot of a source fit."""
    arch = fit.params.arch
    doc = {
        "format": FIT_FORMAT,
        "version": FIT_VERSION,
        "architecture": {"widths": list(arch.widths), "activations": list(arch.activations)},
        "params": fit.params.flat.tolist(),
        "sigma_diag": None if fit.sigma_diag is None else fit.sigma_diag.tolist(),
        "metadata": _jsonable(fit.metadata),
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_fit(path, arch: Architecture | None = None) -> SourceFit:
    """Read a snapshot, checking its version and, if given, the expected architecture."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"snapshot is not valid JSON ({exc.msg})", exc.lineno) from None
    if doc.get("format") != FIT_FORMAT:
        raise DataFormatError("not a fit snapshot")
    if doc.get("version") != FIT_VERSION:
        raise DataFormatError(f"snapshot version {doc.get('version')} unsupported, expected {FIT_VERSION}")
    a = doc["architecture"]
    saved = Architecture(tuple(a["widths"]), tuple(a["activations"]))
    if arch is not None and arch != saved:
        raise ShapeError(f"snapshot architecture {saved.widths} differs from expected {arch.widths}")
    params = NetworkParams(saved, np.array(doc["params"], float))
    sigma = doc.get("sigma_diag")
    if sigma is not None and len(sigma) != saved.n_params:
        raise ShapeError("variance block length does not match the parameter vector")
    return SourceFit(params, None if sigma is None else np.array(sigma, float), doc.get("metadata") or {})


# ---------------------------------------------------------------- run configuration


SECTIONS = ("trainer", "vi_trainer", "prior", "sampler", "scenario", "kl")
_PATH_KEYS = ("output_dir", "data", "source", "test_data")


@dataclass
class RunConfig:
    """Parsed run file: global seed, output directory and per-section overrides."""

    seed: int = 0
    output_dir: Path = Path(".")
    paths: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)

    def apply(self, section: str, obj):
        """Copy of dataclass ``obj`` with the section's keys replaced."""
        values = self.sections.get(section, {})
        if not values:
            return obj
        allowed = {f.name: f for f in fields(obj)}
        unknown = set(values) - set(allowed)
        if unknown:
            raise ValueError(f"unknown keys in [{section}]: {sorted(unknown)}")
        coerced = {}
        for k, v in values.items():
            current = getattr(obj, k)
            if is_dataclass(current):
                raise ValueError(f"[{section}] key {k!r} is a nested section and cannot be set directly")
            coerced[k] = tuple(v) if isinstance(current, tuple) else v
        return replace(obj, **coerced)


def load_config(path, known: dict | None = None) -> RunConfig:
    """Parse a TOML run file, rejecting unknown keys.

    ``known`` maps section names to the dataclass instances whose fields
    are valid keys; sections absent from it are accepted as free-form only
    if they are listed in :data:`SECTIONS`.  Paths resolve against the
    config file's directory.
    """
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise DataFormatError(f"invalid TOML: {exc}") from None
    base = path.parent
    cfg = RunConfig()
    for key, value in doc.items():
        if key == "seed":
            if not isinstance(value, int) or value < 0:
                raise ValueError("seed must be a non-negative integer")
            cfg.seed = value
        elif key in _PATH_KEYS:
            resolved = (base / value).resolve()
            cfg.paths[key] = resolved
            if key == "output_dir":
                cfg.output_dir = resolved
        elif key in SECTIONS:
            if not isinstance(value, dict):
                raise ValueError(f"{key} must be a table")
            if known and key in known:
                valid = {f.name for f in fields(known[key])}
                unknown = set(value) - valid
                if unknown:
                    raise ValueError(f"unknown keys in [{key}]: {sorted(unknown)}")
            cfg.sections[key] = dict(value)
        else:
            raise ValueError(f"unknown configuration key {key!r}")
    return cfg


# ---------------------------------------------------------------- chains


def save_chain(chain, path) -> Path:
    """Store posterior draws as a compressed ``.npz`` archive."""
    arrays = {"flats": chain.flats, "sigma": chain.sigma}
    for name in ("tau", "tau_tilde", "c", "log_post"):
        value = getattr(chain, name)
        if value is not None:
            arrays[name] = value
    meta = {
        "widths": list(chain.arch.widths),
        "activations": list(chain.arch.activations),
        "kind": chain.kind,
        "diagnostics": {k: v for k, v in _jsonable(chain.diagnostics).items() if k != "step_trace"},
    }
    path = Path(path)
    with path.open("wb") as fh:
        np.savez_compressed(fh, meta=np.array(json.dumps(meta)), **arrays)
    return path


def load_chain(path):
    from .posterior import Chain

    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        arch = Architecture(tuple(meta["widths"]), tuple(meta["activations"]))
        get = lambda k: z[k] if k in z.files else None  # noqa: E731
        chain = Chain(arch, meta["kind"], z["flats"], z["sigma"], get("tau"), get("tau_tilde"), get("c"), get("log_post"))
    if chain.flats.shape[1] != arch.n_params:
        raise ShapeError("stored draws do not match the stored architecture")
    chain.diagnostics = meta.get("diagnostics", {})
    return chain
