"""Dataset containers and the CSV/manifest persistence format.

The on-disk format is deliberately plain: one row per instance, D
comma-separated decimal feature values followed by a final column that is an
integer class id (latent datasets) or a real-valued target (regression
datasets). Floats are written with 17 significant digits so a save/load
round trip is bit-identical. An optional JSON manifest next to the CSV
(same stem, ``.json`` extension) may pin ``num_classes`` and name index
splits, e.g. ``{"num_classes": 4, "splits": {"train": [0, 1], "test": [2]}}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Malformed dataset file; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LatentDataset:
    """N x D latent feature matrix with dense integer class labels in [0, K)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: dict[str, np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        features = _freeze(np.asarray(self.features, dtype=np.float64))
        labels = _freeze(np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels length must match the number of feature rows")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")
        if self.splits is not None:
            frozen = {name: _freeze(np.asarray(idx, dtype=np.int64)) for name, idx in self.splits.items()}
            for name, idx in frozen.items():
                if idx.size and (idx.min() < 0 or idx.max() >= features.shape[0]):
                    raise ValueError(f"split {name!r} has out-of-range indices")
            object.__setattr__(self, "splits", frozen)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray, num_classes: int | None = None) -> "LatentDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LatentDataset(
            self.features[indices],
            self.labels[indices],
            self.num_classes if num_classes is None else num_classes,
        )

    def split(self, name: str) -> "LatentDataset":
        if not self.splits or name not in self.splits:
            raise KeyError(f"dataset has no split named {name!r}")
        return self.subset(self.splits[name])


@dataclass(frozen=True)
class RegressionDataset:
    """N x D input matrix with a real-valued target per row."""

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        inputs = _freeze(np.asarray(self.inputs, dtype=np.float64))
        targets = _freeze(np.asarray(self.targets, dtype=np.float64))
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        if inputs.ndim != 2 or inputs.shape[0] < 1 or inputs.shape[1] < 1:
            raise ValueError(f"inputs must be a non-empty 2-D matrix, got shape {inputs.shape}")
        if targets.shape != (inputs.shape[0],):
            raise ValueError("targets length must match the number of input rows")
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise ValueError("regression data contains non-finite values")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def manifest_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def _parse_rows(path: Path) -> tuple[np.ndarray, list[tuple[int, str]]]:
    """Returns (feature matrix, list of (line number, final-column token))."""
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    rows: list[list[float]] = []
    tails: list[tuple[int, str]] = []
    ncols: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if ncols is None:
                ncols = len(parts)
                if ncols < 2:
                    raise DataFormatError("need at least one feature column and one label column", lineno)
            if len(parts) != ncols:
                raise DataFormatError(f"expected {ncols} columns, found {len(parts)}", lineno)
            try:
                values = [float(p) for p in parts[:-1]]
            except ValueError:
                raise DataFormatError("non-numeric feature value", lineno) from None
            if not all(np.isfinite(values)):
                raise DataFormatError("non-finite feature value", lineno)
            rows.append(values)
            tails.append((lineno, parts[-1]))
    if ncols is None:
        raise DataFormatError(f"dataset file {path} contains no data rows")
    return np.asarray(rows, dtype=np.float64), tails


def load_latent_dataset(path: str | Path) -> LatentDataset:
    """Reads the latent CSV format; K defaults to 1 + max(label).

    An adjacent manifest may override ``num_classes`` and attach splits.
    """
    path = Path(path)
    features, tails = _parse_rows(path)
    labels = np.empty(len(tails), dtype=np.int64)
    for row, (lineno, token) in enumerate(tails):
        try:
            label = int(token)
        except ValueError:
            raise DataFormatError(f"label {token!r} is not an integer", lineno) from None
        if label < 0:
            raise DataFormatError(f"negative label {label}", lineno)
        labels[row] = label

    num_classes = int(labels.max()) + 1
    splits = None
    mpath = manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        if "num_classes" in manifest:
            num_classes = int(manifest["num_classes"])
        if "splits" in manifest:
            splits = {name: np.asarray(idx, dtype=np.int64) for name, idx in manifest["splits"].items()}
    return LatentDataset(features, labels, num_classes, splits=splits)


def save_latent_dataset(dataset: LatentDataset, path: str | Path, write_manifest: bool | None = None) -> None:
    """Writes the CSV (17 significant digits) and, when useful, the manifest.

    The manifest is emitted when the dataset carries splits or when its
    num_classes cannot be inferred back from the labels, unless forced
    either way with ``write_manifest``.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(dataset.features, dataset.labels):
            fh.write(",".join("%.17g" % v for v in row))
            fh.write(f",{int(label)}\n")
    inferred = int(dataset.labels.max()) + 1
    need_manifest = dataset.splits is not None or inferred != dataset.num_classes
    if write_manifest is None:
        write_manifest = need_manifest
    if write_manifest:
        manifest: dict = {"num_classes": dataset.num_classes}
        if dataset.splits is not None:
            manifest["splits"] = {name: [int(i) for i in idx] for name, idx in dataset.splits.items()}
        manifest_path(path).write_text(json.dumps(manifest, sort_keys=True), encoding="utf-8")


def load_regression_dataset(path: str | Path) -> RegressionDataset:
    """Reads the regression CSV format (final column is the real target)."""
    path = Path(path)
    inputs, tails = _parse_rows(path)
    targets = np.empty(len(tails), dtype=np.float64)
    for i, (lineno, token) in enumerate(tails):
        try:
            targets[i] = float(token)
        except ValueError:
            raise DataFormatError(f"target {token!r} is not numeric", lineno) from None
        if not np.isfinite(targets[i]):
            raise DataFormatError("non-finite target value", lineno)
    return RegressionDataset(inputs, targets)


def save_regression_dataset(dataset: RegressionDataset, path: str | Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for row, target in zip(dataset.inputs, dataset.targets):
            fh.write(",".join("%.17g" % v for v in row))
            fh.write(",%.17g\n" % target)
