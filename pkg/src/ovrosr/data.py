"""
Labeled feature datasets: CSV / OSRF I/O, synthetic generators and
open-set scenario splits.

CSV layout: a header row, the label in the first column (or the column
named by ``label_column``), features in the remaining columns.

OSRF layout: ASCII magic ``OSRF``, little-endian u32 row count, u32
dimension, then row-major float64 values; labels go to a sidecar CSV
``<path>.labels.csv`` with one label per line after a ``label`` header.
"""

from __future__ import annotations

import csv
import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .exceptions import ConfigurationError, ContractError, DataError

OSRF_MAGIC = b"OSRF"


class LabeledDataset:
    """Feature matrix with one string label per row.

    ``class_index`` maps each label to a contiguous index; by default labels
    are indexed in order of first appearance.
    """

    def __init__(self, features, labels, classes=None):
        X = np.asarray(features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {X.shape}")
        labels = np.asarray([str(v) for v in labels], dtype=object)
        if labels.shape[0] != X.shape[0]:
            raise ContractError(
                f"{X.shape[0]} feature rows but {labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(X)):
            raise ContractError("features must be finite")
        if classes is None:
            classes = list(dict.fromkeys(labels.tolist()))
        else:
            classes = [str(c) for c in classes]
            missing = set(labels.tolist()) - set(classes)
            if missing:
                raise DataError(f"labels not among declared classes: {sorted(missing)}")
        if len(set(classes)) != len(classes):
            raise ContractError("duplicate class labels")
        self.features = X
        self.labels = labels
        self.class_index = {c: i for i, c in enumerate(classes)}

    @property
    def classes(self):
        return list(self.class_index)

    @property
    def n_classes(self):
        return len(self.class_index)

    @property
    def dim(self):
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    @property
    def y_index(self):
        return np.array([self.class_index[l] for l in self.labels], dtype=int)

    def subset(self, mask_or_idx, classes=None):
        return LabeledDataset(self.features[mask_or_idx], self.labels[mask_or_idx], classes)

    def class_counts(self):
        return {c: int(np.sum(self.labels == c)) for c in self.classes}

    def __eq__(self, other):
        return (
            isinstance(other, LabeledDataset)
            and self.classes == other.classes
            and np.array_equal(self.features, other.features)
            and list(self.labels) == list(other.labels)
        )

    def __repr__(self):
        return f"LabeledDataset(n={len(self)}, dim={self.dim}, classes={self.n_classes})"


@dataclass
class OpenSetSplit:
    train: LabeledDataset
    test: LabeledDataset
    known_labels: list
    unknown_labels: list
    seed: int

    @property
    def openness(self):
        from .evaluation import OpennessSpec, openness

        k, u = len(self.known_labels), len(self.unknown_labels)
        return openness(OpennessSpec(k, k + u, k + u))


# -- CSV ---------------------------------------------------------------------

def save_csv(dataset: LabeledDataset, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(dataset.dim)])
        for label, row in zip(dataset.labels, dataset.features):
            w.writerow([label] + [repr(float(v)) for v in row])
    return path


def load_csv(path, label_column=0) -> LabeledDataset:
    """Read a labeled CSV. ``label_column`` is a column name or index."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if isinstance(label_column, str) and not label_column.isdigit():
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
    else:
        li = int(label_column)
    if not body:
        raise DataError(f"{path}: no data rows")
    feats, labels = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
            )
        vals = row[:li] + row[li + 1:]
        try:
            parsed = [float(v) for v in vals]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric feature value in row {lineno - 1}") from None
        if not all(math.isfinite(v) for v in parsed):
            raise DataError(f"{path}:{lineno}: non-finite feature value in row {lineno - 1}")
        feats.append(parsed)
        labels.append(row[li])
    return LabeledDataset(np.array(feats, dtype=float).reshape(len(body), -1), labels)


# -- OSRF binary -------------------------------------------------------------

def save_osrf(dataset: LabeledDataset, path):
    path = Path(path)
    n, d = dataset.features.shape
    with path.open("wb") as fh:
        fh.write(OSRF_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(dataset.features, dtype="<f8").tobytes())
    sidecar = Path(str(path) + ".labels.csv")
    with sidecar.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"])
        for label in dataset.labels:
            w.writerow([label])
    return path


def load_osrf(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != OSRF_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    n, d = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 8 * n * d:
        raise DataError(f"{path}: expected {8 * n * d} data bytes, found {len(body)}")
    X = np.frombuffer(body, dtype="<f8").reshape(n, d).astype(float)
    with Path(str(path) + ".labels.csv").open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    if len(rows) != n:
        raise DataError(f"{path}: sidecar has {len(rows)} labels for {n} rows")
    return LabeledDataset(X, [r[0] for r in rows])


def load_dataset(path, label_column=0):
    path = Path(path)
    if path.suffix.lower() == ".osrf":
        return load_osrf(path)
    return load_csv(path, label_column)


# -- generators --------------------------------------------------------------

SUPPLEMENTARY_CENTERS = np.array([[0.0, 3.0], [-2.6, -1.5], [2.6, -1.5]])
SUPPLEMENTARY_LABELS = ("o", "x", "+")
SUPPLEMENTARY_STD = 0.6


def linearly_separable(A, B) -> bool:
    """Exact LP feasibility test for strict linear separability of two point sets."""
    X = np.vstack([A, B])
    s = np.concatenate([np.ones(len(A)), -np.ones(len(B))])
    # find (w, b) with s_i (w.x_i + b) >= 1
    A_ub = -s[:, None] * np.hstack([X, np.ones((len(X), 1))])
    res = linprog(np.zeros(X.shape[1] + 1), A_ub=A_ub, b_ub=-np.ones(len(X)),
                  bounds=[(None, None)] * (X.shape[1] + 1), method="highs")
    return res.status == 0


def gen_supplementary_2d(seed=0, n_per_class=100) -> LabeledDataset:
    """Three well separated 2-D Gaussian clusters labeled ``o``, ``x``, ``+``.

    Draws are repeated (up to 100 times) until every pair of classes is
    linearly separable.
    """
    if n_per_class < 10:
        raise ConfigurationError("n_per_class must be at least 10")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        parts = [c + SUPPLEMENTARY_STD * rng.standard_normal((n_per_class, 2))
                 for c in SUPPLEMENTARY_CENTERS]
        if all(linearly_separable(parts[i], parts[j])
               for i, j in itertools.combinations(range(3), 2)):
            break
    else:  # pragma: no cover - probability is negligible at this spacing
        raise RuntimeError("could not draw a linearly separable sample")
    labels = np.repeat(SUPPLEMENTARY_LABELS, n_per_class)
    return LabeledDataset(np.vstack(parts), labels, SUPPLEMENTARY_LABELS)


def lattice_centroids(classes, dim, separation):
    """Centroids on a hypercubic lattice with nearest-neighbour spacing ``separation``."""
    side = 1
    while side ** dim < classes:
        side += 1
    pts = np.array(list(itertools.islice(itertools.product(range(side), repeat=dim), classes)),
                   dtype=float)
    pts -= pts.mean(axis=0)
    return pts * separation


def gen_blobs(seed=0, classes=4, dim=2, separation=6.0, n_per_class=50) -> LabeledDataset:
    """Unit-variance isotropic Gaussian blobs centred on :func:`lattice_centroids`."""
    if classes < 2:
        raise ConfigurationError("classes must be >= 2")
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    if separation < 0:
        raise ConfigurationError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = lattice_centroids(classes, dim, separation)
    X = np.vstack([c + rng.standard_normal((n_per_class, dim)) for c in centers])
    names = [f"c{i}" for i in range(classes)]
    return LabeledDataset(X, np.repeat(names, n_per_class), names)


# -- splits ------------------------------------------------------------------

def open_split(data: LabeledDataset, n_unknown: int, train_fraction=0.8, seed=0) -> OpenSetSplit:
    """Pick ``n_unknown`` classes as unknown; split known classes per class.

    Unknown-class samples only appear in the test set.
    """
    C = data.n_classes
    if not 0 <= n_unknown < C:
        raise ConfigurationError(f"n_unknown must be in [0, {C - 1}], got {n_unknown}")
    if not 0 < train_fraction < 1:
        raise ConfigurationError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    classes = data.classes
    unknown_idx = sorted(rng.choice(C, size=n_unknown, replace=False).tolist())
    unknown = [classes[i] for i in unknown_idx]
    known = [c for c in classes if c not in unknown]

    train_idx, test_idx = [], []
    for c in known:
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(train_fraction * len(idx)))
        if len(idx) >= 2:
            n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.extend(idx[:n_train])
        test_idx.extend(idx[n_train:])
    for c in unknown:
        test_idx.extend(np.flatnonzero(data.labels == c))
    train_idx = np.sort(np.array(train_idx, dtype=int))
    test_idx = np.sort(np.array(test_idx, dtype=int))
    return OpenSetSplit(
        train=data.subset(train_idx, known),
        test=data.subset(test_idx, classes),
        known_labels=known,
        unknown_labels=unknown,
        seed=seed,
    )
