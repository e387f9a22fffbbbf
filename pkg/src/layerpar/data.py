"""Datasets: Peaks level-set classification, MNIST (IDX files) and plain CSV.

Features are stored column-wise, ``(n_f, s)``, targets as one-hot columns
``(n_c, s)`` so that a batch can be fed straight into the network.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.features.shape[1] != self.targets.shape[1]:
            raise DataFormatError(
                f"{self.features.shape[1]} feature columns but {self.targets.shape[1]} target columns")
        if np.any(self.targets < 0) or not np.allclose(self.targets.sum(axis=0), 1.0, rtol=0, atol=1e-12):
            raise DataFormatError("target columns must lie in the unit simplex")
        if np.intersect1d(self.train_idx, self.val_idx).size:
            raise DataFormatError("train and validation indices overlap")

    @property
    def n_features(self):
        return self.features.shape[0]

    @property
    def n_classes(self):
        return self.targets.shape[0]

    @property
    def n_samples(self):
        return self.features.shape[1]

    def train(self):
        return self.features[:, self.train_idx], self.targets[:, self.train_idx]

    def validation(self):
        return self.features[:, self.val_idx], self.targets[:, self.val_idx]


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((n_classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def split_indices(s, seed, val_fraction=0.2):
    """Random train/validation split depending only on ``(s, seed, val_fraction)``."""
    perm = np.random.default_rng(seed).permutation(s)
    n_val = int(round(val_fraction * s))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# --------------------------------------------------------------------------
# Peaks


def peaks_function(x, y):
    """The classical two-dimensional peaks surface."""
    return (3.0 * (1.0 - x) ** 2 * np.exp(-x**2 - (y + 1.0) ** 2)
            - 10.0 * (x / 5.0 - x**3 - y**5) * np.exp(-x**2 - y**2)
            - np.exp(-(x + 1.0) ** 2 - y**2) / 3.0)


def peaks_gradient(x, y):
    """Analytic gradient ``(df/dx, df/dy)`` of :func:`peaks_function`."""
    e1 = np.exp(-x**2 - (y + 1.0) ** 2)
    e2 = np.exp(-x**2 - y**2)
    e3 = np.exp(-(x + 1.0) ** 2 - y**2)
    p = x / 5.0 - x**3 - y**5
    dx = (-6.0 * (1.0 - x) * e1 - 6.0 * x * (1.0 - x) ** 2 * e1
          - 10.0 * (0.2 - 3.0 * x**2) * e2 + 20.0 * x * p * e2
          + 2.0 * (x + 1.0) * e3 / 3.0)
    dy = (-6.0 * (y + 1.0) * (1.0 - x) ** 2 * e1
          + 50.0 * y**4 * e2 + 20.0 * y * p * e2
          + 2.0 * y * e3 / 3.0)
    return dx, dy


_PEAKS_EDGES = None


def peaks_quantile_edges():
    """Level-set edges: 20/40/60/80% quantiles of f on a 301x301 grid over [-3,3]^2."""
    global _PEAKS_EDGES
    if _PEAKS_EDGES is None:
        t = np.linspace(-3.0, 3.0, 301)
        X, Y = np.meshgrid(t, t)
        _PEAKS_EDGES = np.quantile(peaks_function(X, Y), [0.2, 0.4, 0.6, 0.8])
    return _PEAKS_EDGES.copy()


def generate_peaks(s, seed=0, quantile_edges=None, val_fraction=0.2):
    """``s`` uniform points in [-3,3]^2 labelled by which of five level bands they hit."""
    if s < 10:
        raise ValueError("need at least 10 samples")
    edges = peaks_quantile_edges() if quantile_edges is None else np.asarray(quantile_edges, dtype=float)
    if edges.shape != (4,) or np.any(np.diff(edges) <= 0):
        raise ValueError("quantile edges must be 4 increasing reals")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-3.0, 3.0, size=(2, s))
    labels = np.searchsorted(edges, peaks_function(pts[0], pts[1]), side="right")
    train, val = split_indices(s, seed, val_fraction)
    return Dataset(pts, one_hot(labels, 5), train, val, "peaks")


# --------------------------------------------------------------------------
# MNIST IDX


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at byte offset 0")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise DataFormatError(f"{path}: bad magic 0x{found:08X} at byte offset 0 (expected 0x{magic:08X})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated dimension header at byte offset 4")
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataFormatError(
            f"{path}: truncated data at byte offset {len(raw)}, expected {header + size} bytes")
    return dims, np.frombuffer(raw, dtype=np.uint8, count=size, offset=header)


def load_mnist(images_path, labels_path, limit=None, seed=0, val_fraction=0.2):
    """Read IDX image/label files; pixels scaled to [0,1], labels one-hot over 10 classes."""
    (n_img, rows, cols), pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise DataFormatError(f"{n_img} images but {n_lab} labels (count at byte offset 4)")
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{labels_path}: label {labels[bad]} at byte offset {8 + bad} exceeds 9")
    n = n_img if limit is None else min(int(limit), n_img)
    X = pixels[: n * rows * cols].reshape(n, rows * cols).T / 255.0
    train, val = split_indices(n, seed, val_fraction)
    return Dataset(X, one_hot(labels[:n], 10), train, val, "mnist")


def write_idx(path, array, magic):
    """Write a uint8 array as an IDX file (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


# --------------------------------------------------------------------------
# CSV


def load_csv(path, n_classes, has_header=False, standardize=False, seed=0, val_fraction=0.2):
    """Rows of feature floats followed by an integer label in ``[0, n_classes)``."""
    feats, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if has_header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise DataFormatError(f"line {lineno}: need at least one feature and a label")
            elif len(row) != width:
                raise DataFormatError(f"line {lineno}: expected {width} columns, found {len(row)}")
            try:
                x = [float(cell) for cell in row[:-1]]
                label = int(row[-1])
            except ValueError as err:
                raise DataFormatError(f"line {lineno}: {err}") from None
            if not 0 <= label < n_classes:
                raise DataFormatError(f"line {lineno}: label {label} outside [0, {n_classes})")
            feats.append(x)
            labels.append(label)
    if not feats:
        raise DataFormatError(f"{path}: no data rows")
    X = np.array(feats).T
    if standardize:
        mean = X.mean(axis=1, keepdims=True)
        std = X.std(axis=1, keepdims=True)
        std[std == 0] = 1.0
        X = (X - mean) / std
    train, val = split_indices(X.shape[1], seed, val_fraction)
    return Dataset(X, one_hot(labels, n_classes), train, val, "csv")


def make_toy(s=10, n_features=2, n_classes=3, seed=0, val_fraction=0.5):
    """Small random classification problem for derivative and equivalence checks."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n_features, s))
    labels = rng.integers(0, n_classes, size=s)
    train, val = split_indices(s, seed, val_fraction)
    return Dataset(X, one_hot(labels, n_classes), train, val, "toy")
