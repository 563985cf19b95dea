"""Synthetic multi-label domain-shift pairs, CSV I/O and deterministic batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.optimize import brentq


@dataclass
class MultiLabelDataset:
    features: np.ndarray  # n x d
    labels: np.ndarray  # n x C, {0, 1}
    domain_tag: str = "source"
    allow_empty_rows: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise ValueError("features and labels must be matrices")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise ValueError(f"dataset needs n >= 1 and d >= 1, got {self.features.shape}")
        if self.labels.shape[0] != n:
            raise ValueError(f"{n} feature rows but {self.labels.shape[0]} label rows")
        if self.labels.shape[1] < 2:
            raise ValueError("dataset needs at least 2 classes")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")
        if not self.allow_empty_rows and np.any(self.labels.sum(axis=1) == 0):
            raise ValueError("every row needs at least one positive label")
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        return (isinstance(other, MultiLabelDataset)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass
class ShiftSpec:
    rotation_angle: float = 0.5
    translation: float | list[float] = 0.5
    scale: float = 1.3
    noise_sigma_source: float = 0.05
    noise_sigma_target: float = 0.15

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.noise_sigma_source <= 0 or self.noise_sigma_target <= 0:
            raise ValueError("noise levels must be positive")

    @classmethod
    def identity(cls, noise: float = 0.05) -> "ShiftSpec":
        return cls(0.0, 0.0, 1.0, noise, noise)

    def translation_vector(self, d: int) -> np.ndarray:
        t = np.asarray(self.translation, dtype=float)
        if t.ndim == 0:
            return np.full(d, float(t))
        if t.shape != (d,):
            raise ValueError(f"translation has length {t.size}, expected {d}")
        return t

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Rotate the first two coordinates, scale, translate."""
        out = x.copy()
        c, s = np.cos(self.rotation_angle), np.sin(self.rotation_angle)
        a, b = x[:, 0].copy(), x[:, 1].copy()
        out[:, 0] = c * a - s * b
        out[:, 1] = s * a + c * b
        return self.scale * out + self.translation_vector(x.shape[1])

    def invert(self, y: np.ndarray) -> np.ndarray:
        x = (y - self.translation_vector(y.shape[1])) / self.scale
        out = x.copy()
        c, s = np.cos(self.rotation_angle), np.sin(self.rotation_angle)
        out[:, 0] = c * x[:, 0] + s * x[:, 1]
        out[:, 1] = -s * x[:, 0] + c * x[:, 1]
        return out


def calibrated_inclusion(p_pos: float, num_classes: int) -> float:
    """Per-class draw probability q so that, after redrawing empty label sets,
    each class is positive with probability ``p_pos``."""
    if p_pos >= 1.0:
        return 1.0
    lo = 1.0 / num_classes
    if p_pos <= lo:
        # conditional marginal is always >= 1/C
        raise ValueError(f"p_pos={p_pos} unreachable with {num_classes} classes and nonempty rows")
    f = lambda q: q / (1.0 - (1.0 - q) ** num_classes) - p_pos  # noqa: E731
    return brentq(f, 1e-12, p_pos, xtol=1e-15)


def _draw_labels(rng: np.random.Generator, n: int, C: int, q: float) -> np.ndarray:
    y = (rng.random((n, C)) < q).astype(float)
    empty = y.sum(axis=1) == 0
    while np.any(empty):
        y[empty] = (rng.random((int(empty.sum()), C)) < q).astype(float)
        empty = y.sum(axis=1) == 0
    return y


def generate_pair(seed: int, n_per_domain: int = 2000, d: int = 16, C: int = 8,
                  shift: ShiftSpec | None = None,
                  p_pos: float | None = None) -> tuple[MultiLabelDataset, MultiLabelDataset]:
    if n_per_domain < 1 or d < 2 or C < 2:
        raise ValueError(f"invalid dims: n={n_per_domain}, d={d}, C={C} (need n>=1, d>=2, C>=2)")
    shift = shift or ShiftSpec()
    p_pos = 2.0 / C if p_pos is None else p_pos
    q = calibrated_inclusion(p_pos, C)
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((C, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    def clean(y):
        s = y @ protos
        norms = np.linalg.norm(s, axis=1, keepdims=True)
        return s / np.maximum(norms, 1e-12)

    y_s = _draw_labels(rng, n_per_domain, C, q)
    x_s = clean(y_s) + shift.noise_sigma_source * rng.standard_normal((n_per_domain, d))
    y_t = _draw_labels(rng, n_per_domain, C, q)
    x_t = shift.apply(clean(y_t)) + shift.noise_sigma_target * rng.standard_normal((n_per_domain, d))
    return MultiLabelDataset(x_s, y_s, "source"), MultiLabelDataset(x_t, y_t, "target")


# ---------------------------------------------------------------------- CSV

def save_csv(ds: MultiLabelDataset, path) -> None:
    header = [f"feature_{j}" for j in range(ds.d)] + [f"label_{j}" for j in range(ds.num_classes)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, y in zip(ds.features, ds.labels):
            w.writerow([format(v, ".17g") for v in x] + [str(int(v)) for v in y])


def load_csv(path, domain_tag: str = "source", allow_empty_rows: bool = False) -> MultiLabelDataset:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    header = rows[0]
    d = sum(1 for h in header if h.startswith("feature_"))
    C = len(header) - d
    expected = [f"feature_{j}" for j in range(d)] + [f"label_{j}" for j in range(C)]
    for got, want in zip(header, expected):
        if got != want:
            raise ValueError(f"{path}: header column {got!r} where {want!r} was expected")
    if d < 1 or C < 1:
        raise ValueError(f"{path}: header needs feature_* and label_* columns")
    if len(rows) < 2:
        raise ValueError(f"{path}: no rows")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + C:
            raise ValueError(f"{path}:{lineno}: expected {d + C} fields, got {len(row)}")
        try:
            feats.append([float(v) for v in row[:d]])
            lab = [float(v) for v in row[d:]]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
        if any(v not in (0.0, 1.0) for v in lab):
            raise ValueError(f"{path}:{lineno}: label outside {{0, 1}}")
        labels.append(lab)
    return MultiLabelDataset(np.array(feats), np.array(labels), domain_tag, allow_empty_rows)


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray | None = None
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def size(self) -> int:
        return self.features.shape[0]


def _permutation(n: int, seed: int, epoch: int, stream: int = 0, cycle: int = 0) -> np.ndarray:
    return np.random.default_rng([seed, epoch, stream, cycle]).permutation(n)


def _index_batches(n: int, batch_size: int, perm: np.ndarray) -> list[np.ndarray]:
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if b.size >= 2]


def batches(ds: MultiLabelDataset, batch_size: int, seed: int, epoch: int,
            with_labels: bool = True, stream: int = 0) -> list[Batch]:
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    perm = _permutation(ds.n, seed, epoch, stream)
    return [Batch(ds.features[idx], ds.labels[idx] if with_labels else None, idx)
            for idx in _index_batches(ds.n, batch_size, perm)]


def paired_batches(src: MultiLabelDataset, tgt: MultiLabelDataset, batch_size: int,
                   seed: int, epoch: int) -> Iterator[tuple[Batch, Batch]]:
    """Source batches with labels, target batches without; the shorter side
    recycles with a fresh permutation until the longer one is exhausted."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    sides = []
    for stream, ds in enumerate((src, tgt)):
        first = _index_batches(ds.n, batch_size, _permutation(ds.n, seed, epoch, stream))
        if not first:
            raise ValueError(f"{ds.domain_tag} set has fewer than 2 rows")
        sides.append(first)
    total = max(len(s) for s in sides)
    for stream, (ds, lst) in enumerate(zip((src, tgt), sides)):
        cycle = 1
        while len(lst) < total:
            lst.extend(_index_batches(ds.n, batch_size, _permutation(ds.n, seed, epoch, stream, cycle)))
            cycle += 1
        del lst[total:]
    for s_idx, t_idx in zip(*sides):
        yield (Batch(src.features[s_idx], src.labels[s_idx], s_idx),
               Batch(tgt.features[t_idx], None, t_idx))
