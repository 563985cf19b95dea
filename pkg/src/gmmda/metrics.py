"""Multi-label evaluation: mAP, per-class and overall precision/recall/F1, histograms."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

METRIC_KEYS = ("map", "cp", "cr", "cf1", "op", "or", "of1")


@dataclass
class MetricReport:
    map: float
    cp: float
    cr: float
    cf1: float
    op: float
    or_: float
    of1: float

    def as_dict(self) -> dict:
        d = asdict(self)
        d["or"] = d.pop("or_")
        return {k: d[k] for k in METRIC_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks of the positives."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    npos = labels.sum()
    if npos == 0:
        raise ValueError("average_precision: no positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision_at_k = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float((precision_at_k * hits).sum() / npos)


def evaluate(predictions, labels, tau: float = 0.5) -> MetricReport:
    z = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if z.shape != y.shape or z.ndim != 2:
        raise ValueError(f"predictions {z.shape} and labels {y.shape} must be matching matrices")
    if not 0 < tau < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    present = np.flatnonzero(y.sum(axis=0) > 0)
    if present.size == 0:
        raise ValueError("evaluate: no class has a positive label")

    pred = z > tau
    pos = y == 1
    tp = (pred & pos).sum(axis=0).astype(float)
    fp = (pred & ~pos).sum(axis=0).astype(float)
    fn = (~pred & pos).sum(axis=0).astype(float)

    aps, ps, rs = [], [], []
    for c in present:
        aps.append(average_precision(z[:, c], y[:, c]))
        ps.append(tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] > 0 else 0.0)
        rs.append(tp[c] / (tp[c] + fn[c]))
    cp = float(np.mean(ps))
    cr = float(np.mean(rs))

    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    op = float(TP / (TP + FP)) if TP + FP > 0 else 0.0
    or_ = float(TP / (TP + FN)) if TP + FN > 0 else 0.0
    return MetricReport(float(np.mean(aps)), cp, cr, _f1(cp, cr), op, or_, _f1(op, or_))


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_start", "bin_end", "count"])
            for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                w.writerow([format(lo, ".17g"), format(hi, ".17g"), int(c)])


def prediction_histogram(z, bins: int = 50) -> Histogram:
    z = np.asarray(z, dtype=float).reshape(-1)
    if np.any((z < 0) | (z > 1)):
        raise ValueError("predictions must lie in [0, 1]")
    counts, edges = np.histogram(z, bins=bins, range=(0.0, 1.0))
    return Histogram(edges, counts)
