"""Confusion matrices and the IoU / F1 / overall-accuracy report."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import LabelMap
from .tensor import ContractError


class ConfusionMatrix:
    """k×k pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, k: int, counts: np.ndarray | None = None):
        if k < 1:
            raise ContractError(f"class count must be >= 1, got {k}")
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.uint64) if counts is None else np.asarray(counts, dtype=np.uint64)
        if self.counts.shape != (k, k):
            raise ContractError(f"counts shape {self.counts.shape} does not match k={k}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ContractError(f"cannot merge confusion matrices with k={self.k} and k={other.k}")
        return ConfusionMatrix(self.k, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and self.k == other.k and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix(k={self.k}, total={self.total})"


def _as_labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Return ``cm`` plus the counts from one (prediction, ground truth) pair."""
    pred, gt = _as_labels(pred), _as_labels(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        bad = (arr < 0) | (arr >= cm.k)
        if bad.any():
            loc = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ContractError(f"{name} label {int(arr[loc])} at pixel {loc} outside [0, {cm.k})")
    flat = gt.astype(np.int64).ravel() * cm.k + pred.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=cm.k * cm.k).reshape(cm.k, cm.k).astype(np.uint64)
    return ConfusionMatrix(cm.k, cm.counts + counts)


def confusion_matrix(pairs: Iterable[tuple], k: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(k)
    for pred, gt in pairs:
        cm = accumulate(cm, pred, gt)
    return cm


@dataclass
class MetricReport:
    per_class: list[tuple[float, float]]  # (iou, f1)
    miou: float
    af: float
    oa: float
    excluded: frozenset[int] = frozenset()
    unsupported: list[int] = field(default_factory=list)
    class_names: list[str] | None = None

    @property
    def reported_classes(self) -> list[int]:
        return [c for c in range(len(self.per_class)) if c not in self.excluded]


def compute_report(
    cm: ConfusionMatrix,
    excluded: Iterable[int] = (),
    oa_excludes: bool = False,
    class_names: Sequence[str] | None = None,
) -> MetricReport:
    """Per-class IoU/F1 and MIoU, AF, OA from a confusion matrix.

    MIoU and AF average only the non-excluded classes. OA counts every pixel
    unless ``oa_excludes`` is set, in which case pixels whose ground truth is
    an excluded class are dropped. A class with no true, predicted or missed
    pixels scores 0 and is listed in ``unsupported``.
    """
    excluded = frozenset(int(c) for c in excluded)
    if any(not 0 <= c < cm.k for c in excluded):
        raise ContractError(f"excluded classes {sorted(excluded)} outside [0, {cm.k})")
    if len(excluded) >= cm.k:
        raise ContractError("every class is excluded; nothing to report")
    if cm.total == 0:
        raise ContractError("confusion matrix is empty")

    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    per_class = []
    unsupported = []
    for c in range(cm.k):
        denom = tp[c] + fp[c] + fn[c]
        if denom == 0:
            unsupported.append(c)
            per_class.append((0.0, 0.0))
        else:
            per_class.append((tp[c] / denom, 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])))
    kept = [c for c in range(cm.k) if c not in excluded]
    if any(c in kept for c in unsupported):
        warnings.warn(f"classes {[c for c in unsupported if c in kept]} have no support; scored as 0", stacklevel=2)

    if oa_excludes:
        rows = np.array(kept)
        scored = counts[rows].sum()
        oa = tp[rows].sum() / scored if scored else 0.0
    else:
        oa = tp.sum() / counts.sum()
    return MetricReport(
        per_class=[(float(i), float(f)) for i, f in per_class],
        miou=float(np.mean([per_class[c][0] for c in kept])),
        af=float(np.mean([per_class[c][1] for c in kept])),
        oa=float(oa),
        excluded=excluded,
        unsupported=unsupported,
        class_names=list(class_names) if class_names is not None else None,
    )


def _pct(v: float) -> str:
    return f"{100 * v:.2f}"


def _table_rows(reports: Sequence[tuple[str, MetricReport]]):
    if not reports:
        return ["Model", "MIoU (%)", "AF (%)", "OA (%)"], []
    first = reports[0][1]
    classes = first.reported_classes
    for name, rep in reports:
        if rep.reported_classes != classes:
            raise ContractError(f"report {name!r} covers classes {rep.reported_classes}, expected {classes}")
    names = first.class_names or [f"class {c}" for c in range(len(first.per_class))]
    header = ["Model"] + [names[c] for c in classes] + ["MIoU (%)", "AF (%)", "OA (%)"]
    rows = []
    for name, rep in reports:
        cells = [f"{_pct(rep.per_class[c][0])}/{_pct(rep.per_class[c][1])}" for c in classes]
        rows.append([name] + cells + [_pct(rep.miou), _pct(rep.af), _pct(rep.oa)])
    return header, rows


def format_table(reports: Sequence[tuple[str, MetricReport]]) -> str:
    """Fixed-width table: one "IoU/F1" cell per reported class, then MIoU, AF, OA."""
    header, rows = _table_rows(reports)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_csv(reports: Sequence[tuple[str, MetricReport]]) -> str:
    header, rows = _table_rows(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()
