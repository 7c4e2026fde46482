"""Two-class segmentation metrics (mean accuracy, mean IU, frequency-weighted IU)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from mlcam.errors import DataError, DimensionError

N_CLASSES = 2  # background, diagnostic


@dataclass(frozen=True)
class ConfusionCounts:
    """``n[i, j]``: pixels of true class ``i`` predicted as ``j``."""

    n: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.n.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.n.sum())


class SegScores(NamedTuple):
    mean_acc: float
    mean_IU: float
    fw_IU: float


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}", axis="height")
    idx = gt.ravel().astype(np.int64) * N_CLASSES + pred.ravel().astype(np.int64)
    n = np.bincount(idx, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)
    return ConfusionCounts(n)


def metrics(counts: ConfusionCounts) -> SegScores:
    """FCN-style metrics; classes absent from the ground truth are skipped."""
    n = counts.n.astype(np.float64)
    if counts.total == 0:
        raise DataError("cannot score an empty mask pair")
    t = n.sum(axis=1)
    diag = np.diag(n)
    union = t + n.sum(axis=0) - diag
    present = t > 0
    acc = diag[present] / t[present]
    iu = diag[present] / union[present]
    return SegScores(
        mean_acc=float(acc.mean()),
        mean_IU=float(iu.mean()),
        fw_IU=float((t[present] * iu).sum() / t.sum()),
    )


def score(pred, gt) -> SegScores:
    return metrics(confusion(pred, gt))


def majority_vote(masks: Sequence) -> np.ndarray:
    """Foreground where strictly more than half the annotators marked it."""
    if len(masks) < 1:
        raise DataError("majority_vote needs at least one mask")
    stack = [np.asarray(m).astype(bool) for m in masks]
    shape = stack[0].shape
    for m in stack:
        if m.shape != shape:
            raise DimensionError(f"annotator masks differ in shape: {m.shape} vs {shape}", axis="height")
    votes = np.sum(stack, axis=0)
    return 2 * votes > len(stack)


def mean_scores(rows: Iterable[SegScores]) -> SegScores:
    rows = list(rows)
    if not rows:
        raise DataError("no scores to average")
    arr = np.array(rows, dtype=np.float64)
    return SegScores(*(float(v) for v in arr.mean(axis=0)))


METRIC_FIELDS = ("sample_id", "variant", "mode", "mean_acc", "mean_IU", "fw_IU")


def write_metric_rows(path: str | Path, rows: Iterable[tuple[str, str, str, SegScores]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for sample_id, variant, mode, s in rows:
            w.writerow([sample_id, variant, mode, repr(s.mean_acc), repr(s.mean_IU), repr(s.fw_IU)])


def read_metric_rows(path: str | Path) -> list[tuple[str, str, str, SegScores]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            (r["sample_id"], r["variant"], r["mode"], SegScores(float(r["mean_acc"]), float(r["mean_IU"]), float(r["fw_IU"])))
            for r in reader
        ]
