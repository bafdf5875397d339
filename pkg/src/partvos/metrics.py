"""Region similarity (J) and boundary accuracy (F) with per-sequence statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .geometry import as_mask, disc, mask_iou

__all__ = [
    "j_frame",
    "boundary",
    "f_frame",
    "default_tolerance",
    "SequenceStats",
    "sequence_stats",
    "ObjectMetrics",
    "MetricReport",
    "evaluate_sequence",
    "format_summary",
]

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def j_frame(pred: np.ndarray, gt: np.ndarray) -> float:
    return mask_iou(pred, gt)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or lying on the image border."""
    m = as_mask(mask)
    interior = ndimage.binary_erosion(m, structure=_FOUR_CONNECTED, border_value=0)
    return m & ~interior


def f_frame(pred: np.ndarray, gt: np.ndarray, tolerance: int) -> float:
    """Boundary F-measure; a boundary pixel matches within Euclidean ``tolerance``."""
    pred = as_mask(pred)
    gt = as_mask(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    if tolerance >= 1:
        se = disc(tolerance)
        near_g = ndimage.binary_dilation(bg, structure=se)
        near_p = ndimage.binary_dilation(bp, structure=se)
    else:
        near_g, near_p = bg, bp
    precision = int((bp & near_g).sum()) / n_p
    recall = int((bg & near_p).sum()) / n_g
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def default_tolerance(height: int, width: int) -> int:
    """ceil(0.8% of the image diagonal)."""
    return int(math.ceil(0.008 * math.hypot(height, width)))


@dataclass(frozen=True)
class SequenceStats:
    mean: float
    recall: float
    decay: float
    decay_defined: bool = True


def sequence_stats(per_frame: Sequence[float]) -> SequenceStats:
    """Mean, recall (share of values > 0.5) and decay.

    Decay is the mean of the first ``floor(N/4)`` values minus the mean of
    the last ``floor(N/4)``; with fewer than 4 values it is 0 and flagged as
    undefined. Callers drop the annotated first frame beforehand.
    """
    values = np.asarray(per_frame, dtype=np.float64)
    if values.size == 0:
        raise ValueError("no per-frame values")
    mean = float(values.mean())
    recall = float(np.count_nonzero(values > 0.5)) / values.size
    q = values.size // 4
    if q == 0:
        return SequenceStats(mean, recall, 0.0, False)
    decay = float(values[:q].mean() - values[-q:].mean())
    return SequenceStats(mean, recall, decay, True)


@dataclass
class ObjectMetrics:
    sequence: str
    object_id: int
    frames: list  # frame indices evaluated
    j: list
    f: list
    j_stats: SequenceStats = None
    f_stats: SequenceStats = None


@dataclass
class MetricReport:
    objects: list = field(default_factory=list)
    # temporal stability is not computed
    t_mean: Optional[float] = None

    @property
    def j_mean(self) -> float:
        return float(np.mean([o.j_stats.mean for o in self.objects]))

    @property
    def f_mean(self) -> float:
        return float(np.mean([o.f_stats.mean for o in self.objects]))

    def aggregate(self) -> dict[str, float]:
        """Means over all evaluated objects of every per-object statistic."""
        out = {}
        for fam in ("j", "f"):
            stats = [getattr(o, f"{fam}_stats") for o in self.objects]
            for key in ("mean", "recall", "decay"):
                out[f"{fam.upper()}_{key}"] = float(np.mean([getattr(s, key) for s in stats]))
        return out


def evaluate_sequence(
    name: str,
    predictions: Sequence[np.ndarray],
    ground_truth: Sequence[Optional[np.ndarray]],
    tolerance: int | None = None,
    skip_first: bool = True,
) -> list[ObjectMetrics]:
    """Per-object J/F series for a sequence of instance label maps.

    Objects are the labels present in the first annotated frame. Frames
    without ground truth are skipped, as is frame 0 when ``skip_first``.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions but {len(ground_truth)} annotations")
    annotated = [i for i, g in enumerate(ground_truth) if g is not None]
    if not annotated:
        raise ValueError(f"sequence {name!r} has no annotations")
    first = np.asarray(ground_truth[annotated[0]])
    object_ids = [int(k) for k in np.unique(first) if k != 0]
    if tolerance is None or tolerance == 0:
        tolerance = default_tolerance(*first.shape[:2])

    frames = [i for i in annotated if not (skip_first and i == 0)]
    if not frames:
        frames = annotated
    out = []
    for k in object_ids:
        js, fs = [], []
        for i in frames:
            pred = np.asarray(predictions[i]) == k
            gt = np.asarray(ground_truth[i]) == k
            js.append(j_frame(pred, gt))
            fs.append(f_frame(pred, gt, tolerance))
        out.append(ObjectMetrics(name, k, frames, js, fs, sequence_stats(js), sequence_stats(fs)))
    return out


def format_summary(report: MetricReport) -> str:
    """Aligned text table: one row per object plus the overall mean."""
    header = ("sequence", "obj", "J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay")
    rows = [header]
    for o in report.objects:
        js, fs = o.j_stats, o.f_stats
        rows.append((o.sequence, str(o.object_id), *(f"{v:.3f}" for v in (js.mean, js.recall, js.decay, fs.mean, fs.recall, fs.decay))))
    if report.objects:
        agg = report.aggregate()
        rows.append(("ALL", "", *(f"{agg[k]:.3f}" for k in ("J_mean", "J_recall", "J_decay", "F_mean", "F_recall", "F_decay"))))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) if i < 2 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))) for r in rows]
    lines.append("T_mean: not computed")
    return "\n".join(lines)
