"""Fuse per-part segmentations into one frame-level score map.

Every tracked part is matched to its closest first-frame part in feature
space. That match supplies two scalar weights: a similarity weight from the
feature distance and the confidence the segmenter earned on the matched
part in the first frame. Part maps are pasted at their boxes and averaged,
either plainly ("ave") or weighted by the product of both scores ("seg").
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import BoundingBox, mask_iou
from .roi_segment import SegmenterModel, part_feature, segment_part

__all__ = [
    "InitialPartBank",
    "Contribution",
    "FrameAggregate",
    "build_bank",
    "nearest_initial",
    "similarity_weight",
    "aggregate",
    "centroid_of",
    "binarize_frame",
    "resolve_instances",
]


@dataclass(frozen=True)
class InitialPartBank:
    features: np.ndarray  # (N, K), unit rows
    confidences: np.ndarray  # (N,)
    boxes: tuple
    masks: tuple
    sigma: float

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class Contribution:
    part_id: int
    box: BoundingBox
    score_map: np.ndarray  # box-sized, values in [0, 1]
    weight: float = 1.0


@dataclass(frozen=True)
class FrameAggregate:
    score_map: np.ndarray
    contributions: tuple = field(default=(), repr=False)
    threshold: float = 0.5
    centroid: Optional[tuple[float, float]] = None

    @property
    def empty(self) -> bool:
        return not self.contributions


def _pairwise_sq_dists(features: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - features[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def bank_sigma(features: np.ndarray, floor: float = 1e-6) -> float:
    """Median pairwise squared distance between bank features (at least ``floor``).

    A bank of one part has no pairs; its scale defaults to 1.
    """
    n = features.shape[0]
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, k=1)
    return max(float(np.median(_pairwise_sq_dists(features)[iu])), floor)


def build_bank(
    frame0: np.ndarray,
    object_mask: np.ndarray,
    parts: Sequence,
    segmenter: SegmenterModel,
    threshold: float = 0.5,
    sigma_floor: float = 1e-6,
) -> InitialPartBank:
    """Features and segmentation confidences of the first-frame parts.

    A part's confidence is the IoU between the binarized segmenter output on
    its box and the object mask cropped to the same box.
    """
    if not parts:
        raise ValueError("need at least one part")
    feats, cons = [], []
    for part in parts:
        local = object_mask[part.box.slices]
        feats.append(part_feature(frame0, part.box, local, segmenter))
        pred = segment_part(frame0, part.box, segmenter) > threshold
        cons.append(mask_iou(pred, local))
    features = np.stack(feats)
    return InitialPartBank(
        features=features,
        confidences=np.asarray(cons, dtype=np.float64),
        boxes=tuple(p.box for p in parts),
        masks=tuple(object_mask[p.box.slices].copy() for p in parts),
        sigma=bank_sigma(features, sigma_floor),
    )


def nearest_initial(feature: np.ndarray, bank: InitialPartBank) -> tuple[int, float]:
    """Index and squared L2 distance of the closest bank feature.

    Ties resolve to the lower index. The all-zero feature has no match and
    returns ``(-1, inf)``.
    """
    f = np.asarray(feature, dtype=np.float64)
    if not np.any(f):
        return -1, math.inf
    diff = bank.features - f
    d = np.einsum("ij,ij->i", diff, diff)
    n = int(np.argmin(d))
    return n, float(d[n])


def similarity_weight(d: float, bank: InitialPartBank) -> float:
    """``exp(-d / sigma)`` with the bank's distance scale; 0 for no match."""
    if d < 0:
        raise ValueError("distance must be >= 0")
    if math.isinf(d):
        return 0.0
    return math.exp(-d / bank.sigma)


def centroid_of(mask: np.ndarray) -> Optional[tuple[float, float]]:
    """Mean pixel-center position ``(x, y)`` of a mask, None when empty."""
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        return None
    return (float(xs.mean()) + 0.5, float(ys.mean()) + 0.5)


def aggregate(
    contributions: Sequence[Contribution],
    mode: str,
    frame_dims: tuple[int, int],
    strict_eq5: bool = False,
    threshold: float = 0.5,
) -> FrameAggregate:
    """Paste part maps into a ``(height, width)`` canvas and average them.

    ``mode="ave"`` gives every part weight 1, ``mode="seg"`` uses each
    contribution's weight. By default every pixel is divided by the total
    weight of the parts covering it (uncovered pixels score 0); with
    ``strict_eq5`` the divisor is the number of parts instead.
    Parts are summed in ascending id order.
    """
    if mode not in ("ave", "seg"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    height, width = frame_dims
    ordered = tuple(sorted(contributions, key=lambda c: c.part_id))
    if not ordered:
        return FrameAggregate(np.zeros((height, width)), (), threshold, None)

    num = np.zeros((height, width))
    den = np.zeros((height, width))
    for c in ordered:
        w = 1.0 if mode == "ave" else float(c.weight)
        if c.score_map.shape != (c.box.h, c.box.w):
            raise ValueError(f"part {c.part_id}: map {c.score_map.shape} does not match {c.box}")
        if not c.box.inside(width, height):
            raise ValueError(f"part {c.part_id}: {c.box} outside the frame")
        num[c.box.slices] += w * c.score_map
        den[c.box.slices] += w

    if strict_eq5:
        score = num / len(ordered)
    else:
        score = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    score = np.clip(score, 0.0, 1.0)
    return FrameAggregate(score, ordered, threshold, centroid_of(score > threshold))


def binarize_frame(agg: FrameAggregate, threshold: float | None = None) -> np.ndarray:
    """Pixels scoring strictly above the threshold."""
    t = agg.threshold if threshold is None else threshold
    return agg.score_map > t


def resolve_instances(aggregates: Sequence[FrameAggregate], threshold: float = 0.5) -> np.ndarray:
    """Label map: the best-scoring instance (ids from 1) where it beats the threshold."""
    if not aggregates:
        raise ValueError("no instances to resolve")
    stack = np.stack([a.score_map for a in aggregates])
    best = np.argmax(stack, axis=0)
    top = np.take_along_axis(stack, best[None], axis=0)[0]
    labels = (best + 1).astype(np.uint8 if len(aggregates) < 256 else np.int32)
    labels[top <= threshold] = 0
    return labels
