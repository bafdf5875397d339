"""Pixel-grid primitives: boxes, masks, score maps, IoU, NMS, components, morphology.

Masks are 2-D boolean numpy arrays and score maps are 2-D float arrays with
values in [0, 1]. A box ``(x, y, w, h)`` covers the integer pixels
``x..x+w-1`` by ``y..y+h-1``; every area below is a pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "BoundingBox",
    "as_mask",
    "as_score_map",
    "mask_box",
    "box_iou",
    "mask_iou",
    "containment_score",
    "nms",
    "tighten_box",
    "connected_components",
    "disc",
    "morphology",
]

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True, order=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if int(value) != value:
                raise ValueError(f"box {name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.w < 1 or self.h < 1:
            raise ValueError(f"box must have w >= 1 and h >= 1, got {self}")

    @classmethod
    def from_corners(cls, x0: int, y0: int, x1: int, y1: int) -> "BoundingBox":
        """Box spanning ``[x0, x1) x [y0, y1)``."""
        return cls(x0, y0, x1 - x0, y1 - y0)

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def slices(self) -> tuple[slice, slice]:
        """Row/column slices for indexing a ``(H, W, ...)`` array."""
        return (slice(self.y, self.y2), slice(self.x, self.x2))

    def intersection_area(self, other: "BoundingBox") -> int:
        iw = min(self.x2, other.x2) - max(self.x, other.x)
        ih = min(self.y2, other.y2) - max(self.y, other.y)
        if iw <= 0 or ih <= 0:
            return 0
        return iw * ih

    def clip(self, width: int, height: int) -> "BoundingBox":
        """Clip to the frame ``[0, width) x [0, height)``.

        Raises ``ValueError`` when nothing of the box remains inside.
        """
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x2, width), min(self.y2, height)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"{self} does not overlap a {width}x{height} frame")
        return BoundingBox.from_corners(x0, y0, x1, y1)

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def shifted(self, dx: int, dy: int) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


def as_mask(mask) -> np.ndarray:
    """Validate and return ``mask`` as a 2-D boolean array."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"mask must be a non-empty 2-D array, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def as_score_map(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"score map must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("score map values must be finite and within [0, 1]")
    return arr


def mask_box(mask: np.ndarray) -> BoundingBox | None:
    """Tight box around the foreground of ``mask``, or None if it is empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox.from_corners(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection_area(b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two masks; 1.0 when both are empty."""
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def containment_score(bbox: BoundingBox, gtbox: BoundingBox) -> float:
    """Fraction of ``bbox`` pixels that also lie in ``gtbox``."""
    return bbox.intersection_area(gtbox) / bbox.area


def nms(boxes: Sequence[BoundingBox], scores: Sequence[float], overlap_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Returns indices of kept boxes in keep order. Equal scores are visited in
    input order; a box is dropped when its IoU with a kept box exceeds the
    threshold.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if not 0.0 < overlap_threshold < 1.0:
        raise ValueError("overlap_threshold must lie in (0, 1)")
    if not boxes:
        return []
    coords = np.array([b.as_tuple() for b in boxes], dtype=np.int64)
    x0, y0 = coords[:, 0], coords[:, 1]
    x1, y1 = x0 + coords[:, 2], y0 + coords[:, 3]
    areas = coords[:, 2] * coords[:, 3]
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")

    keep = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        iou = inter / (areas[i] + areas[rest] - inter)
        order = rest[iou <= overlap_threshold]
    return keep


def tighten_box(box: BoundingBox, mask: np.ndarray) -> BoundingBox:
    """Shrink ``box`` to the foreground of ``mask`` it contains.

    The input box comes back unchanged when it holds no foreground.
    """
    inner = mask_box(np.asarray(mask)[box.slices])
    if inner is None:
        return box
    return inner.shifted(box.x, box.y)


def connected_components(mask: np.ndarray) -> list[tuple[np.ndarray, BoundingBox]]:
    """4-connected components with their tight boxes, largest first.

    Components of equal area keep raster order of their first pixel.
    """
    mask = as_mask(mask)
    labels, count = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if count == 0:
        return []
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    slices = ndimage.find_objects(labels)
    out = []
    for idx in np.argsort(-areas, kind="stable"):
        sy, sx = slices[idx]
        box = BoundingBox.from_corners(sx.start, sy.start, sx.stop, sy.stop)
        out.append((labels == idx + 1, box))
    return out


def disc(radius: int) -> np.ndarray:
    """Structuring element ``{(dx, dy): dx^2 + dy^2 <= radius^2}``."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx * xx + yy * yy <= r * r


def morphology(mask: np.ndarray, op: str, radius: int) -> np.ndarray:
    """Binary morphology with a disc structuring element.

    Pixels outside the frame count as foreground for erosion and as
    background for dilation, so objects touching the border are not eaten
    away and opening stays anti-extensive.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    mask = as_mask(mask)
    se = disc(radius)

    def erode(m):
        return ndimage.binary_erosion(m, structure=se, border_value=1)

    def dilate(m):
        return ndimage.binary_dilation(m, structure=se, border_value=0)

    if op == "dilate":
        return dilate(mask)
    if op == "erode":
        return erode(mask)
    if op == "open":
        return dilate(erode(mask))
    if op == "close":
        return erode(dilate(mask))
    raise ValueError(f"unknown morphology op {op!r}")
