"""Mask-guided part generation on the first frame.

Random boxes are scattered around the object, filtered by their overlap with
the object mask and by how much of each box falls inside the object box,
thinned with NMS and finally shrunk to the object pixels they contain.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import PartsConfig, RunConfig
from .geometry import BoundingBox, as_mask, containment_score, mask_box, nms, tighten_box

__all__ = [
    "Part",
    "PartGenerationError",
    "sample_proposals",
    "region_iou",
    "generate_parts",
]


class PartGenerationError(ValueError):
    pass


@dataclass
class Part:
    """A tracked unit of the object.

    ``local_mask`` is box-sized: object pixels at initialization, the
    segmenter's binarized output afterwards.
    """

    id: int
    box: BoundingBox
    local_mask: np.ndarray
    feature: Optional[np.ndarray] = None
    sim_weight: float = 1.0
    con_weight: float = 1.0


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_proposals(
    object_mask: np.ndarray,
    n: int,
    seed,
    center_expand: float = 0.1,
    side_range: tuple[float, float] = (0.2, 0.6),
) -> list[BoundingBox]:
    """Draw ``n`` random boxes around the object.

    Centers are uniform over the object's tight box grown by ``center_expand``
    of its size on every side; widths and heights are independent uniform
    fractions (``side_range``) of the object box. Boxes are clipped to the
    frame.
    """
    mask = as_mask(object_mask)
    if n < 1:
        raise ValueError("n must be >= 1")
    obj = mask_box(mask)
    if obj is None:
        raise PartGenerationError("object mask is empty")
    height, width = mask.shape
    rng = _rng(seed)

    cx = rng.uniform(obj.x - center_expand * obj.w, obj.x2 + center_expand * obj.w, n)
    cy = rng.uniform(obj.y - center_expand * obj.h, obj.y2 + center_expand * obj.h, n)
    bw = rng.uniform(side_range[0], side_range[1], n) * obj.w
    bh = rng.uniform(side_range[0], side_range[1], n) * obj.h

    x0 = np.clip(np.rint(cx - bw / 2), 0, width - 1).astype(int)
    y0 = np.clip(np.rint(cy - bh / 2), 0, height - 1).astype(int)
    x1 = np.clip(np.rint(cx + bw / 2), 0, width).astype(int)
    y1 = np.clip(np.rint(cy + bh / 2), 0, height).astype(int)
    x1 = np.maximum(x1, x0 + 1)
    y1 = np.maximum(y1, y0 + 1)
    return [BoundingBox.from_corners(*c) for c in zip(x0.tolist(), y0.tolist(), x1.tolist(), y1.tolist())]


def _integral(mask: np.ndarray) -> np.ndarray:
    table = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(mask, axis=0), axis=1, out=table[1:, 1:])
    return table


def _box_counts(table: np.ndarray, boxes: list[BoundingBox]) -> np.ndarray:
    c = np.array([b.as_tuple() for b in boxes], dtype=np.int64).reshape(-1, 4)
    x0, y0 = c[:, 0], c[:, 1]
    x1, y1 = x0 + c[:, 2], y0 + c[:, 3]
    return table[y1, x1] - table[y0, x1] - table[y1, x0] + table[y0, x0]


def region_iou(box: BoundingBox, mask: np.ndarray) -> float:
    """IoU between the pixels of ``box`` and the foreground of ``mask``."""
    inter = int(np.count_nonzero(mask[box.slices]))
    union = box.area + int(np.count_nonzero(mask)) - inter
    return inter / union if union else 0.0


def generate_parts(object_mask: np.ndarray, config: RunConfig | PartsConfig, seed) -> list[Part]:
    """Turn a first-frame object mask into a list of representative parts.

    Parts come back ordered by descending mask-region IoU (the NMS order)
    with ids ``0..len-1``.
    """
    cfg = config.parts if isinstance(config, RunConfig) else config
    mask = as_mask(object_mask)
    obj = mask_box(mask)
    if obj is None:
        raise PartGenerationError("object mask is empty")

    proposals = sample_proposals(
        mask, cfg.n_proposals, seed, cfg.center_expand, (cfg.side_min, cfg.side_max)
    )
    table = _integral(mask)
    inter = _box_counts(table, proposals)
    areas = np.array([b.area for b in proposals], dtype=np.int64)
    ious = inter / (areas + int(table[-1, -1]) - inter)

    if cfg.purity_mode == "box":
        purity = np.array([containment_score(b, obj) for b in proposals])
    else:
        purity = inter / areas
    selected = np.flatnonzero((ious >= cfg.iou_min) & (purity > cfg.purity_min))

    candidates = [proposals[i] for i in selected]
    keep = nms(candidates, ious[selected].tolist(), cfg.nms_overlap)[: cfg.max_count]
    if len(keep) < cfg.min_count:
        raise PartGenerationError(
            f"only {len(keep)} parts survived filtering (minimum {cfg.min_count}); object too small"
        )

    parts = []
    for part_id, k in enumerate(keep):
        box = tighten_box(candidates[k], mask)
        parts.append(Part(id=part_id, box=box, local_mask=mask[box.slices].copy()))
    return parts
