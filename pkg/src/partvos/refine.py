"""Optional clean-up of a frame aggregate: object-box gating and morphology."""

from __future__ import annotations

import dataclasses

import numpy as np

from .aggregation import FrameAggregate, centroid_of
from .geometry import BoundingBox, morphology

__all__ = ["gate_by_object_box", "morph_refine"]


def gate_by_object_box(agg: FrameAggregate, object_box: BoundingBox, alpha: float) -> FrameAggregate:
    """Scale every score outside ``object_box`` by ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if alpha == 1.0:
        return agg
    gated = agg.score_map * alpha
    height, width = gated.shape
    try:
        inner = object_box.clip(width, height)
    except ValueError:
        inner = None
    if inner is not None:
        gated[inner.slices] = agg.score_map[inner.slices]
    return dataclasses.replace(agg, score_map=gated, centroid=centroid_of(gated > agg.threshold))


def morph_refine(mask: np.ndarray, radius: int) -> np.ndarray:
    """Close then open with a disc: fills small holes, drops small specks."""
    return morphology(morphology(mask, "close", radius), "open", radius)
