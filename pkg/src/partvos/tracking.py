"""Part tracking by normalized cross-correlation, plus whole-object box selection.

The score map of a template over a search region holds one value per valid
placement (``search - template + 1`` in each dimension). Zero-normalized
cross-correlation lies in [-1, 1] and is mapped affinely onto [0, 1].
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, TypeVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from .config import RunConfig, TrackConfig
from .geometry import BoundingBox, box_iou

__all__ = [
    "TrackingLost",
    "TrackState",
    "to_gray",
    "ncc_track",
    "init_track_state",
    "search_region",
    "step_part",
    "track_all_parts",
    "ordered_map",
    "object_track",
    "iou_recall_curve",
    "read_proposals",
    "read_boxes",
]

T = TypeVar("T")
R = TypeVar("R")

# Window variance below this fraction of the template size counts as flat.
_FLAT_EPS = 1e-9


class TrackingLost(RuntimeError):
    """Every part of an instance has died."""


def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma of an RGB image as float64; 2-D inputs pass through as float64."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        return arr.astype(np.float64, copy=False)
    return arr[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def _window_sums(a: np.ndarray, h: int, w: int) -> np.ndarray:
    table = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=table[1:, 1:])
    return table[h:, w:] - table[:-h, w:] - table[h:, :-w] + table[:-h, :-w]


def ncc_track(template: np.ndarray, search: np.ndarray, method: str = "fft") -> np.ndarray:
    """Score map of ``template`` over every valid placement in ``search``.

    A constant template has no defined correlation and yields a uniform 0.5
    map; flat search windows score 0.5 as well. ``method`` selects the
    frequency-domain ("fft") or the direct sliding-window ("spatial") path.
    """
    t = np.asarray(template, dtype=np.float64)
    s = np.asarray(search, dtype=np.float64)
    if t.ndim != 2 or s.ndim != 2:
        raise ValueError("template and search must be 2-D")
    th, tw = t.shape
    sh, sw = s.shape
    if sh < th or sw < tw:
        raise ValueError(f"search {s.shape} smaller than template {t.shape}")
    out_shape = (sh - th + 1, sw - tw + 1)

    n = t.size
    t0 = t - t.mean()
    t_energy = float(np.sum(t0 * t0))
    if t_energy <= _FLAT_EPS * n * max(1.0, float(np.abs(t).max()) ** 2):
        return np.full(out_shape, 0.5)

    # centering the search only improves conditioning; NCC is shift-invariant
    s = s - s.mean()
    if method == "fft":
        # circular correlation over the search size is exact for valid placements
        shape = (sfft.next_fast_len(sh, real=True), sfft.next_fast_len(sw, real=True))
        spectrum = sfft.rfft2(s, shape) * np.conj(sfft.rfft2(t0, shape))
        num = sfft.irfft2(spectrum, shape)[: out_shape[0], : out_shape[1]]
        sums = _window_sums(s, th, tw)
        sq = _window_sums(s * s, th, tw)
        var = sq - sums * sums / n
    elif method == "spatial":
        win = sliding_window_view(s, (th, tw))
        centered = win - win.mean(axis=(2, 3), keepdims=True)
        num = np.einsum("ijkl,kl->ij", centered, t0)
        var = np.einsum("ijkl,ijkl->ij", centered, centered)
    else:
        raise ValueError(f"unknown method {method!r}")

    flat = var <= _FLAT_EPS * n * max(1.0, float(np.abs(s).max()) ** 2)
    denom = np.sqrt(np.where(flat, 1.0, var) * t_energy)
    ncc = np.where(flat, 0.0, num / denom)
    return (np.clip(ncc, -1.0, 1.0) + 1.0) / 2.0


@dataclass(frozen=True)
class TrackState:
    part_id: int
    box: BoundingBox
    template: np.ndarray
    initial_template: np.ndarray
    last_score: float = 1.0
    alive: bool = True
    low_count: int = 0


def init_track_state(part_id: int, frame: np.ndarray, box: BoundingBox) -> TrackState:
    patch = to_gray(frame)[box.slices].copy()
    return TrackState(part_id=part_id, box=box, template=patch, initial_template=patch)


def search_region(box: BoundingBox, factor: float, width: int, height: int) -> BoundingBox:
    """Region ``factor`` times the box size around the box center, clipped."""
    cx, cy = box.center
    sw = max(box.w, int(round(factor * box.w)))
    sh = max(box.h, int(round(factor * box.h)))
    x0 = int(round(cx - sw / 2.0))
    y0 = int(round(cy - sh / 2.0))
    return BoundingBox(x0, y0, sw, sh).clip(width, height)


def _track_config(config) -> TrackConfig:
    return config.track if isinstance(config, RunConfig) else config


def step_part(state: TrackState, next_frame: np.ndarray, config) -> tuple[Optional[np.ndarray], BoundingBox, TrackState]:
    """Locate one part in ``next_frame``.

    Returns the score map over the search region (None if the part could
    not be searched), the template-sized box at the peak and the updated
    state. A part whose peak stays under ``peak_min`` for ``patience``
    consecutive frames is marked dead.
    """
    if not state.alive:
        raise ValueError(f"part {state.part_id} is not alive")
    cfg = _track_config(config)
    gray = to_gray(next_frame)
    height, width = gray.shape
    th, tw = state.template.shape

    try:
        region = search_region(state.box, cfg.search_factor, width, height)
    except ValueError:
        region = None
    if region is None or region.w < tw or region.h < th:
        return None, state.box, dataclasses.replace(state, alive=False, last_score=0.0)

    score_map = ncc_track(state.template, gray[region.slices])
    py, px = np.unravel_index(int(np.argmax(score_map)), score_map.shape)
    peak = float(score_map[py, px])
    box = BoundingBox(region.x + int(px), region.y + int(py), tw, th)

    blend = cfg.template_blend
    template = blend * gray[box.slices] + (1.0 - blend) * state.initial_template
    low_count = state.low_count + 1 if peak < cfg.peak_min else 0
    new_state = dataclasses.replace(
        state,
        box=box,
        template=template,
        last_score=peak,
        low_count=low_count,
        alive=low_count < cfg.patience,
    )
    return score_map, box, new_state


def ordered_map(fn: Callable[[T], R], items: Iterable[T], executor: Executor | None = None) -> list[R]:
    """``[fn(x) for x in items]``, optionally fanned out; input order is kept."""
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def track_all_parts(
    states: Sequence[TrackState],
    next_frame: np.ndarray,
    config,
    executor: Executor | None = None,
    workers: int | None = None,
) -> list[tuple[Optional[np.ndarray], BoundingBox, TrackState]]:
    """``step_part`` for every alive state, results in input order.

    Dead states pass through as ``(None, box, state)``. Raises
    ``TrackingLost`` when no state is alive.
    """
    if not any(s.alive for s in states):
        raise TrackingLost("all parts are dead")
    gray = to_gray(next_frame)

    def step(state):
        if not state.alive:
            return None, state.box, state
        return step_part(state, gray, config)

    if executor is None and workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return ordered_map(step, states, pool)
    return ordered_map(step, states, executor)


def object_track(
    previous_box: BoundingBox,
    centroid: Optional[tuple[float, float]],
    candidates: Sequence[BoundingBox],
) -> tuple[BoundingBox, bool]:
    """Pick the candidate box whose center is nearest the segment centroid.

    Ties go to the larger box, then the earlier candidate. Without a
    centroid or candidates the previous box is returned and the second
    element (the fallback flag) is True.
    """
    if centroid is None or not candidates:
        return previous_box, True
    cx, cy = centroid

    def key(item):
        idx, box = item
        bx, by = box.center
        return ((bx - cx) ** 2 + (by - cy) ** 2, -box.area, idx)

    _, best = min(enumerate(candidates), key=key)
    return best, False


def iou_recall_curve(
    pred_boxes: Sequence[BoundingBox],
    gt_boxes: Sequence[BoundingBox],
    thresholds: Sequence[float] | None = None,
) -> list[tuple[float, float]]:
    """Fraction of frames whose box IoU reaches each threshold."""
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predicted boxes but {len(gt_boxes)} ground-truth boxes")
    if not pred_boxes:
        raise ValueError("no frames")
    if thresholds is None:
        thresholds = [round(0.05 * i, 2) for i in range(21)]
    ious = np.array([box_iou(p, g) for p, g in zip(pred_boxes, gt_boxes)])
    return [(float(t), float(np.count_nonzero(ious >= t)) / len(ious)) for t in thresholds]


def read_proposals(path: str | Path) -> list[tuple[BoundingBox, float]]:
    """Parse ``x y w h score`` lines; blank lines and ``#`` comments are skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'x y w h score', got {line!r}")
        x, y, w, h = (int(round(float(v))) for v in fields[:4])
        out.append((BoundingBox(x, y, w, h), float(fields[4])))
    return out


def read_boxes(path: str | Path) -> list[BoundingBox]:
    """One ``x y w h`` box per line (extra columns ignored), one line per frame."""
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.replace(",", " ").split()
        if len(fields) < 4:
            raise ValueError(f"{path}:{lineno}: expected 'x y w h', got {line!r}")
        boxes.append(BoundingBox(*(int(round(float(v))) for v in fields[:4])))
    return boxes
