"""Per-part foreground segmentation with a logistic pixel classifier.

Each part's box is cropped and resized to a square patch, a small stack of
per-pixel features is computed on the patch and a linear model maps it to a
foreground probability. The model is trained with the class-balanced
cross-entropy on patches from the first frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .config import RunConfig, SegConfig
from .geometry import BoundingBox, as_mask

__all__ = [
    "FEATURE_NAMES",
    "EPS",
    "SegmenterModel",
    "TrainingDiverged",
    "Alignment",
    "WCEResult",
    "resize_bilinear",
    "align_patch",
    "pixel_features",
    "wce_loss",
    "train_segmenter",
    "segment_part",
    "part_feature",
    "segment_with_feature",
    "save_model",
    "load_model",
]

FEATURE_NAMES = (
    "r", "g", "b",
    "mean5_r", "mean5_g", "mean5_b",
    "std5_r", "std5_g", "std5_b",
    "grad_mag",
)
EPS = 1e-7
_LOGIT_CLIP = 30.0
_MAGIC = b"PVSEGM01"
_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, last_finite_loss: float):
        super().__init__(f"training diverged; last finite loss {last_finite_loss:.6g}")
        self.last_finite_loss = last_finite_loss


@dataclass
class SegmenterModel:
    """Logistic model over ``FEATURE_NAMES`` evaluated on square patches."""

    weights: np.ndarray
    bias: float
    patch_size: int = 80
    loss_history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.bias = float(self.bias)
        if self.patch_size < 16:
            raise ValueError("patch_size must be >= 16")
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise ValueError("model weights must be finite")

    @property
    def n_features(self) -> int:
        return self.weights.size

    @property
    def final_loss(self) -> float | None:
        return self.loss_history[-1] if self.loss_history else None

    @classmethod
    def zeros(cls, patch_size: int = 80) -> "SegmenterModel":
        return cls(np.zeros(len(FEATURE_NAMES)), 0.0, patch_size)


# ---------------------------------------------------------------- alignment


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """Rows interpolate ``src`` samples at ``dst`` pixel centers (half-pixel rule)."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D or channels-last 3-D array."""
    img = np.asarray(image, dtype=np.float64)
    ry = _resize_matrix(img.shape[0], height)
    rx = _resize_matrix(img.shape[1], width)
    if img.ndim == 2:
        return ry @ img @ rx.T
    rows = (ry @ img.reshape(img.shape[0], -1)).reshape(height, img.shape[1], -1)
    return (rows.transpose(0, 2, 1) @ rx.T).transpose(0, 2, 1)


class Alignment(NamedTuple):
    box: BoundingBox
    patch_size: int

    def project(self, patch_map: np.ndarray) -> np.ndarray:
        """Resample a patch-sized map back onto the box grid."""
        return resize_bilinear(patch_map, self.box.h, self.box.w)

    def pull_back(self, box_map: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`project`: ``sum(project(F) * M) == sum(F * pull_back(M))``."""
        ry = _resize_matrix(self.patch_size, self.box.h)
        rx = _resize_matrix(self.patch_size, self.box.w)
        return ry.T @ np.asarray(box_map, dtype=np.float64) @ rx


def align_patch(frame: np.ndarray, box: BoundingBox, patch_size: int) -> tuple[np.ndarray, Alignment]:
    """Crop ``box`` from ``frame`` and resize it to ``patch_size`` squared."""
    height, width = frame.shape[:2]
    if not box.inside(width, height):
        raise ValueError(f"{box} is not inside a {width}x{height} frame")
    crop = np.asarray(frame)[box.slices].astype(np.float64)
    if crop.shape[0] == patch_size and crop.shape[1] == patch_size:
        return crop.copy(), Alignment(box, patch_size)
    return resize_bilinear(crop, patch_size, patch_size), Alignment(box, patch_size)


# ----------------------------------------------------------------- features


def pixel_features(patch: np.ndarray) -> np.ndarray:
    """Per-pixel feature stack ``(H, W, K)`` for an RGB patch in [0, 255]."""
    rgb = np.asarray(patch, dtype=np.float64)[..., :3] / 255.0
    mean = ndimage.uniform_filter(rgb, size=(5, 5, 1), mode="reflect")
    mean_sq = ndimage.uniform_filter(rgb * rgb, size=(5, 5, 1), mode="reflect")
    std = np.sqrt(np.maximum(mean_sq - mean * mean, 0.0))
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(gray)
    grad = np.hypot(gx, gy)[..., None]
    return np.concatenate([rgb, mean, std, grad], axis=2)


def _sigmoid(z):
    z = np.clip(z, -_LOGIT_CLIP, _LOGIT_CLIP)
    return 1.0 / (1.0 + np.exp(-z))


# --------------------------------------------------------------------- loss


class WCEResult(NamedTuple):
    loss: float
    grad: np.ndarray
    degenerate: bool


def _balance_weight(n_fg: int, n_total: int) -> tuple[float, bool]:
    w = n_fg / n_total
    degenerate = n_fg == 0 or n_fg == n_total
    return min(max(w, EPS), 1.0 - EPS), degenerate


def _wce_terms(p, is_fg, w):
    """Elementwise loss and d(loss)/d(logit); ``w`` may be scalar or per-element."""
    pc = np.clip(p, EPS, 1.0 - EPS)
    inside = (p > EPS) & (p < 1.0 - EPS)
    loss = np.where(is_fg, -(1.0 - w) * np.log(pc), -w * np.log(1.0 - pc))
    grad = np.where(is_fg, -(1.0 - w) * (1.0 - p), w * p) * inside
    return loss, grad


def wce_loss(pred_probs: np.ndarray, label_mask: np.ndarray) -> WCEResult:
    """Class-balanced binary cross-entropy and its gradient w.r.t. the logits.

    ``w = |fg| / (|fg| + |bg|)`` weights the background term and ``1 - w``
    the foreground term. Probabilities are clamped to ``[EPS, 1 - EPS]``
    (the gradient is zero where clamping is active). A label with a single
    class clamps ``w`` likewise and sets ``degenerate``.
    """
    p = np.asarray(pred_probs, dtype=np.float64)
    y = as_mask(label_mask)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    w, degenerate = _balance_weight(int(np.count_nonzero(y)), y.size)
    loss, grad = _wce_terms(p, y, w)
    return WCEResult(float(loss.sum()), grad, degenerate)


# ----------------------------------------------------------------- training


def _seg_config(config) -> SegConfig:
    return config.seg if isinstance(config, RunConfig) else config


def _augmented_patch(frame, mask, box, patch_size, rng):
    """One randomly flipped/shifted/scaled/rotated view of ``box``."""
    p = patch_size
    flip = -1.0 if rng.random() < 0.5 else 1.0
    tx = rng.uniform(-0.1, 0.1) * box.w
    ty = rng.uniform(-0.1, 0.1) * box.h
    scale = rng.uniform(0.9, 1.1)
    angle = np.deg2rad(rng.uniform(-30.0, 30.0))

    u = ((np.arange(p) + 0.5) / p - 0.5) * box.w
    v = ((np.arange(p) + 0.5) / p - 0.5) * box.h
    a, b = np.meshgrid(flip * scale * u, scale * v)
    cos, sin = np.cos(angle), np.sin(angle)
    cx, cy = box.center
    fx = cx + tx + cos * a - sin * b - 0.5
    fy = cy + ty + sin * a + cos * b - 0.5

    coords = np.stack([fy, fx])
    img = np.stack(
        [ndimage.map_coordinates(frame[..., c].astype(np.float64), coords, order=1, mode="nearest") for c in range(3)],
        axis=2,
    )
    lab = ndimage.map_coordinates(mask.astype(np.uint8), coords, order=0, mode="nearest") > 0
    return img, lab


def _training_patches(frame0, mask, parts, cfg: SegConfig, rng):
    p = cfg.patch_size
    for part in parts:
        img, _ = align_patch(frame0, part.box, p)
        lab = resize_bilinear(mask[part.box.slices].astype(np.float64), p, p) >= 0.5
        yield img, lab
        for _ in range(cfg.augment_copies):
            yield _augmented_patch(frame0, mask, part.box, p, rng)


def train_segmenter(frame0: np.ndarray, object_mask: np.ndarray, parts: Sequence, config, seed) -> SegmenterModel:
    """Fit the pixel classifier on first-frame part patches by mini-batch SGD.

    Every part contributes its aligned patch plus ``augment_copies`` random
    views; ``pixels_per_patch`` pixels are sampled from each patch. Per-epoch
    mean losses end up in ``model.loss_history``.
    """
    cfg = _seg_config(config)
    if not parts:
        raise ValueError("need at least one part to train on")
    mask = as_mask(object_mask)
    frame0 = np.asarray(frame0)
    rng = np.random.default_rng(seed)

    feats, labels, fg_w = [], [], []
    for img, lab in _training_patches(frame0, mask, parts, cfg, rng):
        f = pixel_features(img).reshape(-1, len(FEATURE_NAMES))
        lab = lab.ravel()
        w, _ = _balance_weight(int(np.count_nonzero(lab)), lab.size)
        pick = rng.choice(lab.size, size=min(cfg.pixels_per_patch, lab.size), replace=False)
        feats.append(f[pick])
        labels.append(lab[pick])
        fg_w.append(w)

    x = np.stack(feats)  # (patches, pixels, K)
    y = np.stack(labels)
    w = np.broadcast_to(np.asarray(fg_w)[:, None], y.shape)
    mu = x.reshape(-1, x.shape[-1]).mean(axis=0)
    sd = np.maximum(x.reshape(-1, x.shape[-1]).std(axis=0), 1e-6)
    z = (x - mu) / sd

    theta = np.zeros(z.shape[-1])
    bias = 0.0
    history: list[float] = []
    n_patches = z.shape[0]
    last_finite = float("nan")
    for _ in range(cfg.epochs):
        order = rng.permutation(n_patches)
        epoch_loss = 0.0
        for start in range(0, n_patches, cfg.batch):
            idx = order[start : start + cfg.batch]
            zb = z[idx].reshape(-1, z.shape[-1])
            yb = y[idx].ravel()
            wb = w[idx].ravel()
            prob = _sigmoid(zb @ theta + bias)
            loss, grad = _wce_terms(prob, yb, wb)
            epoch_loss += float(loss.sum())
            theta -= cfg.lr * (zb.T @ grad) / yb.size
            bias -= cfg.lr * float(grad.sum()) / yb.size
        epoch_loss /= y.size
        if not np.isfinite(epoch_loss) or not np.all(np.isfinite(theta)):
            raise TrainingDiverged(last_finite)
        last_finite = epoch_loss
        history.append(epoch_loss)

    weights = theta / sd
    model = SegmenterModel(weights, bias - float(weights @ mu), cfg.patch_size)
    model.loss_history = history
    return model


# ---------------------------------------------------------------- inference


def _patch_features(frame, box, model: SegmenterModel):
    patch, align = align_patch(frame, box, model.patch_size)
    feats = pixel_features(patch)
    if feats.shape[-1] != model.n_features:
        raise ValueError(f"model expects {model.n_features} features, got {feats.shape[-1]}")
    return feats, align


def segment_part(frame: np.ndarray, box: BoundingBox, model: SegmenterModel) -> np.ndarray:
    """Foreground probability for every pixel of ``box`` (box-sized map)."""
    feats, align = _patch_features(frame, box, model)
    prob = _sigmoid(feats @ model.weights + model.bias)
    return np.clip(align.project(prob), 0.0, 1.0)


def _pool(feats: np.ndarray, align: Alignment, part_mask: np.ndarray) -> np.ndarray:
    # mean of the box-projected features over the mask, evaluated on the patch grid
    sel = as_mask(part_mask)
    if sel.shape != (align.box.h, align.box.w):
        raise ValueError(f"part mask {sel.shape} does not match {align.box}")
    count = int(np.count_nonzero(sel))
    if count == 0:
        return np.zeros(feats.shape[-1])
    weights = align.pull_back(sel)
    vec = np.tensordot(weights, feats, axes=([0, 1], [0, 1])) / count
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def part_feature(frame: np.ndarray, box: BoundingBox, part_mask: np.ndarray, model: SegmenterModel) -> np.ndarray:
    """Unit-norm mean of the feature stack over the part's foreground.

    An empty part mask gives the all-zero vector, which callers treat as
    "no feature".
    """
    feats, align = _patch_features(frame, box, model)
    return _pool(feats, align, part_mask)


def segment_with_feature(
    frame: np.ndarray, box: BoundingBox, model: SegmenterModel, threshold: float = 0.5
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Probability map, its binarization and the pooled feature in one pass."""
    feats, align = _patch_features(frame, box, model)
    prob = np.clip(align.project(_sigmoid(feats @ model.weights + model.bias)), 0.0, 1.0)
    local = prob > threshold
    return prob, local, _pool(feats, align, local)


# -------------------------------------------------------------- persistence


def save_model(model: SegmenterModel, path: str | Path) -> None:
    """Write magic, version, K, patch size and the K+1 parameters (little-endian)."""
    theta = np.concatenate([model.weights, [model.bias]]).astype("<f8")
    header = _MAGIC + struct.pack("<III", _VERSION, model.n_features, model.patch_size)
    Path(path).write_bytes(header + theta.tobytes())


def load_model(path: str | Path) -> SegmenterModel:
    data = Path(path).read_bytes()
    head = len(_MAGIC) + 12
    if len(data) < head or data[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path} is not a segmenter model file")
    version, k, patch_size = struct.unpack("<III", data[len(_MAGIC) : head])
    if version != _VERSION:
        raise ValueError(f"unsupported model version {version}")
    if len(data) != head + 8 * (k + 1):
        raise ValueError(f"{path} is truncated")
    theta = np.frombuffer(data, dtype="<f8", offset=head).astype(np.float64)
    return SegmenterModel(theta[:k], float(theta[k]), int(patch_size))
