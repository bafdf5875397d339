"""DAVIS-style sequence folders, indexed mask images, synthetic sequences, CSV output."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "FrameSequence",
    "ObjectSpec",
    "SynthSpec",
    "load_sequence",
    "read_mask",
    "write_mask",
    "save_masks",
    "synth_sequence",
    "write_csv",
    "davis_palette",
    "numeric_key",
]

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


@dataclass
class FrameSequence:
    """Frames (H, W, 3 uint8) with optional per-frame instance label maps."""

    name: str
    frames: list
    annotations: list
    frame_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise ValueError(f"sequence {self.name!r} has no frames")
        if len(self.annotations) != len(self.frames):
            raise ValueError("need one annotation slot per frame")
        if not self.frame_ids:
            self.frame_ids = [f"{i:05d}" for i in range(len(self.frames))]
        shape = np.asarray(self.frames[0]).shape[:2]
        for i, frame in enumerate(self.frames):
            if np.asarray(frame).shape[:2] != shape:
                raise ValueError(f"frame {i} is {np.asarray(frame).shape[:2]}, expected {shape}")
        for i, ann in enumerate(self.annotations):
            if ann is not None and np.asarray(ann).shape != shape:
                raise ValueError(f"annotation {i} is {np.asarray(ann).shape}, expected {shape}")
        if self.annotations[0] is None:
            raise ValueError(f"sequence {self.name!r} lacks a first-frame annotation")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return np.asarray(self.frames[0]).shape[:2]

    def frame(self, t: int) -> np.ndarray:
        return self.frames[t]

    def instance_ids(self) -> list[int]:
        return [int(k) for k in np.unique(self.annotations[0]) if k != 0]


def numeric_key(path: Path) -> int:
    """Frame number of a file: the last run of digits in its stem."""
    digits = re.findall(r"\d+", path.stem)
    if not digits:
        raise ValueError(f"{path.name} has no frame number")
    return int(digits[-1])


def _listing(directory: Path, suffixes: Sequence[str]) -> list[Path]:
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in suffixes]
    return sorted(files, key=lambda p: (numeric_key(p), p.name))


def davis_palette() -> list[int]:
    """The 256-entry PASCAL/DAVIS colour map, flattened RGB."""
    palette = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        palette.extend((r, g, b))
    return palette


def read_mask(path: str | Path) -> np.ndarray:
    """Instance labels from an indexed PNG (0/255 grayscale masks map to 0/1)."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            arr = np.array(img)
    except OSError as exc:
        raise ValueError(f"cannot read mask {path}: {exc}") from exc
    if mode == "1":
        return arr.astype(np.uint8)
    if mode == "P":
        return arr.astype(np.uint8)
    if mode == "L":
        values = np.unique(arr)
        if set(values.tolist()) <= {0, 255}:
            return (arr > 0).astype(np.uint8)
        return arr.astype(np.uint8)
    if arr.ndim == 3:
        # colour masks: any non-black pixel is object 1
        return (arr[..., :3].max(axis=2) > 0).astype(np.uint8)
    raise ValueError(f"unsupported mask mode {mode} in {path}")


def write_mask(labels: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError("label map must be 2-D")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("labels must lie in [0, 255] for indexed PNG output")
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    img.putpalette(davis_palette())
    img.save(path, format="PNG")


def load_sequence(frames_dir: str | Path, annotations_dir: str | Path, name: str | None = None) -> FrameSequence:
    """Read numbered frames and the matching indexed masks.

    Frames sort by the number in their file name, so gaps are fine. Masks
    pair with frames by that number; frames without one are unannotated.
    """
    frames_dir = Path(frames_dir)
    annotations_dir = Path(annotations_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"frames directory {frames_dir} does not exist")
    if not annotations_dir.is_dir():
        raise FileNotFoundError(f"annotations directory {annotations_dir} does not exist")
    frame_paths = _listing(frames_dir, IMAGE_SUFFIXES)
    if not frame_paths:
        raise ValueError(f"no frames in {frames_dir}")
    masks = {numeric_key(p): p for p in _listing(annotations_dir, (".png",))}

    frames, annotations, ids = [], [], []
    for path in frame_paths:
        try:
            with Image.open(path) as img:
                frames.append(np.array(img.convert("RGB")))
        except OSError as exc:
            raise ValueError(f"cannot read frame {path}: {exc}") from exc
        key = numeric_key(path)
        annotations.append(read_mask(masks[key]) if key in masks else None)
        ids.append(path.stem)
    if annotations[0] is None:
        raise ValueError(f"no annotation for first frame {frame_paths[0].name}")
    labels = [int(k) for k in np.unique(annotations[0]) if k != 0]
    if labels != list(range(1, len(labels) + 1)):
        raise ValueError(f"first-frame labels {labels} are not contiguous from 1")
    return FrameSequence(name or frames_dir.name, frames, annotations, ids)


def save_masks(
    sequence_name: str,
    masks: Sequence[np.ndarray],
    out_dir: str | Path,
    frame_ids: Sequence[str] | None = None,
) -> list[Path]:
    """Write ``out_dir/<sequence_name>/<frame_id>.png`` for every mask."""
    target = Path(out_dir) / sequence_name
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {target}: {exc}") from exc
    if frame_ids is None:
        frame_ids = [f"{i:05d}" for i in range(len(masks))]
    if len(frame_ids) != len(masks):
        raise ValueError("need one frame id per mask")
    paths = []
    for fid, mask in zip(frame_ids, masks):
        path = target / f"{fid}.png"
        write_mask(mask, path)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class ObjectSpec:
    """A textured shape moving rigidly. ``size`` holds half-extents (rx, ry)."""

    shape: str = "ellipse"
    size: tuple = (30.0, 20.0)
    start: tuple = (80.0, 60.0)
    velocity: tuple = (0.0, 0.0)
    rotation_deg: float = 0.0
    color: tuple = (200, 60, 50)
    texture_sigma: float = 1.0
    texture_amplitude: float = 45.0


@dataclass(frozen=True)
class SynthSpec:
    width: int = 160
    height: int = 120
    n_frames: int = 5
    objects: tuple = (ObjectSpec(),)
    background_color: tuple = (40, 110, 170)
    background_sigma: float = 3.0
    background_amplitude: float = 30.0
    name: str = "synth"


def _texture(rng, shape, sigma, amplitude, color):
    noise = rng.standard_normal((*shape, 3))
    if sigma > 0:
        noise = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    noise /= max(float(noise.std()), 1e-12)
    return np.asarray(color, dtype=np.float64) + amplitude * noise


def _inside(shape: str, u, v, rx, ry):
    if shape == "ellipse":
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if shape == "rectangle":
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)
    raise ValueError(f"unknown shape {shape!r}")


def _extent(obj: ObjectSpec, angle: float) -> tuple[float, float]:
    rx, ry = obj.size
    if obj.rotation_deg == 0.0:
        return rx, ry
    c, s = abs(np.cos(angle)), abs(np.sin(angle))
    if obj.shape == "rectangle":
        return rx * c + ry * s, rx * s + ry * c
    return float(np.hypot(rx * c, ry * s)), float(np.hypot(rx * s, ry * c))


def synth_sequence(spec: SynthSpec, seed: int) -> FrameSequence:
    """Render textured shapes translating/rotating over a textured background.

    Ground truth is exact: a pixel belongs to an object when its center lies
    inside the shape. Later objects are drawn on top of earlier ones and get
    larger labels. Raises ``ValueError`` when a shape would leave the frame.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    background = _texture(rng, (h, w), spec.background_sigma, spec.background_amplitude, spec.background_color)
    textures = []
    for obj in spec.objects:
        reach = int(np.ceil(np.hypot(*obj.size))) + 2
        textures.append((reach, _texture(rng, (2 * reach, 2 * reach), obj.texture_sigma, obj.texture_amplitude, obj.color)))

    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    frames, annotations = [], []
    for t in range(spec.n_frames):
        img = background.copy()
        labels = np.zeros((h, w), dtype=np.uint8)
        for k, (obj, (reach, tex)) in enumerate(zip(spec.objects, textures), start=1):
            cx = obj.start[0] + obj.velocity[0] * t
            cy = obj.start[1] + obj.velocity[1] * t
            angle = np.deg2rad(obj.rotation_deg * t)
            ex, ey = _extent(obj, angle)
            if cx - ex < 0 or cy - ey < 0 or cx + ex > w or cy + ey > h:
                raise ValueError(f"object {k} leaves the {w}x{h} frame at frame {t}")
            dx, dy = px - cx, py - cy
            cos, sin = np.cos(angle), np.sin(angle)
            u = cos * dx + sin * dy
            v = -sin * dx + cos * dy
            inside = _inside(obj.shape, u, v, *obj.size)
            ti = np.clip(np.floor(v[inside] + reach).astype(int), 0, 2 * reach - 1)
            tj = np.clip(np.floor(u[inside] + reach).astype(int), 0, 2 * reach - 1)
            img[inside] = tex[ti, tj]
            labels[inside] = k
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        annotations.append(labels)
    return FrameSequence(spec.name, frames, annotations)


# ---------------------------------------------------------------------- CSV


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Header row, then one row per record; floats use 6 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
