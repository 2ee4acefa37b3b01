"""Boxes, crop windows and the coordinate maps between frames, crops and the head grid.

Conventions: pixel centers sit at integer coordinates and y grows downward.
Boxes use corner format ``(x0, y0, x1, y1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

CONTEXT_AMOUNT = 0.5


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    @property
    def is_valid(self) -> bool:
        return self.x0 < self.x1 and self.y0 < self.y1

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def to_xywh(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.width, self.height)

    def translate(self, dx: float, dy: float) -> "Box":
        return Box(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)


@dataclass(frozen=True)
class GridGeometry:
    """Head grid layout: cell ``(x, y)`` sits at crop pixel ``s//2 + x*s, s//2 + y*s``."""

    stride: int
    grid_size: int
    crop_size: int

    def __post_init__(self):
        if self.stride < 1 or self.grid_size < 1 or self.crop_size < 1:
            raise ValueError("stride, grid_size and crop_size must be positive")
        last = self.stride // 2 + (self.grid_size - 1) * self.stride
        if last > self.crop_size - 1:
            raise ValueError(
                f"grid of {self.grid_size} cells at stride {self.stride} reaches pixel {last}, "
                f"outside a crop of size {self.crop_size}"
            )

    @classmethod
    def fit(cls, stride: int, crop_size: int) -> "GridGeometry":
        """Largest grid whose every cell maps inside the crop."""
        g = (crop_size - 1 - stride // 2) // stride + 1
        return cls(stride, g, crop_size)

    def points(self) -> np.ndarray:
        """1-D array of the crop coordinates of the grid lines."""
        return self.stride // 2 + np.arange(self.grid_size, dtype=np.float64) * self.stride


@dataclass(frozen=True)
class CropSpec:
    """Square crop of ``out_size`` pixels centred on ``source_center``.

    Frame point ``p`` lands at crop position ``(p - origin) * scale`` where
    ``origin = source_center - out_size / (2 * scale)``.
    """

    source_center: Tuple[float, float]
    scale: float
    out_size: int
    pad_value: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"crop scale must be positive, got {self.scale}")
        if self.out_size <= 0:
            raise ValueError(f"crop out_size must be positive, got {self.out_size}")

    @property
    def origin(self) -> Tuple[float, float]:
        half = self.out_size / (2.0 * self.scale)
        return (self.source_center[0] - half, self.source_center[1] - half)

    @property
    def side(self) -> float:
        """Window side length in frame pixels."""
        return self.out_size / self.scale

    @classmethod
    def from_origin(cls, origin: Tuple[float, float], scale: float, out_size: int,
                    pad_value=None) -> "CropSpec":
        half = out_size / (2.0 * scale)
        return cls((origin[0] + half, origin[1] + half), scale, out_size, pad_value)

    def frame_to_crop(self, x, y):
        ox, oy = self.origin
        return (x - ox) * self.scale, (y - oy) * self.scale

    def crop_to_frame(self, u, v):
        ox, oy = self.origin
        return u / self.scale + ox, v / self.scale + oy


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two valid boxes (0 when disjoint)."""
    if not (a.is_valid and b.is_valid):
        raise ValueError(f"iou needs boxes with positive area, got {a} and {b}")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_or_zero(a: Box, b: Box) -> float:
    """Like :func:`iou` but degenerate boxes score 0 instead of raising."""
    if not (a.is_valid and b.is_valid):
        return 0.0
    return iou(a, b)


def grid_to_image(x: int, y: int, g: GridGeometry) -> Tuple[int, int]:
    if not (0 <= x < g.grid_size and 0 <= y < g.grid_size):
        raise ValueError(f"grid index ({x}, {y}) outside a {g.grid_size}x{g.grid_size} grid")
    half = g.stride // 2
    return (half + x * g.stride, half + y * g.stride)


def context_side(target: Box) -> float:
    w, h = target.width, target.height
    c = CONTEXT_AMOUNT * (w + h)
    return math.sqrt((w + c) * (h + c))


def make_crop_spec(frame_shape: Sequence[int], target: Box, mode: str,
                   template_size: int, search_size: int,
                   pad_value=None) -> CropSpec:
    """Build the template or search window around ``target``.

    ``frame_shape`` is ``(height, width)`` as in ``frame.shape[:2]``.
    Both windows share one scale, so a target looks the same size in either crop.
    """
    height, width = int(frame_shape[0]), int(frame_shape[1])
    if height <= 0 or width <= 0:
        raise ValueError(f"frame size must be positive, got {height}x{width}")
    if not target.is_valid:
        raise ValueError(f"target box must have positive area: {target}")
    if target.x1 <= 0 or target.y1 <= 0 or target.x0 >= width or target.y0 >= height:
        raise ValueError(f"target {target} does not intersect the {width}x{height} frame")
    if mode not in ("template", "search"):
        raise ValueError(f"mode must be 'template' or 'search', got {mode!r}")
    side = context_side(target)
    if mode == "template":
        out = template_size
    else:
        side = side * search_size / template_size
        out = search_size
    return CropSpec(target.center, out / side, out, pad_value)


def apply_crop(frame: np.ndarray, spec: CropSpec) -> np.ndarray:
    """Bilinearly resample the crop window; samples off the frame take the pad value."""
    frame = np.asarray(frame)
    if frame.size == 0 or frame.ndim != 3:
        raise ValueError("apply_crop needs a non-empty (H, W, C) frame")
    h, w, c = frame.shape
    src = frame.astype(np.float64, copy=False)
    if spec.pad_value is None:
        pad = src.reshape(-1, c).mean(axis=0)
    else:
        pad = np.asarray(spec.pad_value, dtype=np.float64)

    u = np.arange(spec.out_size, dtype=np.float64)
    xs, ys = spec.crop_to_frame(u, u)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]

    # one pad pixel on every side lets out-of-frame taps read the pad value
    padded = np.empty((h + 2, w + 2, c), dtype=np.float64)
    padded[...] = pad
    padded[1:-1, 1:-1] = src
    cx0 = np.clip(x0 + 1, 0, w + 1)
    cx1 = np.clip(x0 + 2, 0, w + 1)
    cy0 = np.clip(y0 + 1, 0, h + 1)
    cy1 = np.clip(y0 + 2, 0, h + 1)

    row0, row1 = padded[cy0], padded[cy1]
    top = row0[:, cx0] * (1 - fx) + row0[:, cx1] * fx
    bot = row1[:, cx0] * (1 - fx) + row1[:, cx1] * fx
    out = top * (1 - fy) + bot * fy
    # convex weights; clamp away rounding spill past the source range
    lo = min(src.min(), pad.min())
    hi = max(src.max(), pad.max())
    return np.ascontiguousarray(np.clip(out, lo, hi))


def project_box(b: Box, spec: CropSpec, direction: str = "frame->crop") -> Box:
    ox, oy = spec.origin
    s = spec.scale
    if direction == "frame->crop":
        return Box((b.x0 - ox) * s, (b.y0 - oy) * s, (b.x1 - ox) * s, (b.y1 - oy) * s)
    if direction == "crop->frame":
        return Box(b.x0 / s + ox, b.y0 / s + oy, b.x1 / s + ox, b.y1 / s + oy)
    raise ValueError(f"unknown direction {direction!r}")


def clip_box(b: Box, frame_shape: Sequence[int], min_size: float = 1.0) -> Box:
    """Keep a box inside the frame while preserving a minimum size."""
    height, width = frame_shape[0], frame_shape[1]
    w = min(max(b.width, min_size), width)
    h = min(max(b.height, min_size), height)
    cx = min(max(b.center[0], 0.0), width)
    cy = min(max(b.center[1], 0.0), height)
    return Box.from_center(cx, cy, w, h)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)
