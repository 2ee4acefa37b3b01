"""Sequence directories (frames + ``groundtruth.txt``) and the synthetic video generator."""

from __future__ import annotations

import colorsys
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import Box

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class SequenceLoadError(ValueError):
    pass


@dataclass
class Video:
    """Frames held in memory as ``(T, H, W, 3)`` uint8 plus per-frame boxes."""

    name: str
    frames: np.ndarray
    boxes: List[Box]

    def __post_init__(self):
        if len(self.frames) != len(self.boxes):
            raise ValueError(f"{self.name}: {len(self.frames)} frames but {len(self.boxes)} boxes")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SequenceRecord:
    name: str
    frame_paths: List[Path]
    boxes: List[Box]
    frame_size: Tuple[int, int]  # (height, width)

    def load(self) -> Video:
        frames = np.stack([read_frame(p) for p in self.frame_paths])
        return Video(self.name, frames, list(self.boxes))


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def parse_box_line(line: str, where: str = "") -> Box:
    parts = line.replace("\t", ",").replace(" ", ",").split(",")
    parts = [p for p in parts if p]
    if len(parts) != 4:
        raise SequenceLoadError(f"{where}: expected 'x,y,w,h', got {line!r}")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError:
        raise SequenceLoadError(f"{where}: non-numeric box {line!r}") from None
    if not (w > 0 and h > 0):
        raise SequenceLoadError(f"{where}: box needs positive size, got {line!r}")
    return Box.from_xywh(x, y, w, h)


def format_box_line(b: Box) -> str:
    x, y, w, h = b.to_xywh()
    return f"{x:.4f},{y:.4f},{w:.4f},{h:.4f}"


def read_boxes(path) -> List[Box]:
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise SequenceLoadError(f"{path}: no boxes")
    return [parse_box_line(ln, f"{path}:{i + 1}") for i, ln in enumerate(lines)]


def write_boxes(path, boxes: Sequence[Box]) -> None:
    Path(path).write_text("".join(format_box_line(b) + "\n" for b in boxes), encoding="utf-8")


def load_sequence(directory) -> SequenceRecord:
    d = Path(directory)
    gt_path = d / "groundtruth.txt"
    if not gt_path.is_file():
        raise SequenceLoadError(f"{d}: missing groundtruth.txt")
    boxes = read_boxes(gt_path)
    frames = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not frames:
        raise SequenceLoadError(f"{d}: no frame images")
    if len(frames) != len(boxes):
        raise SequenceLoadError(
            f"{d}: {len(frames)} frames but {len(boxes)} ground-truth lines")
    with Image.open(frames[0]) as im:
        width, height = im.size
    for i, b in enumerate(boxes):
        if b.x0 < 0 or b.y0 < 0 or b.x1 > width or b.y1 > height:
            log.warning("%s: box %d %s overshoots the %dx%d frame", d.name, i + 1, b, width, height)
    return SequenceRecord(d.name, frames, boxes, (height, width))


def load_dataset(root) -> List[SequenceRecord]:
    root = Path(root)
    if (root / "groundtruth.txt").is_file():
        return [load_sequence(root)]
    dirs = sorted(p for p in root.iterdir() if (p / "groundtruth.txt").is_file())
    if not dirs:
        raise SequenceLoadError(f"{root}: no sequences found")
    return [load_sequence(p) for p in dirs]


def load_videos(root) -> List[Video]:
    return [r.load() for r in load_dataset(root)]


def write_sequence(directory, video: Video) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(video.frames):
        Image.fromarray(f).save(d / f"{i + 1:08d}.png", optimize=False, compress_level=1)
    write_boxes(d / "groundtruth.txt", video.boxes)
    return d


# ---------------------------------------------------------------- synthetic scenes

@dataclass
class _Shape:
    kind: str
    color: np.ndarray
    stripe_color: np.ndarray
    stripe_freq: float
    stripe_angle: float
    cx: float
    cy: float
    vx: float
    vy: float
    w: float
    h: float
    scale_amp: float
    scale_freq: float
    scale_phase: float

    def size_at(self, t: int) -> Tuple[float, float]:
        s = 1.0 + self.scale_amp * np.sin(2 * np.pi * self.scale_freq * t + self.scale_phase)
        return self.w * s, self.h * s

    def step(self, t: int, width: int, height: int) -> None:
        w, h = self.size_at(t + 1)
        self.cx += self.vx
        self.cy += self.vy
        # bounce off the walls, keeping the whole shape inside the frame
        lo_x, hi_x = w / 2 + 1, width - w / 2 - 1
        lo_y, hi_y = h / 2 + 1, height - h / 2 - 1
        if self.cx < lo_x or self.cx > hi_x:
            self.vx = -self.vx
            self.cx = float(np.clip(self.cx, lo_x, hi_x))
        if self.cy < lo_y or self.cy > hi_y:
            self.vy = -self.vy
            self.cy = float(np.clip(self.cy, lo_y, hi_y))


def _hue_color(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v)) * 255.0


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Muted low-frequency texture with a few flat blobs."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(70, 150, size=3)
    img = np.broadcast_to(base, (height, width, 3)).copy()
    for _ in range(4):
        fx, fy = rng.uniform(0.01, 0.06, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(8, 22, size=3)
        img += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)[..., None]
    for _ in range(int(rng.integers(6, 12))):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        rx, ry = rng.uniform(4, 18, size=2)
        col = base + rng.normal(0, 25, size=3)
        m = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        img[m] = 0.6 * img[m] + 0.4 * col
    img += rng.normal(0, 3.0, size=img.shape)
    return img


def _draw(img: np.ndarray, shape: _Shape, t: int, yy: np.ndarray, xx: np.ndarray) -> Box:
    w, h = shape.size_at(t)
    cx, cy = shape.cx, shape.cy
    dx, dy = (xx - cx) / (w / 2), (yy - cy) / (h / 2)
    if shape.kind == "ellipse":
        mask = dx ** 2 + dy ** 2 <= 1
    elif shape.kind == "diamond":
        mask = np.abs(dx) + np.abs(dy) <= 1
    else:
        mask = (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    u = (xx - cx) * np.cos(shape.stripe_angle) + (yy - cy) * np.sin(shape.stripe_angle)
    stripes = (np.sin(2 * np.pi * u * shape.stripe_freq) > 0)[..., None]
    tex = np.where(stripes, shape.color, shape.stripe_color)
    img[mask] = tex[mask]
    return Box.from_center(cx, cy, w, h)


def _random_shape(rng, hue, width, height, size_range, speed_range) -> _Shape:
    side = rng.uniform(*size_range)
    aspect = np.exp(rng.uniform(np.log(0.75), np.log(1.33)))
    w, h = side * np.sqrt(aspect), side / np.sqrt(aspect)
    speed = rng.uniform(*speed_range)
    ang = rng.uniform(0, 2 * np.pi)
    color = _hue_color(hue, rng.uniform(0.75, 1.0), rng.uniform(0.8, 1.0))
    stripe = _hue_color(hue + rng.uniform(-0.05, 0.05), rng.uniform(0.3, 0.6), rng.uniform(0.25, 0.5))
    return _Shape(
        kind=str(rng.choice(["ellipse", "rect", "diamond"])),
        color=color, stripe_color=stripe,
        stripe_freq=rng.uniform(0.12, 0.25), stripe_angle=rng.uniform(0, np.pi),
        cx=rng.uniform(w / 2 + 2, width - w / 2 - 2), cy=rng.uniform(h / 2 + 2, height - h / 2 - 2),
        vx=speed * np.cos(ang), vy=speed * np.sin(ang), w=w, h=h,
        scale_amp=rng.uniform(0.0, 0.15), scale_freq=rng.uniform(0.01, 0.04),
        scale_phase=rng.uniform(0, 2 * np.pi),
    )


def synth_video(seed: int, n_frames: int = 60, frame_size: Tuple[int, int] = (128, 128),
                name: Optional[str] = None, n_distractors: Tuple[int, int] = (2, 4),
                size_range: Tuple[float, float] = (16.0, 28.0),
                speed_range: Tuple[float, float] = (0.5, 2.5)) -> Video:
    """One synthetic sequence: a striped target moving among distractors of other hues.

    ``frame_size`` is ``(height, width)``.
    """
    rng = np.random.default_rng(seed)
    height, width = frame_size
    bg = _background(rng, height, width)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    target_hue = rng.uniform(0, 1)
    n_d = int(rng.integers(n_distractors[0], n_distractors[1] + 1))
    # distractor hues stay at least a quarter turn away from the target
    d_hues = target_hue + rng.uniform(0.25, 0.75, size=n_d)
    target = _random_shape(rng, target_hue, width, height, size_range, speed_range)
    distractors = [_random_shape(rng, hu, width, height, size_range, speed_range) for hu in d_hues]
    frames = np.empty((n_frames, height, width, 3), dtype=np.uint8)
    boxes: List[Box] = []
    for t in range(n_frames):
        img = bg.copy()
        for d in distractors:
            _draw(img, d, t, yy, xx)
        boxes.append(_draw(img, target, t, yy, xx))
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        for s in [target, *distractors]:
            s.step(t, width, height)
    return Video(name or f"synth_{seed:06d}", frames, boxes)


def synth_videos(seed: int, n_sequences: int, frames_per_seq: int = 60,
                 frame_size: Tuple[int, int] = (128, 128), prefix: str = "seq") -> List[Video]:
    ss = np.random.SeedSequence(seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(n_sequences)]
    return [synth_video(s, frames_per_seq, frame_size, name=f"{prefix}_{i:04d}")
            for i, s in enumerate(seeds)]


def make_synthetic_dataset(out_dir, seed: int, n_sequences: int, frames_per_seq: int = 60,
                           frame_size: Tuple[int, int] = (128, 128)) -> Path:
    """Write ``n_sequences`` synthetic videos as sequence directories under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v in synth_videos(seed, n_sequences, frames_per_seq, frame_size):
        write_sequence(out / v.name, v)
    return out
