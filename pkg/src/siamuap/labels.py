"""Dense fake supervision (classification, regression, quality) built from a box in crop coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, GridGeometry


@dataclass
class FakeLabels:
    Cstar: np.ndarray  # (G, G) in {0, 1}
    Rstar: np.ndarray  # (G, G, 4) as (l*, t*, r*, b*)
    Qstar: np.ndarray  # (G, G) in [0, 1]

    @property
    def n_pos(self) -> int:
        return int(self.Cstar.sum())


def make_cls_label(fake: Box, g: GridGeometry) -> np.ndarray:
    """1 where the cell's image point lies inside ``fake`` (border inclusive)."""
    pts = g.points()
    inside_x = (pts >= fake.x0) & (pts <= fake.x1)
    inside_y = (pts >= fake.y0) & (pts <= fake.y1)
    return (inside_y[:, None] & inside_x[None, :]).astype(np.float64)


def make_reg_label(fake: Box, g: GridGeometry) -> np.ndarray:
    pts = g.points()
    n = g.grid_size
    px = np.broadcast_to(pts[None, :], (n, n))
    py = np.broadcast_to(pts[:, None], (n, n))
    return np.stack([px - fake.x0, py - fake.y0, fake.x1 - px, fake.y1 - py], axis=-1)


def cell_boxes(R: np.ndarray, g: GridGeometry) -> np.ndarray:
    """Corner boxes ``(G, G, 4)`` decoded at every cell from edge distances ``R``."""
    R = np.asarray(R, dtype=np.float64)
    pts = g.points()
    px = pts[None, :]
    py = pts[:, None]
    return np.stack([px - R[..., 0], py - R[..., 1], px + R[..., 2], py + R[..., 3]], axis=-1)


def make_quality_label(pred_boxes: np.ndarray, fake: Box) -> np.ndarray:
    """Per-cell IoU between decoded predictions and ``fake``; degenerate predictions score 0."""
    b = np.asarray(pred_boxes, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    iw = np.minimum(x1, fake.x1) - np.maximum(x0, fake.x0)
    ih = np.minimum(y1, fake.y1) - np.maximum(y0, fake.y0)
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    pw, ph = x1 - x0, y1 - y0
    valid = (pw > 0) & (ph > 0)
    area = np.where(valid, pw * ph, 0.0)
    union = area + fake.area - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(valid & (union > 0), inter / union, 0.0)
    return np.clip(q, 0.0, 1.0)


def make_fake_labels(fake: Box, g: GridGeometry, R_pred) -> FakeLabels:
    """All three targets; ``R_pred`` is the current regression map used for the quality target."""
    return FakeLabels(
        make_cls_label(fake, g),
        make_reg_label(fake, g),
        make_quality_label(cell_boxes(R_pred, g), fake),
    )
