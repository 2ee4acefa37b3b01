"""Attack-time runtime: perturbations are only added, never optimised, while tracking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import read_boxes, write_boxes
from .geometry import Box, iou_or_zero, project_box
from .perturb import (PerturbationPair, add_full, add_patch, apply_ycbcr_attack, paste_patch,
                      perturb_template, perturb_template_ycbcr)
from .tracker import SiameseRunner

log = logging.getLogger(__name__)

DIRECTIONS = {
    "45": (3.0, -3.0),
    "-45": (3.0, 3.0),
    "135": (-3.0, -3.0),
    "-135": (-3.0, 3.0),
}
REINIT_SKIP = 5


@dataclass
class FakeTrajectory:
    boxes: List[Box]
    mode: str = "file"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, b in enumerate(self.boxes):
            if not b.is_valid:
                raise ValueError(f"fake box {i + 1} is degenerate: {b}")

    def __len__(self) -> int:
        return len(self.boxes)

    def save(self, path) -> None:
        save_trajectory(path, self.boxes)

    @classmethod
    def load(cls, path) -> "FakeTrajectory":
        return cls(read_boxes(path), "file", {"path": str(path)})


def gen_fake_traj_offset(gt: Sequence[Box], gap_px: float = 2.0, side: str = "right") -> FakeTrajectory:
    """Same-size boxes next to the ground truth, adjacent edges ``gap_px`` apart."""
    if not gt:
        raise ValueError("ground-truth trajectory is empty")
    out = []
    for b in gt:
        if side == "right":
            dx, dy = b.width + gap_px, 0.0
        elif side == "left":
            dx, dy = -(b.width + gap_px), 0.0
        elif side == "below":
            dx, dy = 0.0, b.height + gap_px
        elif side == "above":
            dx, dy = 0.0, -(b.height + gap_px)
        else:
            raise ValueError(f"unknown side {side!r}")
        out.append(b.translate(dx, dy))
    return FakeTrajectory(out, "offset", {"gap_px": gap_px, "side": side})


def gen_fake_traj_direction(init: Box, T: int, direction=(3.0, 3.0)) -> FakeTrajectory:
    """Start at ``init`` and drift by ``direction`` pixels every frame.

    ``direction`` is a ``(dx, dy)`` pair or one of the angle names in ``DIRECTIONS``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(direction, str):
        direction = DIRECTIONS[direction]
    dx, dy = direction
    return FakeTrajectory([init.translate(i * dx, i * dy) for i in range(T)], "direction",
                          {"direction": [dx, dy]})


def _hooks(pert: Optional[PerturbationPair], fake: Optional[FakeTrajectory], events: list):
    if pert is None:
        return None, None
    if pert.color_mode == "ycbcr":
        def template_hook(z):
            return perturb_template_ycbcr(z, pert.delta)
    else:
        def template_hook(z):
            return perturb_template(z, pert.delta)

    if pert.placement == "full":
        def search_hook(x, spec, i):
            return add_full(x, pert.patch)
        return template_hook, search_hook

    ycc = pert.ycbcr() if pert.color_mode == "ycbcr" else None
    op = paste_patch if pert.placement == "paste" else add_patch

    def search_hook(x, spec, i):
        fb = fake.boxes[i]
        cx, cy = spec.frame_to_crop(*fb.center)
        s = spec.out_size
        if not (0 <= cx < s and 0 <= cy < s):
            events.append(("patch_skipped", i))
            log.debug("frame %d: fake centre outside the search crop, patch skipped", i + 1)
            return x
        fb_crop = project_box(fb, spec, "frame->crop")
        if ycc is not None:
            return apply_ycbcr_attack(x, ycc, fb_crop)
        return op(x, pert.patch, fb_crop)

    return template_hook, search_hook


@dataclass
class AttackResult:
    boxes: List[Box]
    events: List[Tuple[str, int]]

    def __iter__(self):
        return iter(self.boxes)

    def __len__(self):
        return len(self.boxes)

    def __getitem__(self, i):
        return self.boxes[i]


def _check_lengths(video, fake):
    if fake is not None and len(fake) != len(video):
        raise ValueError(f"fake trajectory has {len(fake)} boxes but the video has {len(video)} frames")


def run_attack(tracker, video: Sequence[np.ndarray], init_box: Box,
               perturb: Optional[PerturbationPair], fake: Optional[FakeTrajectory],
               window_weight: Optional[float] = None) -> AttackResult:
    """Track with the perturbed template and per-frame patch insertion.

    ``perturb=None`` gives the clean tracker.  Whole-image perturbations
    (``placement == "full"``) do not need a fake trajectory.
    """
    if len(video) == 0:
        raise ValueError("cannot attack an empty video")
    needs_fake = perturb is not None and perturb.placement != "full"
    if needs_fake and fake is None:
        raise ValueError("a fake trajectory is required for patch perturbations")
    _check_lengths(video, fake)
    events: list = []
    th, sh = _hooks(perturb, fake, events)
    runner = SiameseRunner(tracker, window_weight, template_hook=th, search_hook=sh)
    runner.init(video[0], init_box)
    out = [init_box]
    for i in range(1, len(video)):
        out.append(runner.update(video[i], i))
    return AttackResult(out, events)


@dataclass
class ReinitResult:
    boxes: List[Optional[Box]]
    failures: int
    ious: List[Optional[float]]
    status: List[str]


def run_with_reinit(tracker, video: Sequence[np.ndarray], gt: Sequence[Box],
                    perturb: Optional[PerturbationPair] = None,
                    fake: Optional[FakeTrajectory] = None, skip: int = REINIT_SKIP,
                    window_weight: Optional[float] = None) -> ReinitResult:
    """Reinitialise on ground truth ``skip`` frames after every zero-overlap frame.

    ``ious`` is ``None`` on init, failure and skipped frames so it can feed
    :func:`siamuap.evaluation.accuracy` directly.
    """
    if len(gt) != len(video):
        raise ValueError(f"ground truth has {len(gt)} boxes but the video has {len(video)} frames")
    _check_lengths(video, fake)
    n = len(video)
    boxes: List[Optional[Box]] = [None] * n
    ious: List[Optional[float]] = [None] * n
    status = ["skip"] * n
    failures = 0
    events: list = []
    th, sh = _hooks(perturb, fake, events)
    i = 0
    while i < n:
        runner = SiameseRunner(tracker, window_weight, template_hook=th, search_hook=sh)
        runner.init(video[i], gt[i])
        boxes[i] = gt[i]
        status[i] = "init"
        i += 1
        while i < n:
            b = runner.update(video[i], i)
            boxes[i] = b
            o = iou_or_zero(b, gt[i])
            if o <= 0.0:
                status[i] = "fail"
                failures += 1
                i += skip + 1
                break
            status[i] = "track"
            ious[i] = o
            i += 1
    return ReinitResult(boxes, failures, ious, status)


def save_trajectory(path, boxes: Sequence[Box]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_boxes(path, boxes)
    return path
