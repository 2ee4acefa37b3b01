"""Offline training of universal perturbations with sign-gradient steps.

The perturbations start at zero and move by exactly ``eps`` per iteration.
Internally each tensor is stored as an integer lattice coordinate ``m`` with
value ``m * eps`` so that the quantisation invariant holds exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import torch

from .geometry import Box, CropSpec, apply_crop, make_crop_spec, project_box
from .labels import FakeLabels, cell_boxes, make_cls_label, make_quality_label, make_reg_label
from .losses import LossWeights, total_loss
from .perturb import (PerturbationPair, add_full, add_patch, apply_ycbcr_attack, paste_patch,
                      perturb_template, perturb_template_ycbcr, YCbCrPerturbation)
from .tracker import INSTRUMENTS, TrainingFailure, _to_nchw

log = logging.getLogger(__name__)

LOG_HEADER = "iter,loss,loss_cls,loss_quality,loss_reg,penalty,wall_ms"
LOSS_TERMS = ("cls", "quality", "reg")


@dataclass
class TrainConfig:
    iterations: int = 8192
    batch_size: int = 96
    eps1: float = 0.1
    eps2: float = 0.1
    patch_size: int = 32
    shift_range: float = 64.0
    weights: LossWeights = field(default_factory=LossWeights)
    color_mode: str = "rgb"
    cbcr_size: int = 64
    seed: int = 0
    checkpoints: str = "pow2"
    optimize_template: bool = True
    optimize_patch: bool = True
    loss_terms: Tuple[str, ...] = LOSS_TERMS
    max_resample: int = 8
    max_frame_gap: Optional[int] = None
    center_jitter: float = 0.0
    scale_jitter: float = 0.0
    log_every: int = 1
    paste_init: float = 128.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError("eps1 and eps2 must be positive")
        if self.shift_range < 0:
            raise ValueError("shift_range must be >= 0")
        if self.center_jitter < 0 or self.scale_jitter < 0:
            raise ValueError("center_jitter and scale_jitter must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        bad = set(self.loss_terms) - set(LOSS_TERMS)
        if bad or not self.loss_terms:
            raise ValueError(f"loss_terms must be a non-empty subset of {LOSS_TERMS}")
        if self.color_mode not in ("rgb", "ycbcr"):
            raise ValueError(f"unknown color mode {self.color_mode!r}")

    def effective_weights(self) -> LossWeights:
        w = self.weights
        return replace(
            w,
            alpha=w.alpha if "cls" in self.loss_terms else 0.0,
            beta=w.beta if "quality" in self.loss_terms else 0.0,
            gamma=w.gamma if "reg" in self.loss_terms else 0.0,
        )

    def checkpoint_iterations(self) -> List[int]:
        n = self.iterations
        if n == 0:
            return []
        if self.checkpoints == "pow2":
            its = [2 ** i for i in range(int(math.log2(n)) + 1)]
        elif self.checkpoints in ("none", ""):
            its = []
        else:
            its = [int(v) for v in str(self.checkpoints).split(",") if v.strip()]
        return sorted({k for k in its if 1 <= k <= n} | {n})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_terms"] = list(self.loss_terms)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "loss_terms" in d:
            d["loss_terms"] = tuple(d["loss_terms"])
        return cls(**d)


@dataclass
class TrainingSample:
    z: np.ndarray
    x: np.ndarray
    real_box: Box  # search-crop coordinates
    spec: CropSpec
    video: int
    frames: Tuple[int, int]


def sample_training_pair(videos, rng: np.random.Generator, template_size: int, search_size: int,
                         max_frame_gap: Optional[int] = None,
                         center_jitter: float = 0.0, scale_jitter: float = 0.0) -> TrainingSample:
    """Random video, random frame pair; template and search crops around the true boxes.

    ``center_jitter`` (crop pixels) and ``scale_jitter`` (log-scale) move the
    search window off the target, as in the tracker's own training augmentation.
    """
    usable = [i for i, v in enumerate(videos) if len(v) >= 1]
    if not usable:
        raise ValueError("dataset has no usable sequences")
    vi = usable[int(rng.integers(len(usable)))]
    v = videos[vi]
    n = len(v)
    t = int(rng.integers(n))
    if max_frame_gap is None:
        s = int(rng.integers(n))
    else:
        lo, hi = max(0, t - max_frame_gap), min(n - 1, t + max_frame_gap)
        s = int(rng.integers(lo, hi + 1))
    zspec = make_crop_spec(v.frames[t].shape[:2], v.boxes[t], "template", template_size, search_size)
    z = apply_crop(v.frames[t], zspec)
    box_s = v.boxes[s]
    spec = make_crop_spec(v.frames[s].shape[:2], box_s, "search", template_size, search_size)
    if center_jitter or scale_jitter:
        ds = math.exp(rng.uniform(-scale_jitter, scale_jitter)) if scale_jitter else 1.0
        du, dv = rng.uniform(-center_jitter, center_jitter, size=2) / spec.scale
        cx, cy = box_s.center
        spec = CropSpec((cx + du, cy + dv), spec.scale * ds, spec.out_size, spec.pad_value)
    x = apply_crop(v.frames[s], spec)
    return TrainingSample(z, x, project_box(box_s, spec, "frame->crop"), spec, vi, (t, s))


def sample_fake_box(real_center: Tuple[float, float], P: int, shift_range: float,
                    rng: np.random.Generator, search_size: int) -> Box:
    """Square of side ``P`` near the real centre, kept fully inside the crop."""
    if P > search_size:
        raise ValueError(f"patch size {P} exceeds the search size {search_size}")
    u, v = rng.uniform(-shift_range, shift_range, size=2) if shift_range > 0 else (0.0, 0.0)
    half = P / 2.0
    cx = min(max(real_center[0] + u, half), search_size - half)
    cy = min(max(real_center[1] + v, half), search_size - half)
    return Box.from_center(cx, cy, P, P)


def sign_step(param, grad, eps: float):
    """``param - eps * sign(grad)`` with ``sign(0) = 0``."""
    g = np.asarray(grad)
    if not np.all(np.isfinite(g)):
        raise TrainingFailure("non-finite gradient")
    INSTRUMENTS["optimizer_steps"] += 1
    return np.asarray(param) - eps * np.sign(g)


# ---------------------------------------------------------------- generic loop

@dataclass
class _Param:
    name: str
    shape: Tuple[int, ...]
    eps: float
    group: str  # "delta" or "patch" for the penalty weight
    trainable: bool = True
    init: float = 0.0


@dataclass
class TrainResult:
    values: Dict[str, np.ndarray]
    checkpoints: Dict[int, Dict[str, np.ndarray]]
    history: List[dict]


class _Lattice:
    def __init__(self, p: _Param):
        self.p = p
        self.m = np.zeros(p.shape, dtype=np.int64)

    def value(self) -> np.ndarray:
        return self.p.init + self.m * self.p.eps


def _optimize(cfg: TrainConfig, model, videos, params: Sequence[_Param],
              build: Callable[[TrainingSample, Box, Dict[str, torch.Tensor]], Tuple[torch.Tensor, torch.Tensor]],
              fake_fn: Callable[[TrainingSample, np.random.Generator], Box],
              weights: LossWeights, log_file: Optional[TextIO] = None,
              on_checkpoint: Optional[Callable[[int, Dict[str, np.ndarray]], None]] = None) -> TrainResult:
    rng = np.random.default_rng(cfg.seed)
    lattices = {p.name: _Lattice(p) for p in params}
    g = model.grid
    dtype = model.dtype
    ckpt_at = set(cfg.checkpoint_iterations())
    checkpoints: Dict[int, Dict[str, np.ndarray]] = {}
    history: List[dict] = []
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")

    for k in range(cfg.iterations):
        t0 = time.perf_counter()
        tensors = {
            name: torch.tensor(lat.value(), dtype=dtype, requires_grad=lat.p.trainable)
            for name, lat in lattices.items()
        }
        zs, xs, labels = [], [], []
        for _ in range(cfg.batch_size):
            for _attempt in range(cfg.max_resample + 1):
                sample = sample_training_pair(videos, rng, model.template_size, model.search_size,
                                              cfg.max_frame_gap, cfg.center_jitter, cfg.scale_jitter)
                fake = fake_fn(sample, rng)
                cls = make_cls_label(fake, g)
                if cls.sum() > 0:
                    break
            else:
                raise TrainingFailure(f"no positive cells after {cfg.max_resample} resamples")
            z_t, x_t = build(sample, fake, tensors)
            zs.append(z_t)
            xs.append(x_t)
            labels.append((fake, cls))
        z = torch.stack(zs).permute(0, 3, 1, 2).contiguous()
        x = torch.stack(xs).permute(0, 3, 1, 2).contiguous()
        maps = model(z, x)
        R = maps.R.detach().cpu().numpy()
        fl = [FakeLabels(cls, make_reg_label(fake, g), make_quality_label(cell_boxes(R[i], g), fake))
              for i, (fake, cls) in enumerate(labels)]
        by_group = {"delta": [], "patch": []}
        for name, lat in lattices.items():
            by_group[lat.p.group].append(tensors[name])
        loss, parts = total_loss(maps, fl, tuple(by_group["delta"]), tuple(by_group["patch"]), weights)
        if not math.isfinite(parts["loss"]):
            raise TrainingFailure(f"non-finite loss at iteration {k + 1}")
        trainable = [tensors[n] for n, lat in lattices.items() if lat.p.trainable]
        if trainable:
            grads = torch.autograd.grad(loss, trainable)
            for (name, lat), gr in zip([(n, l) for n, l in lattices.items() if l.p.trainable], grads):
                lat.m = sign_step(lat.m, gr.detach().cpu().numpy(), 1).astype(np.int64)
        it = k + 1
        wall = (time.perf_counter() - t0) * 1000.0
        rec = {"iter": it, **parts, "wall_ms": wall}
        history.append(rec)
        if log_file is not None and (it % cfg.log_every == 0 or it == cfg.iterations):
            log_file.write(f"{it},{parts['loss']:.6g},{parts['cls']:.6g},{parts['quality']:.6g},"
                           f"{parts['reg']:.6g},{parts['penalty']:.6g},{wall:.1f}\n")
            log_file.flush()
        if it in ckpt_at:
            snap = {n: lat.value() for n, lat in lattices.items()}
            checkpoints[it] = snap
            if on_checkpoint is not None:
                on_checkpoint(it, snap)
    return TrainResult({n: lat.value() for n, lat in lattices.items()}, checkpoints, history)


def _t(a, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(a, dtype=like.dtype)


# ---------------------------------------------------------------- public trainers

def train_universal(cfg: TrainConfig, tracker, dataset, log_file: Optional[TextIO] = None,
                    on_checkpoint: Optional[Callable[[int, PerturbationPair], None]] = None):
    """Jointly train the template perturbation and the translucent search patch.

    Returns ``(pair, checkpoints, history)`` where ``checkpoints`` maps
    iteration to :class:`PerturbationPair` snapshots.
    """
    T, S = tracker.template_size, tracker.search_size
    ycc = cfg.color_mode == "ycbcr"
    P = cfg.cbcr_size if ycc else cfg.patch_size
    params = [_Param("delta", (T, T, 3), cfg.eps1, "delta", cfg.optimize_template)]
    if ycc:
        params += [_Param("search_y", (S, S), cfg.eps2, "patch", cfg.optimize_patch),
                   _Param("patch", (P, P, 2), cfg.eps2, "patch", cfg.optimize_patch)]
    else:
        params.append(_Param("patch", (P, P, 3), cfg.eps2, "patch", cfg.optimize_patch))

    def build(sample, fake, t):
        like = t["delta"]
        z, x = _t(sample.z, like), _t(sample.x, like)
        if ycc:
            z = perturb_template_ycbcr(z, t["delta"])
            x = apply_ycbcr_attack(x, YCbCrPerturbation(t["delta"], t["search_y"], t["patch"]), fake)
        else:
            z = perturb_template(z, t["delta"])
            x = add_patch(x, t["patch"], fake)
        return z, x

    def fake_fn(sample, rng):
        return sample_fake_box(sample.real_box.center, P, cfg.shift_range, rng, S)

    def to_pair(vals, it):
        return PerturbationPair(vals["delta"], vals["patch"], cfg.color_mode, cfg.eps1, cfg.eps2, it,
                                "add", vals.get("search_y"), {"method": "universal"})

    cb = None
    if on_checkpoint is not None:
        def cb(it, vals):
            on_checkpoint(it, to_pair(vals, it))

    res = _optimize(cfg, tracker, dataset, params, build, fake_fn, cfg.effective_weights(),
                    log_file, cb)
    ckpts = {it: to_pair(v, it) for it, v in res.checkpoints.items()}
    return to_pair(res.values, cfg.iterations), ckpts, res.history


def baseline_fake_box(cfg: TrainConfig, search_size: int) -> Box:
    """The constant fake target used by the whole-image UAP baseline."""
    c = search_size / 2.0 + cfg.shift_range / 2.0
    half = cfg.patch_size / 2.0
    c = min(max(c, half), search_size - half)
    return Box.from_center(c, c, cfg.patch_size, cfg.patch_size)


def train_baseline_uap(cfg: TrainConfig, tracker, dataset, log_file: Optional[TextIO] = None):
    """Whole-image additive perturbations on both inputs with one fixed fake label."""
    T, S = tracker.template_size, tracker.search_size
    params = [_Param("delta", (T, T, 3), cfg.eps1, "delta"),
              _Param("delta_x", (S, S, 3), cfg.eps2, "patch")]
    fixed = baseline_fake_box(cfg, S)

    def build(sample, fake, t):
        like = t["delta"]
        return (perturb_template(_t(sample.z, like), t["delta"]),
                add_full(_t(sample.x, like), t["delta_x"]))

    res = _optimize(cfg, tracker, dataset, params, build, lambda s, r: fixed,
                    cfg.effective_weights(), log_file)

    def to_pair(v, it):
        return PerturbationPair(v["delta"], v["delta_x"], "rgb", cfg.eps1, cfg.eps2, it, "full",
                                meta={"method": "baseline-uap", "fake_box": list(fixed.as_array())})
    ckpts = {it: to_pair(v, it) for it, v in res.checkpoints.items()}
    return to_pair(res.values, cfg.iterations), ckpts, res.history


def train_baseline_paste(cfg: TrainConfig, tracker, dataset, log_file: Optional[TextIO] = None):
    """Opaque pasted patch with a clean template and no norm penalty on the patch."""
    T, S, P = tracker.template_size, tracker.search_size, cfg.patch_size
    params = [_Param("patch", (P, P, 3), cfg.eps2, "patch", init=cfg.paste_init)]

    def build(sample, fake, t):
        like = t["patch"]
        return _t(sample.z, like), paste_patch(_t(sample.x, like), t["patch"], fake)

    def fake_fn(sample, rng):
        return sample_fake_box(sample.real_box.center, P, cfg.shift_range, rng, S)

    weights = replace(cfg.effective_weights(), eta2=0.0)
    res = _optimize(cfg, tracker, dataset, params, build, fake_fn, weights, log_file)

    def to_pair(v, it):
        return PerturbationPair(np.zeros((T, T, 3)), v["patch"], "rgb", cfg.eps1, cfg.eps2, it,
                                "paste", meta={"method": "baseline-paste"})
    ckpts = {it: to_pair(v, it) for it, v in res.checkpoints.items()}
    return to_pair(res.values, cfg.iterations), ckpts, res.history
