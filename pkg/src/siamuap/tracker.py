"""Anchor-free Siamese tracker: depthwise correlation, C/R/Q heads and box decoding.

The reference model is a deliberately small SiamFC++-shaped network used as
the victim in desk-scale experiments.  Anything satisfying
:class:`TrackerAdapter` can be attacked instead.
"""

from __future__ import annotations

import collections
import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Box, CropSpec, GridGeometry, apply_crop, clip_box, make_crop_spec, project_box

log = logging.getLogger(__name__)

# Incremented by backward passes through the tracker heads and by optimizer
# updates of perturbations; the attack runtime must leave both untouched.
INSTRUMENTS: collections.Counter = collections.Counter()


class TrainingFailure(RuntimeError):
    """Raised when an optimisation produces non-finite values."""


@dataclass(frozen=True)
class ArchConfig:
    template_size: int = 64
    search_size: int = 160
    stride: int = 8
    width: int = 32
    stem: Tuple[int, int] = (16, 24)
    window_weight: float = 0.0
    size_lr: float = 0.5

    @property
    def grid(self) -> GridGeometry:
        return GridGeometry.fit(self.stride, self.search_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem"] = list(self.stem)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if "stem" in d:
            d["stem"] = tuple(d["stem"])
        return cls(**d)


@dataclass
class HeadMaps:
    """Head outputs with a leading batch axis.

    ``C`` and ``Q`` are ``(B, G, G)`` probabilities, ``R`` is ``(B, G, G, 4)``
    holding (l, t, r, b) distances in crop pixels.
    """

    C: torch.Tensor
    R: torch.Tensor
    Q: torch.Tensor

    def __getitem__(self, i) -> "HeadMaps":
        return HeadMaps(self.C[i:i + 1], self.R[i:i + 1], self.Q[i:i + 1])

    def detach(self) -> "HeadMaps":
        return HeadMaps(self.C.detach(), self.R.detach(), self.Q.detach())

    def __len__(self) -> int:
        return self.C.shape[0]


@dataclass
class TrackerState:
    center: Tuple[float, float]
    size: Tuple[float, float]

    def __post_init__(self):
        if not (self.size[0] > 0 and self.size[1] > 0):
            raise ValueError(f"tracker state size must be positive, got {self.size}")

    @property
    def box(self) -> Box:
        return Box.from_center(self.center[0], self.center[1], self.size[0], self.size[1])


class TrackerAdapter(Protocol):
    """What the attack code needs from a victim tracker."""

    template_size: int
    search_size: int
    grid: GridGeometry

    def heads(self, z: torch.Tensor, x: torch.Tensor) -> HeadMaps: ...

    def input_gradients(self, z, x, scalar_fn: Callable[[HeadMaps], torch.Tensor]): ...


def correlate(feat_z: torch.Tensor, feat_x: torch.Tensor) -> torch.Tensor:
    """Depthwise valid cross-correlation of ``(B, C, h, w)`` against ``(B, C, H, W)``."""
    if feat_z.dim() == 3:
        return correlate(feat_z[None], feat_x[None])[0]
    if feat_z.shape[:2] != feat_x.shape[:2]:
        raise ValueError(f"channel/batch mismatch: {tuple(feat_z.shape)} vs {tuple(feat_x.shape)}")
    b, c, kh, kw = feat_z.shape
    _, _, h, w = feat_x.shape
    if kh > h or kw > w:
        raise ValueError("template feature larger than search feature")
    out = F.conv2d(feat_x.reshape(1, b * c, h, w), feat_z.reshape(b * c, 1, kh, kw), groups=b * c)
    return out.reshape(b, c, out.shape[-2], out.shape[-1])


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride, 1)


class TinySiamTracker(nn.Module):
    """Four-stage stride-8 backbone, two-layer task adapters, SiamFC++ style heads."""

    def __init__(self, arch: ArchConfig = ArchConfig()):
        super().__init__()
        self.arch = arch
        if arch.stride != 8:
            raise ValueError("the reference backbone has a fixed total stride of 8")
        w = arch.width
        s1, s2 = arch.stem
        self.backbone = nn.Sequential(
            _conv(3, s1, 2), nn.SiLU(),
            _conv(s1, s2, 2), nn.SiLU(),
            _conv(s2, w, 2), nn.SiLU(),
            _conv(w, w), nn.SiLU(),
        )
        self.adapt_cls = nn.Sequential(_conv(w, w), nn.SiLU(), _conv(w, w))
        self.adapt_reg = nn.Sequential(_conv(w, w), nn.SiLU(), _conv(w, w))
        self.cls_tower = nn.Sequential(_conv(w, w), nn.SiLU())
        self.reg_tower = nn.Sequential(_conv(w, w), nn.SiLU())
        self.cls_out = nn.Conv2d(w, 2, 1)
        self.reg_out = nn.Conv2d(w, 4, 1)
        nn.init.constant_(self.cls_out.bias, -2.0)
        nn.init.zeros_(self.reg_out.weight)
        nn.init.constant_(self.reg_out.bias, math.log(16.0))

        self.template_size = arch.template_size
        self.search_size = arch.search_size
        self.grid = arch.grid

    @staticmethod
    def _normalize(img: torch.Tensor) -> torch.Tensor:
        return (img / 255.0 - 0.5) / 0.25

    def template_features(self, z: torch.Tensor):
        f = self.backbone(self._normalize(z))
        return self.adapt_cls(f), self.adapt_reg(f)

    def heads_from_template(self, zf, x: torch.Tensor) -> HeadMaps:
        zc, zr = zf
        f = self.backbone(self._normalize(x))
        xc, xr = self.adapt_cls(f), self.adapt_reg(f)
        k = zc.shape[-1]
        # pad so output cell i is centred between feature cells i and i+1,
        # i.e. at crop pixel 8*i + 4
        pad = ((k - 1) // 2, k // 2, (k - 1) // 2, k // 2)
        norm = 1.0 / (zc.shape[-1] * zc.shape[-2])
        fc = correlate(zc, F.pad(xc, pad)) * norm
        fr = correlate(zr, F.pad(xr, pad)) * norm
        g = self.grid.grid_size
        fc, fr = fc[..., :g, :g], fr[..., :g, :g]
        cq = self.cls_out(self.cls_tower(fc))
        r = torch.exp(self.reg_out(self.reg_tower(fr)))
        c_logit, q_logit = cq[:, 0], cq[:, 1]
        if c_logit.requires_grad:
            c_logit.register_hook(_count_grad)
        return HeadMaps(torch.sigmoid(c_logit), r.permute(0, 2, 3, 1), torch.sigmoid(q_logit))

    def forward(self, z: torch.Tensor, x: torch.Tensor) -> HeadMaps:
        return self.heads_from_template(self.template_features(z), x)

    def heads(self, z, x) -> HeadMaps:
        return forward(self, z, x)

    def input_gradients(self, z, x, scalar_fn):
        z = _to_nchw(z, self.dtype).requires_grad_(True)
        x = _to_nchw(x, self.dtype).requires_grad_(True)
        out = scalar_fn(self(z, x))
        gz, gx = torch.autograd.grad(out, (z, x))
        return gz.permute(0, 2, 3, 1), gx.permute(0, 2, 3, 1)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def _count_grad(grad):
    INSTRUMENTS["grad_evals"] += 1
    return grad


def _to_nchw(img, dtype=torch.float32) -> torch.Tensor:
    t = torch.as_tensor(img)
    if t.dim() == 3:
        t = t[None]
    if t.dim() != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) or (B, H, W, 3) images, got {tuple(t.shape)}")
    # one canonical memory layout, so numerics never depend on how the caller built the array
    return t.to(dtype).permute(0, 3, 1, 2).contiguous()


def forward(model: TinySiamTracker, z, x) -> HeadMaps:
    """Run the tracker on HWC images in [0, 255] (numpy or torch, optionally batched)."""
    zt = _to_nchw(z, model.dtype)
    xt = _to_nchw(x, model.dtype)
    t, s = model.template_size, model.search_size
    if zt.shape[-2:] != (t, t):
        raise ValueError(f"template must be {t}x{t}, got {tuple(zt.shape[-2:])}")
    if xt.shape[-2:] != (s, s):
        raise ValueError(f"search image must be {s}x{s}, got {tuple(xt.shape[-2:])}")
    if zt.shape[0] != xt.shape[0]:
        zt = zt.expand(xt.shape[0], -1, -1, -1)
    return model(zt, xt)


def cosine_window(g: int) -> np.ndarray:
    h = np.hanning(g + 2)[1:-1] if g > 1 else np.ones(1)
    return np.outer(h, h)


def decode(maps: HeadMaps, spec: CropSpec, g: GridGeometry,
           window_weight: float = 0.0) -> Tuple[Box, float]:
    """Best-scoring cell of ``C * Q`` (first in row-major order on ties) as a frame box."""
    C = _as_grid(maps.C)
    Q = _as_grid(maps.Q)
    R = _as_grid(maps.R)
    score = C * Q
    if window_weight:
        score = (1.0 - window_weight) * score + window_weight * cosine_window(g.grid_size)
    flat = int(np.argmax(score))
    yi, xi = divmod(flat, score.shape[1])
    half = g.stride // 2
    cx, cy = half + xi * g.stride, half + yi * g.stride
    l, t, r, b = (float(v) for v in R[yi, xi])
    box = project_box(Box(cx - l, cy - t, cx + r, cy + b), spec, "crop->frame")
    return box, float(score[yi, xi])


def _as_grid(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    a = np.asarray(a, dtype=np.float64)
    if a.ndim in (3, 4) and a.shape[0] == 1 and a.shape[1] == a.shape[2]:
        a = a[0]
    return a


def build_reference_tracker(seed: int = 0, arch: Optional[ArchConfig] = None) -> TinySiamTracker:
    arch = arch or ArchConfig()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = TinySiamTracker(arch)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.eval()


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def parameter_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- tracking loop

CropHook = Callable[[np.ndarray, CropSpec, int], np.ndarray]


def crop_template(frame: np.ndarray, box: Box, model) -> Tuple[np.ndarray, CropSpec]:
    spec = make_crop_spec(frame.shape[:2], box, "template", model.template_size, model.search_size)
    return apply_crop(frame, spec), spec


def crop_search(frame: np.ndarray, box: Box, model) -> Tuple[np.ndarray, CropSpec]:
    spec = make_crop_spec(frame.shape[:2], box, "search", model.template_size, model.search_size)
    return apply_crop(frame, spec), spec


class SiameseRunner:
    """Per-sequence tracking state for a frozen model.

    Optional hooks transform the template crop once and each search crop
    before inference; they are how perturbations enter at attack time.
    """

    def __init__(self, model: TinySiamTracker, window_weight: Optional[float] = None,
                 size_lr: Optional[float] = None,
                 template_hook: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                 search_hook: Optional[CropHook] = None):
        self.model = model
        self.window_weight = model.arch.window_weight if window_weight is None else window_weight
        self.size_lr = model.arch.size_lr if size_lr is None else size_lr
        self.template_hook = template_hook
        self.search_hook = search_hook
        self.state: Optional[TrackerState] = None
        self._zf = None

    def init(self, frame: np.ndarray, box: Box) -> None:
        z, _ = crop_template(frame, box, self.model)
        if self.template_hook is not None:
            z = self.template_hook(z)
        with torch.no_grad():
            self._zf = self.model.template_features(_to_nchw(z, self.model.dtype))
        self.state = TrackerState(box.center, (box.width, box.height))

    def update(self, frame: np.ndarray, index: int) -> Box:
        if self.state is None:
            raise RuntimeError("init() must be called before update()")
        x, spec = crop_search(frame, self.state.box, self.model)
        if self.search_hook is not None:
            x = self.search_hook(x, spec, index)
        with torch.no_grad():
            maps = self.model.heads_from_template(self._zf, _to_nchw(x, self.model.dtype))
        box, _ = decode(maps, spec, self.model.grid, self.window_weight)
        box = clip_box(box, frame.shape[:2])
        lr = self.size_lr
        w = (1 - lr) * self.state.size[0] + lr * box.width
        h = (1 - lr) * self.state.size[1] + lr * box.height
        self.state = TrackerState(box.center, (max(w, 1.0), max(h, 1.0)))
        return box


def track_sequence(model: TinySiamTracker, video: Sequence[np.ndarray], init_box: Box,
                   window_weight: Optional[float] = None) -> List[Box]:
    """Clean one-pass tracking; frame 1 reports ``init_box``."""
    if len(video) == 0:
        raise ValueError("cannot track an empty video")
    runner = SiameseRunner(model, window_weight)
    runner.init(video[0], init_box)
    out = [init_box]
    for i in range(1, len(video)):
        out.append(runner.update(video[i], i))
    return out
