"""Perturbation operators on HWC images in [0, 255].

Every operator accepts numpy arrays or torch tensors and returns the same
kind.  Torch inputs keep their autograd graph, so the same code serves the
training loop and the attack runtime.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import torch

from .geometry import Box

PATCH_SIZES = (16, 32, 64)
CBCR_REGION = 64

RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
YCBCR_OFFSET = np.array([0.0, 128.0, 128.0])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)


@dataclass
class YCbCrPerturbation:
    delta_full: np.ndarray  # (T, T, 3) added in YCbCr to the template
    search_y: np.ndarray    # (S, S) added to the whole search Y channel
    search_cbcr: np.ndarray  # (P, P, 2) added to Cb, Cr around the fake centre


@dataclass
class PerturbationPair:
    """Universal template perturbation and search-side patch.

    ``placement`` is ``"add"`` for the translucent patch, ``"paste"`` for the
    replacement patch baseline and ``"full"`` when ``patch`` covers the whole
    search image.  In YCbCr mode ``patch`` holds the CbCr patch and
    ``search_y`` the full-image luminance perturbation.
    """

    delta: np.ndarray
    patch: np.ndarray
    color_mode: str = "rgb"
    eps1: float = 0.1
    eps2: float = 0.1
    iteration: int = 0
    placement: str = "add"
    search_y: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.color_mode not in ("rgb", "ycbcr"):
            raise ValueError(f"unknown color mode {self.color_mode!r}")
        if self.placement not in ("add", "paste", "full"):
            raise ValueError(f"unknown patch placement {self.placement!r}")
        for name in ("delta", "patch", "search_y"):
            a = getattr(self, name)
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")
        if self.color_mode == "ycbcr" and self.search_y is None:
            raise ValueError("YCbCr perturbations need search_y")

    @property
    def patch_size(self) -> int:
        return int(self.patch.shape[0])

    @classmethod
    def zeros(cls, template_size: int, patch_size: int, color_mode: str = "rgb",
              search_size: Optional[int] = None, **kw) -> "PerturbationPair":
        delta = np.zeros((template_size, template_size, 3))
        if color_mode == "ycbcr":
            if search_size is None:
                raise ValueError("search_size is needed for YCbCr perturbations")
            return cls(delta, np.zeros((patch_size, patch_size, 2)), "ycbcr",
                       search_y=np.zeros((search_size, search_size)), **kw)
        return cls(delta, np.zeros((patch_size, patch_size, 3)), color_mode, **kw)

    def ycbcr(self) -> YCbCrPerturbation:
        return YCbCrPerturbation(self.delta, self.search_y, self.patch)


def _is_torch(a) -> bool:
    return isinstance(a, torch.Tensor)


def _clip(a):
    return a.clamp(0.0, 255.0) if _is_torch(a) else np.clip(a, 0.0, 255.0)


def patch_window(center: Tuple[float, float], size: int, shape: Tuple[int, int]):
    """Image and patch slices for a ``size`` square centred at ``center``, cropped at the borders.

    Returns ``((rows, cols), (patch_rows, patch_cols))`` as slice pairs.
    """
    h, w = shape
    cx, cy = center
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"patch centre ({cx:.1f}, {cy:.1f}) is outside the {w}x{h} image")
    c0 = int(math.floor(cx - size / 2.0 + 0.5))
    r0 = int(math.floor(cy - size / 2.0 + 0.5))
    c1, r1 = c0 + size, r0 + size
    cc0, rr0 = max(c0, 0), max(r0, 0)
    cc1, rr1 = min(c1, w), min(r1, h)
    img = (slice(rr0, rr1), slice(cc0, cc1))
    pat = (slice(rr0 - r0, rr1 - r0), slice(cc0 - c0, cc1 - c0))
    return img, pat


def _check_image(x):
    if x.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {tuple(x.shape)}")


def _region_op(x, patch, fake: Box, replace: bool):
    _check_image(x)
    size = patch.shape[0]
    (rs, cs), (prs, pcs) = patch_window(fake.center, size, tuple(x.shape[:2]))
    if _is_torch(x):
        patch = torch.as_tensor(patch, dtype=x.dtype)
        out = x.clone()
        src = patch[prs, pcs] if replace else x[rs, cs] + patch[prs, pcs]
        out[rs, cs] = _clip(src)
        return out
    patch = np.asarray(patch, dtype=np.result_type(x.dtype, np.float32))
    out = np.array(x, dtype=np.result_type(x.dtype, patch.dtype), copy=True)
    src = patch[prs, pcs] if replace else out[rs, cs] + patch[prs, pcs]
    out[rs, cs] = _clip(src)
    return out


def add_patch(x, patch, fake: Box):
    """Add ``patch`` to the square region centred on the fake box; pixels elsewhere are untouched."""
    return _region_op(x, patch, fake, replace=False)


def paste_patch(x, patch, fake: Box):
    """Replace the region centred on the fake box with ``clip(patch)``."""
    return _region_op(x, patch, fake, replace=True)


def perturb_template(z, delta):
    if tuple(z.shape) != tuple(delta.shape):
        raise ValueError(f"template {tuple(z.shape)} and delta {tuple(delta.shape)} differ in shape")
    if _is_torch(z) or _is_torch(delta):
        z = torch.as_tensor(z)
        delta = torch.as_tensor(delta, dtype=z.dtype)
    return _clip(z + delta)


def add_full(x, delta_x):
    """Whole-image additive perturbation (the UAP baseline's search-side operator)."""
    return perturb_template(x, delta_x)


def _color(img, mat, pre_offset=None, post_offset=None):
    if _is_torch(img):
        m = torch.as_tensor(mat, dtype=img.dtype)
        if pre_offset is not None:
            img = img - torch.as_tensor(pre_offset, dtype=img.dtype)
        out = img @ m.T
        if post_offset is not None:
            out = out + torch.as_tensor(post_offset, dtype=img.dtype)
        return out
    img = np.asarray(img, dtype=np.float64)
    if pre_offset is not None:
        img = img - pre_offset
    out = img @ mat.T
    if post_offset is not None:
        out = out + post_offset
    return out


def rgb_to_ycbcr(img):
    """Full-range BT.601 conversion on reals (no clipping)."""
    return _color(img, RGB_TO_YCBCR, post_offset=YCBCR_OFFSET)


def ycbcr_to_rgb(img):
    return _color(img, YCBCR_TO_RGB, pre_offset=YCBCR_OFFSET)


def perturb_template_ycbcr(z, delta_full):
    return _clip(ycbcr_to_rgb(rgb_to_ycbcr(z) + delta_full))


def apply_ycbcr_attack(x, pert: YCbCrPerturbation, fake: Box):
    """Y perturbation everywhere, CbCr perturbation in a square around the fake centre."""
    _check_image(x)
    (rs, cs), (prs, pcs) = patch_window(fake.center, pert.search_cbcr.shape[0], tuple(x.shape[:2]))
    ycc = rgb_to_ycbcr(x)
    if _is_torch(ycc):
        sy = torch.as_tensor(pert.search_y, dtype=ycc.dtype)
        sc = torch.as_tensor(pert.search_cbcr, dtype=ycc.dtype)
        y = ycc[..., :1] + sy[..., None]
        cbcr = ycc[..., 1:].clone()
        cbcr[rs, cs] = cbcr[rs, cs] + sc[prs, pcs]
        ycc = torch.cat([y, cbcr], dim=-1)
    else:
        ycc = ycc.copy()
        ycc[..., 0] += pert.search_y
        ycc[rs, cs, 1:] += pert.search_cbcr[prs, pcs]
    return _clip(ycbcr_to_rgb(ycc))
