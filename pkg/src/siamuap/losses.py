"""Training objective: focal + masked BCE + masked IoU loss, normalised by positives, plus L2 penalties."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import torch

from .labels import FakeLabels

EPS = 1e-12


class NoPositiveSamples(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    eta1: float = 0.005
    eta2: float = 0.005
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def _check_finite(*ts):
    for t in ts:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite values in loss input")


def focal_loss(C, Cstar, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    C = torch.as_tensor(C)
    Cstar = torch.as_tensor(Cstar, dtype=C.dtype)
    if C.shape != Cstar.shape:
        raise ValueError(f"shape mismatch {tuple(C.shape)} vs {tuple(Cstar.shape)}")
    _check_finite(C)
    pos = Cstar > 0
    p_t = torch.where(pos, C, 1 - C)
    a_t = torch.where(pos, torch.full_like(C, alpha), torch.full_like(C, 1 - alpha))
    return -(a_t * (1 - p_t) ** gamma * torch.log(p_t.clamp_min(EPS))).sum()


def quality_bce(Q, Qstar, mask) -> torch.Tensor:
    Q = torch.as_tensor(Q)
    Qstar = torch.as_tensor(Qstar, dtype=Q.dtype)
    mask = torch.as_tensor(mask, dtype=Q.dtype)
    if Q.shape != Qstar.shape:
        raise ValueError(f"shape mismatch {tuple(Q.shape)} vs {tuple(Qstar.shape)}")
    q = Q.clamp(EPS, 1 - EPS)
    bce = -(Qstar * torch.log(q) + (1 - Qstar) * torch.log(1 - q))
    return (bce * mask).sum()


def iou_loss(R, Rstar, mask) -> torch.Tensor:
    """Sum over masked cells of ``-ln IoU`` between boxes sharing the cell's anchor point."""
    R = torch.as_tensor(R)
    Rstar = torch.as_tensor(Rstar, dtype=R.dtype)
    mask = torch.as_tensor(mask, dtype=R.dtype)
    m = mask > 0
    if not m.any():
        return R.sum() * 0.0
    r, t = R[m], Rstar[m]
    area_p = (r[:, 0] + r[:, 2]) * (r[:, 1] + r[:, 3])
    area_t = (t[:, 0] + t[:, 2]) * (t[:, 1] + t[:, 3])
    iw = torch.minimum(r[:, 0], t[:, 0]) + torch.minimum(r[:, 2], t[:, 2])
    ih = torch.minimum(r[:, 1], t[:, 1]) + torch.minimum(r[:, 3], t[:, 3])
    inter = iw.clamp_min(0) * ih.clamp_min(0)
    union = area_p + area_t - inter
    ious = (inter / union).clamp(EPS, 1.0)
    return -torch.log(ious).sum()


def branch_losses(maps, labels: FakeLabels, w: LossWeights, index: int = 0) -> Dict[str, torch.Tensor]:
    """Weighted, positive-normalised branch terms for sample ``index`` of ``maps``."""
    n_pos = labels.n_pos
    if n_pos == 0:
        raise NoPositiveSamples("fake labels have no positive cell")
    C, R, Q = maps.C[index], maps.R[index], maps.Q[index]
    Cs = torch.as_tensor(labels.Cstar, dtype=C.dtype)
    Rs = torch.as_tensor(labels.Rstar, dtype=C.dtype)
    Qs = torch.as_tensor(labels.Qstar, dtype=C.dtype)
    return {
        "cls": w.alpha * focal_loss(C, Cs, w.focal_gamma, w.focal_alpha) / n_pos,
        "quality": w.beta * quality_bce(Q, Qs, Cs) / n_pos,
        "reg": w.gamma * iou_loss(R, Rs, Cs) / n_pos,
    }


def penalty(w: LossWeights, delta: Iterable[Optional[torch.Tensor]] = (),
            patch: Iterable[Optional[torch.Tensor]] = ()) -> torch.Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for t in delta:
        if t is not None:
            total = total + w.eta1 * (t.to(torch.float64) ** 2).sum()
    for t in patch:
        if t is not None:
            total = total + w.eta2 * (t.to(torch.float64) ** 2).sum()
    return total


def total_loss(maps, labels: Sequence[FakeLabels] | FakeLabels, delta, patch,
               w: LossWeights = LossWeights()) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Batch mean of the per-sample objective; the shared perturbations are penalised once.

    ``delta`` and ``patch`` may each be a tensor, ``None`` or a tuple of tensors
    (the YCbCr variant carries two search-side tensors).
    Returns ``(loss, parts)`` where ``parts`` holds float components for logging.
    """
    if isinstance(labels, FakeLabels):
        labels = [labels]
    if len(labels) != len(maps):
        raise ValueError(f"{len(labels)} label sets for a batch of {len(maps)}")
    parts = {"cls": 0.0, "quality": 0.0, "reg": 0.0}
    branch = None
    for i, lab in enumerate(labels):
        terms = branch_losses(maps, lab, w, i)
        s = terms["cls"] + terms["quality"] + terms["reg"]
        branch = s if branch is None else branch + s
        for k, v in terms.items():
            parts[k] += float(v.detach()) / len(labels)
    branch = branch / len(labels)
    pen = penalty(w, _as_tuple(delta), _as_tuple(patch))
    parts["penalty"] = float(pen.detach())
    loss = branch + pen.to(branch.dtype)
    parts["loss"] = float(loss.detach())
    return loss, parts


def _as_tuple(t):
    if t is None:
        return ()
    if isinstance(t, (tuple, list)):
        return tuple(torch.as_tensor(x) if x is not None else None for x in t)
    return (torch.as_tensor(t),)
