"""Supervised pretraining of the reference tracker on true labels."""

from __future__ import annotations

import logging
import math
from typing import Optional, TextIO

import numpy as np
import torch

from .labels import FakeLabels, cell_boxes, make_cls_label, make_quality_label, make_reg_label
from .losses import LossWeights, total_loss
from .tracker import TinySiamTracker, TrainingFailure, freeze
from .train import sample_training_pair

log = logging.getLogger(__name__)


def pretrain_reference_tracker(model: TinySiamTracker, dataset, steps: int, batch_size: int = 16,
                               lr: float = 2e-3, seed: int = 0, center_jitter: float = 40.0,
                               scale_jitter: float = 0.2, max_frame_gap: Optional[int] = 30,
                               log_file: Optional[TextIO] = None, log_every: int = 50) -> TinySiamTracker:
    """Fit the three-branch loss against ground truth, then freeze the model.

    Zero ``steps`` leaves the parameters untouched (the model is still frozen).
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    weights = LossWeights(eta1=0.0, eta2=0.0)
    g = model.grid
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(steps, 1),
                                                pct_start=0.1) if steps else None
    if log_file is not None:
        log_file.write("step,loss,loss_cls,loss_quality,loss_reg\n")
    for step in range(steps):
        zs, xs, boxes = [], [], []
        while len(zs) < batch_size:
            s = sample_training_pair(dataset, rng, model.template_size, model.search_size,
                                     max_frame_gap, center_jitter, scale_jitter)
            if make_cls_label(s.real_box, g).sum() == 0:
                continue
            zs.append(s.z)
            xs.append(s.x)
            boxes.append(s.real_box)
        dtype = model.dtype
        z = torch.as_tensor(np.stack(zs), dtype=dtype).permute(0, 3, 1, 2).contiguous()
        x = torch.as_tensor(np.stack(xs), dtype=dtype).permute(0, 3, 1, 2).contiguous()
        maps = model(z, x)
        R = maps.R.detach().numpy()
        labels = [FakeLabels(make_cls_label(b, g), make_reg_label(b, g),
                             make_quality_label(cell_boxes(R[i], g), b)) for i, b in enumerate(boxes)]
        loss, parts = total_loss(maps, labels, None, None, weights)
        if not math.isfinite(parts["loss"]):
            raise TrainingFailure(f"non-finite pretraining loss at step {step + 1}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
        opt.step()
        sched.step()
        if (step + 1) % log_every == 0 or step + 1 == steps:
            log.info("pretrain step %d loss %.4f", step + 1, parts["loss"])
            if log_file is not None:
                log_file.write(f"{step + 1},{parts['loss']:.6g},{parts['cls']:.6g},"
                               f"{parts['quality']:.6g},{parts['reg']:.6g}\n")
    return freeze(model)
