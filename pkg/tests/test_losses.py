import math

import numpy as np
import pytest
import torch

from siamuap.geometry import Box, GridGeometry
from siamuap.labels import FakeLabels, make_cls_label, make_reg_label
from siamuap.losses import (LossWeights, NoPositiveSamples, focal_loss, iou_loss, penalty,
                            quality_bce, total_loss)
from siamuap.tracker import HeadMaps


def test_focal_loss_hand_values():
    C = torch.tensor([0.5, 0.2], dtype=torch.float64)
    Cs = torch.tensor([1.0, 0.0], dtype=torch.float64)
    pos = -0.25 * 0.25 * math.log(0.5)
    neg = -0.75 * 0.04 * math.log(0.8)
    assert float(focal_loss(C, Cs)) == pytest.approx(pos + neg, rel=1e-12)


def test_focal_loss_perfect_prediction_is_zero():
    Cs = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert float(focal_loss(Cs.clone(), Cs)) == pytest.approx(0.0, abs=1e-20)


def test_focal_loss_rejects_nan_and_shape_mismatch():
    with pytest.raises(ValueError):
        focal_loss(torch.tensor([float("nan")]), torch.tensor([1.0]))
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(3), torch.zeros(2))


def test_quality_bce_masks_negatives():
    Q = torch.tensor([0.9, 0.1], dtype=torch.float64)
    Qs = torch.tensor([0.6, 0.3], dtype=torch.float64)
    m = torch.tensor([1.0, 0.0], dtype=torch.float64)
    expected = -(0.6 * math.log(0.9) + 0.4 * math.log(0.1))
    assert float(quality_bce(Q, Qs, m)) == pytest.approx(expected, rel=1e-12)


def test_iou_loss_hand_value():
    R = torch.tensor([[[2.0, 2.0, 2.0, 2.0]]], dtype=torch.float64)
    Rs = torch.tensor([[[1.0, 1.0, 1.0, 1.0]]], dtype=torch.float64)
    # 2x2 box inside a 4x4 box sharing a centre: IoU = 1/4
    assert float(iou_loss(R, Rs, torch.ones(1, 1))) == pytest.approx(math.log(4.0), rel=1e-12)
    assert float(iou_loss(R, Rs, torch.zeros(1, 1))) == 0.0


def test_iou_loss_gradcheck():
    torch.manual_seed(0)
    R = (torch.rand(3, 3, 4, dtype=torch.float64) * 10 + 1).requires_grad_(True)
    Rs = torch.rand(3, 3, 4, dtype=torch.float64) * 10 + 1
    m = (torch.rand(3, 3) > 0.3).double()
    assert torch.autograd.gradcheck(lambda r: iou_loss(r, Rs, m), (R,))


def test_focal_and_bce_gradcheck():
    torch.manual_seed(1)
    C = (torch.rand(4, 4, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True)
    Cs = (torch.rand(4, 4) > 0.5).double()
    Qs = torch.rand(4, 4, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda c: focal_loss(c, Cs), (C,))
    assert torch.autograd.gradcheck(lambda q: quality_bce(q, Qs, Cs), (C,))


def test_penalty_weights():
    w = LossWeights()
    d = torch.full((2, 2, 3), 2.0)
    p = torch.full((1, 1, 3), 1.0)
    assert float(penalty(w, (d,), (p,))) == pytest.approx(0.005 * 48 + 0.005 * 3)
    assert float(penalty(LossWeights(eta1=0, eta2=0), (d,), (p,))) == 0.0


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(alpha=-1)


def _toy(fake, g):
    G = g.grid_size
    C = torch.full((1, G, G), 0.3, dtype=torch.float64)
    R = torch.full((1, G, G, 4), 8.0, dtype=torch.float64)
    Q = torch.full((1, G, G), 0.4, dtype=torch.float64)
    lab = FakeLabels(make_cls_label(fake, g), make_reg_label(fake, g), np.full((G, G), 0.5))
    return HeadMaps(C, R, Q), lab


def test_total_loss_is_normalised_by_positive_count():
    g = GridGeometry(8, 9, 80)
    fake = Box(20, 20, 44, 44)
    maps, lab = _toy(fake, g)
    w = LossWeights()
    loss, parts = total_loss(maps, lab, None, None, w)
    Cs = torch.as_tensor(lab.Cstar)
    expected_cls = float(focal_loss(maps.C[0], Cs)) / lab.n_pos
    assert parts["cls"] == pytest.approx(expected_cls, rel=1e-12)
    assert parts["penalty"] == 0.0
    assert float(loss) == pytest.approx(parts["cls"] + parts["quality"] + parts["reg"], rel=1e-12)


def test_total_loss_batch_mean_and_single_penalty():
    g = GridGeometry(8, 9, 80)
    maps, lab = _toy(Box(20, 20, 44, 44), g)
    batch = HeadMaps(maps.C.repeat(2, 1, 1), maps.R.repeat(2, 1, 1, 1), maps.Q.repeat(2, 1, 1))
    d = torch.ones(4, 4, 3, dtype=torch.float64)
    single, _ = total_loss(maps, [lab], d, None)
    double, parts = total_loss(batch, [lab, lab], d, None)
    assert float(double) == pytest.approx(float(single), rel=1e-12)
    assert parts["penalty"] == pytest.approx(0.005 * 48)


def test_total_loss_zero_positives_raises():
    g = GridGeometry(8, 9, 80)
    maps, _ = _toy(Box(20, 20, 44, 44), g)
    empty = FakeLabels(np.zeros((9, 9)), np.zeros((9, 9, 4)), np.zeros((9, 9)))
    with pytest.raises(NoPositiveSamples):
        total_loss(maps, empty, None, None)
