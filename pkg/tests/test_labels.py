import numpy as np
import pytest
from hypothesis import given, strategies as st

from siamuap.geometry import Box, GridGeometry, grid_to_image, iou
from siamuap.labels import cell_boxes, make_cls_label, make_fake_labels, make_quality_label, make_reg_label


def brute_cls(fake, g):
    out = np.zeros((g.grid_size, g.grid_size))
    for y in range(g.grid_size):
        for x in range(g.grid_size):
            px, py = grid_to_image(x, y, g)
            if fake.x0 <= px <= fake.x1 and fake.y0 <= py <= fake.y1:
                out[y, x] = 1.0
    return out


def random_geometry(rng):
    s = int(rng.choice([1, 2, 4, 8, 16]))
    crop = int(rng.integers(s + 1, 320))
    return GridGeometry.fit(s, crop)


def test_cls_label_examples():
    g = GridGeometry(8, 17, 160)
    lab = make_cls_label(Box(36, 36, 52, 52), g)
    # points 36, 44 and 52 are inside, borders included
    assert lab.sum() == 9
    assert lab[4:7, 4:7].all()
    assert make_cls_label(Box(37, 37, 43, 43), g).sum() == 0


def test_cls_label_matches_brute_force_scan():
    rng = np.random.default_rng(11)
    for _ in range(300):
        g = random_geometry(rng)
        c = rng.uniform(-20, g.crop_size + 20, 2)
        wh = rng.uniform(0.5, g.crop_size / 2, 2)
        fake = Box.from_center(c[0], c[1], wh[0], wh[1])
        np.testing.assert_array_equal(make_cls_label(fake, g), brute_cls(fake, g))


def test_cls_label_with_integer_borders_on_grid_points():
    g = GridGeometry(4, 10, 40)
    fake = Box(2, 6, 18, 14)
    np.testing.assert_array_equal(make_cls_label(fake, g), brute_cls(fake, g))
    assert make_cls_label(fake, g)[1, 0] == 1.0


def test_reg_label_example():
    g = GridGeometry(8, 17, 160)
    R = make_reg_label(Box(30, 40, 70, 90), g)
    # cell (x=5, y=6) sits at (44, 52)
    assert R[6, 5] == pytest.approx([14, 12, 26, 38])


@given(st.floats(-30, 150), st.floats(-30, 150), st.floats(0.1, 120), st.floats(0.1, 120))
def test_reg_label_sums_to_box_size(x, y, w, h):
    g = GridGeometry(8, 17, 160)
    fake = Box.from_xywh(x, y, w, h)
    R = make_reg_label(fake, g)
    assert np.max(np.abs(R[..., 0] + R[..., 2] - fake.width)) <= 1e-9
    assert np.max(np.abs(R[..., 1] + R[..., 3] - fake.height)) <= 1e-9


def test_reg_label_positive_inside():
    g = GridGeometry(8, 17, 160)
    fake = Box(20.5, 33, 99, 71.25)
    R = make_reg_label(fake, g)
    C = make_cls_label(fake, g).astype(bool)
    assert (R[C] >= 0).all()
    assert (R[~C].min(axis=-1) < 0).all()


def test_cell_boxes_inverts_reg_label():
    g = GridGeometry(8, 9, 80)
    fake = Box(10, 12, 50, 41)
    b = cell_boxes(make_reg_label(fake, g), g)
    np.testing.assert_allclose(b, np.broadcast_to(fake.as_array(), b.shape), atol=1e-12)


def test_quality_label_matches_pairwise_iou():
    rng = np.random.default_rng(5)
    g = GridGeometry(8, 9, 80)
    fake = Box(20, 20, 52, 44)
    R = rng.uniform(0.5, 40, size=(9, 9, 4))
    Q = make_quality_label(cell_boxes(R, g), fake)
    boxes = cell_boxes(R, g)
    for y in range(9):
        for x in range(9):
            assert Q[y, x] == pytest.approx(iou(Box(*boxes[y, x]), fake), abs=1e-12)


def test_quality_label_degenerate_prediction_is_zero():
    fake = Box(0, 0, 10, 10)
    boxes = np.array([[[5, 5, 5, 9], [2, 2, 1, 8], [0, 0, 10, 10]]], dtype=float)
    q = make_quality_label(boxes, fake)
    assert q.tolist() == [[0.0, 0.0, 1.0]]


def test_make_fake_labels_bundle():
    g = GridGeometry(8, 17, 160)
    fake = Box(60, 60, 92, 92)
    R_pred = make_reg_label(fake, g)
    lab = make_fake_labels(fake, g, np.abs(R_pred))
    assert lab.n_pos == 25
    assert lab.Qstar[make_cls_label(fake, g) > 0] == pytest.approx(1.0)
