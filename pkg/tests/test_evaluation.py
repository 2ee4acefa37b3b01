import json

import numpy as np
import pytest

from siamuap.evaluation import (SequenceRun, accuracy, ao, make_report, norm_precision, plot_curve,
                                precision, render_table, robustness, ssim, success_rate, write_report)
from siamuap.geometry import Box

REF = Box(0, 0, 10, 10)
SHIFTED_HALF = Box(0, 0, 10, 5)  # IoU 0.5 against REF
FAR = Box(100, 100, 110, 110)


def test_ao_examples():
    ref = [REF] * 5
    assert ao(ref, ref) == 1.0
    # frame 1 ignored, then alternating 1 / 0 over four frames
    assert ao([REF, REF, FAR, REF, FAR], ref) == 0.5
    assert ao([REF] + [FAR] * 4, ref) == 0.0
    with pytest.raises(ValueError):
        ao([REF, REF], [REF])


def test_success_rate_is_strict():
    ref = [REF] * 5
    assert success_rate(ref, ref) == 1.0
    assert success_rate([REF, SHIFTED_HALF], [REF, REF]) == 0.0
    # second scored frame sits exactly at IoU 0.5 and fails
    assert success_rate([REF, REF, SHIFTED_HALF], [REF] * 3) == 0.5


def test_success_rate_three_of_four():
    pred = [REF, REF, Box(0, 0, 10, 9), Box(1, 0, 11, 10), FAR]
    assert success_rate(pred, [REF] * 5) == 0.75


def test_precision_examples():
    ref = [REF] * 3
    assert precision(ref, ref) == 1.0
    assert precision([REF, REF.translate(20, 0), REF], ref) == 1.0
    assert precision([REF, REF.translate(10, 0), REF.translate(0, 30)], ref) == 0.5


def test_norm_precision():
    ref = [REF] * 3
    assert norm_precision(ref, ref) == pytest.approx(1.0)
    assert norm_precision([REF, FAR, FAR], ref) == 0.0
    # normalised distance 0.25 for one frame and 0 for the other:
    # curve is 0.5 below 0.25 and 1.0 from 0.25 on, thresholds on a 0.005 grid
    v = norm_precision([REF, REF.translate(2.5, 0), REF], ref)
    thr = np.linspace(0, 0.5, 101)
    curve = np.where(thr >= 0.25, 1.0, 0.5)
    assert v == pytest.approx(np.trapezoid(curve, thr) / 0.5, abs=1e-12)


def test_robustness_and_accuracy():
    assert robustness([0, 0], [50, 50])["per_100_frames"] == 0.0
    assert robustness([1], [100]) == {"failures": 1, "per_100_frames": 1.0}
    assert accuracy([None, 0.7, 0.7, None, 0.7]) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        robustness([1], [0])


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 255, size=(32, 40, 3))
    b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert ssim(a, b) < 1.0


def test_ssim_constant_images_closed_form():
    a = np.full((20, 20, 3), 100.0)
    b = np.full((20, 20, 3), 110.0)
    c1 = (0.01 * 255) ** 2
    expected = (2 * 100 * 110 + c1) / (100 ** 2 + 110 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-6)


def test_ssim_region_and_errors():
    a = np.zeros((30, 30, 3))
    b = a.copy()
    b[:15] = 50
    assert ssim(a, b, region=Box(0, 15, 30, 30)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ssim(a, b, region=Box(0, 0, 8, 8))
    with pytest.raises(ValueError):
        ssim(a, b[:, :20])


def _run(name, pred, gt, fake=None, **kw):
    return SequenceRun(name, pred, gt, fake, **kw)


def test_make_report_aggregates(tmp_path):
    gt = [REF] * 3
    r1 = _run("a", gt, gt)
    r2 = _run("b", [REF, FAR, FAR], gt)
    rep = make_report([r1, r2], "clean")
    assert rep.ao_real == pytest.approx(0.5)
    assert "ao_fake" not in rep.aggregate
    with pytest.raises(AttributeError):
        rep.ao_fake
    with pytest.raises(ValueError):
        make_report([])
    with pytest.raises(ValueError):
        make_report([r1, r1])
    out = write_report(rep, tmp_path / "rep")
    data = json.loads((out / "report.json").read_text())
    assert data["aggregate"]["ao_real"] == pytest.approx(0.5)
    assert "ao_real: 0.500000" in (out / "report.txt").read_text()


def test_make_report_fake_and_robustness():
    gt = [REF] * 3
    fake = [REF.translate(12, 0)] * 3
    r = _run("a", [REF] + fake[1:], gt, fake, failures=1, reinit_ious=[None, None, 0.5])
    rep = make_report([r])
    assert rep.ao_fake == 1.0 and rep.ao_real == 0.0
    assert rep.robustness_failures == 1.0
    assert rep.robustness_per_100_frames == pytest.approx(100 / 3)
    assert rep.accuracy == 0.5
    table = render_table([rep, make_report([_run("a", gt, gt, label="clean")])])
    assert "ao_fake" in table and "clean" in table


def test_plot_curve(tmp_path):
    p = plot_curve([64, 128], {"ao": [0.1, 0.2]}, tmp_path / "c.png", "iterations", logx=True)
    assert p.exists() and p.stat().st_size > 0
