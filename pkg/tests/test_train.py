import io

import numpy as np
import pytest

from siamuap.data import synth_videos
from siamuap.geometry import Box
from siamuap.tracker import INSTRUMENTS, TrainingFailure, build_reference_tracker, freeze, parameter_fingerprint
from siamuap.train import (LOG_HEADER, TrainConfig, baseline_fake_box, sample_fake_box, sample_training_pair,
                           sign_step, train_baseline_paste, train_baseline_uap, train_universal)


@pytest.fixture(scope="module")
def small():
    return freeze(build_reference_tracker(0)), synth_videos(3, 3, 6, (96, 96))


def test_sign_step():
    out = sign_step(np.array([0.0, 0.5, -0.5]), np.array([2.0, 0.0, -1e-30]), 0.1)
    np.testing.assert_array_equal(out, [-0.1, 0.5, -0.4])
    with pytest.raises(TrainingFailure):
        sign_step(np.zeros(2), np.array([np.nan, 1.0]), 0.1)


def test_sample_fake_box_stays_inside_crop():
    rng = np.random.default_rng(0)
    for _ in range(500):
        c = tuple(rng.uniform(-50, 210, 2))
        b = sample_fake_box(c, 32, 64, rng, 160)
        assert b.width == pytest.approx(32) and b.height == pytest.approx(32)
        assert b.x0 >= 0 and b.y0 >= 0 and b.x1 <= 160 and b.y1 <= 160
    with pytest.raises(ValueError):
        sample_fake_box((80, 80), 200, 64, rng, 160)


def test_sample_fake_box_shift_range():
    rng = np.random.default_rng(1)
    for _ in range(200):
        b = sample_fake_box((80.0, 80.0), 16, 10, rng, 160)
        assert abs(b.center[0] - 80) <= 10 and abs(b.center[1] - 80) <= 10


def test_sample_training_pair_centres_target(small):
    model, videos = small
    s = sample_training_pair(videos, np.random.default_rng(0), 64, 160)
    assert s.z.shape == (64, 64, 3) and s.x.shape == (160, 160, 3)
    assert s.real_box.center == pytest.approx((80.0, 80.0))


def test_checkpoint_iterations():
    assert TrainConfig(iterations=10).checkpoint_iterations() == [1, 2, 4, 8, 10]
    assert TrainConfig(iterations=8, checkpoints="3,5").checkpoint_iterations() == [3, 5, 8]
    assert TrainConfig(iterations=0).checkpoint_iterations() == []


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eps1=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_terms=("cls", "bogus"))
    cfg = TrainConfig(loss_terms=("cls", "reg"))
    w = cfg.effective_weights()
    assert (w.alpha, w.beta, w.gamma) == (1.0, 0.0, 1.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def _lattice_multiples(a, eps, k, init=0.0):
    m = np.rint((a - init) / eps)
    assert np.array_equal(init + m * eps, a)
    assert np.abs(m).max() <= k


@pytest.mark.parametrize("k", [1, 7])
def test_universal_training_stays_on_lattice(small, k):
    model, videos = small
    cfg = TrainConfig(iterations=k, batch_size=2, seed=1, eps1=0.1, eps2=0.25)
    pair, ckpts, hist = train_universal(cfg, model, videos)
    _lattice_multiples(pair.delta, 0.1, k)
    _lattice_multiples(pair.patch, 0.25, k)
    assert len(hist) == k and sorted(ckpts) == cfg.checkpoint_iterations()


def test_training_is_deterministic_and_leaves_tracker_untouched(small):
    model, videos = small
    fp = parameter_fingerprint(model)
    cfg = TrainConfig(iterations=3, batch_size=2, seed=4)
    a, _, _ = train_universal(cfg, model, videos)
    b, _, _ = train_universal(cfg, model, videos)
    np.testing.assert_array_equal(a.delta, b.delta)
    np.testing.assert_array_equal(a.patch, b.patch)
    assert parameter_fingerprint(model) == fp


def test_frozen_parts_stay_zero(small):
    model, videos = small
    t_only, _, _ = train_universal(TrainConfig(iterations=1, batch_size=2, optimize_patch=False), model, videos)
    assert np.all(t_only.patch == 0) and np.any(t_only.delta != 0)
    p_only, _, _ = train_universal(TrainConfig(iterations=1, batch_size=2, optimize_template=False), model, videos)
    assert np.all(p_only.delta == 0) and np.any(p_only.patch != 0)


def test_training_log_csv(small):
    model, videos = small
    buf = io.StringIO()
    train_universal(TrainConfig(iterations=2, batch_size=1), model, videos, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == LOG_HEADER and len(lines) == 3
    assert all(len(l.split(",")) == 7 for l in lines)


def test_ycbcr_training_shapes(small):
    model, videos = small
    pair, _, _ = train_universal(TrainConfig(iterations=1, batch_size=1, color_mode="ycbcr"), model, videos)
    assert pair.patch.shape == (64, 64, 2) and pair.search_y.shape == (160, 160)
    assert pair.color_mode == "ycbcr"


def test_baselines(small):
    model, videos = small
    cfg = TrainConfig(iterations=2, batch_size=1)
    uap, _, _ = train_baseline_uap(cfg, model, videos)
    assert uap.placement == "full" and uap.patch.shape == (160, 160, 3)
    _lattice_multiples(uap.patch, 0.1, 2)
    paste, _, _ = train_baseline_paste(cfg, model, videos)
    assert paste.placement == "paste" and np.all(paste.delta == 0)
    _lattice_multiples(paste.patch, 0.1, 2, init=128.0)
    fb = baseline_fake_box(cfg, 160)
    assert fb == Box.from_center(112, 112, 32, 32)


def test_sign_steps_are_counted(small):
    model, videos = small
    before = INSTRUMENTS["optimizer_steps"]
    train_universal(TrainConfig(iterations=2, batch_size=1), model, videos)
    assert INSTRUMENTS["optimizer_steps"] - before == 4


def test_search_jitter_moves_and_rescales_the_window(small):
    _, videos = small
    with pytest.raises(ValueError):
        TrainConfig(scale_jitter=-0.1)
    rng = np.random.default_rng(3)
    plain = sample_training_pair(videos, np.random.default_rng(3), 64, 160)
    moved = sample_training_pair(videos, rng, 64, 160, center_jitter=20.0, scale_jitter=0.3)
    assert moved.real_box.center != pytest.approx((80.0, 80.0))
    ratio = moved.real_box.width / plain.real_box.width
    assert np.exp(-0.3) - 1e-9 <= ratio <= np.exp(0.3) + 1e-9
