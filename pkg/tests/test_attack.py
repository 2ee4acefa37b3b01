import numpy as np
import pytest

from siamuap.attack import (FakeTrajectory, gen_fake_traj_direction, gen_fake_traj_offset, run_attack,
                            run_with_reinit)
from siamuap.data import synth_videos
from siamuap.geometry import Box
from siamuap.perturb import PerturbationPair
from siamuap.tracker import INSTRUMENTS, build_reference_tracker, freeze, track_sequence


@pytest.fixture(scope="module")
def setup():
    return freeze(build_reference_tracker(0)), synth_videos(5, 2, 8, (96, 96))


def test_offset_trajectory_geometry():
    gt = [Box(10, 20, 30, 50), Box(12, 22, 40, 52)]
    fake = gen_fake_traj_offset(gt)
    for g, f in zip(gt, fake.boxes):
        assert f.x0 - g.x1 == pytest.approx(2.0)
        assert (f.width, f.height) == (g.width, g.height)
        assert f.y0 == g.y0
    below = gen_fake_traj_offset(gt, 5, "below")
    assert below.boxes[0].y0 - gt[0].y1 == pytest.approx(5.0)
    with pytest.raises(ValueError):
        gen_fake_traj_offset([])
    with pytest.raises(ValueError):
        gen_fake_traj_offset(gt, side="diagonal")


def test_direction_trajectory():
    init = Box(50, 50, 70, 70)
    f = gen_fake_traj_direction(init, 4, "-45")
    assert [b.center for b in f.boxes] == [(60, 60), (63, 63), (66, 66), (69, 69)]
    up_right = gen_fake_traj_direction(init, 2, "45").boxes[1]
    assert up_right.center == (63, 57)
    assert gen_fake_traj_direction(init, 2, "135").boxes[1].center == (57, 57)
    assert gen_fake_traj_direction(init, 2, "-135").boxes[1].center == (57, 63)
    assert len(gen_fake_traj_direction(init, 1)) == 1
    with pytest.raises(ValueError):
        gen_fake_traj_direction(init, 0)


def test_fake_trajectory_file_round_trip(tmp_path):
    f = gen_fake_traj_direction(Box(1, 2, 11, 22), 3)
    f.save(tmp_path / "f.txt")
    back = FakeTrajectory.load(tmp_path / "f.txt")
    assert [b.as_array().tolist() for b in back.boxes] == [b.as_array().tolist() for b in f.boxes]


def test_zero_perturbation_matches_clean_bitwise(setup):
    model, videos = setup
    for v in videos:
        clean = track_sequence(model, v.frames, v.boxes[0])
        zero = PerturbationPair.zeros(64, 32)
        fake = gen_fake_traj_offset(list(v.boxes))
        att = run_attack(model, v.frames, v.boxes[0], zero, fake)
        assert att.boxes == clean


def test_attack_does_no_gradient_work(setup):
    model, videos = setup
    v = videos[0]
    rng = np.random.default_rng(0)
    pair = PerturbationPair(rng.uniform(-5, 5, (64, 64, 3)), rng.uniform(-20, 20, (32, 32, 3)))
    before = dict(INSTRUMENTS)
    run_attack(model, v.frames, v.boxes[0], pair, gen_fake_traj_offset(list(v.boxes)))
    assert INSTRUMENTS["grad_evals"] == before.get("grad_evals", 0)
    assert INSTRUMENTS["optimizer_steps"] == before.get("optimizer_steps", 0)


def test_length_mismatch_and_missing_fake(setup):
    model, videos = setup
    v = videos[0]
    pair = PerturbationPair.zeros(64, 32)
    short = gen_fake_traj_offset(list(v.boxes[:-1]))
    with pytest.raises(ValueError, match="7 boxes but the video has 8"):
        run_attack(model, v.frames, v.boxes[0], pair, short)
    with pytest.raises(ValueError):
        run_attack(model, v.frames, v.boxes[0], pair, None)


def test_patch_skipped_when_fake_leaves_crop(setup):
    model, videos = setup
    v = videos[0]
    far = FakeTrajectory([Box(5000, 5000, 5010, 5010)] * len(v))
    res = run_attack(model, v.frames, v.boxes[0], PerturbationPair.zeros(64, 32), far)
    assert [e[0] for e in res.events] == ["patch_skipped"] * (len(v) - 1)


def test_full_placement_needs_no_fake(setup):
    model, videos = setup
    v = videos[0]
    pair = PerturbationPair(np.zeros((64, 64, 3)), np.zeros((160, 160, 3)), placement="full")
    assert run_attack(model, v.frames, v.boxes[0], pair, None).boxes == track_sequence(
        model, v.frames, v.boxes[0])


def test_reinit_protocol(setup, monkeypatch):
    model, _ = setup
    gt = [Box(10, 10, 30, 30)] * 12
    frames = np.zeros((12, 96, 96, 3), np.uint8)
    # frame index -> predicted box; frame 3 fails (no overlap)
    script = {i: Box(12, 12, 32, 32) for i in range(12)}
    script[3] = Box(60, 60, 80, 80)
    import siamuap.attack as attack_mod

    class Runner:
        def __init__(self, *a, **k):
            pass

        def init(self, frame, box):
            pass

        def update(self, frame, i):
            return script[i]

    monkeypatch.setattr(attack_mod, "SiameseRunner", Runner)
    r = run_with_reinit(model, frames, gt)
    assert r.failures == 1
    assert r.status[:4] == ["init", "track", "track", "fail"]
    assert r.status[4:9] == ["skip"] * 5
    assert r.status[9] == "init" and r.status[10:] == ["track", "track"]
    assert r.ious[0] is None and r.ious[3] is None and r.ious[9] is None
    assert r.ious[1] == pytest.approx(324 / 476)
