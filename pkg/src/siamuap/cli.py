"""Command-line entry point: ``siamuap <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image

from . import __version__
from .attack import (DIRECTIONS, FakeTrajectory, gen_fake_traj_direction, gen_fake_traj_offset,
                     run_attack, run_with_reinit, save_trajectory)
from .data import load_videos, make_synthetic_dataset, read_boxes
from .evaluation import EvalReport, SequenceRun, make_report, plot_curve, render_table, ssim, write_report
from .geometry import Box, project_box
from .io import (load_config, load_perturbation, load_tracker, save_perturbation, save_tracker,
                 write_manifest)
from .losses import LossWeights
from .perturb import PATCH_SIZES, add_patch, paste_patch, perturb_template, perturb_template_ycbcr
from .pretrain import pretrain_reference_tracker
from .tracker import (ArchConfig, build_reference_tracker, crop_search, crop_template,
                      parameter_fingerprint, track_sequence)
from .train import TrainConfig, train_baseline_paste, train_baseline_uap, train_universal

log = logging.getLogger("siamuap")

WEIGHT_KEYS = {f.name for f in dataclasses.fields(LossWeights)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"weights"}


class CliError(Exception):
    """Reported as a one-line message with exit status 1."""


def train_config_from_flat(flat: dict) -> TrainConfig:
    """Build a :class:`TrainConfig` from flat keys; loss weights sit at top level."""
    unknown = set(flat) - WEIGHT_KEYS - TRAIN_KEYS
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    w = LossWeights(**{k: flat[k] for k in WEIGHT_KEYS if k in flat})
    kw = {k: flat[k] for k in TRAIN_KEYS if k in flat}
    if "loss_terms" in kw:
        kw["loss_terms"] = tuple(kw["loss_terms"])
    try:
        return TrainConfig(weights=w, **kw)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid training config: {e}") from e


def flat_train_config(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    d.update(d.pop("weights"))
    return d


def _apply_ablation(flat: dict, ablate: Optional[str]) -> dict:
    if not ablate:
        return flat
    flat = dict(flat)
    if ablate == "template-only":
        flat["optimize_patch"] = False
    elif ablate == "search-only":
        flat["optimize_template"] = False
    elif ablate.startswith("loss:"):
        term = ablate.split(":", 1)[1]
        if term not in ("cls", "quality", "reg"):
            raise CliError(f"unknown loss term {term!r} in --ablate")
        flat["loss_terms"] = [t for t in ("cls", "quality", "reg") if t != term]
    else:
        raise CliError(f"unknown ablation {ablate!r}")
    return flat


def _resolved_flat(args) -> dict:
    flat = load_config(args.config) if getattr(args, "config", None) else {}
    for key in ("seed", "iterations", "batch_size", "patch_size", "color_mode", "shift_range"):
        v = getattr(args, key, None)
        if v is not None:
            flat[key] = v
    return _apply_ablation(flat, getattr(args, "ablate", None))


# ---------------------------------------------------------------- fake trajectories

def _fake_for(video, args, gt: List[Box]) -> FakeTrajectory:
    mode = args.fake_traj
    if mode == "offset":
        return gen_fake_traj_offset(gt, args.gap, args.side)
    if mode == "direction":
        return gen_fake_traj_direction(gt[0], len(video), args.direction)
    if mode == "file":
        if not args.fake_file:
            raise CliError("--fake-traj file needs --fake-file")
        p = Path(args.fake_file)
        if p.is_dir():
            p = p / f"{video.name}.txt"
        return FakeTrajectory.load(p)
    raise CliError(f"unknown fake trajectory mode {mode!r}")


def _gt_for(video, tracker, pseudo_gt: bool) -> List[Box]:
    if pseudo_gt:
        return track_sequence(tracker, video.frames, video.boxes[0])
    return list(video.boxes)


def _load_pert(args):
    return load_perturbation(args.perturbation) if getattr(args, "perturbation", None) else None


# ---------------------------------------------------------------- commands

def cmd_make_synthetic(args) -> int:
    out = make_synthetic_dataset(args.out, args.seed, args.n_sequences, args.frames,
                                 (args.frame_size, args.frame_size))
    write_manifest(out, {"command": "make-synthetic", "seed": args.seed, "n_sequences": args.n_sequences,
                         "frames": args.frames, "frame_size": args.frame_size})
    print(f"wrote {args.n_sequences} sequences to {out}")
    return 0


def cmd_pretrain(args) -> int:
    videos = load_videos(args.data)
    model = build_reference_tracker(args.seed, ArchConfig(width=args.width))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pretrain_log.csv", "w", encoding="utf-8") as f:
        model = pretrain_reference_tracker(model, videos, args.steps, args.batch_size, args.lr, args.seed,
                                           log_file=f)
    save_tracker(model, out)
    write_manifest(out, {"command": "pretrain-tracker", "seed": args.seed, "steps": args.steps,
                         "batch_size": args.batch_size, "lr": args.lr, "arch": model.arch.to_dict(),
                         "fingerprint": parameter_fingerprint(model)})
    print(f"tracker saved to {out}")
    return 0


def cmd_train_attack(args) -> int:
    flat = _resolved_flat(args)
    cfg = train_config_from_flat(flat)
    tracker = load_tracker(args.tracker)
    videos = load_videos(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fp = parameter_fingerprint(tracker)
    write_manifest(out, {"command": "train-attack", "baseline": args.baseline, "ablate": args.ablate,
                         "config": flat_train_config(cfg), "tracker_fingerprint": fp})

    def on_ckpt(it, pair):
        save_perturbation(pair, out / "checkpoints" / f"iter_{it:06d}", fp, cfg.seed)

    with open(out / "train_log.csv", "w", encoding="utf-8") as f:
        if args.baseline == "uap":
            pair, ckpts, _ = train_baseline_uap(cfg, tracker, videos, f)
        elif args.baseline == "paste":
            pair, ckpts, _ = train_baseline_paste(cfg, tracker, videos, f)
        else:
            pair, ckpts, _ = train_universal(cfg, tracker, videos, f, on_ckpt)
    if args.baseline != "none":
        for it, p in ckpts.items():
            on_ckpt(it, p)
    save_perturbation(pair, out / "perturbation", fp, cfg.seed)
    print(f"perturbation saved to {out / 'perturbation'}")
    return 0


def _check_fake_len(video, fake):
    if len(fake) != len(video):
        raise CliError(f"{video.name}: fake trajectory has {len(fake)} boxes but the sequence has "
                       f"{len(video)} frames")


def cmd_attack(args) -> int:
    tracker = load_tracker(args.tracker)
    pert = _load_pert(args)
    videos = load_videos(args.data)
    out = Path(args.out)
    write_manifest(out, {"command": "attack", "perturbation": args.perturbation, "fake_traj": args.fake_traj,
                         "direction": args.direction, "pseudo_gt": args.pseudo_gt,
                         "tracker_fingerprint": parameter_fingerprint(tracker)})
    for v in videos:
        gt = _gt_for(v, tracker, args.pseudo_gt)
        fake = None
        if pert is not None and pert.placement != "full":
            fake = _fake_for(v, args, gt)
            _check_fake_len(v, fake)
        res = run_attack(tracker, v.frames, v.boxes[0], pert, fake)
        save_trajectory(out / "pred" / f"{v.name}.txt", res.boxes)
        if fake is not None:
            fake.save(out / "fake" / f"{v.name}.txt")
    print(f"tracked {len(videos)} sequences into {out}")
    return 0


def _ssims(v, tracker, pert, fake, frame_index=1):
    """SSIM of the template and of the patched region of one search crop."""
    z, _ = crop_template(v.frames[0], v.boxes[0], tracker)
    if pert.color_mode == "ycbcr":
        zp = perturb_template_ycbcr(z, pert.delta)
    else:
        zp = perturb_template(z, pert.delta)
    s_t = ssim(z, zp)
    if fake is None or pert.placement == "full" or pert.color_mode == "ycbcr":
        return s_t, None
    i = min(frame_index, len(v) - 1)
    x, spec = crop_search(v.frames[i], v.boxes[i], tracker)
    fb = project_box(fake.boxes[i], spec, "frame->crop")
    op = paste_patch if pert.placement == "paste" else add_patch
    S = x.shape[0]
    cx, cy = fb.center
    if not (0 <= cx < S and 0 <= cy < S):
        return s_t, None
    half = pert.patch_size / 2
    region = Box(max(0.0, round(cx - half)), max(0.0, round(cy - half)),
                 min(float(S), round(cx + half)), min(float(S), round(cy + half)))
    if region.width < 11 or region.height < 11:
        return s_t, None
    return s_t, ssim(x, op(x, pert.patch, fb), region=region)


def cmd_eval(args) -> int:
    tracker = load_tracker(args.tracker)
    pert = _load_pert(args)
    videos = load_videos(args.data)
    runs = []
    for v in videos:
        gt = _gt_for(v, tracker, args.pseudo_gt)
        fake = None
        if pert is not None and pert.placement != "full":
            fake = _fake_for(v, args, gt)
            _check_fake_len(v, fake)
        elif args.fake_file or args.with_fake:
            fake = _fake_for(v, args, gt)
            _check_fake_len(v, fake)
        pred = run_attack(tracker, v.frames, v.boxes[0], pert, fake).boxes
        run = SequenceRun(v.name, pred, gt, fake.boxes if fake is not None else None, label=args.label)
        if args.reinit:
            r = run_with_reinit(tracker, v.frames, gt, pert, fake)
            run.failures, run.reinit_ious = r.failures, r.ious
        if pert is not None:
            run.ssim_template, run.ssim_patch_region = _ssims(v, tracker, pert, fake)
        runs.append(run)
    meta = {"perturbation": args.perturbation, "fake_traj": args.fake_traj, "pseudo_gt": args.pseudo_gt,
            "iteration": pert.iteration if pert is not None else None,
            "patch_size": pert.patch_size if pert is not None else None}
    report = make_report(runs, args.label, meta=meta)
    write_report(report, args.out)
    write_manifest(args.out, {"command": "eval", **meta, "reinit": args.reinit,
                              "tracker_fingerprint": parameter_fingerprint(tracker)})
    print(report.to_text().split("\n\n")[0])
    return 0


def _load_report(path) -> EvalReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    d = json.loads(p.read_text(encoding="utf-8"))
    return EvalReport(d["label"], d["per_sequence"], d["aggregate"], d.get("meta", {}))


def cmd_report(args) -> int:
    reports = [_load_report(p) for p in args.inputs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = render_table(reports)
    (out / "table.txt").write_text(table, encoding="utf-8")
    if args.x_key:
        xs = [r.meta.get(args.x_key) for r in reports]
        if any(x is None for x in xs):
            raise CliError(f"not every report has meta.{args.x_key}")
        order = np.argsort(xs)
        series = {k: [reports[i].aggregate.get(k, float("nan")) for i in order] for k in args.metrics}
        plot_curve([xs[i] for i in order], series, out / f"curve_{args.x_key}.png", args.x_key,
                   logx=args.x_key == "iteration")
    write_manifest(out, {"command": "report", "inputs": args.inputs, "x_key": args.x_key})
    print(table, end="")
    return 0


def _to_image(a, amplify: float = 1.0, center: float = 0.0) -> Image.Image:
    return Image.fromarray(np.clip(np.asarray(a) * amplify + center, 0, 255).astype(np.uint8))


def cmd_inspect(args) -> int:
    pert = load_perturbation(args.perturbation)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    amp = args.amplify
    _to_image(pert.delta, amp, 128).save(out / "delta.png")
    patch = pert.patch
    if patch.shape[-1] == 2:
        patch = np.concatenate([np.zeros(patch.shape[:2] + (1,)), patch], axis=-1)
    if pert.placement == "paste":
        _to_image(patch).save(out / "patch.png")
    else:
        _to_image(patch, amp, 128).save(out / "patch.png")
    if pert.search_y is not None:
        _to_image(np.repeat(pert.search_y[..., None], 3, -1), amp, 128).save(out / "search_y.png")
    if args.data and args.tracker:
        tracker = load_tracker(args.tracker)
        v = load_videos(args.data)[0]
        fake = gen_fake_traj_offset(list(v.boxes))
        z, _ = crop_template(v.frames[0], v.boxes[0], tracker)
        zp = perturb_template_ycbcr(z, pert.delta) if pert.color_mode == "ycbcr" else perturb_template(z, pert.delta)
        _to_image(np.concatenate([z, zp], axis=1)).save(out / "template_clean_vs_perturbed.png")
        if pert.placement != "full" and pert.color_mode == "rgb":
            x, spec = crop_search(v.frames[1], v.boxes[1], tracker)
            fb = project_box(fake.boxes[1], spec, "frame->crop")
            op = paste_patch if pert.placement == "paste" else add_patch
            _to_image(np.concatenate([x, op(x, pert.patch, fb)], axis=1)).save(out / "search_clean_vs_patched.png")
    write_manifest(out, {"command": "inspect", "perturbation": args.perturbation, "amplify": amp})
    print(f"images written to {out}")
    return 0


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="flat JSON file of training keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required, help="output directory")


def _add_fake(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fake-traj", choices=("offset", "direction", "file"), default="offset")
    p.add_argument("--fake-file", help="box file, or a directory of <sequence>.txt files")
    p.add_argument("--direction", choices=sorted(DIRECTIONS), default="-45")
    p.add_argument("--gap", type=float, default=2.0, help="offset mode: pixels between boxes")
    p.add_argument("--side", choices=("right", "left", "above", "below"), default="right")
    p.add_argument("--pseudo-gt", action="store_true", help="use clean predictions as ground truth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamuap", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("make-synthetic", help="write a synthetic sequence dataset")
    _add_common(p)
    p.add_argument("--n-sequences", type=int, default=64)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--frame-size", type=int, default=128)
    p.set_defaults(func=cmd_make_synthetic, seed=0)

    p = sub.add_parser("pretrain-tracker", help="fit the reference tracker on ground truth")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-attack", help="train universal perturbations offline")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tracker", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--shift-range", type=float)
    p.add_argument("--color-mode", choices=("rgb", "ycbcr"))
    p.add_argument("--patch-size", type=int, choices=PATCH_SIZES)
    p.add_argument("--baseline", choices=("none", "uap", "paste"), default="none")
    p.add_argument("--ablate", help="template-only, search-only or loss:<cls|quality|reg>")
    p.set_defaults(func=cmd_train_attack)

    p = sub.add_parser("attack", help="track with a trained perturbation and save trajectories")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tracker", required=True)
    p.add_argument("--perturbation", help="artifact directory; omit for the clean tracker")
    _add_fake(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="attack and score against real and fake trajectories")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tracker", required=True)
    p.add_argument("--perturbation")
    p.add_argument("--label", default="run")
    p.add_argument("--reinit", action="store_true", help="also run the reinitialisation protocol")
    p.add_argument("--with-fake", action="store_true", help="score the clean tracker against the fake path")
    _add_fake(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare eval outputs and plot curves")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="eval output directories or report.json files")
    p.add_argument("--x-key", help="meta key for the x axis, e.g. iteration or patch_size")
    p.add_argument("--metrics", nargs="+", default=["ao_fake", "ao_real"])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="render perturbations and perturbed examples")
    _add_common(p)
    p.add_argument("--perturbation", required=True)
    p.add_argument("--data")
    p.add_argument("--tracker")
    p.add_argument("--amplify", type=float, default=10.0)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seed", None) is None and args.command != "train-attack":
        args.seed = 0
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
