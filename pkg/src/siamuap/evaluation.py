"""Tracking metrics, SSIM perceptibility and report rendering.

Frame 1 is the initialisation frame and is excluded from every metric.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.signal import convolve2d

from .geometry import Box, iou_or_zero

PRECISION_RADIUS = 20.0
NORM_PRECISION_MAX = 0.5
NORM_PRECISION_STEP = 0.005
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check(pred, ref, min_len=2):
    if len(pred) != len(ref):
        raise ValueError(f"trajectory lengths differ: {len(pred)} vs {len(ref)}")
    if len(pred) < min_len:
        raise ValueError(f"need at least {min_len} frames, got {len(pred)}")


def per_frame_iou(pred: Sequence[Box], ref: Sequence[Box]) -> np.ndarray:
    _check(pred, ref, 1)
    return np.array([iou_or_zero(p, r) for p, r in zip(pred, ref)])


def ao(pred: Sequence[Box], ref: Sequence[Box]) -> float:
    _check(pred, ref)
    return float(per_frame_iou(pred, ref)[1:].mean())


def success_rate(pred: Sequence[Box], ref: Sequence[Box], thr: float = 0.5) -> float:
    _check(pred, ref)
    return float((per_frame_iou(pred, ref)[1:] > thr).mean())


def _center_offsets(pred, ref):
    p = np.array([b.center for b in pred])[1:]
    r = np.array([b.center for b in ref])[1:]
    return p - r


def precision(pred: Sequence[Box], ref: Sequence[Box], radius: float = PRECISION_RADIUS) -> float:
    _check(pred, ref)
    d = np.hypot(*_center_offsets(pred, ref).T)
    return float((d <= radius).mean())


def norm_precision(pred: Sequence[Box], ref: Sequence[Box]) -> float:
    """Area under the size-normalised precision curve on thresholds [0, 0.5], scaled to [0, 1]."""
    _check(pred, ref)
    off = _center_offsets(pred, ref)
    wh = np.array([(b.width, b.height) for b in ref])[1:]
    d = np.hypot(off[:, 0] / wh[:, 0], off[:, 1] / wh[:, 1])
    n = int(round(NORM_PRECISION_MAX / NORM_PRECISION_STEP))
    thr = np.linspace(0.0, NORM_PRECISION_MAX, n + 1)
    curve = (d[None, :] <= thr[:, None]).mean(axis=1)
    return float(np.trapezoid(curve, thr) / NORM_PRECISION_MAX)


def robustness(failures: Sequence[int], frames: Sequence[int]) -> Dict[str, float]:
    """Total failures and failures per 100 frames."""
    f = int(np.sum(failures))
    n = int(np.sum(frames))
    if n <= 0:
        raise ValueError("robustness needs a positive frame count")
    return {"failures": f, "per_100_frames": 100.0 * f / n}


def accuracy(ious: Sequence[Optional[float]]) -> float:
    """Mean IoU over tracked frames; ``None`` marks init, failure and skipped frames."""
    vals = [v for v in ious if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: np.ndarray, b: np.ndarray, region: Optional[Box] = None, data_range: float = 255.0) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, computed per channel and averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if region is not None:
        h, w = a.shape[:2]
        c0, r0 = int(math.floor(region.x0)), int(math.floor(region.y0))
        c1, r1 = int(math.ceil(region.x1)), int(math.ceil(region.y1))
        if c0 < 0 or r0 < 0 or c1 > w or r1 > h:
            raise ValueError(f"region {region} is not inside the {w}x{h} image")
        a, b = a[r0:r1, c0:c1], b[r0:r1, c0:c1]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM region {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def f(img):
            return convolve2d(img, win, mode="valid")

        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------- reports

@dataclass
class SequenceRun:
    """One tracked sequence and the references it is scored against."""

    name: str
    pred: List[Box]
    gt: List[Box]
    fake: Optional[List[Box]] = None
    failures: Optional[int] = None
    reinit_ious: Optional[List[Optional[float]]] = None
    ssim_template: Optional[float] = None
    ssim_patch_region: Optional[float] = None
    label: str = "run"


METRIC_KEYS = ("ao", "sr", "precision", "norm_precision")


def sequence_metrics(run: SequenceRun, sr_threshold: float = 0.5) -> Dict[str, float]:
    m: Dict[str, float] = {}
    for ref_name, ref in (("real", run.gt), ("fake", run.fake)):
        if ref is None:
            continue
        m[f"ao_{ref_name}"] = ao(run.pred, ref)
        m[f"sr_{ref_name}"] = success_rate(run.pred, ref, sr_threshold)
        m[f"precision_{ref_name}"] = precision(run.pred, ref)
        m[f"norm_precision_{ref_name}"] = norm_precision(run.pred, ref)
    if run.failures is not None:
        m["robustness_failures"] = float(run.failures)
    if run.reinit_ious is not None:
        m["accuracy"] = accuracy(run.reinit_ious)
    if run.ssim_template is not None:
        m["ssim_template"] = run.ssim_template
    if run.ssim_patch_region is not None:
        m["ssim_patch_region"] = run.ssim_patch_region
    return m


@dataclass
class EvalReport:
    label: str
    per_sequence: Dict[str, Dict[str, float]]
    aggregate: Dict[str, float]
    meta: Dict[str, object] = field(default_factory=dict)

    def __getattr__(self, name):
        agg = self.__dict__.get("aggregate", {})
        if name in agg:
            return agg[name]
        raise AttributeError(name)

    def to_text(self) -> str:
        lines = [f"label: {self.label}"]
        for k, v in sorted(self.meta.items()):
            lines.append(f"meta.{k}: {v}")
        for k in sorted(self.aggregate):
            lines.append(f"{k}: {self.aggregate[k]:.6f}")
        keys = sorted({k for m in self.per_sequence.values() for k in m})
        lines.append("")
        lines.append("sequence," + ",".join(keys))
        for name in sorted(self.per_sequence):
            m = self.per_sequence[name]
            lines.append(name + "," + ",".join(f"{m.get(k, float('nan')):.6f}" for k in keys))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str)


def make_report(runs: Sequence[SequenceRun], label: Optional[str] = None,
                sr_threshold: float = 0.5, meta: Optional[dict] = None) -> EvalReport:
    """Per-sequence metrics plus their means; fake metrics appear only when every run has a fake trajectory."""
    if not runs:
        raise ValueError("make_report needs at least one run")
    per = {}
    for r in runs:
        if r.name in per:
            raise ValueError(f"duplicate sequence name {r.name!r}")
        per[r.name] = sequence_metrics(r, sr_threshold)
    common = set.intersection(*(set(m) for m in per.values()))
    agg = {}
    for k in sorted(common):
        if k == "robustness_failures":
            agg[k] = float(sum(per[n][k] for n in sorted(per)))
            frames = sum(len(r.pred) for r in runs)
            agg["robustness_per_100_frames"] = 100.0 * agg[k] / frames
        else:
            agg[k] = float(np.mean([per[n][k] for n in sorted(per)]))
    return EvalReport(label or runs[0].label, per, agg, dict(meta or {}))


def render_table(reports: Sequence[EvalReport],
                 keys: Sequence[str] = ("ao_real", "sr_real", "precision_real", "norm_precision_real",
                                        "ao_fake", "sr_fake", "precision_fake", "norm_precision_fake",
                                        "accuracy", "robustness_per_100_frames",
                                        "ssim_template", "ssim_patch_region")) -> str:
    """Side-by-side comparison (rows = metrics, columns = runs) as plain text."""
    keys = [k for k in keys if any(k in r.aggregate for r in reports)]
    width = max([len(k) for k in keys] + [6])
    cols = [max(len(r.label), 8) for r in reports]
    head = " " * width + " | " + " | ".join(r.label.rjust(c) for r, c in zip(reports, cols))
    lines = [head, "-" * len(head)]
    for k in keys:
        cells = []
        for r, c in zip(reports, cols):
            v = r.aggregate.get(k)
            cells.append(("-" if v is None else f"{v:.3f}").rjust(c))
        lines.append(k.ljust(width) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    return out


def plot_curve(xs: Sequence[float], series: Dict[str, Sequence[float]], path, xlabel: str,
               ylabel: str = "AO", logx: bool = False) -> Path:
    """Line plot such as AO vs. training iterations or AO vs. patch size."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(xs, ys, marker="o", label=name)
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
