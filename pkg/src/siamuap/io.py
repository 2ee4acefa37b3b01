"""Perturbation artifacts on disk and flat JSON configuration files."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .perturb import PerturbationPair
from .tracker import ArchConfig, TinySiamTracker, freeze, parameter_fingerprint

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")
_TENSORS = ("delta", "patch", "search_y")


class ArtifactError(ValueError):
    pass


def _write_tensor(path: Path, a: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(a, dtype=_F32).tobytes(order="C"))


def _read_tensor(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise ArtifactError(f"missing tensor file {path.name}")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * _F32.itemsize
    if len(raw) != expected:
        raise ArtifactError(f"{path.name} holds {len(raw)} bytes, manifest shape {tuple(shape)} "
                            f"needs {expected}")
    return np.frombuffer(raw, dtype=_F32).reshape(shape).copy()


def save_perturbation(pair: PerturbationPair, path, tracker_fingerprint: Optional[str] = None,
                      seed: Optional[int] = None) -> Path:
    """Write ``manifest.json`` plus little-endian float32 tensors in row-major (H, W, C) order.

    ``tracker_fingerprint`` and ``seed`` default to the values a loaded pair carries in ``meta``.
    """
    meta = dict(pair.meta)
    fp_meta, seed_meta = meta.pop("tracker_fingerprint", None), meta.pop("seed", None)
    if tracker_fingerprint is None:
        tracker_fingerprint = fp_meta
    if seed is None:
        seed = seed_meta
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name in _TENSORS:
        a = getattr(pair, name)
        if a is None:
            continue
        a = np.asarray(a)
        _write_tensor(out / f"{name}.f32", a)
        shapes[name] = list(a.shape)
    manifest = {
        "format_version": FORMAT_VERSION,
        "shapes": shapes,
        "eps1": pair.eps1,
        "eps2": pair.eps2,
        "color_mode": pair.color_mode,
        "placement": pair.placement,
        "iteration": pair.iteration,
        "tracker_fingerprint": tracker_fingerprint,
        "seed": seed,
        "meta": meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return out


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    if not p.exists():
        raise ArtifactError(f"no manifest.json in {path}")
    try:
        m = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ArtifactError(f"unreadable manifest: {e}") from e
    if m.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported artifact format version {m.get('format_version')!r}")
    return m


def load_perturbation(path) -> PerturbationPair:
    root = Path(path)
    m = read_manifest(root)
    shapes = m.get("shapes", {})
    for req in ("delta", "patch"):
        if req not in shapes:
            raise ArtifactError(f"manifest has no shape for {req}")
    t = {name: _read_tensor(root / f"{name}.f32", shapes[name]) for name in _TENSORS if name in shapes}
    meta = dict(m.get("meta") or {})
    meta.update({"tracker_fingerprint": m.get("tracker_fingerprint"), "seed": m.get("seed")})
    return PerturbationPair(t["delta"], t["patch"], m["color_mode"], m["eps1"], m["eps2"],
                            m["iteration"], m.get("placement", "add"), t.get("search_y"), meta)


def perturbation_checksum(path) -> str:
    """SHA-256 over the manifest and tensor files of an artifact directory."""
    h = hashlib.sha256()
    root = Path(path)
    for f in sorted(root.iterdir()):
        if f.name == "manifest.json" or f.suffix == ".f32":
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def load_config(path) -> dict:
    """Read a flat key/value JSON object."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a JSON object")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ValueError(f"config key {k!r} is nested; only flat key/value pairs are allowed")
    return data


def write_manifest(out_dir, payload: dict, name: str = "run_manifest.json") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return p


def save_tracker(model: TinySiamTracker, path) -> Path:
    """``tracker.pt`` (state dict) next to ``arch.json``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / "tracker.pt")
    arch = {**model.arch.to_dict(), "fingerprint": parameter_fingerprint(model)}
    (out / "arch.json").write_text(json.dumps(arch, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_tracker(path) -> TinySiamTracker:
    root = Path(path)
    for name in ("tracker.pt", "arch.json"):
        if not (root / name).exists():
            raise ArtifactError(f"{root} has no {name}")
    arch = json.loads((root / "arch.json").read_text(encoding="utf-8"))
    arch.pop("fingerprint", None)
    model = TinySiamTracker(ArchConfig.from_dict(arch))
    model.load_state_dict(torch.load(root / "tracker.pt", weights_only=True))
    return freeze(model)
