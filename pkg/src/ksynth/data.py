"""Procedural video clips with controlled spatial scale and temporal structure.

The default benchmark has four classes: a left-to-right mover, its exact
time-reversal (same motion seed, so the two classes share frame multisets
clip for clip and are indistinguishable without temporal reasoning), plus a
small-fast and a large-slow diagonal mover exercising spatial scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .io import read_tensor, write_tensor
from .tensor import Tensor5


@dataclass(frozen=True)
class SyntheticClipSpec:
    class_id: int
    shape: str                      # "square" | "disc"
    scale: float                    # shape extent in pixels
    direction: tuple[float, float]  # (dy, dx), normalised internally
    speed: float                    # pixels per frame
    playback: str = "forward"       # "forward" | "reversed"
    noise_sigma: float = 0.0
    t: int = 8
    h: int = 32
    w: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.shape not in ("square", "disc"):
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.playback not in ("forward", "reversed"):
            raise ConfigError(f"unknown playback {self.playback!r}")
        if self.scale + 2 > min(self.h, self.w):
            raise ConfigError(
                f"shape of scale {self.scale} does not fit a {self.h}x{self.w} frame")


def _render_frame(spec: SyntheticClipSpec, cy: float, cx: float) -> np.ndarray:
    ys = np.arange(spec.h, dtype=float)
    xs = np.arange(spec.w, dtype=float)
    half = spec.scale / 2.0
    if spec.shape == "square":
        fy = np.clip(half + 0.5 - np.abs(ys - cy), 0.0, 1.0)
        fx = np.clip(half + 0.5 - np.abs(xs - cx), 0.0, 1.0)
        return np.outer(fy, fx)
    dist = np.hypot(ys[:, None] - cy, xs[None, :] - cx)
    return np.clip(half + 0.5 - dist, 0.0, 1.0)


def _trajectory(spec: SyntheticClipSpec, rng) -> list[tuple[float, float]]:
    margin = spec.scale / 2.0 + 1.0
    lo_y, hi_y = margin, spec.h - 1 - margin
    lo_x, hi_x = margin, spec.w - 1 - margin
    cy = rng.uniform(lo_y, hi_y)
    cx = rng.uniform(lo_x, hi_x)
    norm = float(np.hypot(*spec.direction)) or 1.0
    vy = spec.direction[0] / norm * spec.speed
    vx = spec.direction[1] / norm * spec.speed
    pts = []
    for _ in range(spec.t):
        pts.append((cy, cx))
        cy, vy = _bounce(cy + vy, vy, lo_y, hi_y)
        cx, vx = _bounce(cx + vx, vx, lo_x, hi_x)
    return pts


def _bounce(p: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    if p < lo:
        return 2 * lo - p, -v
    if p > hi:
        return 2 * hi - p, -v
    return p, v


def generate_clip(spec: SyntheticClipSpec) -> tuple[Tensor5, int]:
    """Render one clip; deterministic in the spec.  Pixels lie in [0, 1]
    before noise.  A reversed spec reproduces the forward frame sequence in
    reverse order exactly (motion is seeded independently of playback)."""
    rng_motion = np.random.default_rng(np.random.SeedSequence((spec.seed, 0x707)))
    frames = np.stack([_render_frame(spec, cy, cx)
                       for cy, cx in _trajectory(spec, rng_motion)])
    if spec.playback == "reversed":
        frames = frames[::-1].copy()
    if spec.noise_sigma > 0:
        rng_noise = np.random.default_rng(
            np.random.SeedSequence((spec.seed, spec.class_id, 0x905)))
        frames = frames + spec.noise_sigma * rng_noise.standard_normal(frames.shape)
    return Tensor5(frames[None, None]), spec.class_id


@dataclass
class Dataset:
    clips: np.ndarray        # (M, 1, T, H, W)
    labels: np.ndarray       # (M,)
    seeds: np.ndarray        # (M,)
    num_classes: int

    def __len__(self):
        return len(self.labels)


def default_benchmark_templates(t: int = 8, h: int = 32, w: int = 32,
                                noise_sigma: float = 0.05) -> list[SyntheticClipSpec]:
    """Reversal pair plus a scale/speed pair; seeds are filled in later."""
    common = dict(t=t, h=h, w=w, noise_sigma=noise_sigma)
    return [
        SyntheticClipSpec(0, "square", 7, (0.0, 1.0), 2.5, "forward", **common),
        SyntheticClipSpec(1, "square", 7, (0.0, 1.0), 2.5, "reversed", **common),
        SyntheticClipSpec(2, "disc", 3, (1.0, 1.0), 3.5, "forward", **common),
        SyntheticClipSpec(3, "disc", 11, (1.0, 1.0), 1.0, "forward", **common),
    ]


def _clip_seed(base_seed: int, split: str, index: int) -> int:
    offset = {"train": 0, "val": 1_000_000}[split]
    return base_seed * 2_000_003 + offset + index


def generate_split(templates, n_per_class: int, base_seed: int,
                   split: str) -> Dataset:
    """Class-balanced clips.  Clip index i of every class shares a motion
    seed (reversal pairs stay frame-multiset-matched); train and val index
    ranges are disjoint, so no seed crosses the splits."""
    if len(templates) < 2:
        raise ConfigError("need at least 2 classes")
    clips, labels, seeds = [], [], []
    for i in range(n_per_class):
        seed = _clip_seed(base_seed, split, i)
        for tpl in templates:
            spec = replace(tpl, seed=seed)
            x, y = generate_clip(spec)
            clips.append(x.data[0])
            labels.append(y)
            seeds.append(seed)
    return Dataset(np.stack(clips), np.asarray(labels), np.asarray(seeds),
                   num_classes=len(templates))


def generate_dataset(templates, n_train_per_class: int, n_val_per_class: int,
                     seed: int) -> tuple[Dataset, Dataset]:
    train = generate_split(templates, n_train_per_class, seed, "train")
    val = generate_split(templates, n_val_per_class, seed, "val")
    return train, val


def save_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        path = f"clip_{i:05d}.t5"
        write_tensor(directory / path, ds.clips[i][None])
        rows.append([int(ds.labels[i]), int(ds.seeds[i]), path])
    with open(directory / "index.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["label", "seed", "path"])
        wr.writerows(rows)


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    clips, labels, seeds = [], [], []
    with open(directory / "index.csv", newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for label, seed, path in rd:
            clips.append(read_tensor(directory / path)[0])
            labels.append(int(label))
            seeds.append(int(seed))
    labels = np.asarray(labels)
    return Dataset(np.stack(clips), labels, np.asarray(seeds),
                   num_classes=int(labels.max()) + 1)
