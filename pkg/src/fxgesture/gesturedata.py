"""Gesture datasets: on-disk loaders, stratified splits, synthetic stand-ins."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
DEFAULT_ACCEL_GESTURES = tuple(str(i) for i in range(1, 9))
ACCEL_HEADER = ["t", "ax", "ay", "az"]


class DataError(Exception):
    """Malformed or missing dataset content."""


class EmptyDatasetWarning(UserWarning):
    pass


@dataclass
class SequenceSample:
    id: str
    label: int
    frames: np.ndarray
    source: str = "synthetic"

    @property
    def length(self):
        return self.frames.shape[0]


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list
    ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    name: str = ""
    num_classes: int = field(default=0)

    def all(self):
        return self.train + self.valid + self.test


def _natural_key(p):
    s = p.name
    return (0, int(s), s) if s.isdigit() else (1, 0, s)


def load_image_dataset(root, size=(32, 32)):
    """Read ``root/<class>/<sequence>/<frame>.{png,jpg}`` into samples.

    Frames are bilinearly resized to ``size`` (H, W) and scaled to [0, 1];
    classes are indexed in sorted directory order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    samples = []
    h, w = size
    for label, cdir in enumerate(classes):
        for sdir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            files = sorted(p for p in sdir.iterdir() if p.is_file())
            if not files:
                raise DataError(f"empty sequence {sdir}")
            frames = []
            for f in files:
                if f.suffix.lower() not in IMAGE_EXTENSIONS:
                    raise DataError(f"unknown frame extension {f}")
                try:
                    with Image.open(f) as im:
                        im = im.convert("RGB").resize((w, h), Image.BILINEAR)
                        frames.append(np.asarray(im, dtype=np.float64) / 255.0)
                except OSError as e:
                    raise DataError(f"unreadable frame {f}: {e}") from e
            arr = np.stack(frames).transpose(0, 3, 1, 2)
            samples.append(SequenceSample(f"{cdir.name}/{sdir.name}", label, arr,
                                          source=str(sdir)))
    if not samples:
        warnings.warn(f"no image sequences under {root}", EmptyDatasetWarning)
    return samples


def _read_accel_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and [c.strip().lower() for c in row] == ACCEL_HEADER:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected t,ax,ay,az, got {row}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
    if not rows:
        raise DataError(f"{path}: no samples")
    arr = np.array(rows)
    if np.any(np.diff(arr[:, 0]) < 0):
        log.warning("%s: timestamps are not monotone", path)
    return arr[:, 1:]


def load_accel_dataset(root, gestures=DEFAULT_ACCEL_GESTURES):
    """Read ``root/<user>/<gesture>/<rep>.csv`` keeping only ``gestures``.

    Labels follow the order of ``gestures``.  Timestamps are read and
    checked but dropped; sequences are fed raw (g units).
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    wanted = {str(gid): i for i, gid in enumerate(gestures)}
    samples = []
    for udir in sorted((p for p in root.iterdir() if p.is_dir()), key=_natural_key):
        for gdir in sorted((p for p in udir.iterdir() if p.is_dir()), key=_natural_key):
            if gdir.name not in wanted:
                continue
            for f in sorted(gdir.glob("*.csv"), key=lambda p: _natural_key(
                    p.with_name(p.stem))):
                samples.append(SequenceSample(
                    f"{udir.name}/{gdir.name}/{f.stem}", wanted[gdir.name],
                    _read_accel_csv(f), source=str(f)))
    if not samples:
        warnings.warn(f"no accelerometer sequences under {root}", EmptyDatasetWarning)
    return samples


def write_manifest(samples, path):
    """One ``path,class,T`` line per sample."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for s in samples:
            w.writerow([s.source if s.source != "synthetic" else s.id, s.label, s.length])


def stratified_split(samples, ratios=(0.6, 0.2, 0.2), seed=0):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    parts = ([], [], [])
    needed = sum(r > 0 for r in ratios)
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda s: s.id)
        n = len(group)
        if n < needed:
            raise ValueError(f"class {label} has {n} samples, fewer than {needed} splits")
        order = rng.permutation(n)
        n_train = int(round(ratios[0] * n))
        n_valid = int(round(ratios[1] * n))
        n_valid = min(n_valid, n - n_train)
        cuts = (0, n_train, n_train + n_valid, n)
        for part, a, b in zip(parts, cuts[:-1], cuts[1:]):
            part.extend(group[i] for i in order[a:b])
    return DatasetSplit(*parts, ratios=ratios, seed=seed,
                        num_classes=len(by_class))


# synthetic generators

def accel_prototype(label, length, classes=8, gravity=1.0):
    """Noise-free trajectory for class ``label``: a full-period sine pulse
    (accelerate, then brake) along one of ``classes`` directions."""
    t = (np.arange(length) + 0.5) / length
    if classes <= 8:
        dirs = _ARROWS
    else:
        ang = 2 * np.pi * np.arange(classes) / classes
        dirs = np.stack([np.cos(ang), np.sin(ang), np.zeros(classes)], axis=1)
    pulse = np.sin(2 * np.pi * t)[:, None] * dirs[label][None, :]
    out = pulse.copy()
    out[:, 2] += gravity
    return out


# four cardinal plus four diagonal moves in the watch face plane, with the
# diagonals tilted out of plane so every class uses its own axis mix
_ARROWS = np.array([
    [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0],
    [0.7, 0.7, 0.5], [-0.7, -0.7, 0.5], [0.7, -0.7, -0.5], [-0.7, 0.7, -0.5],
])


def synth_accel(classes=8, per_class=40, t_range=(20, 40), noise=0.05, seed=0):
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = t_range
    samples = []
    for label in range(classes):
        for k in range(per_class):
            length = int(rng.integers(lo, hi + 1))
            x = accel_prototype(label, length, classes)
            if noise > 0:
                x = x + rng.normal(0.0, noise, size=x.shape)
            samples.append(SequenceSample(f"accel-{label}-{k}", label, x))
    return samples


SHAPES = ("bar", "fan", "v")
MOTIONS = ("left", "right", "contract")


def _glyph(shape, dx, dy, scale):
    """Boolean mask from offsets (dx, dy) to the glyph centre; mirror
    symmetric in dx by construction."""
    ax = np.abs(dx) / scale
    ny = dy / scale
    if shape == "bar":
        return (ax <= 1.5) & (np.abs(ny) <= 7.0)
    if shape == "fan":
        rays = np.zeros(ax.shape, dtype=bool)
        for slope in (0.0, 0.35, 0.9):
            rays |= np.abs(ax - slope * (6.0 - ny)) <= 1.0
        return rays & (np.abs(ny) <= 6.0)
    if shape == "v":
        return (np.abs(ax - 0.6 * (6.0 - ny)) <= 1.2) & (np.abs(ny) <= 6.0)
    raise ValueError(f"unknown shape {shape!r}")


def render_frame(shape, motion, t, frames, size=32):
    pos = (np.arange(size) + 0.5) - size / 2.0
    dy, dx = np.meshgrid(pos, pos, indexing="ij")
    s = t / max(frames - 1, 1)
    travel = size * 0.3
    if motion == "left":
        shift, scale = travel * (0.5 - s), 1.0
    elif motion == "right":
        shift, scale = -travel * (0.5 - s), 1.0
    elif motion == "contract":
        shift, scale = 0.0, 1.0 - 0.5 * s
    else:
        raise ValueError(f"unknown motion {motion!r}")
    return _glyph(shape, dx - shift, dy, scale)


def synth_video(shapes=3, motions=3, per_class=10, size=32, frames=8, noise=0.05,
                seed=0):
    """Glyph-and-motion clips; label = shape_index * motions + motion_index."""
    rng = np.random.default_rng(seed)
    samples = []
    for si in range(shapes):
        for mi in range(motions):
            label = si * motions + mi
            clip = np.stack([render_frame(SHAPES[si], MOTIONS[mi], t, frames, size)
                             for t in range(frames)]).astype(np.float64)
            base = 0.15 + 0.7 * clip
            for k in range(per_class):
                x = base
                if noise > 0:
                    x = base + rng.normal(0.0, noise, size=base.shape)
                x = np.clip(x, 0.0, 1.0)
                rgb = np.repeat(x[:, None], 3, axis=1)
                samples.append(SequenceSample(f"video-{label}-{k}", label, rgb))
    return samples
