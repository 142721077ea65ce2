"""Seeded two-domain toy datasets with a single shift knob."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .objectives import Batch

log = logging.getLogger(__name__)

KINDS = ("moons", "blobs", "strokes")
STROKE_SHIFTS = ("none", "invert", "gradient")


@dataclass(frozen=True)
class DatasetSpec:
    """``shift`` is degrees for moons, a scalar offset for blobs, an index into
    ``STROKE_SHIFTS`` for strokes.  ``noise=None`` picks the family default."""

    kind: str = "moons"
    shift: float = 0.0
    n: int = 400
    n_val: int = 200
    noise: float | None = None
    seed: int = 0
    n_classes: int = 3
    dim: int = 5
    same_draw: bool = False  # draw the target from the source's random stream

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.n < 20:
            raise ConfigError("need at least 20 samples per domain")
        if self.kind == "moons" and not (0.0 <= self.shift <= 90.0):
            raise ConfigError("moons rotation must lie in [0, 90] degrees")
        if self.kind == "strokes" and int(self.shift) not in range(len(STROKE_SHIFTS)):
            raise ConfigError(f"strokes shift must index {STROKE_SHIFTS}")
        if self.noise is not None and self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def noise_level(self) -> float:
        if self.noise is not None:
            return self.noise
        return {"moons": 0.1, "blobs": 1.0, "strokes": 0.05}[self.kind]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainingView:
    """Everything a training phase may touch: no target labels."""

    source_x: np.ndarray
    source_y: np.ndarray
    source_val_x: np.ndarray
    source_val_y: np.ndarray
    target_x: np.ndarray
    num_classes: int


@dataclass(frozen=True)
class DomainPair:
    source_x: np.ndarray
    source_y: np.ndarray
    source_val_x: np.ndarray
    source_val_y: np.ndarray
    target_x: np.ndarray
    target_y_hidden: np.ndarray
    num_classes: int

    def training_view(self) -> TrainingView:
        return TrainingView(self.source_x, self.source_y, self.source_val_x, self.source_val_y,
                            self.target_x, self.num_classes)


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    y = _balanced_labels(n, 2, rng)
    theta = rng.uniform(0.0, np.pi, size=n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(theta), np.sin(theta)], 1),
                 np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], 1))
    x = x - np.array([0.5, 0.25])  # centre the pair of moons on the origin
    return x + noise * rng.normal(size=x.shape), y


def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    a = np.deg2rad(degrees)
    r = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return x @ r.T


def _streams(spec: DatasetSpec):
    root = np.random.SeedSequence([spec.seed, KINDS.index(spec.kind)])
    s, v, t = root.spawn(3)
    src, val, tgt = (np.random.default_rng(q) for q in (s, v, t))
    if spec.same_draw:
        tgt = np.random.default_rng(s)
    return src, val, tgt


def gen_moons_shift(spec: DatasetSpec) -> DomainPair:
    """Two moons; the target is drawn from the same law and rotated about the origin."""
    if spec.kind != "moons":
        raise ConfigError("gen_moons_shift needs a moons spec")
    src, val, tgt = _streams(spec)
    xs, ys = _moons(spec.n, spec.noise_level, src)
    xv, yv = _moons(spec.n_val, spec.noise_level, val)
    xt, yt = _moons(spec.n, spec.noise_level, tgt)
    return DomainPair(xs, ys, xv, yv, rotate(xt, spec.shift), yt, 2)


def blob_centers(spec: DatasetSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 7919])
    return rng.normal(scale=4.0, size=(spec.n_classes, spec.dim))


def _blobs(n: int, centers: np.ndarray, noise: float, rng: np.random.Generator):
    y = _balanced_labels(n, len(centers), rng)
    return centers[y] + noise * rng.normal(size=(n, centers.shape[1])), y


def gen_blobs_shift(spec: DatasetSpec) -> DomainPair:
    """Gaussian blobs; target means move by ``shift`` along every axis."""
    if spec.kind != "blobs":
        raise ConfigError("gen_blobs_shift needs a blobs spec")
    src, val, tgt = _streams(spec)
    centers = blob_centers(spec)
    noise = spec.noise_level
    xs, ys = _blobs(spec.n, centers, noise, src)
    xv, yv = _blobs(spec.n_val, centers, noise, val)
    xt, yt = _blobs(spec.n, centers + spec.shift, noise, tgt)
    return DomainPair(xs, ys, xv, yv, xt, yt, spec.n_classes)


IMAGE_SIZE = 12


def glyph(label: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Binary template: 0 horizontal bar, 1 vertical bar, 2 cross, 3 diagonal."""
    img = np.zeros((size, size))
    mid = slice(size // 2 - 1, size // 2 + 1)
    inner = slice(2, size - 2)
    if label in (0, 2):
        img[mid, inner] = 1.0
    if label in (1, 2):
        img[inner, mid] = 1.0
    if label == 3:
        for i in range(2, size - 2):
            img[i, max(i - 1, 0):i + 1] = 1.0
    return img


def _strokes(n: int, noise: float, rng: np.random.Generator, transform: str):
    y = _balanced_labels(n, 4, rng)
    shifts = rng.integers(-1, 2, size=(n, 2))
    imgs = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    for i in range(n):
        g = np.roll(glyph(int(y[i])), tuple(shifts[i]), axis=(0, 1))
        imgs[i, 0] = g
    imgs = np.clip(imgs + noise * rng.normal(size=imgs.shape), 0.0, 1.0)
    if transform == "invert":
        imgs = 1.0 - imgs
    elif transform == "gradient":
        ramp = np.linspace(0.0, 0.6, IMAGE_SIZE)[None, None, None, :]
        imgs = np.clip(imgs + ramp, 0.0, 1.0)
    return imgs, y


def gen_strokes_images(spec: DatasetSpec) -> DomainPair:
    """12x12 glyph images; the target applies the pixel transform named by ``shift``."""
    if spec.kind != "strokes":
        raise ConfigError("gen_strokes_images needs a strokes spec")
    src, val, tgt = _streams(spec)
    noise = spec.noise_level
    xs, ys = _strokes(spec.n, noise, src, "none")
    xv, yv = _strokes(spec.n_val, noise, val, "none")
    xt, yt = _strokes(spec.n, noise, tgt, STROKE_SHIFTS[int(spec.shift)])
    return DomainPair(xs, ys, xv, yv, xt, yt, 4)


def generate(spec: DatasetSpec) -> DomainPair:
    return {"moons": gen_moons_shift, "blobs": gen_blobs_shift, "strokes": gen_strokes_images}[spec.kind](spec)


class BatchStream:
    """Epoch-shuffled source/target mini-batches; the last partial batch is dropped.

    Source and target orders come from independent streams of the same seed.
    ``epochs=None`` repeats forever.  ``warning`` is set when ``batch_size``
    exceeds a domain size, in which case the stream is empty.
    """

    def __init__(self, view: TrainingView, batch_size: int, seed: int, epochs: int | None = None):
        self.view = view
        self.batch_size = batch_size
        self.seed = seed
        self.epochs = epochs
        n = min(len(view.source_x), len(view.target_x))
        self.warning = None
        if batch_size > n:
            self.warning = f"batch size {batch_size} exceeds domain size {n}; stream is empty"
            log.warning(self.warning)
        self.batches_per_epoch = 0 if self.warning else n // batch_size

    def __iter__(self) -> Iterator[Batch]:
        if self.warning:
            return
        ss, ts = np.random.SeedSequence(self.seed).spawn(2)
        rs, rt = np.random.default_rng(ss), np.random.default_rng(ts)
        view, bs = self.view, self.batch_size
        epoch = 0
        while self.epochs is None or epoch < self.epochs:
            ps = rs.permutation(len(view.source_x))
            pt = rt.permutation(len(view.target_x))
            for b in range(self.batches_per_epoch):
                si, ti = ps[b * bs:(b + 1) * bs], pt[b * bs:(b + 1) * bs]
                yield Batch(view.source_x[si], view.source_y[si], view.target_x[ti], ti)
            epoch += 1


def batch_iterator(view: TrainingView, batch_size: int, seed: int, epochs: int | None = None) -> BatchStream:
    return BatchStream(view, batch_size, seed, epochs)


def export_csv(pair: DomainPair, path) -> Path:
    """Write vector data as ``domain,label,x0,x1,...`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = pair.source_x.reshape(len(pair.source_x), -1).shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label"] + [f"x{i}" for i in range(d)])
        for name, xs, ys in (("source", pair.source_x, pair.source_y),
                             ("source_val", pair.source_val_x, pair.source_val_y),
                             ("target", pair.target_x, pair.target_y_hidden)):
            for x, y in zip(xs.reshape(len(xs), -1), ys):
                w.writerow([name, int(y)] + [repr(float(v)) for v in x])
    return path


def export_pgm(pair: DomainPair, directory) -> list[Path]:
    """One plain-text PGM (P2) per domain: images stacked vertically."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, xs in (("source", pair.source_x), ("target", pair.target_x)):
        imgs = np.clip(np.round(xs[:, 0] * 255), 0, 255).astype(int)
        w = imgs.shape[2]
        rows = imgs.reshape(-1, w)
        p = directory / f"{name}.pgm"
        lines = ["P2", f"{w} {rows.shape[0]}", "255"] + [" ".join(map(str, r)) for r in rows]
        p.write_text("\n".join(lines) + "\n")
        out.append(p)
    return out
