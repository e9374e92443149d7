"""RGB-D samples, manifest-backed datasets, splits, batching and the
synthetic two-domain generator."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, LabelError, LabelLeakError, ShapeError
from .tensor_core import TRAIN_DTYPE, Tensor, load_rdt, make_rng, save_rdt

IMAGE_SIZE = 80
CLASS_NAMES = ("downstairs", "upstairs", "negative")
DOMAINS = ("source", "target")


@dataclass(frozen=True)
class Sample:
    """One [4,80,80] RGB-D image in [0,1].

    ``label_hidden`` marks target-domain training samples: reading
    ``label`` on such a sample raises ``LabelLeakError``.
    """

    image: Tensor
    _label: int | None
    domain: str
    label_hidden: bool = False

    @property
    def label(self) -> int | None:
        if self.label_hidden:
            raise LabelLeakError("training code read a hidden target label")
        return self._label

    @property
    def domain_index(self) -> int:
        return DOMAINS.index(self.domain)

    def hide_label(self) -> "Sample":
        return replace(self, label_hidden=True)


@dataclass
class Dataset:
    samples: list[Sample]
    manifest_path: str = ""

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def images(self) -> Tensor:
        return np.stack([s.image for s in self.samples]).astype(TRAIN_DTYPE, copy=False)

    def labels(self) -> np.ndarray:
        labels = [s.label for s in self.samples]
        if any(lab is None for lab in labels):
            raise DataError("dataset contains unlabeled samples")
        return np.asarray(labels, dtype=np.int64)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.manifest_path)

    def unlabeled(self) -> "Dataset":
        """Copy with every label hidden, for the target training path."""
        return Dataset([s.hide_label() for s in self.samples], self.manifest_path)


@dataclass
class Batch:
    images: Tensor               # [B,4,80,80]: B/2 source rows, then B/2 target rows
    labels: np.ndarray           # [B/2] source labels
    domains: np.ndarray          # [B] 0=source, 1=target
    wrapped: int = 0             # source rows reused to pad the epoch's last batch


# --- packing -----------------------------------------------------------------


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the half-pixel-centre bilinear weights of output i."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(channel: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    h, w = channel.shape
    if h == size and w == size:
        return np.asarray(channel, dtype=np.float64)
    return _bilinear_matrix(h, size) @ channel @ _bilinear_matrix(w, size).T


def _minmax(channel: np.ndarray) -> np.ndarray:
    lo, hi = channel.min(), channel.max()
    if hi == lo:
        return np.zeros_like(channel)
    return (channel - lo) / (hi - lo)


def pack_rgbd(rgb: Tensor, depth: Tensor) -> Tensor:
    """Resize RGB and depth to 80x80 and min-max normalise each channel."""
    rgb = np.asarray(rgb, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim == 2:
        depth = depth[None]
    if rgb.ndim != 3 or rgb.shape[0] != 3 or depth.shape[0] != 1 or rgb.shape[1:] != depth.shape[1:]:
        raise ShapeError(f"need rgb [3,H,W] and depth [1,H,W], got {list(rgb.shape)} "
                         f"and {list(depth.shape)}")
    if not (np.all(np.isfinite(rgb)) and np.all(np.isfinite(depth))):
        raise DataError("non-finite pixel values")
    chans = [_minmax(resize_bilinear(c)) for c in np.concatenate([rgb, depth])]
    return np.clip(np.stack(chans), 0.0, 1.0).astype(TRAIN_DTYPE)


# --- splits and batching -----------------------------------------------------


def _permutation(n: int, seed: int) -> np.ndarray:
    return make_rng(seed).permutation(n)


def split_source(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded 80/20 split; train gets ceil(0.8 N)."""
    n = len(ds)
    n_train = (4 * n + 4) // 5
    perm = _permutation(n, seed)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def split_target(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded 40/60 split; train gets round(0.4 N)."""
    n = len(ds)
    n_train = (4 * n + 5) // 10
    perm = _permutation(n, seed)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def batches_per_epoch(n_source: int, batch_size: int) -> int:
    return -(-n_source // (batch_size // 2))


def make_batches(source_train: Dataset, target_train: Dataset, batch_size: int,
                 seed: int, epochs: int = 1) -> Iterator[Batch]:
    """Half-source / half-target batches.

    Each epoch walks a fresh shuffle of the source set once; the last batch
    wraps to the start of that shuffle to fill up. Target rows come from a
    shuffled cycle that reshuffles whenever it runs dry.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch size must be even, got {batch_size}")
    if len(source_train) == 0 or len(target_train) == 0:
        raise DataError("source and target training sets must be non-empty")
    half = batch_size // 2
    src_rng, tgt_rng = (np.random.Generator(np.random.PCG64(s))
                        for s in np.random.SeedSequence(seed).spawn(2))
    src_images = source_train.images()
    src_labels = source_train.labels()
    tgt_images = target_train.images()
    tgt_order = tgt_rng.permutation(len(target_train))
    tgt_pos = 0
    domains = np.repeat(np.arange(2), half)
    for _ in range(epochs):
        order = src_rng.permutation(len(source_train))
        for start in range(0, len(order), half):
            idx = order[start:start + half]
            wrapped = half - len(idx)
            if wrapped:
                idx = np.concatenate([idx, np.resize(order, wrapped)])
            t_idx = np.empty(half, dtype=np.intp)
            for k in range(half):
                if tgt_pos == len(tgt_order):
                    tgt_order = tgt_rng.permutation(len(target_train))
                    tgt_pos = 0
                t_idx[k] = tgt_order[tgt_pos]
                tgt_pos += 1
            yield Batch(
                images=np.concatenate([src_images[idx], tgt_images[t_idx]]),
                labels=src_labels[idx],
                domains=domains.copy(),
                wrapped=wrapped,
            )


# --- manifests ---------------------------------------------------------------

MANIFEST_HEADER = ["path", "label", "domain"]
PAIR_MANIFEST_HEADER = ["rgb_path", "depth_path", "label", "domain"]


def _parse_label(text: str, lineno: int, where: str) -> int | None:
    text = text.strip()
    if not text:
        return None
    try:
        label = int(text)
    except ValueError:
        raise LabelError(f"{where}:{lineno}: label {text!r} is not an integer") from None
    if not 0 <= label < len(CLASS_NAMES):
        raise LabelError(f"{where}:{lineno}: label {label} outside 0..{len(CLASS_NAMES) - 1}")
    return label


def load_manifest(path, hide_target_labels: bool = False) -> Dataset:
    """Read a ``path,label,domain`` or ``rgb_path,depth_path,label,domain``
    CSV. Relative tensor paths resolve against the manifest's directory."""
    path = Path(path)
    root = path.parent
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (MANIFEST_HEADER, PAIR_MANIFEST_HEADER):
            raise DataError(f"{path}:1: unexpected manifest header {header}")
        paired = header == PAIR_MANIFEST_HEADER
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            *paths, label_text, domain = row
            if domain not in DOMAINS:
                raise DataError(f"{path}:{lineno}: domain {domain!r} not in {DOMAINS}")
            label = _parse_label(label_text, lineno, str(path))
            try:
                if paired:
                    image = pack_rgbd(load_rdt(root / paths[0]), load_rdt(root / paths[1]))
                else:
                    image = load_rdt(root / paths[0])
            except (OSError, ShapeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if image.shape != (4, IMAGE_SIZE, IMAGE_SIZE):
                raise ShapeError(f"{path}:{lineno}: image shape {list(image.shape)}, "
                                 f"expected [4,{IMAGE_SIZE},{IMAGE_SIZE}]")
            hidden = hide_target_labels and domain == "target"
            samples.append(Sample(image, label, domain, hidden))
    if not samples:
        raise DataError(f"{path}: manifest has no samples")
    return Dataset(samples, str(path))


def write_manifest(ds: Dataset, path, tensor_dir: str = "tensors",
                   prefix: str = "", include_labels: bool = True) -> None:
    """Write one RDT file per sample plus a ``path,label,domain`` manifest."""
    path = Path(path)
    (path.parent / tensor_dir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for i, s in enumerate(ds.samples):
            rel = f"{tensor_dir}/{prefix}{i:05d}.rdt"
            save_rdt(path.parent / rel, s.image)
            label = "" if (not include_labels or s._label is None) else s._label
            writer.writerow([rel, label, s.domain])


# --- synthetic two-domain generator ------------------------------------------


@dataclass
class SynthConfig:
    """Knobs of the synthetic staircase analogue.

    Staircase classes differ in which end of the stair is near the camera:
    depth steps rise toward it, stripes compress away from it and shading
    brightens toward it. Negatives are smooth textures over flat depth.

    Target images get a hue rotation, a blended background texture, RGB
    noise, a camera-pitch ramp on depth and depth noise of amplitude
    ``shift / 4``, all scaled by ``shift``. With ``shift == 0`` both domains
    coincide pixel for pixel.
    """

    per_class: int = 200
    target_per_class: int | None = None
    shift: float = 0.6
    hue_degrees: float = 120.0          # rotation at shift == 1
    background_strength: float = 0.6    # texture blend weight at shift == 1
    rgb_noise: float = 0.25             # uniform RGB noise amplitude at shift == 1
    depth_pitch: float = 0.7            # constant camera-pitch ramp at shift == 1
    depth_tilt: float = 0.0             # extra random pitch, uniform in +-depth_tilt
    depth_slope: tuple[float, float] = (0.25, 0.5)
    perspective: float = 1.0            # stripe compression toward the far end
    shading: float = 0.6                # darkening toward the far end
    size: int = IMAGE_SIZE

    def __post_init__(self):
        if self.per_class < 1 or (self.target_per_class is not None and self.target_per_class < 1):
            raise ConfigError("per-class counts must be >= 1")
        if not 0.0 <= self.shift <= 1.0:
            raise ConfigError("shift must lie in [0, 1]")

    @property
    def n_target(self) -> int:
        return self.per_class if self.target_per_class is None else self.target_per_class


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled random grid in [0,1]."""
    coarse = rng.random((cells, cells))
    up = _bilinear_matrix(cells, size)
    return up @ coarse @ up.T


def _hue_rotation(degrees: float) -> np.ndarray:
    """Rotation of RGB about the grey axis."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, (1 - c) * k - r * s, (1 - c) * k + r * s],
        [(1 - c) * k + r * s, c + (1 - c) * k, (1 - c) * k - r * s],
        [(1 - c) * k - r * s, (1 - c) * k + r * s, c + (1 - c) * k],
    ])


def _content(cls: int, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    n = cfg.size
    y = (np.arange(n) + 0.5) / n
    rgb = np.empty((3, n, n))
    if cls in (0, 1):
        steps = rng.integers(4, 9)
        phase = rng.random()
        tilt = rng.uniform(-0.15, 0.15)
        x = (np.arange(n) + 0.5) / n - 0.5
        pos = np.clip(y[:, None] + tilt * x[None, :], 0.0, 1.0)    # stair axis
        gamma = 1.0 + cfg.perspective
        pos = pos**gamma if cls == 0 else 1.0 - (1.0 - pos)**gamma
        band = (np.floor(pos * steps + phase) % 2).astype(np.float64)
        tread, riser = rng.uniform(0.15, 0.9, 3), rng.uniform(0.15, 0.9, 3)
        while np.abs(tread - riser).sum() < 0.6:
            riser = rng.uniform(0.15, 0.9, 3)
        for c in range(3):
            rgb[c] = tread[c] * band + riser[c] * (1 - band)
        rgb *= 1.0 + 0.15 * (_smooth_field(rng, n, 4) - 0.5)       # lighting
        near = pos if cls == 0 else 1.0 - pos
        rgb *= 1.0 - cfg.shading * (1.0 - near)
        level = np.floor(pos * steps + phase) / steps             # quantised steps
        slope = rng.uniform(*cfg.depth_slope)
        base = rng.uniform(0.15, 0.35)
        direction = level if cls == 0 else 1.0 - level
        depth = base + slope * (direction - direction.min())
    else:
        cells = rng.integers(6, 14)
        for c in range(3):
            rgb[c] = 0.15 + 0.75 * _smooth_field(rng, n, cells)
        depth = np.full((n, n), rng.uniform(0.2, 0.7))
    depth = depth + 0.01 * rng.standard_normal((n, n))
    return np.concatenate([rgb, depth[None]])


def _apply_shift(img: np.ndarray, rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    s = cfg.shift
    if s == 0:
        return img
    n = cfg.size
    rgb = np.tensordot(_hue_rotation(cfg.hue_degrees * s), img[:3], axes=1)
    texture = np.stack([_smooth_field(rng, n, 16) for _ in range(3)])
    w = cfg.background_strength * s
    rgb = (1 - w) * rgb + w * texture
    rgb += rng.uniform(-1.0, 1.0, rgb.shape) * cfg.rgb_noise * s
    pitch = (cfg.depth_pitch + rng.uniform(-1.0, 1.0) * cfg.depth_tilt) * s
    ramp = pitch * ((np.arange(n) + 0.5) / n - 0.5)
    depth = img[3] + ramp[:, None] + rng.uniform(-s / 4, s / 4, (n, n))
    return np.concatenate([rgb, depth[None]])


def _sample_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *key])))


def synth_domain_pair(cfg: SynthConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Class-balanced source and target datasets, ordered by class.

    Sample i of class c draws its scene content from the same stream in both
    domains, so target images are shifted renderings of source scenes.
    """
    source, target = [], []
    for cls in range(len(CLASS_NAMES)):
        for i in range(max(cfg.per_class, cfg.n_target)):
            content = _content(cls, _sample_rng(seed, 0, cls, i), cfg)
            if i < cfg.per_class:
                img = np.clip(content, 0.0, 1.0).astype(TRAIN_DTYPE)
                source.append(Sample(img, cls, "source"))
            if i < cfg.n_target:
                shifted = _apply_shift(content, _sample_rng(seed, 1, cls, i), cfg)
                img = np.clip(shifted, 0.0, 1.0).astype(TRAIN_DTYPE)
                target.append(Sample(img, cls, "target"))
    return Dataset(source, "synthetic:source"), Dataset(target, "synthetic:target")
