"""Dataset container, the .ttld binary format, and the synthetic benchmark.

The synthetic task is oriented gratings: each class is a sinusoidal stripe
pattern at a class-specific angle, rendered in colors drawn from the same
distribution for every class. Channel means therefore carry no label
signal and telling classes apart requires spatial features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"TTLD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


class Dataset:
    """uint8 images (N, C, H, W) with uint16 labels."""

    def __init__(self, images, labels, n_classes: int):
        self.images = np.ascontiguousarray(images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(labels, dtype=np.uint16)
        self.n_classes = int(n_classes)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if self.labels.size and int(self.labels.max()) >= self.n_classes:
            raise ValueError(f"label {int(self.labels.max())} out of range for {self.n_classes} classes")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float32) / 255.0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    def split(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle split; first part holds round(fraction * N) samples."""
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"fraction must be in (0, 1), got {fraction}")
        n = len(self)
        perm = np.random.default_rng(seed).permutation(n)
        cut = int(round(fraction * n))
        return self.subset(perm[:cut]), self.subset(perm[cut:])


def save_dataset(ds: Dataset, path) -> None:
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, len(ds), ds.channels, ds.height, ds.width, ds.n_classes
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(ds.images.tobytes())
        f.write(ds.labels.astype("<u2").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count, c, h, w, n_classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    img_bytes = count * c * h * w
    expected = _HEADER.size + img_bytes + 2 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    images = np.frombuffer(raw, dtype=np.uint8, count=img_bytes, offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype="<u2", count=count, offset=_HEADER.size + img_bytes)
    return Dataset(images.reshape(count, c, h, w), labels, n_classes)


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 4
    per_class: int = 64
    size: int = 32
    noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("size must be at least 16")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")


def synth_dataset(spec: SynthSpec) -> Dataset:
    """Class-balanced oriented gratings, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    u, v = np.meshgrid(np.linspace(0.0, 1.0, s), np.linspace(0.0, 1.0, s), indexing="ij")
    images = np.empty((spec.n_classes * spec.per_class, 3, s, s), dtype=np.uint8)
    labels = np.empty(spec.n_classes * spec.per_class, dtype=np.uint16)
    i = 0
    for c in range(spec.n_classes):
        theta = np.pi * c / spec.n_classes
        direction = u * np.cos(theta) + v * np.sin(theta)
        for _ in range(spec.per_class):
            freq = rng.uniform(1.5, 3.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            grating = np.sin(2.0 * np.pi * freq * direction + phase)
            # both stripe colors are class-independent draws, so pooled
            # channel statistics are identical across classes
            color_a = rng.uniform(40.0, 215.0, size=3)
            color_b = rng.uniform(40.0, 215.0, size=3)
            img = np.where(grating[None] > 0.0, color_a[:, None, None], color_b[:, None, None])
            img = img + rng.normal(0.0, spec.noise * 255.0, size=img.shape)
            images[i] = np.clip(img, 0.0, 255.0).astype(np.uint8)
            labels[i] = c
            i += 1
    order = rng.permutation(i)
    return Dataset(images[order], labels[order], spec.n_classes)


def resize_batch(x: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize of an (N, C, H, W) batch to a square resolution.

    Half-pixel source mapping with edge clamping; used to feed one dataset
    to sub-networks configured for other input resolutions.
    """
    out = _lerp_axis(np.asarray(x), resolution, axis=2)
    return _lerp_axis(out, resolution, axis=3)


def _lerp_axis(arr: np.ndarray, out_n: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == out_n:
        return arr
    src = (np.arange(out_n) + 0.5) * (n_in / out_n) - 0.5
    lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    t = np.clip(src - lo, 0.0, 1.0).astype(arr.dtype if arr.dtype.kind == "f" else np.float64)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = out_n
    t = t.reshape(shape)
    return a + t * (b - a)
