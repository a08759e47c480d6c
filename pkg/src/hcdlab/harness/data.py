"""Synthetic image datasets and the HCDX dataset file format.

Layout (little-endian): ``b"HCDX"``, u32 version, u32 N, C, H, W, K,
f32 images row-major ``[N, C, H, W]``, u32 labels ``[N]``, u64 FNV-1a of
everything between the header and the checksum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..binfmt import check_magic, f32_bytes, fnv1a64, split_checked_payload, u32_bytes, unpack_u32s, write_atomic
from ..errors import ConfigError, FormatError

MAGIC = b"HCDX"
VERSION = 1
HEADER_LEN = 4 + 4 * 6

# Class prototypes are shared by every split; only per-sample noise follows ``seed``.
PROTO_SEED = 20240601


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise FormatError(f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def write_dataset(path, ds: Dataset) -> None:
    N, C, H, W = ds.images.shape
    payload = f32_bytes(ds.images) + u32_bytes(ds.labels)
    header = MAGIC + struct.pack("<6I", VERSION, N, C, H, W, ds.num_classes)
    write_atomic(path, header + payload + struct.pack("<Q", fnv1a64(payload)))


def read_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    check_magic(blob, MAGIC, path)
    version, N, C, H, W, K = unpack_u32s(blob, 4, 6, path)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    n_img = N * C * H * W
    payload = split_checked_payload(blob, HEADER_LEN, 4 * n_img + 4 * N, path)
    images = np.frombuffer(payload, dtype="<f4", count=n_img).astype(np.float64).reshape(N, C, H, W)
    labels = np.frombuffer(payload, dtype="<u4", count=N, offset=4 * n_img).astype(np.int64)
    if N and labels.max() >= K:
        raise FormatError(f"{path}: label {labels.max()} >= K={K}")
    return Dataset(images, labels, K)


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


def make_blobs(n: int, k: int, c: int, h: int, w: int, seed: int, noise: float = 1.0) -> Dataset:
    """Class-conditional Gaussian images around fixed random class means."""
    means = np.random.default_rng(PROTO_SEED).normal(size=(k, c, h, w))
    rng = np.random.default_rng(seed)
    y = _balanced_labels(rng, n, k)
    x = means[y] + noise * rng.normal(size=(n, c, h, w))
    return Dataset(x, y, k)


def bars_pattern(label: int, k: int, h: int, w: int, phase: float) -> np.ndarray:
    """Stripe image for one class: orientation from label parity, frequency from label // 2."""
    horizontal = label % 2 == 0
    cycles = label // 2 + 1
    if horizontal:
        pos = (np.arange(h) + 0.5) / h
        wave = np.sin(2 * np.pi * (cycles * pos + phase))
        return np.repeat(wave[:, None], w, axis=1)
    pos = (np.arange(w) + 0.5) / w
    wave = np.sin(2 * np.pi * (cycles * pos + phase))
    return np.repeat(wave[None, :], h, axis=0)


def make_bars(n: int, k: int, c: int, h: int, w: int, seed: int, noise: float = 1.6) -> Dataset:
    """Global stripe patterns with random phase and amplitude under heavy pixel noise.

    A class is only identifiable from the stripe frequency across the whole
    image, so small receptive fields see mostly noise.
    """
    rng = np.random.default_rng(seed)
    y = _balanced_labels(rng, n, k)
    phase = rng.uniform(0, 1, size=n)
    amp = rng.uniform(0.6, 1.4, size=n)
    chan_gain = rng.uniform(0.5, 1.0, size=(n, c))
    x = np.empty((n, c, h, w))
    for i in range(n):
        pat = bars_pattern(int(y[i]), k, h, w, phase[i]) * amp[i]
        x[i] = chan_gain[i][:, None, None] * pat[None]
    x += noise * rng.normal(size=x.shape)
    return Dataset(x, y, k)


def gen_dataset(kind: str, n: int, k: int, c: int, h: int, w: int, seed: int, path=None,
                noise: float | None = None) -> Dataset:
    if k < 2:
        raise ConfigError(f"need at least 2 classes, got K={k}")
    if kind == "blobs":
        ds = make_blobs(n, k, c, h, w, seed, 1.0 if noise is None else noise)
    elif kind == "bars":
        ds = make_bars(n, k, c, h, w, seed, 1.6 if noise is None else noise)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r} (expected 'blobs' or 'bars')")
    ds.images = ds.images.astype(np.float32).astype(np.float64)
    if path is not None:
        write_dataset(path, ds)
    return ds
