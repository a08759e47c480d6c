"""Frozen teacher outputs stored as HCDT dump files.

A dump holds, for every sample of a paired dataset file and in the same
order, the teacher's penultimate feature vector and its logits.

Layout (little-endian): ``b"HCDT"``, u32 version=1, u32 N, u32 d, u32 K,
f32 features ``[N, d]``, f32 logits ``[N, K]``, u64 FNV-1a of the two
payload blocks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binfmt import check_magic, f32_bytes, fnv1a64, split_checked_payload, unpack_u32s, write_atomic
from .errors import ConfigError, FormatError, ShapeError
from .tensor import Tensor

MAGIC = b"HCDT"
VERSION = 1
HEADER_LEN = 4 + 4 * 4
DEFAULT_MARGIN = 6.0


@dataclass(frozen=True)
class TeacherDump:
    features: np.ndarray  # [N, d]
    logits: np.ndarray  # [N, K]
    checksum: int = 0

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return self.logits.shape[1]

    def rows(self, idx) -> tuple[Tensor, Tensor]:
        """Teacher features and logits for a batch, as tensors outside the graph."""
        return Tensor(self.features[idx]), Tensor(self.logits[idx])

    def accuracy(self, labels: np.ndarray) -> float:
        return float(np.mean(np.argmax(self.logits, axis=1) == labels) * 100.0)


def validate(features: np.ndarray, logits: np.ndarray) -> None:
    if features.ndim != 2 or logits.ndim != 2 or features.shape[0] != logits.shape[0]:
        raise ShapeError(f"features [N,d] and logits [N,K] must share N, got {features.shape}, {logits.shape}")
    if not (np.all(np.isfinite(features)) and np.all(np.isfinite(logits))):
        raise FormatError("teacher dump contains non-finite values")
    if features.shape[0] and np.any(np.linalg.norm(features, axis=1) == 0):
        raise FormatError("teacher dump has a zero-norm feature vector")


def write_dump(path, features: np.ndarray, logits: np.ndarray) -> None:
    features = np.asarray(features)
    logits = np.asarray(logits)
    validate(features, logits)
    N, d = features.shape
    payload = f32_bytes(features) + f32_bytes(logits)
    header = MAGIC + struct.pack("<4I", VERSION, N, d, logits.shape[1])
    write_atomic(path, header + payload + struct.pack("<Q", fnv1a64(payload)))


def read_dump(path, expect_d: int | None = None, expect_k: int | None = None,
              expect_n: int | None = None) -> TeacherDump:
    """Load and validate a dump; optional ``expect_*`` values are checked against the header."""
    blob = Path(path).read_bytes()
    check_magic(blob, MAGIC, path)
    version, N, d, K = unpack_u32s(blob, 4, 4, path)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported teacher dump version {version}")
    payload = split_checked_payload(blob, HEADER_LEN, 4 * N * (d + K), path)
    if expect_d is not None and d != expect_d:
        raise ConfigError(f"teacher feature width mismatch: dump has d={d}, config expects d={expect_d}")
    if expect_k is not None and K != expect_k:
        raise ConfigError(f"teacher class count mismatch: dump has K={K}, dataset has K={expect_k}")
    if expect_n is not None and N != expect_n:
        raise ConfigError(f"teacher dump has N={N} rows but dataset has N={expect_n} samples")
    feats = np.frombuffer(payload, dtype="<f4", count=N * d).astype(np.float64).reshape(N, d)
    logits = np.frombuffer(payload, dtype="<f4", count=N * K, offset=4 * N * d).astype(np.float64).reshape(N, K)
    validate(feats, logits)
    feats.setflags(write=False)
    logits.setflags(write=False)
    (checksum,) = struct.unpack_from("<Q", blob, len(blob) - 8)
    return TeacherDump(feats, logits, checksum)


def global_statistics(images: np.ndarray) -> np.ndarray:
    """Whole-image summary per sample: row means, column means, mean and std per channel."""
    N, C, H, W = images.shape
    rows = images.mean(axis=3).reshape(N, C * H)
    cols = images.mean(axis=2).reshape(N, C * W)
    mean = images.mean(axis=(2, 3))
    std = images.std(axis=(2, 3))
    return np.concatenate([rows, cols, mean, std], axis=1)


def synth_teacher(dataset, quality: float, d: int, seed: int, margin: float = DEFAULT_MARGIN,
                  noise_scale: float | None = None, path=None) -> TeacherDump:
    """Build a controllable stand-in teacher for ``dataset``.

    logits = quality * margin * onehot(y) + (1 - quality) * noise_scale * N(0, 1)
    features = random projection of standardized global image statistics
               + quality * class embedding
    """
    if not 0.0 <= quality <= 1.0:
        raise ConfigError(f"teacher quality must lie in [0, 1], got {quality}")
    if d < 1:
        raise ConfigError(f"feature width d must be positive, got {d}")
    noise_scale = margin if noise_scale is None else noise_scale
    rng = np.random.default_rng(seed)
    labels = np.asarray(dataset.labels)
    K = dataset.num_classes
    N = labels.shape[0]

    stats = global_statistics(np.asarray(dataset.images))
    stats = (stats - stats.mean(axis=0)) / (stats.std(axis=0) + 1e-8)
    proj = rng.normal(size=(stats.shape[1], d)) / np.sqrt(stats.shape[1])
    class_embed = rng.normal(size=(K, d))
    features = stats @ proj + quality * class_embed[labels]

    onehot = np.eye(K)[labels]
    noise = rng.normal(size=(N, K))
    logits = quality * margin * onehot + (1.0 - quality) * noise_scale * noise

    features = features.astype(np.float32).astype(np.float64)
    logits = logits.astype(np.float32).astype(np.float64)
    if path is not None:
        write_dump(path, features, logits)
    return TeacherDump(features, logits)
