"""Layers, the desk-scale student network, SGD and parameter checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .binfmt import check_magic, f32_bytes, write_atomic
from .errors import ConfigError, FormatError, GraphError, ShapeError
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CKPT_MAGIC = b"HCDP"
CKPT_VERSION = 1


class Module:
    """Minimal container: parameters, buffers and children found by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, child in enumerate(val):
                    yield from child.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, child in enumerate(val):
                    yield from child.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise FormatError(f"checkpoint is missing entries: {sorted(missing)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data[...] = state[name]
        for name, b in bufs.items():
            if state[name].shape != b.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {b.shape}")
            b[...] = state[name]


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def init_params(module: Module, seed: int) -> Module:
    """Deterministically (re)initialize every parameter and buffer of ``module``.

    Conv and affine weights are He-uniform over their fan-in, BN scale is 1,
    shifts and biases are 0, running mean/var are 0/1.
    """
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            fan_in = int(np.prod(p.shape[1:])) if p.data.ndim == 4 else p.shape[0]
            p.data[...] = he_uniform(rng, p.shape, fan_in)
        elif leaf == "gamma":
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    for name, b in module.named_buffers():
        b[...] = 1.0 if name.endswith("running_var") else 0.0
    return module


class ConvBlock(Module):
    """ReLU(BN(Conv3x3(x)))."""

    def __init__(self, c_in: int, c_out: int):
        self.weight = Tensor(np.zeros((c_out, c_in, 3, 3)), requires_grad=True)
        self.gamma = Tensor(np.ones(c_out), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out), requires_grad=True)
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)

    def __call__(self, x: Tensor, training: bool = True) -> Tensor:
        y = T.conv2d(x, self.weight, stride=1, pad=1)
        y = T.batchnorm2d(y, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=training, momentum=BN_MOMENTUM, eps_bn=BN_EPS)
        return T.relu(y)


class AffineMap(Module):
    def __init__(self, p: int, q: int):
        self.weight = Tensor(np.zeros((p, q)), requires_grad=True)
        self.bias = Tensor(np.zeros(q), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class StudentNet(Module):
    """Plain CNN: per stage one ConvBlock followed by 2x2 average-pool downsampling.

    ``forward`` returns the class logits and the output of every stage.
    """

    def __init__(self, in_shape: Sequence[int] = (1, 16, 16), num_classes: int = 10,
                 channels: Sequence[int] = (16, 32, 64, 64), seed: int = 0):
        self.in_shape = tuple(int(s) for s in in_shape)
        self.num_classes = int(num_classes)
        self.channels = tuple(int(c) for c in channels)
        C, H, W = self.in_shape
        factor = 2 ** len(self.channels)
        if H % factor or W % factor:
            raise ConfigError(f"input {H}x{W} must be divisible by {factor} for {len(self.channels)} stages")
        blocks, prev = [], C
        for c in self.channels:
            blocks.append(ConvBlock(prev, c))
            prev = c
        self.stages = blocks
        self.classifier = AffineMap(prev, self.num_classes)
        init_params(self, seed)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        _, H, W = self.in_shape
        out = []
        for i, c in enumerate(self.channels):
            out.append((c, H >> (i + 1), W >> (i + 1)))
        return out

    def forward(self, x: Tensor, training: bool = True) -> tuple[Tensor, list[Tensor]]:
        if x.data.ndim != 4 or x.shape[1:] != self.in_shape:
            raise ShapeError(f"student expects input [B, {', '.join(map(str, self.in_shape))}], got {x.shape}")
        feats = []
        h = x
        for block in self.stages:
            h = T.avg_pool2(block(h, training))
            feats.append(h)
        logits = self.classifier(T.adaptive_avg_pool(h))
        return logits, feats

    __call__ = forward

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "StudentNet":
        """Rebuild the architecture implied by checkpoint tensor shapes."""
        channels, c_in = [], None
        i = 0
        while f"stages.{i}.weight" in state:
            w = state[f"stages.{i}.weight"]
            channels.append(w.shape[0])
            if c_in is None:
                c_in = w.shape[1]
            i += 1
        if not channels or "classifier.weight" not in state or "input_shape" not in state:
            raise FormatError("checkpoint does not describe a StudentNet")
        _, H, W = (int(v) for v in state["input_shape"])
        net = cls((c_in, H, W), state["classifier.weight"].shape[1], channels)
        net.load_state_dict(state)
        return net


@dataclass
class SgdConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    lr_decay_epochs: tuple[int, ...] = (20,)
    lr_decay: float = 0.1

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError(f"need epochs >= 1 and batch_size >= 2, got {self.epochs}, {self.batch_size}")

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 0-based epoch index."""
        k = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay ** k


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the velocity."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], cfg: SgdConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.lr = cfg.lr
        self.velocity = [np.zeros(p.shape) for _, p in self.params]

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise GraphError(f"no gradient for trainable parameter {name!r}")
        mu, wd, lr = self.cfg.momentum, self.cfg.weight_decay, self.lr
        for (_, p), v in zip(self.params, self.velocity):
            v *= mu
            v += p.grad
            if wd:
                v += wd * p.data
            p.data -= lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def sgd_step(params: Sequence[tuple[str, Tensor]], velocity: list[np.ndarray], cfg: SgdConfig,
             lr: float | None = None) -> None:
    """Functional form of :meth:`SGD.step` over explicit velocity buffers."""
    opt = SGD.__new__(SGD)
    opt.params, opt.cfg, opt.velocity = list(params), cfg, velocity
    opt.lr = cfg.lr if lr is None else lr
    opt.step()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    """Write ``state`` as an HCDP file (f32 little-endian payloads)."""
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(f32_bytes(arr))
    write_atomic(path, b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    check_magic(blob, CKPT_MAGIC, path)
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    off = 8
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError(f"{path}: truncated record name")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = off + 4 * count
            if end > len(blob):
                raise FormatError(f"{path}: record {name!r} runs past end of file")
            state[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float64).reshape(dims)
            off = end
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record ({exc})") from None
    return state


def student_state(net: StudentNet) -> dict[str, np.ndarray]:
    state = net.state_dict()
    state["input_shape"] = np.array(net.in_shape, dtype=np.float64)
    return state
