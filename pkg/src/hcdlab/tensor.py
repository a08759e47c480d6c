"""Dense float64 tensors with a small reverse-mode autodiff graph.

Every differentiable primitive needed by the student network, the CFM heads
and the distillation losses lives here.  Each op computes its forward value
with numpy and records a closure that maps the output gradient to gradients
for its parents.  ``backward`` walks the recorded nodes in reverse
topological order and accumulates into the ``grad`` buffers of leaves that
were created with ``requires_grad=True``.

There is no broadcasting beyond Python scalars: binary ops demand equal
shapes, and the few places that need a row-vector bias use ``linear``.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import GraphError, ShapeError

_CHECK_FINITE = os.environ.get("HCD_DEBUG", "") not in ("", "0")
_kink_log: list[np.ndarray] | None = None


def set_debug(enabled: bool) -> None:
    """Turn the NaN/Inf check after every forward op on or off."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextmanager
def record_kinks() -> Iterator[list[np.ndarray]]:
    """Collect the activation pattern of every ReLU evaluated inside the block.

    The gradient checker compares patterns at ``x + h`` and ``x - h`` to find
    coordinates whose finite difference straddles a kink.
    """
    global _kink_log
    prev = _kink_log
    _kink_log = []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = "leaf"
        out._consumed = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced a non-finite value from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data - c, (a,), lambda g: (g,), "sub_scalar")
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def max_with_scalar(a: Tensor, theta: float) -> Tensor:
    """``max(0, a - theta)`` elementwise."""
    return relu(sub(a, theta))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, w: Tensor) -> Tensor:
    if a.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {w.shape}")
    if a.shape[1] != w.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} x {w.shape}")
    ad, wd = a.data, w.data

    def bw(g):
        return g @ wd.T, ad.T @ g

    return _make(ad @ wd, (a, w), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"linear expects x[B,p], w[p,q], b[q]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make(xd @ wd + b.data, (x, w, b), bw, "linear")


def gram(x: Tensor) -> Tensor:
    """Batched Gram matrix: ``x[B,n,K] -> x @ x^T`` of shape ``[B,n,n]``."""
    if x.data.ndim != 3:
        raise ShapeError(f"gram expects [B,n,K], got {x.shape}")
    xd = x.data

    def bw(g):
        return ((g + g.transpose(0, 2, 1)) @ xd,)

    return _make(xd @ xd.transpose(0, 2, 1), (x,), bw, "gram")


# ---------------------------------------------------------------- conv / norm / pool


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """3x3 cross-correlation (no kernel flip) without bias."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d expects x[B,C,H,W] and k[O,C,3,3], got {x.shape}, {k.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = k.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ck}")
    s = int(stride)
    Ho = (H + 2 * pad - kh) // s + 1
    Wo = (W + 2 * pad - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    kd = k.data
    hs, ws = s * (Ho - 1) + 1, s * (Wo - 1) + 1
    # im2col: rows are output pixels, columns are (c, i, j) taps
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :hs:s, :ws:s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kd.reshape(O, C * kh * kw)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dk = (g2.T @ cols).reshape(kd.shape)
        if not x.requires_grad:
            return None, dk
        dcols = (g2 @ kmat).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + hs:s, j:j + ws:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        return dx, dk

    return _make(out, (x, k), bw, "conv2d")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    momentum: float = 0.1,
    eps_bn: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In training mode the running buffers (if given) are updated in place with
    ``r <- (1 - momentum) * r + momentum * batch_stat``; the running variance
    uses the unbiased batch variance.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({C},), got {gamma.shape}, {beta.shape}")
    gd = gamma.data.reshape(1, C, 1, 1)
    bd = beta.data.reshape(1, C, 1, 1)

    if not training:
        if running_mean is None or running_var is None:
            raise ShapeError("batchnorm2d inference mode needs running statistics")
        inv = 1.0 / np.sqrt(running_var.reshape(1, C, 1, 1) + eps_bn)
        xhat = (x.data - running_mean.reshape(1, C, 1, 1)) * inv

        def bw_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _make(xhat * gd + bd, (x, gamma, beta), bw_eval, "batchnorm2d_eval")

    n = B * H * W
    if n <= 1:
        raise ShapeError(f"batchnorm2d needs more than one value per channel, got input {x.shape}")
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mean
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps_bn)
    xhat = xc * inv
    if running_mean is not None and running_var is not None:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean.reshape(C)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(C) * (n / (n - 1))

    def bw(g):
        dxhat = g * gd
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(xhat * gd + bd, (x, gamma, beta), bw, "batchnorm2d")


def adaptive_avg_pool(x: Tensor) -> Tensor:
    """Global average over H, W; returns ``[B, C]``."""
    if x.data.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H < 1 or W < 1:
        raise ShapeError(f"adaptive_avg_pool: empty spatial extent in {x.shape}")
    area = H * W

    def bw(g):
        return (np.broadcast_to(g.reshape(B, C, 1, 1) / area, (B, C, H, W)).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "adaptive_avg_pool")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 (spatial downsampling)."""
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2 expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), bw, "avg_pool2")


# ---------------------------------------------------------------- shape ops


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the feature (column) axis."""
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError(f"concat expects 2-D tensors, got {p.shape}")
        if p.shape[0] != rows:
            raise ShapeError(f"concat: batch mismatch {parts[0].shape} vs {p.shape}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw, "concat")


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b])


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got {x.shape}")
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), bw, "slice_cols")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------- softmax family


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return tau


def softmax_t(z: Tensor, tau: float = 1.0) -> Tensor:
    """Softmax of ``z / tau`` over the last axis."""
    tau = _check_tau(tau)
    s = z.data / tau
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)) / tau,)

    return _make(y, (z,), bw, "softmax_t")


def log_softmax_t(z: Tensor, tau: float = 1.0) -> Tensor:
    tau = _check_tau(tau)
    s = z.data / tau
    shifted = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def bw(g):
        return ((g - y * g.sum(axis=-1, keepdims=True)) / tau,)

    return _make(out, (z,), bw, "log_softmax_t")


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every vector along the last axis to unit L2 norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ShapeError("l2_normalize: zero-norm vector cannot be normalized")
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------- reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        a = int(a)
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for a {ndim}-D tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, x.data.ndim)
    shape = x.shape
    kept = tuple(1 if i in ax else s for i, s in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=ax), dtype=np.float64), (x,), bw, "sum")


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(axes, x.data.ndim)
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    return scale(reduce_sum(x, ax), 1.0 / count) if count else reduce_sum(x, ax)


def reduce(x: Tensor, kind: str = "sum", axes=None) -> Tensor:
    if kind == "sum":
        return reduce_sum(x, axes)
    if kind == "mean":
        return reduce_mean(x, axes)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    The recorded closures are released afterwards; calling ``backward`` again
    on the same graph raises ``GraphError``.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward; rerun the forward pass")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad=True")
    order = _topo_order(loss)
    for node in order:
        if node._consumed:
            raise GraphError("graph already consumed by a previous backward; rerun the forward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        node._backward = None
        node._parents = ()
        node._consumed = True
