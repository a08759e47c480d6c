"""Heterogeneous complementary distillation losses.

Pipeline per batch: every selected student stage goes through its own CFM
head together with the teacher's penultimate features, the resulting shared
logits are split into ``n`` sub-logits, each is fused with the teacher
logits, and the fused sub-logits feed a KL term towards the student, a
cross-entropy term, and (after masking the label position) a thresholded
orthogonality penalty.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import AffineMap, ConvBlock, Module, init_params
from .tensor import Tensor

FUSION_MODES = ("add", "ratio", "weighted", "none")


@dataclass
class HcdConfig:
    n: int = 4
    tau: float = 4.0
    theta: float = 0.5
    eps_mask: float = 1e-6
    lam: float = 1.0  # weight of the student/teacher KL term
    beta: float = 8.0  # weight of the sub-logit KL term
    omega: float = 10.0  # weight of the orthogonality term
    alpha: float = 0.5  # CE/KL balance of the vanilla KD baseline
    stages: tuple[int, ...] = (1, 2, 3, 4)
    num_stages: int = 4
    m: int = 16
    d: int = 32
    fusion: str = "add"
    # (lambda1, lambda2) for "ratio", (lambda3, lambda4) for "weighted"
    fusion_weights: tuple[float, float] = (1.0, 1.0)
    tau_squared: bool = True
    detach_student_sub_kl: bool = False

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.fusion_weights = tuple(float(w) for w in self.fusion_weights)
        self.validate()

    def validate(self) -> None:
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if not self.eps_mask > 0:
            raise ConfigError(f"eps_mask must be > 0, got {self.eps_mask}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("lam", "beta", "omega"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.stages:
            raise ConfigError("stages must be non-empty")
        if len(set(self.stages)) != len(self.stages) or any(not 1 <= s <= self.num_stages for s in self.stages):
            raise ConfigError(f"stages must be distinct values in 1..{self.num_stages}, got {self.stages}")
        if self.m < 1 or self.d < 1:
            raise ConfigError(f"m and d must be positive, got m={self.m}, d={self.d}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if len(self.fusion_weights) != 2:
            raise ConfigError(f"fusion_weights needs two values, got {self.fusion_weights}")
        w1, w2 = self.fusion_weights
        if self.fusion == "ratio" and abs(w1 + w2 - 1.0) > 1e-12:
            raise ConfigError(f"ratio fusion needs lambda1 + lambda2 = 1, got {w1} + {w2}")
        if self.fusion == "weighted" and w1 != w2:
            raise ConfigError(f"weighted fusion needs lambda3 == lambda4, got {w1} and {w2}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stages"] = list(self.stages)
        out["fusion_weights"] = list(self.fusion_weights)
        return out


# ---------------------------------------------------------------- CFM


class CfmHead(Module):
    """Two conv blocks, global pool, concat with teacher features, two affine maps."""

    def __init__(self, c_in: int, m: int, d: int, n: int, k: int, seed: int = 0):
        self.m, self.d, self.n, self.k = m, d, n, k
        self.conv1 = ConvBlock(c_in, m)
        self.conv2 = ConvBlock(m, m)
        self.fc1 = AffineMap(d + m, d)
        self.fc2 = AffineMap(d, n * k)
        init_params(self, seed)

    def __call__(self, stage_feat: Tensor, teacher_feat: Tensor, training: bool = True) -> Tensor:
        return cfm_forward(stage_feat, teacher_feat, self, training)


def cfm_forward(stage_feat: Tensor, teacher_feat: Tensor, head: CfmHead, training: bool = True) -> Tensor:
    """Shared logits ``[B, n*K]`` for one student stage."""
    if teacher_feat.data.ndim != 2 or teacher_feat.shape[1] != head.d:
        raise ShapeError(f"teacher features must be [B, {head.d}], got {teacher_feat.shape}")
    if stage_feat.shape[0] != teacher_feat.shape[0]:
        raise ShapeError(f"batch mismatch: stage {stage_feat.shape} vs teacher {teacher_feat.shape}")
    h = head.conv2(head.conv1(stage_feat, training), training)
    f_s = T.adaptive_avg_pool(h)
    f_cat = T.concat_features(f_s, teacher_feat.detach())
    return head.fc2(T.relu(head.fc1(f_cat)))


def make_heads(cfg: HcdConfig, stage_channels: Sequence[int], k: int, seed: int) -> dict[int, CfmHead]:
    """One independent head per selected stage (1-based stage ids)."""
    return {s: CfmHead(stage_channels[s - 1], cfg.m, cfg.d, cfg.n, k, seed=seed * 1009 + s)
            for s in cfg.stages}


# ---------------------------------------------------------------- sub-logits


def decompose(z: Tensor, n: int, k: int) -> list[Tensor]:
    if z.data.ndim != 2 or z.shape[1] != n * k:
        raise ShapeError(f"cannot split width {z.shape[-1]} into n={n} sub-logits of K={k}")
    if n == 1:
        return [z]
    return [T.slice_cols(z, j * k, (j + 1) * k) for j in range(n)]


def fuse_teacher(z_sub: Tensor, z_t: Tensor, mode: str = "add",
                 weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    if z_sub.shape != z_t.shape:
        raise ShapeError(f"fuse: sub-logit {z_sub.shape} vs teacher logits {z_t.shape}")
    w1, w2 = weights
    z_t = z_t.detach()
    if mode == "add":
        return T.add(z_sub, z_t)
    if mode == "ratio":
        if abs(w1 + w2 - 1.0) > 1e-12:
            raise ConfigError(f"ratio fusion needs lambda1 + lambda2 = 1, got {w1} + {w2}")
        return T.add(T.scale(z_sub, w1), T.scale(z_t, w2))
    if mode == "weighted":
        if w1 != w2:
            raise ConfigError(f"weighted fusion needs lambda3 == lambda4, got {w1} and {w2}")
        if w1 == 1.0:
            return T.add(z_sub, z_t)
        return T.add(T.scale(z_sub, w1), T.scale(z_t, w2))
    if mode == "none":
        return z_sub
    raise ConfigError(f"unknown fusion mode {mode!r}")


def mask_ground_truth(z: Tensor, labels: np.ndarray, eps_mask: float = 1e-6) -> Tensor:
    """Copy of ``z`` with the label position set to ``-eps_mask``.

    ``z`` is ``[B, K]`` or ``[B, n, K]``; the label index applies along the last axis.
    """
    labels = np.asarray(labels)
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels {labels.shape} do not match batch of {z.shape}")
    m = np.zeros(z.shape)
    m[np.arange(z.shape[0]), ..., labels] = 1.0
    return T.sub(T.mul(z, Tensor(1.0 - m)), Tensor(eps_mask * m))


# ---------------------------------------------------------------- losses


def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return np.eye(k)[labels]


def cross_entropy(z: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of ``-log softmax(z)[y]``."""
    B, K = z.shape
    oh = Tensor(_onehot(labels, K))
    picked = T.reduce_sum(T.mul(T.log_softmax_t(z, 1.0), oh))
    return T.scale(picked, -1.0 / B)


def kl_div(target_logits: Tensor, logits: Tensor, tau: float) -> Tensor:
    """Batch-mean KL(softmax(target/tau) || softmax(logits/tau))."""
    if target_logits.shape != logits.shape:
        raise ShapeError(f"kl_div: {target_logits.shape} vs {logits.shape}")
    p = T.softmax_t(target_logits, tau)
    diff = T.sub(T.log_softmax_t(target_logits, tau), T.log_softmax_t(logits, tau))
    return T.scale(T.reduce_sum(T.mul(p, diff)), 1.0 / logits.shape[0])


def vanilla_kd_loss(z_s: Tensor, z_t: Tensor, labels: np.ndarray, alpha: float, tau: float,
                    tau_squared: bool = True) -> Tensor:
    """alpha * CE + (1 - alpha) * tau^2 * KL(p_t || p_s)."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    t2 = tau * tau if tau_squared else 1.0
    ce = cross_entropy(z_s, labels)
    kl = kl_div(z_t.detach(), z_s, tau)
    return T.add(T.scale(ce, alpha), T.scale(kl, (1.0 - alpha) * t2))


def sub_kd_loss(sub_logits: Sequence[Sequence[Tensor]], z_s: Tensor, tau: float,
                tau_squared: bool = True) -> Tensor:
    """Mean over stages and sub-logits of KL(p_sub || p_s), times tau^2."""
    terms = [kl_div(z, z_s, tau) for stage in sub_logits for z in stage]
    if not terms:
        raise ShapeError("sub_kd_loss needs at least one sub-logit")
    t2 = tau * tau if tau_squared else 1.0
    return T.scale(_sum(terms), t2 / len(terms))


def sub_ce_loss(sub_logits: Sequence[Sequence[Tensor]], labels: np.ndarray) -> Tensor:
    terms = [cross_entropy(z, labels) for stage in sub_logits for z in stage]
    if not terms:
        raise ShapeError("sub_ce_loss needs at least one sub-logit")
    return T.scale(_sum(terms), 1.0 / len(terms))


def orth_loss(masked: Sequence[Tensor], theta: float = 0.5) -> Tensor:
    """Thresholded squared cosine similarity between distinct sub-logits.

    ``masked`` holds one ``[B, n, K]`` tensor per stage.  The result is the mean
    over stages, ordered pairs ``p != q`` and the batch of ``max(0, A_pq - theta)^2``.
    """
    if not masked:
        raise ShapeError("orth_loss needs at least one stage")
    B, n, _ = masked[0].shape
    if n == 1:
        return Tensor(0.0)
    off = np.broadcast_to(1.0 - np.eye(n), (B, n, n)).copy()
    off_t = Tensor(off)
    parts = []
    for z in masked:
        if z.shape[:2] != (B, n):
            raise ShapeError(f"orth_loss: stage tensor {z.shape} does not match [B={B}, n={n}, K]")
        cos = T.gram(T.l2_normalize(z))
        r = T.max_with_scalar(cos, theta)
        parts.append(T.reduce_sum(T.mul(T.mul(r, r), off_t)))
    return T.scale(_sum(parts), 1.0 / (len(masked) * n * (n - 1) * B))


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


# ---------------------------------------------------------------- total objective


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float = 0.0
    sub_ce: float = 0.0
    kl: float = 0.0
    sub_kl: float = 0.0
    orth: float = 0.0
    terms: dict = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {"ce": self.ce, "sub_ce": self.sub_ce, "kl": self.kl, "sub_kl": self.sub_kl,
                "orth": self.orth, "total": self.total.item()}


def shared_sub_logits(stage_feats: Sequence[Tensor], f_t: Tensor, z_t: Tensor,
                      heads: dict[int, CfmHead], cfg: HcdConfig, training: bool = True) -> list[list[Tensor]]:
    """Fused sub-logits per selected stage: CFM -> decompose -> fuse."""
    k = z_t.shape[1]
    out = []
    for s in cfg.stages:
        z_i = cfm_forward(stage_feats[s - 1], f_t, heads[s], training)
        out.append([fuse_teacher(z, z_t, cfg.fusion, cfg.fusion_weights) for z in decompose(z_i, cfg.n, k)])
    return out


def hcd_total_loss(z_s: Tensor, stage_feats: Sequence[Tensor], f_t: Tensor, z_t: Tensor,
                   labels: np.ndarray, heads: dict[int, CfmHead], cfg: HcdConfig,
                   training: bool = True) -> LossBreakdown:
    """CE + sub-CE + lam*tau^2*KL + beta*sub-KL + omega*orth, with a per-term breakdown.

    Terms whose weight is zero are neither computed nor added and report 0.
    """
    cfg.validate()
    if len(stage_feats) < max(cfg.stages):
        raise ConfigError(f"config selects stage {max(cfg.stages)} but the student exposes {len(stage_feats)}")
    if f_t.shape[1] != cfg.d:
        raise ConfigError(f"teacher feature width {f_t.shape[1]} != config d={cfg.d}")
    t2 = cfg.tau ** 2 if cfg.tau_squared else 1.0
    f_t, z_t = f_t.detach(), z_t.detach()

    ce = cross_entropy(z_s, labels)
    terms: dict[str, Tensor] = {"ce": ce}
    total = ce
    if cfg.lam:
        kl = T.scale(kl_div(z_t, z_s, cfg.tau), t2)
        terms["kl"] = kl
        total = T.add(total, T.scale(kl, cfg.lam))

    subs = shared_sub_logits(stage_feats, f_t, z_t, heads, cfg, training)
    sub_ce = sub_ce_loss(subs, labels)
    terms["sub_ce"] = sub_ce
    total = T.add(total, sub_ce)
    if cfg.beta:
        target = z_s.detach() if cfg.detach_student_sub_kl else z_s
        sub_kl = sub_kd_loss(subs, target, cfg.tau, cfg.tau_squared)
        terms["sub_kl"] = sub_kl
        total = T.add(total, T.scale(sub_kl, cfg.beta))
    if cfg.omega and cfg.n > 1:
        B, k = z_s.shape
        masked = [mask_ground_truth(T.reshape(T.concat(stage), (B, cfg.n, k)), labels, cfg.eps_mask)
                  for stage in subs]
        orth = orth_loss(masked, cfg.theta)
        terms["orth"] = orth
        total = T.add(total, T.scale(orth, cfg.omega))

    vals = {name: t.item() for name, t in terms.items()}
    return LossBreakdown(total, vals.get("ce", 0.0), vals.get("sub_ce", 0.0), vals.get("kl", 0.0),
                         vals.get("sub_kl", 0.0), vals.get("orth", 0.0), terms)
