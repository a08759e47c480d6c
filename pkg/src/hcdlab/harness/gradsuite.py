"""Finite-difference check of the full HCD objective on a small batch."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .. import hcd as H
from ..gradcheck import GradCheckReport, grad_check
from ..nn import StudentNet
from ..tensor import Tensor


@dataclass
class SuiteResult:
    report: GradCheckReport
    names: list[str]
    seconds: float

    def worst_name(self) -> str:
        if self.report.worst is None:
            return "-"
        idx, coord = self.report.worst
        return f"{self.names[idx]}[{coord}]"


def sample_coords(sizes: list[int], total: int, rng: np.random.Generator) -> list[list[int]]:
    """At least ``total`` flat indices spread over tensors proportionally, >= 2 per tensor."""
    grand = sum(sizes)
    out = []
    for n in sizes:
        want = min(n, max(2, int(np.ceil(total * n / grand))))
        out.append(sorted(rng.choice(n, size=want, replace=False).tolist()))
    return out


def build_problem(batch: int = 4, k: int = 10, n: int = 4, m: int = 8, d: int = 32, seed: int = 0,
                  cfg: H.HcdConfig | None = None):
    """Student, CFM heads and a random batch wired into a closure returning L_HCD."""
    rng = np.random.default_rng(seed)
    cfg = cfg or H.HcdConfig(n=n, m=m, d=d)
    student = StudentNet((1, 16, 16), k, seed=seed)
    heads = H.make_heads(cfg, student.channels, k, seed=seed + 1)
    x = rng.normal(size=(batch, 1, 16, 16))
    y = np.arange(batch) % k
    f_t = rng.normal(size=(batch, d))
    z_t = 3.0 * rng.normal(size=(batch, k))

    xt, ft, zt = Tensor(x), Tensor(f_t), Tensor(z_t)

    def loss():
        z_s, feats = student.forward(xt, training=True)
        return H.hcd_total_loss(z_s, feats, ft, zt, y, heads, cfg).total

    named = list(student.named_parameters())
    for s, head in heads.items():
        named += list(head.named_parameters(f"cfm.{s}."))
    return loss, named, (xt, ft, zt)


def run_suite(batch: int = 4, coords: int = 500, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
              **kw) -> SuiteResult:
    loss, named, _ = build_problem(batch=batch, seed=seed, **kw)
    names = [n for n, _ in named]
    params = [p for _, p in named]
    picks = sample_coords([p.size for p in params], coords, np.random.default_rng(seed + 99))
    t0 = time.perf_counter()
    report = grad_check(loss, params, h=h, tol=tol, coords=picks)
    return SuiteResult(report, names, time.perf_counter() - t0)
