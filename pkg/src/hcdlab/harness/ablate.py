"""Ablation sweeps: one training run per (value, seed) cell, summarized to CSV."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from ..errors import ConfigError
from .config import ExperimentConfig
from .train import train

AXES = ("n", "losses", "stages", "fusion")
ABLATION_COLUMNS = ("axis", "value", "seed", "final_test_acc", "s_per_epoch")

DEFAULT_VALUES = {
    "n": ("1", "2", "4", "6", "8"),
    "losses": ("kd", "kd+sub", "kd+sub+orth"),
    "stages": ("1", "1+2", "1+2+3", "1+2+3+4"),
    "fusion": ("ratio:0.25", "ratio:0.5", "ratio:0.75", "weighted:0.5", "weighted:1.0", "weighted:1.5", "none"),
}


def apply_axis(cfg: ExperimentConfig, axis: str, value: str) -> ExperimentConfig:
    """Return a copy of ``cfg`` with one ablation setting applied (method forced to hcd)."""
    h = cfg.hcd
    value = str(value).strip()
    try:
        if axis == "n":
            h = replace(h, n=int(value))
        elif axis == "losses":
            # CE and sub-CE stay on; the value lists which weighted terms are switched on
            parts = set() if value in ("none", "") else set(value.split("+"))
            unknown = parts - {"kd", "sub", "orth"}
            if unknown:
                raise ConfigError(f"unknown loss term(s) {sorted(unknown)} in {value!r}")
            h = replace(h, lam=h.lam if "kd" in parts else 0.0,
                        beta=h.beta if "sub" in parts else 0.0,
                        omega=h.omega if "orth" in parts else 0.0)
        elif axis == "stages":
            h = replace(h, stages=tuple(int(s) for s in value.split("+")))
        elif axis == "fusion":
            mode, _, arg = value.partition(":")
            if mode in ("add", "none"):
                h = replace(h, fusion=mode, fusion_weights=(1.0, 1.0))
            elif mode == "ratio":
                w = float(arg)
                h = replace(h, fusion="ratio", fusion_weights=(w, 1.0 - w))
            elif mode == "weighted":
                w = float(arg)
                h = replace(h, fusion="weighted", fusion_weights=(w, w))
            else:
                raise ConfigError(f"unknown fusion value {value!r}")
        else:
            raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value {value!r} for axis {axis!r}: {exc}") from None
    return replace(cfg, method="hcd", hcd=h)


def _cell_dir(out: Path, axis: str, value: str, seed: int) -> Path:
    safe = value.replace(":", "_").replace("+", "-")
    return out / f"{axis}={safe}" / f"seed={seed}"


def _run_cell(args) -> dict:
    cfg, axis, value, seed, out = args
    cell = replace(apply_axis(cfg, axis, value), seed=seed)
    res = train(cell, _cell_dir(Path(out), axis, value, seed))
    secs = [r.sec for r in res.rows]
    return {"axis": axis, "value": value, "seed": seed,
            "final_test_acc": res.rows[-1].test_acc,
            "s_per_epoch": sum(secs) / len(secs)}


def worker_count(cells: int) -> int:
    env = os.environ.get("HCD_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(cap, cells))


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r["axis"], r["value"], r["seed"], repr(float(r["final_test_acc"])), f"{r['s_per_epoch']:.3f}"])
    return buf.getvalue()


def ablate(cfg: ExperimentConfig, axis: str, values: Sequence[str] | None = None,
           seeds: Sequence[int] = (0,), out_dir=None, workers: int | None = None) -> Path:
    """Train every (value, seed) cell and write ``ablation_<axis>.csv`` under ``out_dir``."""
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    values = [str(v) for v in (values or DEFAULT_VALUES[axis])]
    for v in values:
        apply_axis(cfg, axis, v)  # fail fast on bad values
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, axis, v, int(s), str(out)) for v in values for s in seeds]
    workers = worker_count(len(jobs)) if workers is None else max(1, workers)
    if workers == 1:
        rows = [_run_cell(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, jobs))
    path = out / f"ablation_{axis}.csv"
    path.write_text(ablation_csv(rows))
    return path
