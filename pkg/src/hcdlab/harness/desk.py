"""Desk-scale experiment setup: synthetic data, synthetic teacher, method comparison."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from ..hcd import HcdConfig
from ..nn import SgdConfig
from ..teacher import synth_teacher
from .config import ExperimentConfig
from .data import gen_dataset
from .train import train

DATA_SEED = 11
TEST_SEED = 12
TEACHER_SEED = 13


def prepare(workdir, kind: str = "bars", n_train: int = 2500, n_test: int = 500, k: int = 10,
            image: tuple[int, int, int] = (1, 16, 16), quality: float = 0.95, d: int = 32,
            data_seed: int = DATA_SEED, teacher_seed: int = TEACHER_SEED) -> ExperimentConfig:
    """Write train/test datasets and a teacher dump; return a config pointing at them."""
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    c, h, w = image
    train_ds = gen_dataset(kind, n_train, k, c, h, w, seed=data_seed, path=work / "train.hcdx")
    gen_dataset(kind, n_test, k, c, h, w, seed=data_seed + (TEST_SEED - DATA_SEED) * 1000, path=work / "test.hcdx")
    synth_teacher(train_ds, quality, d, seed=teacher_seed, path=work / "teacher.hcdt")
    cfg = ExperimentConfig(hcd=HcdConfig(d=d), sgd=SgdConfig(), train_data=str(work / "train.hcdx"),
                           test_data=str(work / "test.hcdx"), teacher=str(work / "teacher.hcdt"),
                           out_dir=str(work / "runs"))
    (work / "config.json").write_text(cfg.to_json() + "\n")
    return cfg


def compare(cfg: ExperimentConfig, methods: Sequence[str] = ("ce", "kd", "hcd"),
            seeds: Sequence[int] = (0, 1, 2), out_dir=None) -> dict[str, list[float]]:
    """Final test accuracy per method and seed; also written to ``compare.csv``."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    results: dict[str, list[float]] = {m: [] for m in methods}
    lines = []
    for m in methods:
        for s in seeds:
            res = train(replace(cfg, method=m, seed=s), out / m / f"seed={s}")
            acc = res.rows[-1].test_acc
            results[m].append(acc)
            lines.append((m, s, acc, sum(r.sec for r in res.rows) / len(res.rows)))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "seed", "final_test_acc", "s_per_epoch"))
        for m, s, acc, sec in lines:
            w.writerow((m, s, repr(acc), f"{sec:.3f}"))
    return results
