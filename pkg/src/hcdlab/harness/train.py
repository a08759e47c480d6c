"""Training loop, evaluation and the metrics CSV."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import hcd as H
from ..errors import ConfigError, NonFiniteLossError
from ..nn import SGD, StudentNet, load_checkpoint, save_checkpoint, student_state
from ..teacher import TeacherDump, read_dump
from ..tensor import Tensor
from .config import ExperimentConfig
from .data import Dataset, read_dataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "ce", "sub_ce", "kl", "sub_kl", "orth", "total",
                  "train_acc", "test_acc", "sec", "seed")
LOSS_TERMS = ("ce", "sub_ce", "kl", "sub_kl", "orth", "total")
# Offsets keep shuffling, student init and head init on independent streams.
SHUFFLE_STREAM = 7919
HEAD_STREAM = 104729


@dataclass
class MetricsRow:
    epoch: int
    ce: float
    sub_ce: float
    kl: float
    sub_kl: float
    orth: float
    total: float
    train_acc: float
    test_acc: float
    sec: float
    seed: int

    def __post_init__(self):
        for name in ("train_acc", "test_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    def cells(self) -> list[str]:
        return [str(self.epoch), *(repr(float(getattr(self, t))) for t in LOSS_TERMS),
                repr(float(self.train_acc)), repr(float(self.test_acc)), f"{self.sec:.3f}", str(self.seed)]


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    student: StudentNet
    metrics_path: Path
    checkpoint_path: Path


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy in percent; ties go to the lowest class index."""
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels) * 100.0)


def predict_logits(student: StudentNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, images.shape[0], batch_size):
        logits, _ = student.forward(Tensor(images[i:i + batch_size]), training=False)
        out.append(logits.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, student.num_classes))


def evaluate(checkpoint, dataset: Dataset | str) -> float:
    """Top-1 accuracy (percent) of a student checkpoint path or model on a dataset."""
    if isinstance(dataset, (str, Path)):
        dataset = read_dataset(dataset)
    student = checkpoint if isinstance(checkpoint, StudentNet) else StudentNet.from_state(load_checkpoint(checkpoint))
    if dataset.image_shape != student.in_shape:
        raise ConfigError(f"dataset images {dataset.image_shape} do not match student input {student.in_shape}")
    return accuracy(predict_logits(student, dataset.images), dataset.labels)


def method_loss(method: str, cfg: ExperimentConfig, z_s: Tensor, feats, f_t, z_t, labels, heads) -> H.LossBreakdown:
    if method == "ce":
        ce = H.cross_entropy(z_s, labels)
        return H.LossBreakdown(ce, ce=ce.item(), terms={"ce": ce})
    if method == "kd":
        h = cfg.hcd
        t2 = h.tau ** 2 if h.tau_squared else 1.0
        ce = H.cross_entropy(z_s, labels)
        kl = H.kl_div(z_t, z_s, h.tau) * t2
        total = ce * h.alpha + kl * (1.0 - h.alpha)
        return H.LossBreakdown(total, ce=ce.item(), kl=kl.item(), terms={"ce": ce, "kl": kl})
    return H.hcd_total_loss(z_s, feats, f_t, z_t, labels, heads, cfg.hcd)


def _load_inputs(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None, TeacherDump | None]:
    cfg.validate_paths()
    train_ds = read_dataset(cfg.train_data)
    test_ds = read_dataset(cfg.test_data) if cfg.test_data else None
    if test_ds is not None and (test_ds.image_shape != train_ds.image_shape or test_ds.num_classes != train_ds.num_classes):
        raise ConfigError("train and test datasets disagree on image shape or class count")
    dump = None
    if cfg.method in ("kd", "hcd"):
        dump = read_dump(cfg.teacher, expect_d=cfg.hcd.d if cfg.method == "hcd" else None,
                         expect_k=train_ds.num_classes, expect_n=len(train_ds))
    return train_ds, test_ds, dump


def _check_finite(bd: H.LossBreakdown, epoch: int, step: int) -> None:
    for name in ("ce", "kl", "sub_ce", "sub_kl", "orth"):
        if name in bd.terms and not math.isfinite(bd.terms[name].item()):
            raise NonFiniteLossError(f"non-finite loss term {name!r} at epoch {epoch}, step {step}")
    if not math.isfinite(bd.total.item()):
        raise NonFiniteLossError(f"non-finite total loss at epoch {epoch}, step {step}")


def train(cfg: ExperimentConfig, out_dir=None) -> TrainResult:
    """Run one experiment; writes ``metrics.csv``, ``student.hcdp`` and ``config.json``."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    train_ds, test_ds, dump = _load_inputs(cfg)
    K = train_ds.num_classes
    student = StudentNet(train_ds.image_shape, K, cfg.channels, seed=cfg.seed)
    heads = {}
    named = list(student.named_parameters())
    if cfg.method == "hcd":
        heads = H.make_heads(cfg.hcd, cfg.channels, K, seed=cfg.seed + HEAD_STREAM)
        for s, head in heads.items():
            named += list(head.named_parameters(f"cfm.{s}."))
    opt = SGD(named, cfg.sgd)
    rng = np.random.default_rng(cfg.seed + SHUFFLE_STREAM)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    metrics_path = out / "metrics.csv"
    rows: list[MetricsRow] = []
    N, bs = len(train_ds), cfg.sgd.batch_size
    for epoch in range(cfg.sgd.epochs):
        t0 = time.perf_counter()
        opt.lr = cfg.sgd.lr_at(epoch)
        perm = rng.permutation(N)
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        seen = correct = 0
        for step, start in enumerate(range(0, N, bs)):
            idx = perm[start:start + bs]
            if idx.size < 2:
                continue
            x = Tensor(train_ds.images[idx])
            y = train_ds.labels[idx]
            f_t = z_t = None
            if dump is not None:
                f_t, z_t = dump.rows(idx)
            z_s, feats = student.forward(x, training=True)
            bd = method_loss(cfg.method, cfg, z_s, feats, f_t, z_t, y, heads)
            _check_finite(bd, epoch, step)
            bd.total.backward()
            opt.step()
            for k, v in bd.as_row().items():
                sums[k] += v * idx.size
            seen += idx.size
            correct += int(np.sum(np.argmax(z_s.data, axis=1) == y))
        test_acc = accuracy(predict_logits(student, test_ds.images), test_ds.labels) if test_ds else 0.0
        sec = time.perf_counter() - t0 if cfg.timing else 0.0
        row = MetricsRow(epoch + 1, *(sums[k] / seen for k in LOSS_TERMS),
                         train_acc=100.0 * correct / seen, test_acc=test_acc, sec=sec, seed=cfg.seed)
        rows.append(row)
        metrics_path.write_text(metrics_csv(rows))
        log.info("epoch %d total=%.4f train=%.2f test=%.2f", row.epoch, row.total, row.train_acc, row.test_acc)
    ckpt = out / "student.hcdp"
    save_checkpoint(ckpt, student_state(student))
    return TrainResult(rows, student, metrics_path, ckpt)
