"""Experiment configuration: JSON round-trip and invariant checks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..errors import ConfigError
from ..hcd import HcdConfig
from ..nn import SgdConfig

METHODS = ("ce", "kd", "hcd")


@dataclass
class ExperimentConfig:
    method: str = "hcd"
    hcd: HcdConfig = field(default_factory=HcdConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    train_data: str = ""
    test_data: str = ""
    teacher: str = ""
    seed: int = 0
    out_dir: str = "runs"
    channels: tuple[int, ...] = (16, 32, 64, 64)
    timing: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.hcd.num_stages != len(self.channels):
            self.hcd = replace(self.hcd, num_stages=len(self.channels))

    def validate_paths(self) -> None:
        if not self.train_data:
            raise ConfigError("train_data path is required")
        if self.method in ("kd", "hcd") and not self.teacher:
            raise ConfigError(f"method {self.method!r} requires a teacher dump")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hcd"] = self.hcd.to_dict()
        out["sgd"]["lr_decay_epochs"] = list(self.sgd.lr_decay_epochs)
        out["channels"] = list(self.channels)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        _reject_unknown(raw, cls, "experiment")
        hcd = raw.pop("hcd", {}) or {}
        sgd = raw.pop("sgd", {}) or {}
        if "lambda" in hcd:
            hcd = dict(hcd)
            hcd["lam"] = hcd.pop("lambda")
        _reject_unknown(hcd, HcdConfig, "hcd")
        _reject_unknown(sgd, SgdConfig, "sgd")
        try:
            return cls(hcd=HcdConfig(**hcd), sgd=SgdConfig(**sgd), **raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top-level JSON value must be an object")
        return cls.from_dict(raw)


def _reject_unknown(raw: dict, cls, where: str) -> None:
    known = {f.name for f in fields(cls)}
    if where == "experiment":
        known |= {"hcd", "sgd"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {where} config keys: {sorted(unknown)}")
