"""Flat, versioned run configuration stored verbatim in every run directory."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .numerics import ContractError
from .pcc import PcclConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1
_PCCL_KEYS = {f.name for f in fields(PcclConfig)}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    data_dir: str = "data"
    out_dir: str = "runs/run"
    dataset_seed: int | None = None
    seed: int = 0
    steps: int = 2000
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    ema_decay: float = 0.99
    K: int = 3
    crop_size: int = 32
    use_pl: bool = True
    use_ssd: bool = True
    use_pcc: bool = True
    use_ckaf: bool = True
    fusion_strategy: str = "kan"
    tau: float = 0.1
    alpha: float = 0.5
    lambda_div: float = 0.5
    w_same_region: float = 1.0
    w_diff_region: float = 0.1
    tau_p: float = 0.1
    kan_grid: int = 5
    kan_degree: int = 3
    kan_use_base: bool = True
    tap_level: int = 1
    dtype: str = "float32"
    eval_model: str = "student"
    eval_window: int | None = None  # sliding-window size at evaluation; None -> crop_size

    def train_config(self) -> TrainConfig:
        d = dataclasses.asdict(self)
        pccl = PcclConfig(**{k: d.pop(k) for k in _PCCL_KEYS})
        for k in ("schema_version", "data_dir", "out_dir", "dataset_seed", "eval_model", "eval_window"):
            d.pop(k)
        return TrainConfig(pccl=pccl, **d)

    @property
    def window(self) -> int:
        return self.eval_window if self.eval_window is not None else self.crop_size

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**dataclasses.asdict(self), **changes})


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _check_type(key: str, value: Any, annotation: str) -> Any:
    allow_none = "None" in annotation
    if value is None:
        if allow_none:
            return None
        raise ConfigError(key, "must not be null")
    base = annotation.split("|")[0].strip()
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected boolean, got {type(value).__name__}")
    elif base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected integer, got {type(value).__name__}")
    elif base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected number, got {type(value).__name__}")
        value = float(value)
    elif base == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected string, got {type(value).__name__}")
    return value


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("$", "config must be a JSON object")
    unknown = sorted(set(doc) - set(_TYPES))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r}")
    values = {k: _check_type(k, v, _TYPES[k]) for k, v in doc.items()}
    cfg = RunConfig(**values)
    if cfg.eval_model not in ("student", "teacher"):
        raise ConfigError("eval_model", "must be 'student' or 'teacher'")
    if cfg.eval_window is not None and (cfg.eval_window < 4 or cfg.eval_window % 4):
        raise ConfigError("eval_window", "must be a positive multiple of 4")
    try:
        cfg.train_config()
    except ContractError as exc:
        raise ConfigError(_guess_field(str(exc)), str(exc)) from None
    return cfg


def _guess_field(message: str) -> str:
    for name in _TYPES:
        if message.startswith(name) or f" {name}" in message:
            return name
    return "$"


def load(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    return from_dict(doc)
