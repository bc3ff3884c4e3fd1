"""Training configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

SEED_ENV = "NEXTSCALE_SEED"


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


@dataclass
class TrainConfig:
    stage: str = "tokenizer"
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.95
    beta2: float = 0.95
    weight_decay: float = 0.05
    cond_dropout: float = 0.10
    seed: int = dataclasses.field(default_factory=default_seed)

    def __post_init__(self):
        if self.stage not in ("tokenizer", "transformer"):
            raise ValueError(f"stage must be 'tokenizer' or 'transformer', got {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")


def _coerce(text: str, kind):
    if kind in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` per line; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def build_configs(raw: dict[str, str], *model_classes):
    """Split raw keys between TrainConfig and the given model config classes.

    Returns (TrainConfig, [model-config kwargs per class]). Unknown keys raise.
    """
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    model_fields = [{f.name: f.type for f in dataclasses.fields(c)} for c in model_classes]
    train_kwargs: dict = {}
    model_kwargs: list[dict] = [{} for _ in model_classes]
    for key, val in raw.items():
        placed = False
        if key in train_fields:
            train_kwargs[key] = _coerce(val, train_fields[key])
            placed = True
        for fields, kw in zip(model_fields, model_kwargs):
            if key in fields and key != "schedule":
                kw[key] = _coerce(val, fields[key])
                placed = True
        if key == "schedule":
            sched = tuple(tuple(int(v) for v in part.split("x")) for part in val.split(","))
            for fields, kw in zip(model_fields, model_kwargs):
                if "schedule" in fields:
                    kw["schedule"] = sched
            placed = True
        if not placed:
            raise KeyError(f"unknown config key {key!r}")
    return TrainConfig(**train_kwargs), model_kwargs


def load_config_file(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text()) if path else {}
