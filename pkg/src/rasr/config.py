"""Run configuration: hyperparameters, dimensions, backend selection.

The flat key=value config-file format mirrors the field names here; CLI
flags override file values.  ``lambda2`` is a reserved slot with no
consumer in the objective.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass
class TrainConfig:
    # optimizer
    lr: float = 2e-5
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    warmup_epochs: int = 5
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # objective
    lambda_align: float = 0.1
    lambda2: float = 0.0  # reserved, unused
    tau: float = 0.07
    theta: float = 0.75
    # retrieval / mining
    k_intra: int = 4
    k_cross: int = 4
    hard_negatives: int = 4
    alpha_logits: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # dimensions
    d_v: int = 768
    d_t: int = 768
    d_a: int = 128
    d_s: int = 512
    d_p: int = 384
    d_h: int = 512
    d_align: int = 256
    d_attn: int = 256
    d_c: int = 256
    s_tokens: int = 8
    # run identity
    seed: int = 0
    # backends
    reasoning_backend: str = "stub"
    embed_backend: str = "stub"
    chat_model: str = "default"
    embed_model: str = "default-embed"
    temperature: float = 0.2
    top_p: float = 0.9
    max_tokens: int = 256
    r_max: int = 2
    max_workers: int = 4
    ref_char_budget: int = 240

    def validate(self) -> None:
        positive = (
            "lr", "batch_size", "epochs", "tau", "d_v", "d_t", "d_a", "d_s",
            "d_p", "d_h", "d_align", "d_attn", "d_c", "s_tokens",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        nonneg = (
            "weight_decay", "warmup_epochs", "min_lr", "lambda_align", "k_intra",
            "k_cross", "hard_negatives", "r_max",
        )
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not (-1.0 <= self.theta <= 1.0):
            raise ConfigError(f"theta must lie in [-1, 1], got {self.theta}")
        for m, d in (("d_v", self.d_v), ("d_t", self.d_t), ("d_a", self.d_a)):
            if d % self.s_tokens != 0:
                raise ConfigError(f"{m}={d} is not divisible by s_tokens={self.s_tokens}")
        if self.reasoning_backend not in ("stub", "http"):
            raise ConfigError(f"unknown reasoning backend {self.reasoning_backend!r}")
        if self.embed_backend not in ("stub", "http"):
            raise ConfigError(f"unknown embed backend {self.embed_backend!r}")

    @classmethod
    def small(cls, **overrides) -> "TrainConfig":
        """Desk-scale profile matching the synthetic generator's dims."""
        base = dict(
            d_v=32, d_t=32, d_a=16,
            d_s=24, d_p=48, d_h=32, d_align=24, d_attn=24, d_c=24,
            s_tokens=4,
            lr=3e-3, epochs=15, warmup_epochs=2, batch_size=32,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["alpha_logits"] = list(self.alpha_logits)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "alpha_logits" in data:
            data = dict(data)
            data["alpha_logits"] = tuple(float(x) for x in data["alpha_logits"])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def with_overrides(self, **overrides) -> "TrainConfig":
        cfg = replace(self, **overrides)
        cfg.validate()
        return cfg


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    if key == "alpha_logits":
        return tuple(float(x) for x in raw.split(","))
    if ftype in ("int", int):
        return int(raw)
    if ftype in ("float", float):
        return float(raw)
    return raw


def parse_config_file(path: str | Path) -> dict:
    """Read the flat key = value format; '#' starts a comment."""
    out: dict = {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path.name} line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path.name} line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, raw)
        except ValueError:
            raise ConfigError(f"{path.name} line {lineno}: bad value for {key!r}") from None
    return out


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    """defaults < file < overrides."""
    data: dict = {}
    if path is not None:
        data.update(parse_config_file(path))
    if overrides:
        data.update(overrides)
    return TrainConfig.from_dict(data)
