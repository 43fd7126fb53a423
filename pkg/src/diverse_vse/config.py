"""Run configuration and its flat ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ContractError


@dataclass
class RunConfig:
    k: int = 3  # attention heads per stream
    hidden: int = 512  # shared embedding size H
    d_w: int = 300  # word embedding width
    max_len: int = 100
    max_objects: int = 36
    alpha: float = 0.2  # ranking margin
    alpha_d: float = 0.1  # diversity margin
    beta: float = 1.0  # diversity weight
    gamma: float = 0.6  # weight of the language-language ranking term
    batch: int = 128
    epochs: int = 20
    lr: float = 2e-4
    lr_after: float = 2e-5
    lr_switch_epoch: int = 15
    weight_decay: float = 1e-6
    decoupled_weight_decay: bool = False
    clip_norm: float = 2.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    diversity_mode: str = "intent"
    freeze_embeddings: bool = False
    min_count: int = 1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("alpha", "alpha_d"):
            if not 0 < getattr(self, name) < 2:
                raise ContractError(f"{name} must lie in (0, 2), got {getattr(self, name)}")
        if self.batch < 2:
            raise ContractError("batch must be >= 2")
        if self.hidden % 2:
            raise ContractError(f"hidden must be even, got {self.hidden}")
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.diversity_mode not in ("intent", "literal"):
            raise ContractError(f"diversity_mode must be 'intent' or 'literal', got {self.diversity_mode!r}")
        if self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")

    def lr_at(self, epoch):
        return self.lr if epoch < self.lr_switch_epoch else self.lr_after

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n".replace("'", "")
                       for f in dataclasses.fields(self))

    @classmethod
    def keys(cls):
        return [f.name for f in dataclasses.fields(cls)]


def _coerce(name, kind, raw):
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ContractError(f"bad value for {name}: {raw!r}") from None


def parse_assignments(lines):
    """``key = value`` lines (``#`` comments allowed) to a raw dict."""
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_dict(values, base=None):
    """Apply string or typed overrides to ``base``; unknown keys are rejected."""
    base = base or RunConfig()
    kinds = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    changes = {}
    for key, value in values.items():
        if key not in kinds:
            raise ContractError(f"unknown config key: {key}")
        changes[key] = _coerce(key, kinds[key], value) if isinstance(value, str) else value
    return base.replace(**changes)


def config_from_text(text, base=None):
    return config_from_dict(parse_assignments(text.splitlines()), base)
