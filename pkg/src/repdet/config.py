"""Run configuration: flat ``key = value`` files merged under CLI flags."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped.

    Values stay strings; the consumer converts them.
    """
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {no}: empty key")
        key = key.replace("-", "_")
        if key in out:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        out[key] = value
    return out


def load_kv(path) -> dict:
    return parse_kv(Path(path).read_text())


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


@dataclass
class RunConfig:
    """Settings shared by the subcommands; each one reads the fields it needs."""

    subcommand: str = ""
    model: Optional[str] = None
    weights: Optional[str] = None
    preset: str = "n"
    num_classes: int = 80
    seed: int = 0
    output: Optional[str] = None
    # losses / sandbox
    cls_kind: str = "vfl"
    reg_kind: str = "giou"
    reg_max: int = 16
    assigner: str = "tal"
    warmup_assigner: str = "none"
    warmup_epochs: int = 0
    steps: int = 2000
    lr: float = 0.5
    grid: int = 8
    stride: int = 8
    num_gts: int = 1
    use_obj: bool = False
    lambda_reg: float = 2.5
    mu_obj: float = 1.0  # only applied when the object branch is enabled
    # quantization
    quant_method: str = "minmax"
    pct: float = 99.99

    @classmethod
    def from_kv(cls, kv: dict, **overrides) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        cfg = cls()
        for k, v in {**kv, **{k: v for k, v in overrides.items() if v is not None}}.items():
            if k not in known:
                raise ConfigError(f"unknown config key {k!r}")
            default = getattr(cfg, k)
            try:
                val = _coerce(v, default) if isinstance(v, str) and default is not None else v
            except ValueError as e:
                raise ConfigError(f"{k}: {e}") from e
            setattr(cfg, k, val)
        return cfg
