"""Run configuration: flat ``key = value`` files, validated and echoed beside outputs."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping


def _default_seed() -> int:
    return int(os.environ.get("MCRNET_SEED", "0"))


@dataclass
class RunConfig:
    # model
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 128
    dropout: float = 0.1
    steps: int = 2
    share_weights: bool = True
    init_std: float = 0.02
    # objective and decoding
    lambda1: float = 0.7
    lambda2: float = 0.3
    threshold: float = 0.3
    max_answer_len: int = 30
    # optimization
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 2
    max_steps: int = 0
    grad_clip: float = 0.0
    dtype: str = "float32"
    seed: int = dataclasses.field(default_factory=_default_seed)
    # paths
    train_path: str = ""
    dev_path: str = ""
    out_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.hidden <= 0 or self.layers < 0 or self.heads <= 0:
            raise ValueError("hidden/heads must be positive and layers nonnegative")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1/lambda2 must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size <= 0 or self.max_answer_len <= 0 or self.lr <= 0:
            raise ValueError("batch_size, max_answer_len and lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "RunConfig | None" = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        base = base or cls()
        parsed = {k: _coerce(v, type(getattr(base, k))) for k, v in values.items()}
        return dataclasses.replace(base, **parsed)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(value: Any, kind: type) -> Any:
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value.strip())


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (command-line flags)."""
    cfg = RunConfig()
    if path:
        cfg = RunConfig.from_mapping(parse_config_text(Path(path).read_text(encoding="utf-8")), cfg)
    if overrides:
        cfg = RunConfig.from_mapping({k: v for k, v in overrides.items() if v is not None}, cfg)
    return cfg
