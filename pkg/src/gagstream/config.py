"""Run configuration shared by the harness and the command line.

Config files are flat ``key = value`` lines (``#`` starts a comment) whose
keys are the :class:`RunConfig` field names; each key has a matching
``--kebab-case`` flag. A run manifest (JSON) is also accepted, in which
case its ``config`` block is used.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .model import ModelConfig
from .reservoir import DistanceKind

VARIANTS = ("full", "static", "ran_uni", "fix_new", "wass_uni")
METHODS = ("gag", "pop", "spop")

# (force_novel, weighting) per online-update variant
VARIANT_SAMPLING = {
    "full": (True, "distance"),
    "wass_uni": (False, "distance"),
    "fix_new": (True, "uniform"),
    "ran_uni": (False, "uniform"),
}


@dataclass
class RunConfig:
    dataset: str = ""
    output: str = "reports.jsonl"
    session_gap_hours: float = 8.0
    top_n_items: int = 10000
    method: str = "gag"
    variant: str = "full"
    embed_dim: int = 200
    num_layers: int = 1
    learning_rate: float = 0.003
    batch_size: int = 100
    offline_epochs: int = 10
    online_epochs: int = 1
    plateau_tol: float = 1e-3
    reservoir_capacity_divisor: int = 100
    window_divisor: int = 2
    distance_kind: str = "wasserstein"
    edge_out_uses_receiver: bool = False
    pop_online: bool = False
    train_frac: float = 0.6
    num_chunks: int = 5
    ks: list[int] = field(default_factory=lambda: [5, 10, 20])
    rng_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        positive_ints = (
            "embed_dim",
            "num_layers",
            "batch_size",
            "reservoir_capacity_divisor",
            "window_divisor",
            "num_chunks",
            "workers",
            "top_n_items",
        )
        for name in positive_ints:
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("offline_epochs", "online_epochs"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(name, "must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be > 0")
        if not self.session_gap_hours > 0:
            raise ConfigError("session_gap_hours", "must be > 0")
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac", "must lie in (0, 1)")
        if self.plateau_tol < 0:
            raise ConfigError("plateau_tol", "must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"must be one of {', '.join(VARIANTS)}")
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {', '.join(METHODS)}")
        try:
            DistanceKind(self.distance_kind)
        except ValueError:
            raise ConfigError("distance_kind", "must be wasserstein, kl or total_variation") from None
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigError("ks", "must be a non-empty list of positive integers")
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            rng_seed=self.rng_seed,
            edge_out_uses_receiver=self.edge_out_uses_receiver,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: Any) -> Any:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    if name not in fields:
        raise ConfigError(name, "unknown configuration key")
    default = fields[name].default
    if fields[name].default_factory is not dataclasses.MISSING:
        default = fields[name].default_factory()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            if isinstance(raw, list):
                return [int(k) for k in raw]
            return [int(k) for k in str(raw).split(",") if k.strip()]
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot parse {raw!r}") from None


def read_config_file(path) -> dict[str, Any]:
    """Parse a flat key=value file (or a run manifest) into typed values."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        data = data.get("config", data)
        return {k: _coerce(k, v) for k, v in data.items()}
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path: Optional[str] = None, **overrides) -> RunConfig:
    """File values first, then non-None ``overrides`` (typically CLI flags)."""
    values = read_config_file(path) if path else {}
    for key, val in overrides.items():
        if val is not None:
            values[key] = _coerce(key, val)
    return RunConfig(**values)
