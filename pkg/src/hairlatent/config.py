"""Run configuration: one flat TOML table, validated against a fixed schema."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    backend: str = "toy"
    backend_seed: int = 0
    external_factory: str = ""
    checkpoint_dir: str = ""
    resolution: int = 64
    n_layers: int = 8
    latent_dim: int = 64
    m: int = 3
    w_steps: int = 1100
    fs_steps: int = 250
    align_steps: int = 100
    inpaint_steps: int = 140
    blend_steps: int = 400
    lambda_lsm: float = 1.0
    lambda_reg: float = 1.0
    lambda_hair_percept: float = 1.0
    lambda_hair_style: float = 1.0
    n_regions: int = 5
    compactness: float = 10.0
    slic_iters: int = 10
    lr: float = 0.01
    seed: int = 0
    out: str = "out"
    save_every: int = 0
    no_lsm: bool = False
    no_reg: bool = False
    rematch_target: bool = False
    strict_reg: bool = False
    no_crop: bool = False
    convex_blend: bool = False
    per_layer_weight: bool = False
    ce_inpaint_only: bool = False

    def __post_init__(self):
        if self.backend not in ("toy", "external"):
            raise ConfigError(f"backend must be 'toy' or 'external', got {self.backend!r}")
        if self.backend == "external" and not self.external_factory:
            raise ConfigError("backend = 'external' needs external_factory = 'module:callable'")
        for name in ("w_steps", "align_steps", "inpaint_steps", "blend_steps", "n_regions", "slic_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.fs_steps < 0 or self.save_every < 0:
            raise ConfigError("fs_steps and save_every must be >= 0")
        if not 1 <= self.m < self.n_layers:
            raise ConfigError(f"m must satisfy 1 <= m < n_layers, got m={self.m}, n_layers={self.n_layers}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Hash of every setting that can change results (not output location)."""
        d = self.to_dict()
        for k in ("out", "save_every"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "PipelineConfig":
        return from_mapping({**self.to_dict(), **changes})


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(name: str, value):
    kind = _FIELDS[name].type
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    if kind == "int":
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected an integer, got {value!r}") from None
    if kind == "float":
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    if not isinstance(value, (str, int, float)):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return str(value)


def from_mapping(values: dict) -> PipelineConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**{k: _coerce(k, v) for k, v in values.items()})


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a flat TOML file (optional) and apply overrides on top."""
    values = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat, found tables {nested}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_mapping(values)


def parse_assignments(items) -> dict:
    """``["key=value", ...]`` → dict, values parsed as TOML scalars when possible."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().replace("-", "_")
        try:
            out[key] = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            out[key] = raw.strip()
    return out


def dump_config(cfg: PipelineConfig, path) -> Path:
    path = Path(path)
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, bool):
            lines.append(f"{k} = {'true' if v else 'false'}")
        elif isinstance(v, str):
            lines.append(f"{k} = {json.dumps(v)}")
        else:
            lines.append(f"{k} = {v!r}")
    path.write_text("\n".join(lines) + "\n")
    return path
