"""Run configuration: ipc presets, TOML files and command-line overrides.

Resolution order, lowest to highest priority: built-in defaults, the ipc
preset, the config file, explicit flags.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

try:  # python >= 3.11
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as _toml

from .distill import DistillConfig
from .models import ModelSpec
from .samplers import HMCConfig, SGHMCConfig

PRESETS = ("ipc1", "ipc10", "ipc20")


class ConfigError(ValueError):
    pass


# Per-method distillation hyperparameters for each ipc preset.
_DISTILL = {
    "ipc1": {
        "rkl": dict(steps=5000, max_start=2, inner_steps=50, inner_lr=0.01, samples=10, sigma_u=0.01, sigma_x=0.01, batch_size=1000),
        "w": dict(steps=5000, max_start=2, inner_steps=50, inner_lr=0.01, expert_span=2),
        "fkl": dict(steps=5000, max_start=2, inner_steps=50, inner_lr=0.01, expert_span=1, samples=30, sigma_u=0.01, sigma_x=0.01),
        "dc": dict(steps=5000, max_start=2, inner_steps=50, inner_lr=0.01),
    },
    "ipc10": {
        "rkl": dict(steps=5000, max_start=20, inner_steps=30, inner_lr=0.03, samples=10, sigma_u=0.01, sigma_x=0.01, batch_size=1000),
        "w": dict(steps=5000, max_start=20, inner_steps=30, inner_lr=0.03, expert_span=2),
        "fkl": dict(steps=5000, max_start=20, inner_steps=30, inner_lr=0.03, expert_span=1, samples=30, sigma_u=0.01, sigma_x=0.01),
        "dc": dict(steps=5000, max_start=20, inner_steps=30, inner_lr=0.03),
    },
    "ipc20": {
        "rkl": dict(steps=5000, max_start=30, inner_steps=30, inner_lr=0.03, samples=10, sigma_u=0.01, sigma_x=0.01, batch_size=1000),
        "w": dict(steps=5000, max_start=30, inner_steps=30, inner_lr=0.03, expert_span=2),
        "fkl": dict(steps=5000, max_start=30, inner_steps=30, inner_lr=0.03, expert_span=1, samples=30, sigma_u=0.01, sigma_x=0.01),
        "dc": dict(steps=5000, max_start=30, inner_steps=30, inner_lr=0.03),
    },
}

_HMC = {
    "ipc1": dict(iterations=20, leapfrog_steps=20, burn_in=10, init_scale=0.1, momentum_scale=0.01, step_size=0.05, weight_decay=0.5),
    "ipc10": dict(iterations=100, leapfrog_steps=5, burn_in=50, init_scale=0.1, momentum_scale=0.1, step_size=0.01, weight_decay=1.5),
    "ipc20": dict(iterations=100, leapfrog_steps=5, burn_in=50, init_scale=0.1, momentum_scale=0.1, step_size=0.01, weight_decay=1.5),
}

_SGHMC = {
    "ipc1": dict(iterations=20, leapfrog_steps=5, burn_in=10, init_scale=0.1, momentum_scale=0.1, step_size=0.03, weight_decay=1.0, momentum_decay=0.1, noise=0.01),
    "ipc10": dict(iterations=100, leapfrog_steps=5, burn_in=50, init_scale=0.1, momentum_scale=0.1, step_size=0.01, weight_decay=1.5, momentum_decay=0.1, noise=0.01),
    "ipc20": dict(iterations=100, leapfrog_steps=5, burn_in=50, init_scale=0.1, momentum_scale=0.1, step_size=0.01, weight_decay=1.0, momentum_decay=0.1, noise=0.01),
}


def preset_ipc(preset: str) -> int:
    _check_preset(preset)
    return int(preset[3:])


def _check_preset(preset: str):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")


def distill_preset(preset: str, method: str) -> DistillConfig:
    _check_preset(preset)
    if method not in _DISTILL[preset]:
        raise ConfigError(f"unknown method {method!r}")
    return DistillConfig(method=method, **_DISTILL[preset][method])


def hmc_preset(preset: str) -> HMCConfig:
    _check_preset(preset)
    return HMCConfig(**_HMC[preset])


def sghmc_preset(preset: str) -> SGHMCConfig:
    _check_preset(preset)
    return SGHMCConfig(**_SGHMC[preset])


@dataclass
class ModelConfig:
    family: str = "softmax-linear"
    input_dim: int = 2
    num_classes: int = 0
    hidden: int = 0
    weight_decay: float = 0.0
    likelihood_cov: float = 1.0
    prior_mean: float = 0.0
    prior_cov: float = 1.0

    def build(self) -> ModelSpec:
        return ModelSpec(**asdict(self))


@dataclass
class ExpertConfig:
    count: int = 10
    epochs: int = 30
    lr: float = 0.01
    batch_size: int = 0  # 0 means full batch
    init_scale: float = 0.1


@dataclass
class RunConfig:
    preset: str = "ipc10"
    seed: int = 0
    outdir: str = "."
    train: str = ""
    test: str = ""
    expert_dir: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    experts: ExpertConfig = field(default_factory=ExpertConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    hmc: HMCConfig = field(default_factory=HMCConfig)
    sghmc: SGHMCConfig = field(default_factory=SGHMCConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_resolved(self, outdir=None) -> Path:
        out = Path(outdir or self.outdir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "config.resolved.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


_SECTIONS = {"model": ModelConfig, "experts": ExpertConfig, "distill": DistillConfig, "hmc": HMCConfig, "sghmc": SGHMCConfig}


def _merge(obj, values: dict, where: str):
    names = {f.name: f for f in fields(obj)}
    clean = {}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {where}.{key}")
        clean[key] = _coerce(getattr(obj, key), val, f"{where}.{key}")
    try:
        return replace(obj, **clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(current, val, where):
    if isinstance(current, bool):
        if isinstance(val, str):
            if val.lower() in ("1", "true", "yes"):
                return True
            if val.lower() in ("0", "false", "no"):
                return False
            raise ConfigError(f"{where}: expected a boolean, got {val!r}")
        return bool(val)
    try:
        if isinstance(current, int):
            if isinstance(val, float) and not val.is_integer():
                raise ConfigError(f"{where}: expected an integer, got {val!r}")
            return int(val)
        if isinstance(current, float):
            return float(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return str(val) if isinstance(current, str) else val


def parse_overrides(items) -> dict:
    """Turn ``["distill.steps=10", "seed=3"]`` into a nested dict."""
    out: dict[str, Any] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val.strip()
    return out


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return _toml.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def resolve(file_values: dict | None = None, overrides: dict | None = None, method: str | None = None) -> RunConfig:
    """Layer preset, file values and overrides into a RunConfig."""
    layers = [file_values or {}, overrides or {}]
    preset = "ipc10"
    for layer in layers:
        preset = str(layer.get("preset", preset))
    meth = method
    if meth is None:
        for layer in layers:
            meth = layer.get("distill", {}).get("method", meth)
    cfg = RunConfig(
        preset=preset,
        distill=distill_preset(preset, meth or "fkl"),
        hmc=hmc_preset(preset),
        sghmc=sghmc_preset(preset),
    )
    for layer in layers:
        top = {k: v for k, v in layer.items() if k not in _SECTIONS}
        cfg = _merge(cfg, top, "run") if top else cfg
        for name in _SECTIONS:
            if name in layer:
                if not isinstance(layer[name], dict):
                    raise ConfigError(f"[{name}] must be a table")
                cfg = replace(cfg, **{name: _merge(getattr(cfg, name), layer[name], name)})
    if method is not None and cfg.distill.method != method:
        cfg = replace(cfg, distill=replace(cfg.distill, method=method))
    return cfg
