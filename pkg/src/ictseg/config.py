"""Training configuration: dataclasses, flat ``section.key = value`` files, resolution and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Literal

from ictseg.mixing import MixPolicy
from ictseg.model import ModelSpec
from ictseg.objective import RampSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    label_fraction: float = 0.1
    n_validation: int = 2
    n_test: int = 20

    def __post_init__(self) -> None:
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError(f"data.label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.n_validation < 0 or self.n_test < 0:
            raise ValueError("data.n_validation and data.n_test must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    mix: MixPolicy = field(default_factory=MixPolicy)
    ramp: RampSpec = field(default_factory=RampSpec)
    data: DataConfig = field(default_factory=DataConfig)
    lambda_ema: float = 0.99
    total_iters: int = 2000
    batch_labelled: int = 4
    batch_unlabelled: int = 4
    learning_rate: float = 1e-5
    optimizer: Literal["adam", "sgd"] = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 500
    # literal pseudo-code order: EMA from the pre-step student, then the gradient step
    ema_before_step: bool = True
    # False removes the unsupervised branch entirely (no sampling, no teacher forward)
    unsupervised: bool = True

    def __post_init__(self) -> None:
        if self.total_iters < 1:
            raise ValueError(f"train.total_iters must be >= 1, got {self.total_iters}")
        if self.batch_labelled < 1 or self.batch_unlabelled < 1:
            raise ValueError("train.batch_labelled and train.batch_unlabelled must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError(f"train.learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.lambda_ema <= 1.0:
            raise ValueError(f"train.lambda_ema must lie in [0, 1], got {self.lambda_ema}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"train.optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise ValueError(f"train.adam_betas must be two numbers in [0, 1), got {self.adam_betas}")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("train.eval_every and train.checkpoint_every must be >= 1")


SECTIONS = {"model": ModelSpec, "mix": MixPolicy, "ramp": RampSpec, "data": DataConfig}

TOY_CONFIG = resources.files("ictseg") / "configs" / "toy.cfg"


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _parse_value(raw: str, hint: Any, key: str) -> Any:
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("none", "null", ""):
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _parse_value(raw, inner, key)
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if origin is tuple:
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(_parse_value(p, a, key) for p, a in zip(parts, args, strict=True))
        if origin is Literal:
            if raw not in args:
                raise ValueError(f"expected one of {args}")
            return raw
        if hint is str:
            return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'section.key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(assignments: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``section.key -> raw string`` assignments on top of ``base``.

    Top-level training fields live in the ``train`` section.
    """
    base = base or TrainConfig()
    section_updates: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    top_updates: dict[str, Any] = {}
    top_hints = _hints(TrainConfig)
    for key, raw in assignments.items():
        section, _, name = key.partition(".")
        if section in SECTIONS:
            hints = _hints(SECTIONS[section])
            if name not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            section_updates[section][name] = _parse_value(raw, hints[name], key)
        elif section == "train" and name in top_hints and name not in SECTIONS:
            top_updates[name] = _parse_value(raw, top_hints[name], key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        for section, updates in section_updates.items():
            if updates:
                top_updates[section] = dataclasses.replace(getattr(base, section), **updates)
        return dataclasses.replace(base, **top_updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    assignments: dict[str, str] = {}
    if path is not None:
        path = Path(str(path))
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        assignments.update(parse_assignments(path.read_text().splitlines(), str(path)))
    assignments.update(parse_assignments(overrides, "--set"))
    return build_config(assignments)


def resolve(cfg: TrainConfig) -> TrainConfig:
    """Materialize seed- and length-dependent defaults."""
    model = cfg.model
    if model.init_seed is None:
        model = dataclasses.replace(model, init_seed=cfg.seed)
    ramp = cfg.ramp
    if ramp.ramp_iters is None:
        ramp = dataclasses.replace(ramp, ramp_iters=max(1, round(0.4 * cfg.total_iters)))
    return dataclasses.replace(cfg, model=model, ramp=ramp)


def to_flat(cfg: TrainConfig) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sub in dataclasses.fields(value):
                flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            flat[f"train.{f.name}"] = list(value) if isinstance(value, tuple) else value
    return flat


def from_flat(flat: dict[str, Any]) -> TrainConfig:
    return build_config({k: _format(v) for k, v in flat.items()})


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(to_flat(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in to_flat(cfg).items())


def write_resolved(cfg: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    payload = {"config_hash": config_hash(cfg), "config": to_flat(cfg)}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def read_resolved(path: str | Path) -> TrainConfig:
    payload = json.loads(Path(path).read_text())
    cfg = from_flat(payload["config"])
    if config_hash(cfg) != payload["config_hash"]:
        raise ConfigError(f"{path}: stored config hash does not match its contents")
    return cfg
