"""JSON run configuration with strict parsing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, List, Optional, Union

VALID_ACCELS = (4, 6, 8, 10)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class DataConfig:
    size: int = 32
    n_train: int = 64
    n_eval: int = 16
    seed: int = 0
    n_ellipses: int = 10


@dataclass
class MaskConfig:
    accel: int = 4
    center_fraction: Optional[float] = 0.08
    seed: int = 0


@dataclass
class ModelConfig:
    channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    patch_size: int = 1
    token_dim: int = 64
    heads: int = 4
    b_l: Union[float, List[float]] = 1.2
    s_l: Union[float, List[float]] = 0.9
    r_thresh: Union[float, List[float]] = 0.25
    mf_enabled: bool = True


@dataclass
class ClipConfig:
    omega: float = 0.02
    b: float = 1.5
    s_min: float = 1.0


@dataclass
class DiffusionConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    clip: ClipConfig = field(default_factory=ClipConfig)
    dc_every: int = 1


@dataclass
class TrainConfig:
    epochs: int = 120
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0


@dataclass
class AblationConfig:
    mf: bool = True
    tokkan: bool = True
    dynamic_clip: bool = True


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, list):
            if not value or not all(_is_number(v) for v in value):
                raise ConfigError(path, "expected a number or a list of numbers")
            return [float(v) for v in value]
        if not _is_number(value):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(path, f"expected a list of integers, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if default is None:
        if value is not None and not _is_number(value):
            raise ConfigError(path, f"expected a number or null, got {value!r}")
        return None if value is None else float(value)
    return value


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", "expected a JSON object")
    obj = cls()
    known = {f.name: f for f in fields(cls)}
    for key, value in raw.items():
        sub = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(sub, "unknown key")
        default = getattr(obj, key)
        if is_dataclass(default):
            setattr(obj, key, _build(type(default), value, sub))
        elif key == "center_fraction":
            setattr(obj, key, _coerce(value, None, sub))
        else:
            setattr(obj, key, _coerce(value, default, sub))
    return obj


def validate(cfg: RunConfig) -> RunConfig:
    def need(cond: bool, path: str, msg: str):
        if not cond:
            raise ConfigError(path, msg)

    d = cfg.data
    need(d.size >= 16 and d.size & (d.size - 1) == 0, "data.size", "must be a power of two >= 16")
    need(d.n_train >= 1, "data.n_train", "must be >= 1")
    need(d.n_eval >= 1, "data.n_eval", "must be >= 1")
    need(d.seed >= 0, "data.seed", "must be non-negative")
    need(d.n_ellipses >= 1, "data.n_ellipses", "must be >= 1")
    m = cfg.mask
    need(m.accel in VALID_ACCELS, "mask.accel", f"must be one of {{4, 6, 8, 10}}, got {m.accel}")
    need(m.center_fraction is None or 0 < m.center_fraction < 1, "mask.center_fraction", "must lie in (0, 1)")
    need(m.seed >= 0, "mask.seed", "must be non-negative")
    mo = cfg.model
    need(len(mo.channels) == 3 and all(c > 0 for c in mo.channels), "model.channels", "needs three positive entries")
    need(mo.patch_size >= 1, "model.patch_size", "must be >= 1")
    need(d.size // 8 % mo.patch_size == 0, "model.patch_size", "must divide the bottleneck extent size/8")
    need(mo.heads >= 1 and mo.token_dim % mo.heads == 0, "model.heads", "must divide token_dim")
    for name in ("b_l", "s_l", "r_thresh"):
        v = getattr(mo, name)
        need(not isinstance(v, list) or len(v) == 3, f"model.{name}", "list form needs one value per decoder stage")
    vals = lambda v: v if isinstance(v, list) else [v]
    need(all(b >= 1 for b in vals(mo.b_l)), "model.b_l", "must be >= 1")
    need(all(0 < s <= 1 for s in vals(mo.s_l)), "model.s_l", "must lie in (0, 1]")
    need(all(0 <= r <= 1 for r in vals(mo.r_thresh)), "model.r_thresh", "must lie in [0, 1]")
    df = cfg.diffusion
    need(df.T >= 2, "diffusion.T", "must be >= 2")
    need(0 < df.beta_start <= df.beta_end < 1, "diffusion.beta_start", "need 0 < beta_start <= beta_end < 1")
    need(df.clip.omega >= 0, "diffusion.clip.omega", "must be >= 0")
    need(df.clip.s_min >= 1, "diffusion.clip.s_min", "must be >= 1")
    need(df.clip.b >= df.clip.s_min, "diffusion.clip.b", "must be >= s_min")
    need(df.dc_every >= 1, "diffusion.dc_every", "must be >= 1")
    tr = cfg.train
    need(tr.epochs >= 1, "train.epochs", "must be >= 1")
    need(tr.batch >= 1, "train.batch", "must be >= 1")
    need(tr.lr > 0, "train.lr", "must be positive")
    need(tr.seed >= 0, "train.seed", "must be non-negative")
    return cfg


def parse_config(raw: Union[str, dict]) -> RunConfig:
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return validate(_build(RunConfig, raw, ""))


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config() -> RunConfig:
    return RunConfig()


def describe_defaults() -> str:
    """Flattened ``section.key = value`` listing used by ``--help``."""
    lines = []

    def walk(obj, prefix):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if is_dataclass(v):
                walk(v, f"{prefix}{f.name}.")
            else:
                lines.append(f"  {prefix}{f.name} = {json.dumps(v)}")

    walk(RunConfig(), "")
    return "\n".join(lines)
