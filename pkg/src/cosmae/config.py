"""Run configuration: dataclasses, presets and the ``key = value`` text format.

A config file is a list of ``section.key = value`` lines. ``[section]``
headers are also accepted and prefix the keys below them. ``#`` starts a
comment. Every key must name an existing field; values are coerced to the
field's type and every problem is reported with its line number.

Example::

    seed = 0
    [model]
    image_size = 32
    patch_size = 8
    toggles.data_mixup = false
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .distill import DistillConfig
from .errors import ConfigError
from .mae import DESK_MAE, LARGE_MAE, MAEConfig
from .replay import MixupConfig


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    hflip_prob: float = 0.5
    crop_min_ratio: float = 0.8
    crop_out_size: int = 0  # 0: use model.image_size

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if not 0.0 < self.crop_min_ratio <= 1.0:
            raise ConfigError(f"crop_min_ratio must lie in (0, 1], got {self.crop_min_ratio}")
        if self.crop_out_size < 0:
            raise ConfigError("crop_out_size must be non-negative")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_epochs: int = 2

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("optim.lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer betas must lie in [0, 1)")
        if not self.eps > 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("optim.eps must be positive; weight_decay and warmup_epochs non-negative")


@dataclass(frozen=True)
class TrainDefaults:
    epochs: int = 25
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("train.epochs must be >= 1 and train.batch_size >= 2")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    smoothing: float = 1.0
    every_task: bool = True

    def __post_init__(self):
        if self.k < 1 or not self.smoothing > 0:
            raise ConfigError("eval.k must be >= 1 and eval.smoothing > 0")


@dataclass(frozen=True)
class Toggles:
    data_mixup: bool = True
    model_mixup_kd: bool = True


@dataclass(frozen=True)
class BufferConfig:
    capacity: int = 1000

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError("buffer.capacity must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: MAEConfig = field(default_factory=lambda: DESK_MAE)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainDefaults = field(default_factory=TrainDefaults)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    toggles: Toggles = field(default_factory=Toggles)

    def __post_init__(self):
        if self.augment.crop_out_size not in (0, self.model.image_size):
            raise ConfigError(
                f"augment.crop_out_size ({self.augment.crop_out_size}) must equal model.image_size "
                f"({self.model.image_size})"
            )

    def with_toggles(self, data_mixup: bool, model_mixup_kd: bool) -> "RunConfig":
        return replace(self, toggles=Toggles(data_mixup, model_mixup_kd))

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for f in fields(self):
            if f.name == "seed":
                continue
            section = getattr(self, f.name)
            for sf in fields(section):
                lines.append(f"{f.name}.{sf.name} = {_format_value(getattr(section, sf.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


def large_preset() -> RunConfig:
    """Full-scale settings (ViT-B encoder, 224 px crops, 300 epochs, batch 128)."""
    return RunConfig(
        model=LARGE_MAE,
        augment=AugmentConfig(crop_out_size=224),
        optim=OptimConfig(lr=1e-3, warmup_epochs=10),
        train=TrainDefaults(epochs=300, batch_size=128),
        buffer=BufferConfig(capacity=1000),
    )


def desk_preset() -> RunConfig:
    return RunConfig()


PRESETS = {"large": large_preset, "desk": desk_preset}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, typ, where: str):
    # field types arrive as strings because of postponed annotations
    text = raw.strip()
    if typ in (bool, "bool"):
        low = text.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if typ in (int, "int"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
    if typ in (float, "float"):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        text = text[1:-1]
    return text


def parse_config_text(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    """Parse config text on top of ``base`` (desk preset by default).

    A top-level ``preset = desk|large`` key replaces ``base`` with that preset.
    """
    base = base or desk_preset()
    top_fields = {f.name: f for f in fields(RunConfig)}
    updates: dict[str, dict] = {}
    top_updates: dict = {}
    seen: dict[str, int] = {}
    section_prefix = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        where = f"{source}:{lineno}"
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section_prefix = stripped[1:-1].strip()
            if section_prefix and section_prefix not in top_fields:
                raise ConfigError(f"{where}: unknown section [{section_prefix}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if section_prefix and "." not in key:
            key = f"{section_prefix}.{key}"
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        if key == "preset":
            name = _coerce(value, str, where)
            if name not in PRESETS:
                raise ConfigError(f"{where}: unknown preset {name!r}; choose from {sorted(PRESETS)}")
            base = PRESETS[name]()
            continue
        if "." not in key:
            if key != "seed":
                raise ConfigError(f"{where}: unknown key {key!r}")
            top_updates["seed"] = _coerce(value, int, where)
            continue
        section, name = key.split(".", 1)
        if section not in top_fields or section == "seed":
            raise ConfigError(f"{where}: unknown section {section!r} in key {key!r}")
        sub = {f.name: f for f in fields(getattr(base, section))}
        if name not in sub:
            raise ConfigError(f"{where}: unknown key {key!r}")
        updates.setdefault(section, {})[name] = (_coerce(value, sub[name].type, where), where)

    kwargs = dict(top_updates)
    for section, vals in updates.items():
        try:
            kwargs[section] = replace(getattr(base, section), **{k: v for k, (v, _) in vals.items()})
        except ConfigError as exc:
            lines = ", ".join(w for _, w in vals.values())
            raise ConfigError(f"{source}: invalid [{section}] settings ({lines}): {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid [{section}] settings: {exc}") from None
    try:
        return replace(base, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return parse_config_text(text, source=str(p), base=base)

