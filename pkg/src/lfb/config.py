"""Run configuration: sectioned ``key = value`` text with schedule presets.

Example::

    [run]
    seed = 0
    preset = desk

    [model]
    kind = nl
    window = 20
    mode = batch
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from typing import Any, get_args, get_type_hints

from .fbo import VARIANTS, FboConfig, StoConfig
from .model import KINDS
from .synthetic import SyntheticTaskSpec
from .training import PRESETS, Schedule, preset


class ConfigError(ValueError):
    """Collects every violated key."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunSection:
    seed: int = 0
    preset: str = "desk"
    stage: str = "joint"
    precision: str = "float64"


@dataclass
class ModelSection:
    kind: str = "nl"
    window: int = 20
    mode: str = "batch"


@dataclass
class FboSection:
    variant: str = "embedded_gaussian"
    layers: int = 2
    activation_order: str = "pre"
    use_scale: bool = True
    use_ln: bool = True
    dropout_rate: float = 0.2
    d_f: int = 32
    share_reduction: bool = False
    unmasked_zero_pad: bool = False
    num_distractors: int = 8


@dataclass
class TrainSection:
    # Empty values fall back to the preset.
    iterations: int | None = None
    lr: float | None = None
    weight_decay: float | None = None
    batch_size: int = 16
    momentum: float = 0.9
    log_every: int = 100


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    fbo: FboSection = field(default_factory=FboSection)
    train: TrainSection = field(default_factory=TrainSection)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)

    def fbo_config(self) -> FboConfig:
        f = self.fbo
        return FboConfig(variant=f.variant, layers=f.layers, activation_order=f.activation_order,
                         use_scale=f.use_scale, use_ln=f.use_ln, dropout_rate=f.dropout_rate,
                         d_f=f.d_f, share_reduction=f.share_reduction,
                         unmasked_zero_pad=f.unmasked_zero_pad)

    def sto_config(self) -> StoConfig:
        return StoConfig(self.fbo.num_distractors)

    def schedule(self) -> Schedule:
        s = preset(self.run.preset)
        t = self.train
        if t.iterations is not None and t.iterations != s.total_iterations:
            s = s.scaled_to(t.iterations)
        if t.lr is not None:
            s = replace(s, base_lr=t.lr)
        if t.weight_decay is not None:
            s = replace(s, weight_decay=t.weight_decay)
        return s.for_batch(t.batch_size)

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(model={"window": 8})`` returns a modified copy."""
        out = self
        for name, values in sections.items():
            out = replace(out, **{name: replace(getattr(out, name), **values)})
        return out

    def validate(self) -> list[str]:
        errors = []
        r, m, f, t = self.run, self.model, self.fbo, self.train
        if r.preset not in PRESETS:
            errors.append(f"run.preset: unknown preset {r.preset!r} (choose from {sorted(PRESETS)})")
        if r.stage not in ("joint", "two-stage"):
            errors.append("run.stage: must be 'joint' or 'two-stage'")
        if r.precision not in ("float64", "float32"):
            errors.append("run.precision: must be 'float64' or 'float32'")
        if m.kind not in KINDS:
            errors.append(f"model.kind: must be one of {KINDS}")
        if m.window < 0:
            errors.append("model.window: must be >= 0")
        if m.mode not in ("batch", "causal"):
            errors.append("model.mode: must be 'batch' or 'causal'")
        if f.variant not in VARIANTS:
            errors.append(f"fbo.variant: must be one of {VARIANTS}")
        if f.layers not in (1, 2, 3):
            errors.append("fbo.layers: must be 1, 2 or 3")
        if f.activation_order not in ("pre", "post"):
            errors.append("fbo.activation_order: must be 'pre' or 'post'")
        if not 0.0 <= f.dropout_rate < 1.0:
            errors.append("fbo.dropout_rate: must be in [0, 1)")
        if f.d_f < 1:
            errors.append("fbo.d_f: must be >= 1")
        if f.num_distractors < 0:
            errors.append("fbo.num_distractors: must be >= 0")
        if t.iterations is not None and t.iterations < 1:
            errors.append("train.iterations: must be >= 1")
        if t.lr is not None and t.lr <= 0:
            errors.append("train.lr: must be > 0")
        if t.weight_decay is not None and t.weight_decay < 0:
            errors.append("train.weight_decay: must be >= 0")
        if t.batch_size < 1:
            errors.append("train.batch_size: must be >= 1")
        if not 0.0 <= t.momentum < 1.0:
            errors.append("train.momentum: must be in [0, 1)")
        if t.log_every < 1:
            errors.append("train.log_every: must be >= 1")
        errors += self.task.validate()
        return errors


_SECTIONS = ("run", "model", "fbo", "train", "task")


def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, hint) -> Any:
    args = [a for a in get_args(hint) if a is not type(None)]
    optional = len(args) < len(get_args(hint))
    base = args[0] if args else hint
    raw = raw.strip()
    if raw == "":
        if optional:
            return None
        raise ValueError("value is required")
    if base is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if base is int:
        return int(raw)
    if base is float:
        return float(raw)
    return raw


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    errors = []
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            errors.append(f"{section}: unknown section")
            continue
        current = getattr(cfg, section)
        hints = get_type_hints(type(current))
        names = {f.name for f in fields(current)}
        updates = {}
        for key, raw in parser.items(section):
            if key not in names:
                errors.append(f"{section}.{key}: unknown key")
                continue
            try:
                updates[key] = _parse_value(raw, hints[key])
            except ValueError as exc:
                errors.append(f"{section}.{key}: {exc}")
        setattr(cfg, section, replace(current, **updates))
    if not errors:
        errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig) -> str:
    buf = io.StringIO()
    for section in _SECTIONS:
        buf.write(f"[{section}]\n")
        obj = getattr(cfg, section)
        for f in fields(obj):
            buf.write(f"{f.name} = {_fmt(getattr(obj, f.name))}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dumps(cfg).encode("utf-8")).hexdigest()
