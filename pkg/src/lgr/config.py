"""Model, training and synthesis settings plus their INI-style text form.

A config file has up to three sections, ``[model]``, ``[train]`` and
``[synth]``; keys are the dataclass field names below. Tuples are written
space-separated (``channels = 16 32 64``). Unknown keys are a ConfigError.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    C: int = 64
    d: int = 32
    num_stacks: int = 4
    clustering_depth: int = 3
    hierarchy: str = "fld8"
    graph_mode: str = "lgr"  # "lgr" | "plain" (stacked leaf-graph convolutions, no clustering)
    plain_layers: int = 2
    softmax_axis: str = "nodes"  # "nodes" | "spatial"
    tie_deconv: bool = False
    regen_down_adjacency: bool = False
    reason_per_level: int = 1
    mask_assignments: bool = True
    pyramid_enabled: bool = True
    residual_after_pyramid: bool = False
    inject_after_block: int = 3

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 ** len(self.channels)

    @property
    def lgr_channels(self) -> int:
        return self.channels[self.inject_after_block - 1]

    def validate(self, n_level_pairs: int | None = None) -> None:
        if self.num_stacks < 1:
            raise ConfigError("num_stacks must be >= 1")
        if not self.channels:
            raise ConfigError("channels must list at least one backbone block")
        if self.C != self.channels[-1]:
            raise ConfigError(f"C={self.C} must equal the last backbone width {self.channels[-1]}")
        if self.input_size % 2 ** len(self.channels):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2^{len(self.channels)}")
        if not 1 <= self.inject_after_block <= len(self.channels):
            raise ConfigError(f"inject_after_block must lie in 1..{len(self.channels)}")
        if self.graph_mode not in ("lgr", "plain"):
            raise ConfigError(f"graph_mode must be 'lgr' or 'plain', got {self.graph_mode!r}")
        if self.softmax_axis not in ("nodes", "spatial"):
            raise ConfigError(f"softmax_axis must be 'nodes' or 'spatial', got {self.softmax_axis!r}")
        if self.d < 1 or self.plain_layers < 0 or self.reason_per_level < 0:
            raise ConfigError("d must be >= 1; plain_layers and reason_per_level >= 0")
        if self.graph_mode == "lgr" and self.clustering_depth < 1:
            raise ConfigError("clustering_depth must be >= 1 in lgr mode")
        if n_level_pairs is not None and self.graph_mode == "lgr" and self.clustering_depth > n_level_pairs:
            raise ConfigError(f"clustering_depth {self.clustering_depth} exceeds the hierarchy's {n_level_pairs} level pairs")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    drop_factor: float = 10.0
    drop_every_epochs: int = 20
    epochs: int = 30
    max_steps: int = 0  # 0 = unlimited
    lambda_orth: float = 1e-3
    augment: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_deg: float = 15.0
    hflip_prob: float = 0.5
    sigma_g: float = 1.0
    patience: int = 10
    val_every: int = 1
    decode: str = "subcell"  # "subcell" | "argmax"
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if min(self.lr0, self.drop_factor, self.eps, self.sigma_g) <= 0:
            raise ConfigError("lr0, drop_factor, eps and sigma_g must be > 0")
        if self.drop_every_epochs < 1 or self.val_every < 1:
            raise ConfigError("drop_every_epochs and val_every must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError("hflip_prob must lie in [0, 1]")
        if self.decode not in ("subcell", "argmax"):
            raise ConfigError(f"decode must be 'subcell' or 'argmax', got {self.decode!r}")
        if self.max_steps < 0 or self.epochs < 0 or self.patience < 0:
            raise ConfigError("epochs, max_steps and patience must be >= 0")


FLD_SCHEDULE = 20
DEEPFASHION_SCHEDULE = 10


@dataclass(frozen=True)
class SynthSpec:
    hierarchy: str = "fld8"
    image_size: int = 64
    train_count: int = 600
    val_count: int = 200
    test_count: int = 200
    sigma_sym: float = 0.01
    sigma_pos: float = 0.02
    scale_range: tuple[float, float] = (0.6, 0.75)
    rotation_deg: float = 10.0
    shift: float = 0.06
    distractor_prob: float = 0.0
    distractor_scale: tuple[float, float] = (0.35, 0.5)
    occlusion_prob: float = 0.0
    clutter_density: float = 3.0
    supersample: int = 4
    seed: int = 0

    def validate(self) -> None:
        for name in ("distractor_prob", "occlusion_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise ConfigError("split counts must be >= 0")
        if self.clutter_density < 0 or self.sigma_sym < 0 or self.sigma_pos < 0:
            raise ConfigError("clutter_density, sigma_sym and sigma_pos must be >= 0")
        if self.image_size < 8 or self.supersample < 1:
            raise ConfigError("image_size must be >= 8 and supersample >= 1")


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec}


def _parse_value(cls, key: str, raw: str) -> Any:
    default = {f.name: f.default for f in fields(cls)}[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{cls.__name__}.{key}: cannot parse {raw!r}") from None


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def apply_overrides(obj, items: dict[str, str]):
    cls = type(obj)
    names = {f.name for f in fields(cls)}
    vals = {}
    for k, raw in items.items():
        if k not in names:
            raise ConfigError(f"unknown {cls.__name__} key {k!r}")
        vals[k] = _parse_value(cls, k, raw)
    return dataclasses.replace(obj, **vals)


def load_config(path: str | Path | None = None, text: str | None = None) -> dict[str, Any]:
    """Read a config file into ``{"model": ModelConfig, "train": ..., "synth": ...}``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (C, d)
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    elif text is not None:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
    out = {name: cls() for name, cls in SECTIONS.items()}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        out[section] = apply_overrides(out[section], dict(parser[section]))
    return out


def dump_config(**sections) -> str:
    """Canonical text: sections in fixed order, keys in field order."""
    lines = []
    for name in SECTIONS:
        obj = sections.get(name)
        if obj is None:
            continue
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    return "\n".join(lines)
