"""Run configuration: profiles, YAML round-trip, config hashing and seed streams.

A run is described by one :class:`RunConfig`.  Two profiles exist:

* ``paper`` -- full-scale budgets (T=1000, 10k generator steps, 1000
  samples per level, 2000 detector epochs).
* ``desk``  -- reduced budgets that finish on a single CPU core.

Config files are YAML.  Keys omitted from a file fall back to the chosen
profile, so a file only needs to list overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

SCHEMA_VERSION = 1
PROFILES = ("paper", "desk")


class ConfigError(ValueError):
    pass


@dataclass
class AugmentPolicy:
    vflip: bool = False
    hflip: bool = False
    rotation: float = 5.0  # degrees, uniform in [-rotation, rotation]
    jitter_p: float = 0.2
    jitter_strength: float = 0.05

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(vflip=False, hflip=False, rotation=0.0, jitter_p=0.0, jitter_strength=0.0)


@dataclass
class GeneratorConfig:
    levels: list[int] = field(default_factory=lambda: [5, 9, 13, 17])
    steps: int = 1000  # diffusion step count T
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 64
    image_size: int = 256
    train_steps: int = 10_000
    batch_size: int = 8
    train_crop: int = 0  # 0 = train on full images
    samples: int = 1000
    sample_batch: int = 8
    sigma_g: float = 0.02
    lr: float = 1e-3
    weight_decay: float = 1e-4


@dataclass
class LossConfig:
    # alpha_feat scales a per-patch squared L2 norm over 5*34*34 values;
    # 1/5780 puts it on a per-element scale, comparable to the BCE term.
    alpha_feat: float = 1.0 / 5780
    alpha_grad: float = 0.1
    sigma_c: float = 0.1
    sigma_z: float = 0.1
    beta_density: float = 10.0
    use_noisy: bool = True
    use_tail: bool = True
    cold_start: int = 64


@dataclass
class DetectorConfig:
    levels: list[int] = field(default_factory=lambda: [34, 68, 136])
    epochs: int = 2000
    patches_per_group: int = 128
    images_per_group: int = 4
    bank_size: int = 512
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    final_div: float = 100.0
    loss: LossConfig = field(default_factory=LossConfig)
    augment_normal: AugmentPolicy = field(default_factory=AugmentPolicy)
    augment_generated: AugmentPolicy = field(
        default_factory=lambda: AugmentPolicy(jitter_strength=0.5)
    )


@dataclass
class EvalConfig:
    output_size: int = 256
    blur_kernel: int = 16
    blur_sigma: float = 4.0
    fusion: str = "mean"  # mean | max | sum


@dataclass
class SynthConfig:
    image_size: int = 256
    grid: int = 4
    n_train: int = 32
    n_test: int = 40
    anomaly_ratio: float = 0.5
    structural: list[str] = field(default_factory=lambda: ["noise", "scratch", "stain"])
    logical: list[str] = field(default_factory=lambda: ["swap", "missing", "duplicate"])


@dataclass
class RunConfig:
    schema: int = SCHEMA_VERSION
    category: str = "synthetic"
    profile: str = "paper"
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def profile(name: str) -> RunConfig:
    """Return the resolved defaults of a named profile."""
    if name == "paper":
        return RunConfig(profile="paper")
    if name == "desk":
        cfg = RunConfig(profile="desk")
        g = cfg.generator
        # T=100 with endpoints rescaled by 1000/T keeps alpha_bar_T near zero.
        g.steps, g.beta_start, g.beta_end = 100, 1e-3, 0.2
        g.width, g.image_size = 32, 128
        g.train_steps, g.batch_size, g.train_crop = 500, 8, 40
        g.samples, g.sample_batch = 32, 4
        d = cfg.detector
        d.epochs, d.patches_per_group = 50, 32
        cfg.synth.image_size = 128
        cfg.synth.n_train, cfg.synth.n_test = 16, 100
        return cfg
    raise ConfigError(f"unknown profile {name!r}; expected one of {PROFILES}")


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _build(hints[name], value, f"{where}.{name}")
    return cls(**kwargs)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def from_dict(data: dict[str, Any]) -> RunConfig:
    """Overlay ``data`` on its profile defaults and validate the result."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    base = profile(data.get("profile", "paper")).to_dict()
    cfg = _build(RunConfig, _merge(base, data), "config")
    validate(cfg)
    return cfg


def load(path: str | Path | None = None, **overrides: Any) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config root of {path} must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return from_dict(data)


def validate(cfg: RunConfig) -> None:
    if cfg.schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema {cfg.schema}")
    if cfg.profile not in PROFILES:
        raise ConfigError(f"unknown profile {cfg.profile!r}")
    g = cfg.generator
    if g.steps < 1 or not 0 < g.beta_start <= g.beta_end < 1:
        raise ConfigError("generator schedule needs steps >= 1 and 0 < beta_start <= beta_end < 1")
    for n in g.levels:
        if n < 3 or n % 2 == 0:
            raise ConfigError(f"generator level must be odd and >= 3, got {n}")
    for lv in cfg.detector.levels:
        if lv not in (34, 68, 136):
            raise ConfigError(f"detector level must be one of 34, 68, 136, got {lv}")
    if cfg.evaluation.fusion not in ("mean", "max", "sum"):
        raise ConfigError(f"unknown fusion rule {cfg.evaluation.fusion!r}")


# -- seeds -------------------------------------------------------------------

def stream_seed(master: int, name: str) -> int:
    """Derive an independent 63-bit seed for the named stage."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def torch_stream(master: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(master, name))


def numpy_stream(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(master, name))
