"""Run configuration: every tunable with its default, range check, and file I/O.

Files are plain ``key = value`` text under a single ``[vicount]`` section.
Unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import math
import zlib
from dataclasses import dataclass, fields

import numpy as np

SECTION = "vicount"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    # density grid
    downsample: int = 8
    sigma: float = 0.5
    tau: float = 1e-3
    peak_min: float = 0.05
    peak_radius: int = 1
    # descriptor model
    dim: int = 32
    gnn_layers: int = 4
    dustbin_layers: int = 2
    dustbin_mode: str = "adaptive"
    # association
    lam: float = 20.0
    sinkhorn_iters: int = 100
    top_k: int = 4
    theta: float = 0.2
    # labels and training
    r_lab: int = 3
    complete_labels: bool = False
    lr_provider: float = 5e-5
    lr_matcher: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    train_steps: int = 3000
    interval_min: int = 3
    interval_max: int = 8
    # simulator
    n_clips: int = 1
    frame_width: int = 160
    frame_height: int = 128
    world_width: int = 640
    world_height: int = 480
    n_ticks: int = 80
    crowd_min: float = 6.0
    crowd_max: float = 14.0
    speed_min: float = 0.2
    speed_max: float = 1.0
    max_speed: float = 1.5
    heading_jitter: float = 0.4
    segment_ticks: int = 10
    mean_lifetime: float = 400.0  # ticks; 0 disables spawning and despawning
    min_spacing: float = 24.0
    camera_speed_min: float = 2.0
    camera_speed_max: float = 4.0
    gain_min: float = 0.8
    gain_max: float = 1.25
    noise_min: float = 0.05
    noise_max: float = 0.15
    offset_scale: float = 0.5
    # evaluation and tracking
    eval_interval: int = 5
    track_gate: float = 4.0
    vote_gate: float = 0.0
    # reproducibility
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        errors = validate(self)
        if errors:
            raise ConfigError("; ".join(errors))

    def replace(self, **changes) -> Config:
        return dataclasses.replace(self, **changes)

    @property
    def grid_width(self) -> int:
        return self.frame_width // self.downsample

    @property
    def grid_height(self) -> int:
        return self.frame_height // self.downsample

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        lines = [f"[{SECTION}]"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}".replace("'", ""))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


_POSITIVE = {
    "downsample", "sigma", "dim", "gnn_layers", "dustbin_layers", "lam", "sinkhorn_iters",
    "top_k", "r_lab", "batch_size", "interval_min", "n_clips", "frame_width", "frame_height",
    "world_width", "world_height", "n_ticks", "max_speed", "segment_ticks",
    "eval_interval", "track_gate", "threads", "peak_radius",
}
_NONNEGATIVE = {
    "tau", "peak_min", "lr_provider", "lr_matcher", "train_steps", "crowd_min", "speed_min",
    "heading_jitter", "min_spacing", "camera_speed_min", "gain_min", "noise_min",
    "offset_scale", "vote_gate", "seed", "mean_lifetime",
}
_RANGES = [
    ("crowd_min", "crowd_max"), ("speed_min", "speed_max"), ("camera_speed_min", "camera_speed_max"),
    ("gain_min", "gain_max"), ("noise_min", "noise_max"), ("interval_min", "interval_max"),
]


def validate(cfg: Config) -> list[str]:
    errors = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, float) and not math.isfinite(v):
            errors.append(f"{f.name} must be finite")
        elif f.name in _POSITIVE and not v > 0:
            errors.append(f"{f.name} must be positive (got {v})")
        elif f.name in _NONNEGATIVE and not v >= 0:
            errors.append(f"{f.name} must be non-negative (got {v})")
    for lo, hi in _RANGES:
        if getattr(cfg, hi) < getattr(cfg, lo):
            errors.append(f"{hi} must be >= {lo}")
    if not 0.0 <= cfg.theta <= 1.0:
        errors.append("theta must lie in [0, 1]")
    if not (0.0 <= cfg.beta1 < 1.0 and 0.0 <= cfg.beta2 < 1.0):
        errors.append("beta1 and beta2 must lie in [0, 1)")
    if cfg.dustbin_mode not in ("adaptive", "scalar"):
        errors.append("dustbin_mode must be 'adaptive' or 'scalar'")
    if cfg.speed_max > cfg.max_speed:
        errors.append("speed_max must not exceed max_speed")
    if cfg.frame_width % max(cfg.downsample, 1) or cfg.frame_height % max(cfg.downsample, 1):
        errors.append("frame size must be a multiple of downsample")
    if cfg.frame_width > cfg.world_width or cfg.frame_height > cfg.world_height:
        errors.append("camera window larger than the world")
    return errors


def _coerce(name: str, raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{name}: cannot parse {raw!r} as a boolean")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


def loads(text: str, base: Config | None = None) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")
    base = base or Config()
    if not parser.has_section(SECTION):
        return base
    types = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    unknown = [k for k in parser[SECTION] if k not in types]
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    changes = {k: _coerce(k, v, types[k]) for k, v in parser[SECTION].items()}
    return base.replace(**changes)


def load(path, base: Config | None = None) -> Config:
    with open(path) as fh:
        return loads(fh.read(), base)


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named consumer of randomness."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode()), *extra]))


__all__ = ["Config", "ConfigError", "load", "loads", "substream", "validate"]
