"""Run configuration shared by every CLI subcommand.

The on-disk format is flat ``key = value`` text grouped by ``[section]``
headers.  Sections map onto the component configs: ``[run]`` holds the
orchestration fields below, ``[odometry]`` and ``[mapping]`` expose the
estimator dataclasses field-for-field, and ``[sim]`` overrides sensor rig
parameters for dataset generation.  Unknown sections and keys are errors,
never warnings, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .mapper import MappingConfig
from .odometry import OdometryConfig
from .simulator import SensorRig

CAMERA_FACTOR_MODES = ("option1", "option2", "none")


@dataclass
class RunConfig:
    dataset: str = ""
    output: str = ""
    slam_dir: str = ""            # products of a previous slam run
    seed: int = 7
    camera_factor: str = "option1"
    duration: float = 60.0
    degenerate: bool = True
    budget_factor: float = 10.0   # wall-clock allowance, times dataset duration
    log_every: int = 25           # tracker progress line frequency (windows)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    sim: SensorRig = field(default_factory=SensorRig)


# [run] keys are the scalar RunConfig fields; nested configs get their own
# section.  odometry.camera_mode is deliberately not settable: the run-level
# camera_factor owns that switch so the two can never disagree.
_SECTIONS = {
    "run": None,
    "odometry": "odometry",
    "mapping": "mapping",
    "sim": "sim",
}
_HIDDEN = {("odometry", "camera_mode")}


def _target(cfg: RunConfig, section: str):
    attr = _SECTIONS[section]
    return cfg if attr is None else getattr(cfg, attr)


def _scalar_fields(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        if f.type in ("OdometryConfig", "MappingConfig", "SensorRig"):
            continue
        out[f.name] = getattr(obj, f.name)
    return out


def _coerce(section: str, key: str, raw: str, current):
    """Parse ``raw`` to the type of the field's current value."""
    raw = raw.strip()
    err = ConfigError(f"invalid value for {section}.{key}: {raw!r}")
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise err
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise err from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise err from None
    if isinstance(current, str):
        return raw
    if isinstance(current, np.ndarray) and current.shape == (3,):
        parts = [p for p in raw.replace(",", " ").split() if p]
        if len(parts) != 3:
            raise ConfigError(
                f"invalid value for {section}.{key}: expected 3 numbers")
        try:
            return np.array([float(p) for p in parts])
        except ValueError:
            raise err from None
    raise ConfigError(f"config key not settable from text: {section}.{key}")


def set_key(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section: [{section}]")
    target = _target(cfg, section)
    known = _scalar_fields(target)
    if key not in known or (section, key) in _HIDDEN:
        raise ConfigError(f"unknown config key: {section}.{key}")
    setattr(target, key, _coerce(section, key, raw, known[key]))


def parse_config(text: str, cfg: RunConfig | None = None) -> RunConfig:
    """Parse config text on top of ``cfg`` (or fresh defaults)."""
    cfg = cfg if cfg is not None else RunConfig()
    section = "run"
    seen: set[tuple[str, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section: [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"malformed config line {lineno}: {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"malformed config line {lineno}: {line.strip()!r}")
        if (section, key) in seen:
            raise ConfigError(f"duplicate config key: {section}.{key}")
        seen.add((section, key))
        set_key(cfg, section, key, raw)
    return cfg


def load_config(path, cfg: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), cfg)


def apply_override(cfg: RunConfig, spec: str) -> None:
    """Apply one ``section.key=value`` pair (bare keys land in [run])."""
    if "=" not in spec:
        raise ConfigError(f"malformed override (need key=value): {spec!r}")
    dotted, _, raw = spec.partition("=")
    dotted = dotted.strip()
    if "." in dotted:
        section, _, key = dotted.partition(".")
    else:
        section, key = "run", dotted
    set_key(cfg, section.strip(), key.strip(), raw)


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.camera_factor not in CAMERA_FACTOR_MODES:
        raise ConfigError(
            "invalid value for run.camera_factor: "
            f"{cfg.camera_factor!r} (choose from {'|'.join(CAMERA_FACTOR_MODES)})")
    if cfg.seed < 0:
        raise ConfigError("invalid value for run.seed: must be non-negative")
    for name in ("duration", "budget_factor"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"invalid value for run.{name}: must be positive")
    if cfg.log_every <= 0:
        raise ConfigError("invalid value for run.log_every: must be positive")
    od = cfg.odometry
    if od.window <= 0 or od.ctrl_per_segment < 1:
        raise ConfigError("invalid odometry window layout")
    for name in ("sigma_lidar", "sigma_gyro", "sigma_accel", "sigma_bg_walk",
                 "sigma_ba_walk", "sigma_pixel", "sigma_c2_rot",
                 "sigma_c2_trans", "huber_delta"):
        if getattr(od, name) <= 0:
            raise ConfigError(f"invalid value for odometry.{name}: must be positive")
    if od.max_iters < 1 or od.max_lidar_factors < 1 or od.track_iters < 1:
        raise ConfigError("invalid odometry iteration limits")
    if cfg.mapping.refine_rounds < 0:
        raise ConfigError("invalid value for mapping.refine_rounds: must be >= 0")
    try:
        cfg.mapping.__post_init__()
        cfg.sim.__post_init__()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, np.ndarray):
        return ", ".join(format(float(x), ".17g") for x in v)
    return str(v)


def config_text(cfg: RunConfig) -> str:
    """Serialize the resolved configuration; parses back to equal values."""
    lines = []
    for section in _SECTIONS:
        target = _target(cfg, section)
        lines.append(f"[{section}]")
        for key, value in _scalar_fields(target).items():
            if (section, key) in _HIDDEN:
                continue
            if isinstance(value, np.ndarray) and value.shape != (3,):
                continue  # rotation mounts stay code-defined
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def resolve(config_path=None, overrides=(), **direct) -> RunConfig:
    """defaults <- config file <- --set overrides <- dedicated CLI flags."""
    cfg = RunConfig()
    if config_path:
        load_config(config_path, cfg)
    for spec in overrides or ():
        apply_override(cfg, spec)
    for name, value in direct.items():
        if value is not None:
            setattr(cfg, name, value)
    return validate(cfg)
