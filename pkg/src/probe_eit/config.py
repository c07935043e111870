"""Experiment configuration: INI-style ``[section]`` / ``key = value`` text.

Every section maps onto one dataclass; keys left out keep their defaults and
unknown keys are rejected.  Tuples are written as comma separated numbers
and ``none`` stands for an unset optional value.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .linear import RegularizationPrior
from .mesh import ProbeSpec
from .network import PsoConfig
from .pdipm import TvConfig
from .scenario import PlacementConfig


@dataclass(frozen=True)
class MeshSettings:
    """Lengths in units of the probe radius; zero counts mean automatic."""

    outer_factor: float = 50.0
    grading: float = 1.08
    ring_count: int = 0
    angular_count: int = 0
    node_budget: int = 5000
    reduce_factor: float = 12.0


@dataclass(frozen=True)
class DatasetSettings:
    count: int = 2000
    seed: int = 1


@dataclass(frozen=True)
class NoiseSettings:
    """``train_snr_db`` drives the noisy training set, ``eval_snr_db`` the noisy sweep."""

    train_snr_db: float | None = 40.0
    eval_snr_db: float | None = 40.0
    seed: int = 7


@dataclass(frozen=True)
class NetworkSettings:
    hidden: int = 48
    pca_variance: float = 1.0


@dataclass(frozen=True)
class SweepSettings:
    """Evaluation targets: ``count`` STN-proportioned ellipses at evenly spaced
    edge-to-edge distances (in probe radii), placed around the probe by a
    golden-ratio-like angle step."""

    count: int = 40
    distance_min: float = 0.2
    distance_max: float = 4.0
    semi_axes: tuple = (2.6667, 4.0)
    contrast: float = 0.1
    angle_start: float = 0.3
    angle_step: float = 2.4
    rotation_step: float = 0.7


@dataclass(frozen=True)
class ScaleSettings:
    diameters: tuple = (1.5, 9.0, 50.0)
    distance: float = 3.0
    angle: float = 0.3
    rotation: float = 0.0


@dataclass(frozen=True)
class BenchSettings:
    repeats: int = 20


SECTIONS = {
    "probe": ProbeSpec,
    "mesh": MeshSettings,
    "placement": PlacementConfig,
    "dataset": DatasetSettings,
    "noise": NoiseSettings,
    "gn": RegularizationPrior,
    "pdipm": TvConfig,
    "network": NetworkSettings,
    "pso": PsoConfig,
    "sweep": SweepSettings,
    "scale": ScaleSettings,
    "bench": BenchSettings,
}


@dataclass(frozen=True)
class ExperimentConfig:
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    mesh: MeshSettings = field(default_factory=MeshSettings)
    # training targets resemble the evaluation sweep: larger and more resistive
    placement: PlacementConfig = field(
        default_factory=lambda: PlacementConfig(semi_axis_range=(1.0, 3.0),
                                                contrast_range=(0.1, 0.5)))
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    gn: RegularizationPrior = field(default_factory=RegularizationPrior)
    pdipm: TvConfig = field(default_factory=TvConfig)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    pso: PsoConfig = field(default_factory=lambda: PsoConfig(weight_bound=32.0))
    sweep: SweepSettings = field(default_factory=SweepSettings)
    scale: ScaleSettings = field(default_factory=ScaleSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    seed: int = 0
    out_dir: str = "out"

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None
                       ) -> "ExperimentConfig":
        """Apply command-line overrides; ``seed`` replaces every seed."""
        cfg = self
        if out_dir is not None:
            cfg = dataclasses.replace(cfg, out_dir=str(out_dir))
        if seed is not None:
            cfg = dataclasses.replace(
                cfg, seed=seed,
                dataset=dataclasses.replace(cfg.dataset, seed=seed),
                noise=dataclasses.replace(cfg.noise, seed=seed),
                pso=dataclasses.replace(cfg.pso, seed=seed))
        return cfg


def _parse_value(text: str, kind, key: str):
    s = text.strip()
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    if origin in (typing.Union, types.UnionType):
        if s.lower() == "none" and type(None) in args:
            return None
        kind = next(a for a in args if a is not type(None))
        origin = typing.get_origin(kind)
    try:
        if kind is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind is int:
            return int(s)
        if kind is float:
            v = float(s)
            if math.isnan(v):
                raise ValueError(s)
            return v
        if kind is tuple or origin is tuple:
            return tuple(float(p) for p in s.split(",") if p.strip())
        if kind is str:
            return s
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}")
    raise ConfigError(f"{key}: unsupported field type {kind}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _build(section: str, base, items: dict):
    """``base`` with the keys in ``items`` replaced."""
    cls = type(base)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in items.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _parse_value(text, hints[key], f"[{section}] {key}")
    try:
        return dataclasses.replace(base, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


DEFAULTS = ExperimentConfig()


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {str(exc).splitlines()[0]}") from exc
    parts = {}
    top = {}
    for name in cp.sections():
        items = dict(cp.items(name))
        if name == "run":
            top = items
            continue
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        parts[name] = _build(name, getattr(DEFAULTS, name), items)
    extra = set(top) - {"seed", "out_dir"}
    if extra:
        raise ConfigError(f"[run] unknown key {sorted(extra)[0]!r}")
    if "seed" in top:
        parts["seed"] = _parse_value(top["seed"], int, "[run] seed")
        if parts["seed"] < 0:
            raise ConfigError("[run] seed must be non-negative")
    if "out_dir" in top:
        parts["out_dir"] = top["out_dir"]
    return ExperimentConfig(**parts)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_config(text)


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    lines = ["[run]", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}", ""]
    for name in SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
