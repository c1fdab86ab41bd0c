"""
Run configuration: a YAML document of nested sections with validated keys.

Every section has defaults, so an empty document is the default preset:
eight cross-seeded pills on a 120 x 60 grid over [0, 2] x [0, 1], smoothstep
k = 3 with half-width 0.05, p-norm aggregation (p = 9), three stages.
Unknown keys anywhere raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .aggregation import AggregatorSpec
from .grid import GridSpec
from .objective import ConstraintSet
from .pipeline import HeuristicConfig, RefinementConfig, StageConfig, default_stages
from .solver import SolveOptions
from .transition import TransitionSpec


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass(frozen=True)
class ConstraintConfig:
    r_min: float | None = None  # defaults to the transition half-width
    r_max: float | None = 0.5
    l_min: float = 0.05
    l_max: float | None = None


@dataclass(frozen=True)
class InitConfig:
    mode: str = "cross"  # or "randcross"
    n: int = 8
    rows: int | None = None
    cols: int | None = None
    r0: float = 0.05
    theta_max: float = 10.0  # degrees

    def __post_init__(self):
        if self.mode not in ("cross", "randcross"):
            raise ValueError("init mode must be 'cross' or 'randcross'")
        if int(self.n) < 1:
            raise ValueError("init n must be >= 1")


@dataclass(frozen=True)
class TargetConfig:
    """Either a file (``path``) or ground-truth pills rasterized on the run grid.

    ``preset: five_bar`` selects the built-in synthetic five-bar pills.
    """

    path: str | None = None
    format: str | None = None
    preset: str | None = "five_bar"
    pills: tuple | None = None

    def __post_init__(self):
        if self.preset not in (None, "five_bar"):
            raise ValueError(f"unknown target preset {self.preset!r}")
        if self.format not in (None, "csv", "pgm"):
            raise ValueError("target format must be 'csv' or 'pgm'")


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = GridSpec(120, 60, Lx=2.0, Ly=1.0)
    transition: TransitionSpec = TransitionSpec()
    aggregator: AggregatorSpec = AggregatorSpec()
    constraints: ConstraintConfig = ConstraintConfig()
    stages: tuple = tuple(default_stages())
    init: InitConfig = InitConfig()
    heuristics: HeuristicConfig = HeuristicConfig()
    apply_heuristics: bool = False
    refinement: RefinementConfig = RefinementConfig()
    apply_refinement: bool = False
    solver: SolveOptions = field(default_factory=SolveOptions)
    target: TargetConfig = TargetConfig()
    seed: int = 0
    threads: int = 1
    output_dir: str = "out"

    def constraint_set(self, grid: GridSpec | None = None) -> ConstraintSet:
        c = self.constraints
        g = grid or self.grid
        r_min = self.transition.delta if c.r_min is None else c.r_min
        return ConstraintSet.for_grid(g, r_min=r_min, r_max=c.r_max, l_min=c.l_min, l_max=c.l_max)

    def solve_options(self) -> SolveOptions:
        return dataclasses.replace(self.solver, rng_seed=self.seed)


# ---------------------------------------------------------------- parsing

_SECTIONS = {
    "grid": GridSpec,
    "transition": TransitionSpec,
    "aggregator": AggregatorSpec,
    "constraints": ConstraintConfig,
    "init": InitConfig,
    "heuristics": HeuristicConfig,
    "refinement": RefinementConfig,
    "solver": SolveOptions,
    "target": TargetConfig,
}


def _init_fields(cls):
    return {f.name: f for f in dataclasses.fields(cls) if f.init}


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    return value


def _build(cls, data, where: str, base=None):
    """Instance of ``cls`` from ``data`` merged over ``base`` (or the class defaults)."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = _init_fields(cls)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    defaults = base if base is not None else cls()
    kw = {}
    for k, v in data.items():
        d = getattr(defaults, k)
        if cls is StageConfig and k in ("tspec", "aspec"):
            kw[k] = None if v is None else _build(TransitionSpec if k == "tspec" else AggregatorSpec, v,
                                                  f"{where}.{k}")
            continue
        if k == "pills" and v is not None:
            try:
                arr = np.asarray(v, dtype=float)
            except (TypeError, ValueError):
                raise ConfigError(f"{where}.pills: expected rows of 5 numbers") from None
            if arr.ndim != 2 or arr.shape[1] != 5:
                raise ConfigError(f"{where}.pills: expected rows of 5 numbers")
            kw[k] = tuple(tuple(map(float, r)) for r in arr)
            continue
        kw[k] = v if d is None else _coerce(v, d, f"{where}.{k}")
    try:
        return dataclasses.replace(defaults, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    fields = _init_fields(RunConfig)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    kw = {}
    base = RunConfig()
    for k, v in data.items():
        if k in _SECTIONS:
            kw[k] = _build(_SECTIONS[k], v, k, getattr(base, k))
        elif k == "stages":
            if not isinstance(v, list) or not v:
                raise ConfigError("stages: expected a non-empty list")
            kw[k] = tuple(_build(StageConfig, s, f"stages[{i}]") for i, s in enumerate(v))
        else:
            kw[k] = _coerce(v, getattr(base, k), k)
    try:
        cfg = RunConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    exts = [s.ext for s in cfg.stages]
    if any(b > a for a, b in zip(exts, exts[1:])):
        raise ConfigError("stages: ext must be non-increasing")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    try:
        cfg.constraint_set()
    except ValueError as exc:
        raise ConfigError(f"constraints: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML error: {exc}") from None
    return config_from_dict(data)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: RunConfig) -> str:
    """YAML text that :func:`load_config` turns back into ``cfg``."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
