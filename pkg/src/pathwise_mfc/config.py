"""Strict JSON run configuration."""

from __future__ import annotations

import json
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields

COMMANDS = ("sample-noise", "solve-pathwise", "value", "mfg", "verify", "replay")
CHECKS = (
    "superposition",
    "value_equivalence",
    "zero_intensity",
    "moment_growth",
    "strict_gap",
    "value_continuity",
    "martingale_residual",
    "pathwise_mfe",
)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class ProblemSpec:
    name: str = "lq1d"
    overrides: dict[str, float] = field(default_factory=dict)


@dataclass
class Numerics:
    step: float = 2.0**-6
    n_time_cells: int = 8
    n_space_cells: int = 16
    control_points: int = 41
    control_range: list[float] = field(default_factory=lambda: [-5.0, 5.0])
    n_train: int = 1000
    n_eval: int = 2000
    max_sweeps: int = 4
    n_paths: int = 100
    n_particles: int = 4000
    jump_cap: int = 1
    n_buckets: int = 1
    n_train_per_path: int = 200
    refine_paths: int = 10
    zero_paths: int = 10
    levels: list[list[float]] = field(default_factory=lambda: [[2500.0, 2.0**-8], [10000.0, 2.0**-10]])
    martingale_levels: list[list[float]] = field(default_factory=lambda: [[10000.0, 2.0**-9], [10000.0, 2.0**-10]])
    moment_rates: list[float] = field(default_factory=lambda: [2.0])
    moment_paths: int = 200
    moment_particles: int = 500
    moment_order: float = 4.0
    perturbation_scales: list[float] = field(default_factory=lambda: [0.4, 0.2, 0.1])
    continuity_paths: int = 20
    mfg_paths: int = 50
    max_iters: int = 8
    damping: float = 1.0
    scheme: str = "picard"


@dataclass
class Tolerances:
    superposition_w2: float = 0.05
    value_rel: float = 0.05
    zero_rel: float = 0.02
    strict_rel: float = 0.02
    entropy_fraction: float = 0.25
    continuity_rel: float = 0.02
    ratio_band: list[float] = field(default_factory=lambda: [1.5, 3.0])
    mfe_residual: float = 0.02
    exploit_rel: float = 0.02
    consistency_w2: float = 0.05
    converged_fraction: float = 0.9


@dataclass
class RunConfig:
    command: str = "verify"
    checks: list[str] = field(default_factory=list)
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    numerics: Numerics = field(default_factory=Numerics)
    tolerances: Tolerances = field(default_factory=Tolerances)
    path: list[list[float]] | None = field(default_factory=lambda: [[0.3, 1.0], [0.7, 1.0]])
    seed: int = 0
    workers: int = 1
    out: str = "out"
    manifest: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_POSITIVE = {
    "step", "n_time_cells", "n_space_cells", "control_points", "n_train", "n_eval", "max_sweeps", "n_paths",
    "n_particles", "n_buckets", "n_train_per_path", "refine_paths", "zero_paths", "moment_paths",
    "moment_particles", "moment_order", "continuity_paths", "mfg_paths", "max_iters", "damping", "workers",
}


def _check_type(path: str, value, tp):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        return _check_type(path, value, next(a for a in args if a is not type(None)))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return [_check_type(f"{path}[{i}]", v, args[0]) for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {value!r}")
        return {k: _check_type(f"{path}.{k}", v, args[1]) for k, v in value.items()}
    if isinstance(tp, type) and hasattr(tp, "__dataclass_fields__"):
        return _build(tp, value, path)
    raise ConfigError(path, f"unsupported type {tp}")


def _build(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for f in fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in data:
            v = _check_type(sub, data[f.name], hints[f.name])
            if f.name in _POSITIVE and v is not None and v <= 0:
                raise ConfigError(sub, "must be positive")
            kwargs[f.name] = v
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(sub, "missing")
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.command not in COMMANDS:
        raise ConfigError("command", f"unknown command {cfg.command!r}; choose from {', '.join(COMMANDS)}")
    for i, c in enumerate(cfg.checks):
        if c not in CHECKS:
            raise ConfigError(f"checks[{i}]", f"unknown check {c!r}; choose from {', '.join(CHECKS)}")
    if cfg.command == "replay" and not cfg.manifest:
        raise ConfigError("manifest", "replay needs a manifest file")
    n = cfg.numerics
    for name in ("levels", "martingale_levels"):
        lv = getattr(n, name)
        if not lv:
            raise ConfigError(f"numerics.{name}", "must be nonempty")
        for i, pair in enumerate(lv):
            if len(pair) != 2 or pair[0] < 1 or pair[0] != int(pair[0]) or pair[1] <= 0:
                raise ConfigError(f"numerics.{name}[{i}]", "expected [n_particles, step] with integer n >= 1 and step > 0")
    if len(n.control_range) != 2 or n.control_range[0] >= n.control_range[1]:
        raise ConfigError("numerics.control_range", "expected [low, high] with low < high")
    if n.scheme not in ("picard", "fictitious"):
        raise ConfigError("numerics.scheme", "must be 'picard' or 'fictitious'")
    if n.damping > 1:
        raise ConfigError("numerics.damping", "must lie in (0, 1]")
    if n.jump_cap < 0:
        raise ConfigError("numerics.jump_cap", "must be >= 0")
    if cfg.seed < 0:
        raise ConfigError("seed", "must be >= 0")
    if cfg.path is not None:
        for i, ev in enumerate(cfg.path):
            if len(ev) < 2:
                raise ConfigError(f"path[{i}]", "expected [time, mark, ...]")
    from .model import build_problem

    try:
        build_problem(cfg.problem.name, cfg.problem.overrides)
    except KeyError as e:
        raise ConfigError("problem", str(e.args[0]) if e.args else "unknown problem") from None
    except ValueError as e:
        raise ConfigError("problem.overrides", str(e)) from None
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    return _validate(_build(RunConfig, data))


def parse_config(text: str) -> RunConfig:
    """Parse JSON text; syntax errors report line and column, field errors the field path."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"line {e.lineno}, column {e.colno}: {e.msg}") from None
    return config_from_dict(data)


def config_digest(cfg: RunConfig) -> str:
    import hashlib

    d = cfg.to_dict()
    for k in ("workers", "out", "manifest"):
        d.pop(k)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()
