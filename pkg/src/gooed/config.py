"""Run configuration: INI sections with documented defaults and strict keys.

Every key below has a default; unknown sections or keys are rejected.

``[model]``
    n (46), diffusion (0.001), final_time (0.8), time_steps (40),
    prediction_time (1.0), velocity (``default`` or a velocity-file path),
    advection (centered | upwind), observation_times (blank: final_time only),
    gamma (1), delta (8), robin_beta (blank: sqrt(gamma*delta)),
    prior_mean (0.25), noise_std (0.01)
``[goal]``
    which (left | right | both), width (0.02)
``[sensors]``
    layout (nine | seventyfive | file), file (CSV with index,x,y),
    interpolation (bilinear | nearest)
``[lowrank]``
    mode (lowrank | exact), k (1), l (20), eps_zeta (0), eps_lambda (0),
    oversampling (10), power_iterations (1), seed (0)
``[optimize]``
    r (5), algorithm (swapping | standard), max_loops (20),
    eig_tol (blank: off), random_n (200), random_seed (0),
    exhaustive_cap (2000000)
``[spectrum]``
    resolutions (``23, 46``), count (10)
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .exceptions import ConfigError


def _floats(text):
    text = text.strip()
    return tuple(float(t) for t in text.split(",")) if text else ()


def _ints(text):
    text = text.strip()
    return tuple(int(t) for t in text.split(",")) if text else ()


def _opt_float(text):
    text = text.strip()
    return float(text) if text else None


@dataclass(frozen=True)
class ModelSection:
    n: int = 46
    diffusion: float = 0.001
    final_time: float = 0.8
    time_steps: int = 40
    prediction_time: float = 1.0
    velocity: str = "default"
    advection: str = "centered"
    observation_times: Tuple[float, ...] = ()
    gamma: float = 1.0
    delta: float = 8.0
    robin_beta: Optional[float] = None
    prior_mean: float = 0.25
    noise_std: float = 0.01


@dataclass(frozen=True)
class GoalSection:
    which: str = "left"
    width: float = 0.02


@dataclass(frozen=True)
class SensorSection:
    layout: str = "nine"
    file: str = ""
    interpolation: str = "bilinear"


@dataclass(frozen=True)
class LowRankSection:
    mode: str = "lowrank"
    k: int = 1
    l: int = 20
    eps_zeta: float = 0.0
    eps_lambda: float = 0.0
    oversampling: int = 10
    power_iterations: int = 1
    seed: int = 0


@dataclass(frozen=True)
class OptimizeSection:
    r: int = 5
    algorithm: str = "swapping"
    max_loops: int = 20
    eig_tol: Optional[float] = None
    random_n: int = 200
    random_seed: int = 0
    exhaustive_cap: int = 2_000_000


@dataclass(frozen=True)
class SpectrumSection:
    resolutions: Tuple[int, ...] = (23, 46)
    count: int = 10


_SECTIONS = {
    "model": ModelSection,
    "goal": GoalSection,
    "sensors": SensorSection,
    "lowrank": LowRankSection,
    "optimize": OptimizeSection,
    "spectrum": SpectrumSection,
}

_PARSERS = {
    ("model", "observation_times"): _floats,
    ("model", "robin_beta"): _opt_float,
    ("optimize", "eig_tol"): _opt_float,
    ("spectrum", "resolutions"): _ints,
}

_CHOICES = {
    ("model", "advection"): ("centered", "upwind"),
    ("goal", "which"): ("left", "right", "both"),
    ("sensors", "layout"): ("nine", "seventyfive", "file"),
    ("sensors", "interpolation"): ("bilinear", "nearest"),
    ("lowrank", "mode"): ("lowrank", "exact"),
    ("optimize", "algorithm"): ("swapping", "standard"),
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = ModelSection()
    goal: GoalSection = GoalSection()
    sensors: SensorSection = SensorSection()
    lowrank: LowRankSection = LowRankSection()
    optimize: OptimizeSection = OptimizeSection()
    spectrum: SpectrumSection = SpectrumSection()
    base_dir: Path = Path(".")

    def validate(self):
        m, lr, op = self.model, self.lowrank, self.optimize
        for (sec, key), allowed in _CHOICES.items():
            value = getattr(getattr(self, sec), key)
            if value not in allowed:
                raise ConfigError(f"[{sec}] {key} = {value!r}; expected one of {allowed}")
        positive = [("model", "diffusion"), ("model", "final_time"), ("model", "time_steps"),
                    ("model", "prediction_time"), ("model", "gamma"), ("model", "delta"),
                    ("model", "noise_std"), ("optimize", "r"), ("optimize", "max_loops"),
                    ("optimize", "random_n"), ("optimize", "exhaustive_cap"), ("spectrum", "count")]
        for sec, key in positive:
            value = getattr(getattr(self, sec), key)
            if not value > 0 or (isinstance(value, float) and not math.isfinite(value)):
                raise ConfigError(f"[{sec}] {key} must be positive, got {value!r}")
        if m.n < 16:
            raise ConfigError("[model] n must be at least 16")
        if lr.k < 0 or lr.l < 0 or lr.oversampling < 0 or lr.power_iterations < 0:
            raise ConfigError("[lowrank] k, l, oversampling and power_iterations must be nonnegative")
        if lr.eps_zeta < 0 or lr.eps_lambda < 0:
            raise ConfigError("[lowrank] tolerances must be nonnegative")
        if not 0 <= lr.seed < 2 ** 64 or not 0 <= op.random_seed < 2 ** 64:
            raise ConfigError("seeds must fit in an unsigned 64-bit integer")
        if self.sensors.layout == "file" and not self.sensors.file:
            raise ConfigError("[sensors] layout = file needs a file key")
        if not self.spectrum.resolutions:
            raise ConfigError("[spectrum] resolutions must list at least one grid size")
        if any(n < 16 for n in self.spectrum.resolutions):
            raise ConfigError("[spectrum] resolutions must be at least 16")
        return self

    def resolve_path(self, value):
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed):
        """Override both the sketch seed and the random-baseline seed."""
        if seed is None:
            return self
        return replace(self, lowrank=replace(self.lowrank, seed=seed),
                       optimize=replace(self.optimize, random_seed=seed)).validate()

    def canonical_text(self):
        """Stable text form of every resolved key, used for hashing."""
        lines = []
        for sec in _SECTIONS:
            obj = getattr(self, sec)
            lines.append(f"[{sec}]")
            for f in fields(obj):
                lines.append(f"{f.name} = {getattr(obj, f.name)!r}")
        for ref in self._referenced_files():
            lines.append(f"# {ref.name} sha256 {hashlib.sha256(ref.read_bytes()).hexdigest()}")
        return "\n".join(lines) + "\n"

    def _referenced_files(self):
        out = []
        if self.model.velocity != "default":
            out.append(self.resolve_path(self.model.velocity))
        if self.sensors.layout == "file":
            out.append(self.resolve_path(self.sensors.file))
        return [p for p in out if p.is_file()]

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()

    def hash_hex(self) -> str:
        return self.digest().hex()


def _convert(section, key, raw, default):
    parser = _PARSERS.get((section, key))
    try:
        if parser is not None:
            return parser(raw)
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def parse_config(text: str, base_dir=".") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    kwargs = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _convert(section, key, raw, getattr(defaults, key))
        kwargs[section] = cls(**values)
    return RunConfig(base_dir=Path(base_dir), **kwargs).validate()


def load_config(path=None) -> RunConfig:
    """Read a config file; ``None`` gives the all-defaults configuration."""
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=p.parent)


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    out = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        out.append(f"[{sec}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            if v is None:
                v = ""
            elif isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        out.append("")
    return "\n".join(out)
