"""Experiment configuration: a sectioned ``key = value`` text format.

Example::

    [lattice]
    d = 2
    L = 128
    p = 0.7
    seed = 1

    [walk]
    N = 10000
    t_max = 1000

Keys are case-insensitive, unknown keys are rejected, and lists are
comma-separated.  Rectangles are ``lo:hi`` ranges per axis joined by commas,
rectangles separated by ``;``.  Options left unset resolve to defaults that
depend on ``L`` (see :meth:`ExperimentConfig.resolved`).
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields, replace

import numpy as np

STAGES = ("sample", "solve", "walk", "estimate", "report")


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.field = field
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    # [lattice]
    d: int
    L: int
    p: float
    seed: int
    # [walk]
    N: int = 1000
    t_max: float = 1000.0
    eps: float = 1.0
    start: str = "uniform"
    trajectories: int = 0
    # [solver]
    tol: float = 1e-10
    max_iter: int | None = None
    preconditioner: str = "diagonal"
    # [estimate]
    eps_list: tuple[float, ...] | None = None
    delta_list: tuple[float, ...] = (0.25, 0.125)
    M: int = 2
    rectangles: tuple[tuple[tuple[float, float], ...], ...] | None = None
    b0: int = 0
    poincare_eps: tuple[float, ...] | None = None
    poincare_trials: int = 16
    heat_t: tuple[float, ...] | None = None
    heat_N: int = 1000
    bootstrap: int = 1000
    # [output]
    dir: str = "run"
    stages: tuple[str, ...] = STAGES

    @property
    def t_micro(self) -> float:
        """Lattice time ``t_max / eps^2`` at which endpoints are taken."""
        return self.t_max / self.eps ** 2

    def resolved(self) -> "ExperimentConfig":
        """Copy with ``L``-dependent defaults filled in."""
        L, d = self.L, self.d
        eps_list = self.eps_list or (8.0 / L, 4.0 / L, 2.0 / L)
        rects = self.rectangles
        if rects is None:
            rects = tuple(tuple((0.0, 1.0) if s == 0 else (-1.0, 0.0) for s in signs)
                          for signs in np.ndindex(*(2,) * d)) + (((-1.0, 1.0),) * d,)
        pe = self.poincare_eps or (16.0 / L, 8.0 / L)
        heat = self.heat_t or tuple(float(t) for t in
                                    np.geomspace(self.t_micro / 10, self.t_micro, 12))
        return replace(self, eps_list=tuple(eps_list), rectangles=rects,
                       poincare_eps=tuple(pe), heat_t=heat)

    def chop_eps(self) -> float:
        """Scale for the chopped-box statistic: the largest enlarged box just fits."""
        return (2.0 + self.M * max(self.delta_list)) / self.L

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_SECTIONS = {
    "lattice": ("d", "L", "p", "seed"),
    "walk": ("N", "t_max", "eps", "start", "trajectories"),
    "solver": ("tol", "max_iter", "preconditioner"),
    "estimate": ("eps_list", "delta_list", "M", "rectangles", "b0", "poincare_eps",
                 "poincare_trials", "heat_t", "heat_N", "bootstrap"),
    "output": ("dir", "stages"),
}
_REQUIRED = ("d", "L", "p", "seed")


def _int(name, s):
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {s!r}", name) from None


def _float(name, s):
    try:
        v = float(s)
    except ValueError:
        raise ConfigError(f"{name} must be a number, got {s!r}", name) from None
    if not math.isfinite(v):
        raise ConfigError(f"{name} must be finite", name)
    return v


def _floats(name, s):
    parts = [x.strip() for x in s.split(",") if x.strip()]
    if not parts:
        raise ConfigError(f"{name} must be a non-empty list", name)
    return tuple(_float(name, x) for x in parts)


def _rects(name, s):
    out = []
    for rect in s.split(";"):
        if not rect.strip():
            continue
        axes = []
        for rng in rect.split(","):
            lo, sep, hi = rng.partition(":")
            if not sep:
                raise ConfigError(f"{name}: expected lo:hi, got {rng.strip()!r}", name)
            axes.append((_float(name, lo), _float(name, hi)))
        out.append(tuple(axes))
    if not out:
        raise ConfigError(f"{name} must list at least one rectangle", name)
    return tuple(out)


_PARSERS = {
    "d": _int, "L": _int, "p": _float, "seed": _int,
    "N": _int, "t_max": _float, "eps": _float, "trajectories": _int,
    "start": lambda n, s: s.strip(),
    "tol": _float, "max_iter": _int, "preconditioner": lambda n, s: s.strip(),
    "eps_list": _floats, "delta_list": _floats, "M": _int, "rectangles": _rects,
    "b0": _int, "poincare_eps": _floats, "poincare_trials": _int, "heat_t": _floats,
    "heat_N": _int, "bootstrap": _int,
    "dir": lambda n, s: s.strip(),
    "stages": lambda n, s: tuple(x.strip() for x in s.split(",") if x.strip()),
}


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1].strip().lower()
        elif cur == section and "=" in line and line.split("=", 1)[0].strip().lower() == key.lower():
            return i
    return None


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    def bad(name, msg):
        raise ConfigError(f"{name}: {msg}", name)

    if cfg.d < 2:
        bad("d", f"must be >= 2, got {cfg.d}")
    if cfg.L < 4 or cfg.L % 2:
        bad("L", f"must be an even integer >= 4, got {cfg.L}")
    if not 0.0 <= cfg.p <= 1.0:
        bad("p", f"must lie in [0, 1], got {cfg.p}")
    if not 0 <= cfg.seed < 2 ** 64:
        bad("seed", f"must be a 64-bit unsigned integer, got {cfg.seed}")
    if cfg.N < 1:
        bad("N", f"must be >= 1, got {cfg.N}")
    if not cfg.t_max > 0:
        bad("t_max", f"must be positive, got {cfg.t_max}")
    if not cfg.eps > 0:
        bad("eps", f"must be positive, got {cfg.eps}")
    if cfg.start != "uniform":
        try:
            v = int(cfg.start)
        except ValueError:
            bad("start", f"must be 'uniform' or a vertex index, got {cfg.start!r}")
        if not 0 <= v < cfg.L ** cfg.d:
            bad("start", f"vertex {v} outside the box")
    if cfg.trajectories < 0:
        bad("trajectories", "must be >= 0")
    if not 0.0 < cfg.tol < 1.0:
        bad("tol", f"must lie in (0, 1), got {cfg.tol}")
    if cfg.max_iter is not None and cfg.max_iter < 1:
        bad("max_iter", f"must be >= 1, got {cfg.max_iter}")
    if cfg.preconditioner not in ("none", "diagonal"):
        bad("preconditioner", f"must be 'none' or 'diagonal', got {cfg.preconditioner!r}")
    for e in cfg.eps_list or ():
        if not e > 0 or 1.0 / e > cfg.L / 2:
            bad("eps_list", f"each eps needs 1/eps <= L/2; got {e}")
    for e in cfg.poincare_eps or ():
        if not e > 0 or math.floor(1.0 / e + 1e-9) > cfg.L // 2 - 1:
            bad("poincare_eps", f"each eps needs floor(1/eps) <= L/2 - 1; got {e}")
    for dl in cfg.delta_list:
        if not 0.0 < dl < 1.0:
            bad("delta_list", f"each delta must lie in (0, 1); got {dl}")
        if cfg.M * dl > 2:
            bad("delta_list", f"M * delta must be <= 2; got {cfg.M} * {dl}")
    if cfg.M < 1:
        bad("M", f"must be >= 1, got {cfg.M}")
    for r in cfg.rectangles or ():
        if len(r) != cfg.d or any(not -1.0 <= lo <= hi <= 1.0 for lo, hi in r):
            bad("rectangles", f"{r} is not a d-dimensional rectangle inside [-1, 1]^d")
    if not 0 <= cfg.b0 < cfg.d:
        bad("b0", f"must be a direction index in 0..{cfg.d - 1}")
    if cfg.poincare_trials < 0:
        bad("poincare_trials", "must be >= 0")
    if any(t < 0 for t in cfg.heat_t or ()):
        bad("heat_t", "times must be non-negative")
    if cfg.heat_N < 0 or 0 < cfg.heat_N < 1000:
        bad("heat_N", f"must be 0 (skip) or >= 1000, got {cfg.heat_N}")
    if cfg.bootstrap < 2:
        bad("bootstrap", "must be >= 2")
    unknown = [s for s in cfg.stages if s not in STAGES]
    if unknown:
        bad("stages", f"unknown stage(s) {unknown}; choose from {list(STAGES)}")
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raise :class:`ConfigError` on any problem."""
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",), interpolation=None,
                                   strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside any [section]", line=exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", line=exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.option,
                          exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"cannot parse {line.strip()!r}", line=lineno) from None
    values = {}
    for section in cp.sections():
        sec = section.lower()
        if sec not in _SECTIONS:
            line = next((i for i, raw in enumerate(text.splitlines(), 1)
                         if raw.strip().lower() == f"[{sec}]"), None)
            raise ConfigError(f"unknown section [{section}]", section, line)
        canon = {k.lower(): k for k in _SECTIONS[sec]}
        for key, raw in cp.items(section):
            name = canon.get(key.lower())
            if name is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]", key,
                                  _line_of(text, sec, key))
            try:
                values[name] = _PARSERS[name](name, raw)
            except ConfigError as exc:
                raise ConfigError(str(exc), name, _line_of(text, sec, key)) from None
    missing = [k for k in _REQUIRED if k not in values]
    if missing:
        raise ConfigError(f"missing required key(s) {missing} in [lattice]", missing[0])
    return validate(ExperimentConfig(**values))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple) and v and isinstance(v[0], tuple):
        return "; ".join(", ".join(f"{lo!r}:{hi!r}" for lo, hi in r) for r in v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Inverse of :func:`parse_config`; unset optional keys are omitted."""
    out = []
    for section, keys in _SECTIONS.items():
        out.append(f"[{section}]")
        for k in keys:
            v = getattr(cfg, k)
            if v is not None:
                out.append(f"{k} = {_fmt(v)}")
        out.append("")
    return "\n".join(out)
