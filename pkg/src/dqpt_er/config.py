"""Run configuration: defaults, INI files, command-line overrides and validation.

A config file has one section per concern::

    [network]
    n = 12
    p = 0.5

    [quench]
    hf = 2.0

Every run writes its fully resolved configuration in the same format as
``manifest.ini``, so a manifest can be fed back with ``--config``.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import corrstats, ensemble, hamcore, semiclassics

COMMANDS = ("generate", "quench", "ensemble", "corrstats", "analytic")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_window(text: str) -> tuple[float, float] | None:
    if text.strip().lower() in ("", "none"):
        return None
    vals = _floats(text)
    if len(vals) != 2:
        raise ValueError("expected two numbers 'lo, hi'")
    return vals


@dataclass
class RunConfig:
    command: str
    out: str = "out"
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    # network
    n: int = 12
    p: float = 0.5
    # quench
    hf: float = 2.0
    J: float = 1.0
    dt: float = 0.01
    t_max: float = 5.0
    # solver
    solver: str = "exact"
    n_traj: int = 100
    exact_method: str = "auto"
    mf_init: str = "uniform"
    init_eps: float = 1e-3
    field_dtype: str = "float64"
    # ensemble
    n_real: int = 1
    seed: int = 0
    # field sweep (time averages); empty means a single h_f run
    hf_values: tuple[float, ...] = ()
    n_periods: float = 100.0
    t_abs: float = 100.0
    # moment statistics
    m: int = 2
    n_ladder: tuple[int, ...] = ()
    window: tuple[float, float] | None = None
    stride: int = 1
    tuple_budget: int | None = None
    tuple_seed: int = 0
    min_realizations: int = corrstats.MIN_REALIZATIONS

    def quench_spec(self, hf: float | None = None) -> hamcore.QuenchSpec:
        return hamcore.QuenchSpec(self.hf if hf is None else hf, self.J, self.dt, self.t_max)

    def ensemble_spec(self, n: int | None = None) -> ensemble.EnsembleSpec:
        return ensemble.EnsembleSpec(self.n if n is None else n, self.p, self.quench_spec(), self.solver,
                                     self.n_real, self.seed, self.n_traj, self.exact_method,
                                     self.mf_init, self.init_eps, self.field_dtype)

    @property
    def ladder(self) -> tuple[int, ...]:
        return self.n_ladder or (self.n,)


# (section, key) -> (field name, parser)
_SCHEMA: dict[tuple[str, str], tuple[str, object]] = {
    ("run", "command"): ("command", str),
    ("run", "out"): ("out", str),
    ("run", "threads"): ("threads", int),
    ("network", "n"): ("n", int),
    ("network", "p"): ("p", float),
    ("quench", "hf"): ("hf", float),
    ("quench", "j"): ("J", float),
    ("quench", "dt"): ("dt", float),
    ("quench", "t_max"): ("t_max", float),
    ("solver", "solver"): ("solver", str),
    ("solver", "n_traj"): ("n_traj", int),
    ("solver", "exact_method"): ("exact_method", str),
    ("solver", "mf_init"): ("mf_init", str),
    ("solver", "init_eps"): ("init_eps", float),
    ("solver", "field_dtype"): ("field_dtype", str),
    ("ensemble", "n_real"): ("n_real", int),
    ("ensemble", "seed"): ("seed", int),
    ("sweep", "hf_values"): ("hf_values", _floats),
    ("sweep", "n_periods"): ("n_periods", float),
    ("sweep", "t_abs"): ("t_abs", float),
    ("corrstats", "m"): ("m", int),
    ("corrstats", "n_ladder"): ("n_ladder", _ints),
    ("corrstats", "window"): ("window", _opt_window),
    ("corrstats", "stride"): ("stride", int),
    ("corrstats", "tuple_budget"): ("tuple_budget", _opt_int),
    ("corrstats", "tuple_seed"): ("tuple_seed", int),
    ("corrstats", "min_realizations"): ("min_realizations", int),
}
_FIELD_KEY = {name: f"{sec}.{key}" for (sec, key), (name, _) in _SCHEMA.items()}
# keys written to manifests for the record only
_INFORMATIONAL = {("ensemble", "seeds")}


def read_ini(path: str | Path) -> dict[str, object]:
    """Parse a config file into {field: value}; unknown keys are errors."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values: dict[str, object] = {}
    for sec in parser.sections():
        for key, raw in parser.items(sec):
            if (sec, key) in _INFORMATIONAL:
                continue
            if (sec, key) not in _SCHEMA:
                raise ConfigError(f"{sec}.{key}: unknown setting")
            name, conv = _SCHEMA[(sec, key)]
            try:
                values[name] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}: cannot parse {raw!r} ({exc})") from None
    return values


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_ini(path: str | Path, sections: dict[str, dict[str, object]]) -> None:
    parser = configparser.ConfigParser()
    for sec, items in sections.items():
        parser[sec] = {k: _fmt(v) for k, v in items.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def manifest_sections(cfg: RunConfig) -> dict[str, dict[str, object]]:
    """The fully resolved config (every field, defaults included) plus derived seeds."""
    out: dict[str, dict[str, object]] = {}
    for (sec, key), (name, _) in _SCHEMA.items():
        out.setdefault(sec, {})[key] = getattr(cfg, name)
    out["ensemble"]["seeds"] = [cfg.seed + r for r in range(cfg.n_real)]
    return out


def build_config(command: str, path: str | Path | None = None,
                 overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, then the config file, then overrides (``None`` values ignored)."""
    values: dict[str, object] = {}
    if path is not None:
        values.update(read_ini(path))
    values.pop("command", None)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown settings: {sorted(unknown)}")
    cfg = RunConfig(command=command, **values)
    validate(cfg)
    return cfg


def _fail(name: str, msg: str):
    raise ConfigError(f"{_FIELD_KEY.get(name, name)}: {msg}")


def validate(cfg: RunConfig) -> None:
    if cfg.command not in COMMANDS:
        _fail("command", f"must be one of {COMMANDS}, got {cfg.command!r}")
    if cfg.n < 1:
        _fail("n", f"must be a positive integer, got {cfg.n}")
    if not 0 < cfg.p <= 1:
        _fail("p", f"must lie in (0, 1], got {cfg.p}")
    if not cfg.hf > 0:
        _fail("hf", f"must be positive, got {cfg.hf}")
    for h in cfg.hf_values:
        if not h > 0:
            _fail("hf_values", f"every field must be positive, got {h}")
    if not cfg.dt > 0:
        _fail("dt", f"must be positive, got {cfg.dt}")
    if not cfg.t_max >= 0:
        _fail("t_max", f"must be non-negative, got {cfg.t_max}")
    if cfg.t_max < cfg.dt and cfg.t_max != 0:
        _fail("t_max", f"must be 0 or at least dt = {cfg.dt}, got {cfg.t_max}")
    if cfg.solver not in ensemble.SOLVERS:
        _fail("solver", f"must be one of {ensemble.SOLVERS}, got {cfg.solver!r}")
    if cfg.exact_method not in ("auto", "eig", "krylov"):
        _fail("exact_method", f"must be auto, eig or krylov, got {cfg.exact_method!r}")
    if cfg.mf_init not in semiclassics.MF_INITS:
        _fail("mf_init", f"must be one of {semiclassics.MF_INITS}, got {cfg.mf_init!r}")
    if not 0 <= cfg.init_eps < 0.5:
        _fail("init_eps", f"must lie in [0, 0.5), got {cfg.init_eps}")
    if cfg.field_dtype not in ("float32", "float64"):
        _fail("field_dtype", f"must be float32 or float64, got {cfg.field_dtype!r}")
    for name in ("n_real", "n_traj", "threads", "stride", "min_realizations"):
        if getattr(cfg, name) < 1:
            _fail(name, f"must be >= 1, got {getattr(cfg, name)}")
    if cfg.seed < 0:
        _fail("seed", f"must be non-negative, got {cfg.seed}")
    if cfg.tuple_seed < 0:
        _fail("tuple_seed", f"must be non-negative, got {cfg.tuple_seed}")
    if not cfg.n_periods > 0 or not cfg.t_abs > 0:
        _fail("n_periods" if not cfg.n_periods > 0 else "t_abs", "must be positive")
    if not 2 <= cfg.m <= 4:
        _fail("m", f"moment order must lie in 2..4, got {cfg.m}")
    if cfg.tuple_budget is not None and cfg.tuple_budget < 1:
        _fail("tuple_budget", f"must be positive, got {cfg.tuple_budget}")
    for n in cfg.n_ladder:
        if n < cfg.m:
            _fail("n_ladder", f"every N must be at least m = {cfg.m}, got {n}")
    if cfg.window is not None and not cfg.window[0] <= cfg.window[1]:
        _fail("window", f"lower end exceeds upper end: {cfg.window}")
    if cfg.solver == "collective" and cfg.p != 1.0 and cfg.command in ("quench", "ensemble"):
        _fail("solver", f"collective solver describes p = 1 only, got p = {cfg.p}")
    if cfg.command in ("quench", "ensemble") and cfg.solver == "exact" and cfg.n > hamcore.MAX_SITES:
        _fail("n", f"exact solver supports N <= {hamcore.MAX_SITES}, got {cfg.n}")
    if cfg.command == "corrstats":
        for n in cfg.ladder:
            if n > corrstats.MAX_MOMENT_SITES:
                _fail("n_ladder" if cfg.n_ladder else "n",
                      f"exact moments need N <= {corrstats.MAX_MOMENT_SITES}, got {n}")
