"""Disorder ensembles: run a solver over many network realizations and reduce.

Realization ``r`` uses seed ``base_seed + r`` for its network (and for its
DTWA samples, on a separate Philox stream), so the manifest written next to
the outputs regenerates every trace bit for bit.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import collective, hamcore, netgen, semiclassics
from .hamcore import QuenchSpec

SOLVERS = ("exact", "collective", "meanfield", "dtwa")
SOLVER_OBSERVABLES = {
    "exact": ("theta_z", "theta_z_sq", "log_g2", "re_g", "im_g"),
    "collective": ("theta_z", "theta_z_sq", "log_g2", "re_g", "im_g"),
    "meanfield": ("theta_z", "theta_z_sq", "k_mean"),
    "dtwa": ("theta_z", "theta_z_sq", "k_mean"),
}


class RealizationError(RuntimeError):
    def __init__(self, seed: int, cause: BaseException):
        self.seed = seed
        super().__init__(f"realization with seed {seed} failed: {cause}")


@dataclass(frozen=True)
class EnsembleSpec:
    n: int
    p: float
    quench: QuenchSpec
    solver: str = "exact"
    n_real: int = 1
    base_seed: int = 0
    n_traj: int = 100
    exact_method: str = "auto"
    mf_init: str = "uniform"
    init_eps: float = 1e-3
    field_dtype: str = "float64"

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.n_real < 1:
            raise ValueError("n_real must be >= 1")
        if self.solver == "collective" and self.p != 1.0:
            raise ValueError("the collective solver describes p = 1 only")
        if self.mf_init not in semiclassics.MF_INITS:
            raise ValueError(f"mf_init must be one of {semiclassics.MF_INITS}, got {self.mf_init!r}")
        if self.field_dtype not in ("float32", "float64"):
            raise ValueError(f"field_dtype must be float32 or float64, got {self.field_dtype!r}")
        if self.solver == "exact" and self.n > hamcore.MAX_SITES:
            raise hamcore.SystemTooLarge(f"exact solver supports N <= {hamcore.MAX_SITES}, got {self.n}")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.n_real)]

    def manifest(self) -> dict[str, dict[str, object]]:
        q = self.quench
        return {
            "network": {"n": self.n, "p": self.p},
            "quench": {"hf": q.h_f, "J": q.J, "dt": q.dt, "t_max": q.t_max},
            "solver": {"solver": self.solver, "n_traj": self.n_traj, "exact_method": self.exact_method,
                       "mf_init": self.mf_init, "init_eps": self.init_eps, "field_dtype": self.field_dtype},
            "ensemble": {"n_real": self.n_real, "seed": self.base_seed,
                         "seeds": ", ".join(map(str, self.seeds))},
        }


def run_realization(spec: EnsembleSpec, seed: int) -> dict[str, np.ndarray]:
    """One generate -> evolve -> observe pipeline."""
    q = spec.quench
    if spec.solver == "collective":
        tr = collective.evolve_collective(spec.n, q)
        return _trace_dict(tr)
    net = netgen.generate(spec.n, spec.p, seed)
    if spec.solver == "exact":
        return _trace_dict(hamcore.quench_trace(net, q, method=spec.exact_method))
    if spec.solver == "meanfield":
        rec = semiclassics.meanfield_sweep(net, [q.h_f], q, field_dtype=spec.field_dtype,
                                           init=spec.mf_init, init_eps=spec.init_eps)
        return {"theta_z": rec.theta_z[:, 0], "theta_z_sq": rec.theta_z_sq[:, 0],
                "k_mean": rec.k_mean[:, 0]}
    batch = semiclassics.dtwa_run(net, q, spec.n_traj, seed)
    return {name: batch.mean(name) for name in batch.OBS}


def _trace_dict(tr: hamcore.ObservableTrace) -> dict[str, np.ndarray]:
    return {"theta_z": tr.theta_z, "theta_z_sq": tr.theta_z_sq, "log_g2": tr.log_g2,
            "re_g": tr.amplitude.real, "im_g": tr.amplitude.imag}


def _guarded(args):
    spec, seed = args
    try:
        return run_realization(spec, seed)
    except Exception as exc:  # re-raised with the seed attached
        raise RealizationError(seed, exc) from exc


def map_realizations(func, items, workers: int = 1):
    """Ordered map, optionally over a process pool."""
    if workers <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


@dataclass
class SeriesEnsemble:
    n: int
    times: np.ndarray
    seeds: list[int]
    traces: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (n_real, nt)

    @property
    def n_real(self) -> int:
        return len(self.seeds)

    def mean(self, name: str) -> np.ndarray:
        return self.traces[name].mean(axis=0)

    def se(self, name: str) -> np.ndarray:
        vals = self.traces[name]
        if len(vals) < 2:
            return np.zeros(vals.shape[1])
        return vals.std(axis=0, ddof=1) / math.sqrt(len(vals))

    def rate_bar(self) -> np.ndarray:
        return avg_rate_function(self)

    def quenched_rate(self) -> np.ndarray:
        """Realization average of lambda(t) (log taken before averaging)."""
        return (-self.traces["log_g2"] / self.n).mean(axis=0)

    def write_reduced_csv(self, path: str | Path, name: str) -> None:
        write_columns(path, ("t", "mean", "se"), (self.times, self.mean(name), self.se(name)))

    def write_rate_csv(self, path: str | Path) -> None:
        write_columns(path, ("t", "lambda_bar"), (self.times, self.rate_bar()))


def write_columns(path, header, cols) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([repr(float(x)) for x in row])


def run_ensemble(spec: EnsembleSpec, *, workers: int = 1,
                 manifest_path: str | Path | None = None) -> SeriesEnsemble:
    if manifest_path is not None:
        from .config import write_ini
        write_ini(manifest_path, spec.manifest())
    results = map_realizations(_guarded, [(spec, s) for s in spec.seeds], workers)
    names = results[0].keys()
    traces = {k: np.stack([r[k] for r in results]) for k in names}
    return SeriesEnsemble(spec.n, spec.quench.times, spec.seeds, traces)


def log_mean_exp(logs: np.ndarray, axis: int = 0) -> np.ndarray:
    """log(mean(exp(logs))) with max shifting; -inf columns stay -inf."""
    logs = np.asarray(logs, dtype=float)
    top = np.max(logs, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(logs - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(np.where(np.isfinite(top), out, top), axis=axis)


def avg_rate_function(series: SeriesEnsemble) -> np.ndarray:
    """-(1/N) ln << |G|^2 >>, averaging the echo before taking the log."""
    if "log_g2" not in series.traces:
        raise KeyError("series has no per-realization log|G|^2")
    return -log_mean_exp(series.traces["log_g2"], axis=0) / series.n


def time_average(times: np.ndarray, values: np.ndarray, t_f: float) -> float:
    """(1/t_f) * trapezoid integral of ``values`` over [0, t_f]."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if not t_f > 0:
        raise ValueError("t_f must be positive")
    if t_f > times[-1] + 1e-9 * max(1.0, abs(times[-1])):
        raise ValueError(f"t_f = {t_f} lies beyond the grid end {times[-1]}")
    t_f = min(t_f, times[-1])
    k = int(np.searchsorted(times, t_f, side="right"))
    ts = times[:k]
    vs = values[:k]
    if ts[-1] < t_f:
        end = np.interp(t_f, times, values)
        ts = np.append(ts, t_f)
        vs = np.append(vs, end)
    return float(np.trapezoid(vs, ts) / t_f)


def _runs(values: np.ndarray):
    """Collapse equal consecutive values: (first index, value) per run."""
    v = np.asarray(values, dtype=float)
    starts = np.flatnonzero(np.concatenate([[True], v[1:] != v[:-1]]))
    return starts, v[starts]


def turning_points(times: np.ndarray, values: np.ndarray) -> list[tuple[float, str]]:
    """Interior local extrema; a flat extremum is reported at its earliest index."""
    values = np.asarray(values)
    if len(values) < 3:
        raise ValueError("need at least 3 samples")
    starts, v = _runs(values)
    events = []
    for k in range(1, len(v) - 1):
        if v[k] < v[k - 1] and v[k] < v[k + 1]:
            events.append((float(times[starts[k]]), "lower"))
        elif v[k] > v[k - 1] and v[k] > v[k + 1]:
            events.append((float(times[starts[k]]), "upper"))
    return events


def second_difference(values: np.ndarray, dt: float) -> np.ndarray:
    """|v[i+1] - 2 v[i] + v[i-1]| / dt for interior points (NaN-free: non-finite -> inf)."""
    v = np.asarray(values, dtype=float)
    with np.errstate(invalid="ignore"):
        d2 = np.abs(v[2:] - 2 * v[1:-1] + v[:-2]) / dt
    return np.where(np.isfinite(d2), d2, np.inf)


def cusp_detect(times: np.ndarray, rate: np.ndarray, threshold: float | None = None,
                rel_threshold: float = 50.0) -> list[float]:
    """Times where the slope of ``rate`` jumps by more than ``threshold``.

    The default threshold is ``rel_threshold`` times the median second
    difference.  Only local maxima of the slope jump are reported.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 3:
        return []
    dt = float(np.median(np.diff(times)))
    d2 = second_difference(rate, dt)
    if threshold is None:
        finite = d2[np.isfinite(d2)]
        threshold = rel_threshold * float(np.median(finite)) if len(finite) else math.inf
    padded = np.concatenate([[-1.0], d2, [-1.0]])
    hits = []
    for k in range(len(d2)):
        c = padded[k + 1]
        if c > threshold and c >= padded[k + 2] and c > padded[k]:
            hits.append(float(times[k + 1]))
    return hits


def local_minima(times, values) -> list[float]:
    return [t for t, kind in turning_points(times, values) if kind == "lower"]


def local_maxima(times, values) -> list[float]:
    return [t for t, kind in turning_points(times, values) if kind == "upper"]


def fig2a_t_final(h_f: float, J: float = 1.0, n_periods: float = 100.0,
                  t_abs: float = 100.0) -> float:
    """Averaging window: n_periods analytic periods below h_f = J, t_abs above."""
    if h_f < J:
        return n_periods * collective.classical_period(h_f, J)
    return t_abs


@dataclass
class TimeAverageSweep:
    """Realization-resolved time averages of Theta^z over a field sweep."""
    h_values: np.ndarray
    t_final: np.ndarray
    seeds: list[int]
    values: np.ndarray  # (n_real, n_h)

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def se(self) -> np.ndarray:
        if len(self.values) < 2:
            return np.zeros(len(self.h_values))
        return self.values.std(axis=0, ddof=1) / math.sqrt(len(self.values))

    def analytic(self, J: float = 1.0) -> np.ndarray:
        return np.array([collective.time_avg_theta_thermo(h, J) for h in self.h_values])

    def write_csv(self, path: str | Path, J: float = 1.0) -> None:
        write_columns(path, ("hf", "time_avg_theta", "se", "t_final", "analytic"),
                       (self.h_values, self.mean(), self.se(), self.t_final, self.analytic(J)))


def _sweep_realization(args):
    spec, h_values, t_final, seed = args
    net = netgen.generate(spec.n, spec.p, seed)
    q = spec.quench
    # round the end up to a grid point so every window lies inside the record
    t_end = math.ceil(float(np.max(t_final)) / q.dt - 1e-9) * q.dt
    run = QuenchSpec(q.h_f, q.J, q.dt, t_end, q.h_i)
    rec = semiclassics.meanfield_sweep(net, h_values, run, field_dtype=spec.field_dtype,
                                       init=spec.mf_init, init_eps=spec.init_eps)
    return np.array([time_average(rec.times, rec.theta_z[:, b], tf) for b, tf in enumerate(t_final)])


def time_average_sweep(spec: EnsembleSpec, h_values, *, n_periods: float = 100.0,
                       t_abs: float = 100.0, workers: int = 1) -> TimeAverageSweep:
    """Mean-field time averages of Theta^z for every field in ``h_values``.

    All fields of one realization share the network and are integrated as one
    batch up to the longest window; ``spec.quench`` supplies J and dt.
    """
    if spec.solver != "meanfield":
        raise ValueError("the time-average sweep uses the mean-field solver")
    h = np.asarray(h_values, dtype=float)
    t_final = np.array([fig2a_t_final(x, spec.quench.J, n_periods, t_abs) for x in h])
    rows = map_realizations(_sweep_realization, [(spec, h, t_final, s) for s in spec.seeds], workers)
    return TimeAverageSweep(h, t_final, spec.seeds, np.stack(rows))
