"""Mean-field spin equations and the discrete truncated Wigner approximation.

Batched states are stored component-first, shape ``(3, B, N)`` for B
independent copies (trajectories or field values) of N classical spins.  A
single :data:`PhaseSpaceConfig` is an ``(N, 3)`` array of Bloch vectors.

Equations of motion, with c = 2NJ/|E| and f_i = sum_j A_ij s^z_j:

    ds^x_i/dt =  c f_i s^y_i
    ds^y_i/dt = -c f_i s^x_i + 2 h s^z_i
    ds^z_i/dt = -2 h s^y_i
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collective import momentum
from .hamcore import QuenchSpec
from .netgen import Network, philox_bits, philox_uniform

DTWA_STREAM = 1
INIT_STREAM = 3
MF_INITS = ("uniform", "perturbed")
DRIFT_TOL = 1e-6
# Largest precession angle per RK4 step before a record interval is subdivided,
# and the cap on that subdivision (a hopeless dt should still trip the guard)
MAX_ANGLE = 0.05
MAX_REFINE = 8
TRAJ_COLUMNS = ("t", "theta_z_mean", "theta_z_se", "theta_z_sq_mean", "theta_z_sq_se", "k_mean")
PORTRAIT_COLUMNS = ("t", "theta_z", "k")


class IntegrationError(RuntimeError):
    pass


class LocalField:
    """Callable z -> A z for batched z of shape (B, N).

    Dense BLAS products are used unless the graph is sparse; ``dtype`` sets the
    precision of the product (the result is always returned as float64).
    """

    def __init__(self, net: Network, dtype=np.float64, dense: bool | None = None):
        n = net.n_vertices
        self.dtype = np.dtype(dtype)
        if dense is None:
            dense = net.n_edges * 2 > 0.05 * n * n or n <= 64
        self.matrix = net.adjacency(self.dtype) if dense else net.sparse_adjacency(self.dtype)
        self.dense = dense

    def __call__(self, z: np.ndarray) -> np.ndarray:
        zz = z.astype(self.dtype, copy=False)
        out = zz @ self.matrix if self.dense else (self.matrix @ zz.T).T
        return np.asarray(out, dtype=np.float64)


@dataclass
class MeanFieldModel:
    net: Network
    h: np.ndarray | float
    J: float = 1.0
    field_dtype: object = np.float64

    def __post_init__(self):
        n, ne = self.net.n_vertices, self.net.n_edges
        self.coef = 2 * n * self.J / ne if ne else 0.0
        # h broadcasts against (B, N): scalar or column vector
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.h.ndim == 1:
            self.h = self.h[:, None]
        self.local_field = LocalField(self.net, self.field_dtype)

    def rhs(self, s: np.ndarray, field: np.ndarray | None = None) -> np.ndarray:
        x, y, z = s
        if not self.coef:
            cf = np.zeros_like(z)
        else:
            cf = self.coef * (self.local_field(z) if field is None else field)
        return np.stack([cf * y, -cf * x + 2 * self.h * z, -2 * self.h * y])

    def max_rate(self, s: np.ndarray, field: np.ndarray) -> float:
        """Largest precession rate |B_i| over spins and batch entries."""
        cf = self.coef * field if self.coef else np.zeros_like(s[2])
        return float(np.sqrt(np.max(cf * cf + 4 * self.h * self.h)))

    def energy(self, s: np.ndarray) -> np.ndarray:
        """H_mf = -(JN/|E|) sum_E z_i z_j - h sum_i x_i, per batch entry."""
        x, _, z = s
        inter = 0.25 * self.coef * np.sum(z * self.local_field(z), axis=-1) if self.coef else 0.0
        return -inter - np.sum(self.h * x, axis=-1)

    def rk4_step(self, s: np.ndarray, dt: float, field: np.ndarray | None = None) -> np.ndarray:
        k1 = self.rhs(s, field)
        k2 = self.rhs(s + 0.5 * dt * k1)
        k3 = self.rhs(s + 0.5 * dt * k2)
        k4 = self.rhs(s + dt * k3)
        return s + (dt / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def mf_rhs(net: Network, h: float, config: np.ndarray, J: float = 1.0) -> np.ndarray:
    """Time derivative of an (N, 3) configuration."""
    s = np.asarray(config, dtype=np.float64).T[:, None, :]
    return MeanFieldModel(net, h, J).rhs(s)[:, 0, :].T


def uniform_config(n: int, batch: int = 1) -> np.ndarray:
    s = np.zeros((3, batch, n))
    s[2] = 1.0
    return s


def perturbed_config(n: int, seed: int, eps: float = 1e-3, batch: int = 1) -> np.ndarray:
    """All-up configuration tilted by transverse components eps * U(-1, 1) per site.

    The tilt of site i uses Philox words 2i, 2i+1 of the init stream, so it is
    shared by every batch entry and independent of the other streams.
    """
    if not 0 <= eps < 0.5:
        raise ValueError(f"tilt amplitude must lie in [0, 0.5), got {eps}")
    u = 2 * philox_uniform(seed, INIT_STREAM, 0, 2 * n).reshape(n, 2) - 1
    s = np.empty((3, batch, n))
    s[0] = eps * u[:, 0]
    s[1] = eps * u[:, 1]
    s[2] = np.sqrt(1 - s[0] ** 2 - s[1] ** 2)
    return s


def initial_config(n: int, kind: str = "uniform", *, seed: int = 0, eps: float = 1e-3,
                   batch: int = 1) -> np.ndarray:
    if kind == "uniform":
        return uniform_config(n, batch)
    if kind == "perturbed":
        return perturbed_config(n, seed, eps, batch)
    raise ValueError(f"mean-field init must be one of {MF_INITS}, got {kind!r}")


def theta_sq_estimate(z: np.ndarray) -> np.ndarray:
    """Per-trajectory (Theta^z)^2 with same-site products set to 1.

    1/N + (1/N^2) sum_{i != j} z_i z_j, evaluated along the last axis.
    """
    n = z.shape[-1]
    tot = z.sum(axis=-1)
    return 1.0 / n + (tot ** 2 - np.sum(z * z, axis=-1)) / n ** 2


@dataclass
class TrajectoryRecord:
    """Per-copy reduced observables at every grid time, arrays of shape (nt, B)."""
    times: np.ndarray
    theta_z: np.ndarray
    theta_z_sq: np.ndarray
    k_mean: np.ndarray
    energy: np.ndarray | None = None
    length_drift: float = 0.0
    states: np.ndarray | None = None  # (nt, 3, B, N) when requested


def integrate_batch(model: MeanFieldModel, init: np.ndarray, spec: QuenchSpec, *,
                    substeps: int = 1, keep_states: bool = False, track_energy: bool = False,
                    drift_tol: float | None = DRIFT_TOL,
                    max_angle: float | None = None) -> TrajectoryRecord:
    """RK4 from ``init`` (3, B, N); records every ``spec.dt``.

    Each record interval is split into ``substeps`` equal steps. With
    ``max_angle`` set, the split is refined further whenever the fastest spin
    would precess by more than ``max_angle`` radians per step (at most
    ``MAX_REFINE`` times finer).

    Raises :class:`IntegrationError` if any spin length drifts by more than
    ``drift_tol`` (relative) over the run.
    """
    s = np.array(init, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise IntegrationError("initial configuration is not finite")
    times = spec.times
    nt = len(times)
    nb = s.shape[1]
    theta = np.empty((nt, nb))
    theta_sq = np.empty((nt, nb))
    kbar = np.empty((nt, nb))
    energy = np.empty((nt, nb)) if track_energy else None
    states = np.empty((nt,) + s.shape) if keep_states else None
    len0 = np.sqrt(np.sum(s * s, axis=0))

    def record(k, s):
        x, y, z = s
        theta[k] = z.mean(axis=-1)
        theta_sq[k] = theta_sq_estimate(z)
        kbar[k] = config_momentum(x, y, z).mean(axis=-1)
        if energy is not None:
            energy[k] = model.energy(s)
        if states is not None:
            states[k] = s

    record(0, s)
    for k in range(1, nt):
        bfield, n_sub = None, substeps
        if max_angle is not None and model.coef:
            bfield = model.local_field(s[2])
            need = math.ceil(model.max_rate(s, bfield) * spec.dt / max_angle)
            n_sub = max(substeps, min(need, MAX_REFINE * substeps))
        step = spec.dt / n_sub
        for _ in range(n_sub):
            s = model.rk4_step(s, step, bfield)
            bfield = None
        record(k, s)
    drift = float(np.max(np.abs(np.sqrt(np.sum(s * s, axis=0)) / len0 - 1))) if nt > 1 else 0.0
    if not np.all(np.isfinite(s)):
        raise IntegrationError("trajectory diverged (non-finite values); reduce dt")
    if drift_tol is not None and drift > drift_tol:
        raise IntegrationError(f"spin-length drift {drift:.3g} exceeds {drift_tol:g}; reduce dt")
    return TrajectoryRecord(times, theta, theta_sq, kbar, energy, drift, states)


def config_momentum(x, y, z):
    """k_i = atan2(-s^y, s^x)/2 with k = 0 on the poles."""
    return momentum(x, y)


def integrate_trajectory(net: Network, spec: QuenchSpec, init: np.ndarray | None = None,
                         **kw) -> TrajectoryRecord:
    """Mean-field trajectory of a single (N, 3) configuration (uniform all-up by default)."""
    n = net.n_vertices
    s0 = uniform_config(n) if init is None else np.asarray(init, dtype=float).T[:, None, :]
    return integrate_batch(MeanFieldModel(net, spec.h_f, spec.J), s0, spec, **kw)


def meanfield_sweep(net: Network, h_values, spec: QuenchSpec, *, field_dtype=np.float64,
                    init: str = "uniform", init_eps: float = 1e-3,
                    max_angle: float | None = MAX_ANGLE, **kw) -> TrajectoryRecord:
    """Mean-field runs for several fields at once (batch axis = field), same start for all."""
    h = np.asarray(h_values, dtype=float)
    model = MeanFieldModel(net, h, spec.J, field_dtype)
    s0 = initial_config(net.n_vertices, init, seed=net.seed, eps=init_eps, batch=len(h))
    return integrate_batch(model, s0, spec, max_angle=max_angle, **kw)


# --- DTWA -------------------------------------------------------------------

def dtwa_sample_batch(n: int, seed: int, start: int, count: int) -> np.ndarray:
    """Discrete Wigner samples of the all-up state for trajectories start..start+count-1.

    s^z = 1; s^x, s^y = +-1 from the top bit of the Philox word at position
    ((trajectory * N + site) * 2 + axis).
    """
    words = philox_bits(seed, DTWA_STREAM, 2 * n * start, 2 * n * count)
    signs = np.where(words >> np.uint64(63), 1.0, -1.0).reshape(count, n, 2)
    s = np.empty((3, count, n))
    s[0] = signs[..., 0]
    s[1] = signs[..., 1]
    s[2] = 1.0
    return s


def dtwa_sample_initial(n: int, seed: int, trajectory: int = 0) -> np.ndarray:
    return dtwa_sample_batch(n, seed, trajectory, 1)[:, 0, :].T


@dataclass
class TrajectoryBatch:
    times: np.ndarray
    seed: int
    n_traj: int = 0
    sums: dict[str, np.ndarray] = field(default_factory=dict)
    sumsqs: dict[str, np.ndarray] = field(default_factory=dict)

    OBS = ("theta_z", "theta_z_sq", "k_mean")

    def add(self, rec: TrajectoryRecord) -> None:
        for name in self.OBS:
            vals = getattr(rec, name)
            if name not in self.sums:
                self.sums[name] = np.zeros(len(self.times))
                self.sumsqs[name] = np.zeros(len(self.times))
            self.sums[name] += vals.sum(axis=1)
            self.sumsqs[name] += (vals ** 2).sum(axis=1)
        self.n_traj += rec.theta_z.shape[1]

    def mean(self, name: str) -> np.ndarray:
        return self.sums[name] / self.n_traj

    def se(self, name: str) -> np.ndarray:
        n = self.n_traj
        if n < 2:
            return np.zeros(len(self.times))
        var = (self.sumsqs[name] - self.sums[name] ** 2 / n) / (n - 1)
        return np.sqrt(np.clip(var, 0, None) / n)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJ_COLUMNS)
            cols = (self.times, self.mean("theta_z"), self.se("theta_z"), self.mean("theta_z_sq"),
                    self.se("theta_z_sq"), self.mean("k_mean"))
            for row in zip(*cols):
                w.writerow([repr(float(x)) for x in row])


def dtwa_run(net: Network, spec: QuenchSpec, n_traj: int, seed: int, *,
             batch_size: int = 2000, drift_tol: float | None = DRIFT_TOL,
             max_angle: float | None = MAX_ANGLE) -> TrajectoryBatch:
    """Average ``n_traj`` sampled trajectories; chunks are merged in index order."""
    if n_traj < 1:
        raise ValueError(f"n_traj must be >= 1, got {n_traj}")
    model = MeanFieldModel(net, spec.h_f, spec.J)
    out = TrajectoryBatch(spec.times, seed)
    for start in range(0, n_traj, batch_size):
        count = min(batch_size, n_traj - start)
        init = dtwa_sample_batch(net.n_vertices, seed, start, count)
        out.add(integrate_batch(model, init, spec, drift_tol=drift_tol, max_angle=max_angle))
    return out


def phase_portrait(batch: TrajectoryBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return batch.times, batch.mean("theta_z"), batch.mean("k_mean")


def write_portrait_csv(path: str | Path, times, theta, k) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PORTRAIT_COLUMNS)
        for row in zip(times, theta, k):
            w.writerow([repr(float(x)) for x in row])


def oscillation_peaks(values: np.ndarray) -> np.ndarray:
    """Indices of strict interior local maxima."""
    v = np.asarray(values)
    return np.flatnonzero((v[1:-1] > v[:-2]) & (v[1:-1] >= v[2:])) + 1


def step_halving_error(net: Network, spec: QuenchSpec) -> float:
    """Sup-norm change of Theta^z(t) when the RK4 step is halved."""
    coarse = integrate_trajectory(net, spec).theta_z[:, 0]
    fine = integrate_trajectory(net, spec, substeps=2).theta_z[:, 0]
    return float(np.max(np.abs(coarse - fine)))

