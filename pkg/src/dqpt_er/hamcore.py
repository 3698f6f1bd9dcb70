"""Exact state-vector dynamics of the transverse-field Ising model on a network.

Basis convention: index ``s`` in ``[0, 2**N)``, bit ``i`` of ``s`` set means
spin ``i`` points up (sigma^z_i = +1).  The initial state of every quench is
the all-up product state, index ``2**N - 1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .netgen import Network, kac

MAX_SITES = 20
DENSE_MAX_SITES = 10
KRYLOV_TOL = 1e-10
TRACE_COLUMNS = ("t", "theta_z", "theta_z_sq", "log_G2", "re_G", "im_G", "lambda")


class DimensionError(ValueError):
    pass


class SystemTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class QuenchSpec:
    """Sudden quench h_i -> h_f sampled on ``times = 0, dt, ..., t_max``."""
    h_f: float
    J: float = 1.0
    dt: float = 0.01
    t_max: float = 5.0
    h_i: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_max < 0:
            raise ValueError(f"t_max must be non-negative, got {self.t_max}")
        if self.h_f < 0:
            raise ValueError(f"h_f must be non-negative, got {self.h_f}")
        if self.h_i != 0.0:
            raise ValueError("only h_i = 0 (all-up initial state) is supported")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


@lru_cache(maxsize=8)
def spin_table(n: int) -> np.ndarray:
    """(2**n, n) array of sigma^z eigenvalues (+1/-1) for every basis state."""
    s = np.arange(2 ** n, dtype=np.int64)[:, None]
    bits = (s >> np.arange(n, dtype=np.int64)) & 1
    table = (2 * bits - 1).astype(np.float64)
    table.setflags(write=False)
    return table


def all_up(n: int) -> np.ndarray:
    psi = np.zeros(2 ** n, dtype=np.complex128)
    psi[-1] = 1.0
    return psi


def ising_diagonal(net: Network, J: float = 1.0) -> np.ndarray:
    """Diagonal of -(J / Kac) * sum_{edges} z_i z_j in the z basis."""
    n = net.n_vertices
    scale = kac(net).coupling_scale
    diag = np.zeros(2 ** n)
    if scale == 0.0:
        return diag
    z = spin_table(n)
    for i, j in net.edges.tolist():
        diag += z[:, i] * z[:, j]
    return -J * scale * diag


def apply_transverse(psi: np.ndarray, n: int) -> np.ndarray:
    """sum_i sigma^x_i applied to psi (N bit flips per basis state)."""
    out = np.zeros_like(psi)
    for k in range(n):
        view = psi.reshape(-1, 2, 2 ** k)
        out.reshape(-1, 2, 2 ** k)[...] += view[:, ::-1, :]
    return out


class IsingHamiltonian:
    """H = -(J/Kac) sum_{(i,j) in E} z_i z_j - h sum_i x_i, as a matrix-free operator."""

    def __init__(self, net: Network, h: float, J: float = 1.0):
        self.net = net
        self.n = net.n_vertices
        self.dim = 2 ** self.n
        self.h = float(h)
        self.J = float(J)
        self.diagonal = ising_diagonal(net, J)
        self.diagonal.setflags(write=False)

    def apply(self, psi: np.ndarray) -> np.ndarray:
        if psi.shape != (self.dim,):
            raise DimensionError(f"state has shape {psi.shape}, expected ({self.dim},)")
        out = self.diagonal * psi
        if self.h != 0.0:
            out -= self.h * apply_transverse(psi, self.n)
        return out

    __call__ = apply

    def dense(self) -> np.ndarray:
        s = np.arange(self.dim)
        mat = np.diag(self.diagonal).astype(np.float64)
        for k in range(self.n):
            mat[s, s ^ (1 << k)] -= self.h
        return mat

    def energy(self, psi: np.ndarray) -> float:
        return float(np.vdot(psi, self.apply(psi)).real)


def apply_hamiltonian(net: Network, h: float, psi: np.ndarray, J: float = 1.0) -> np.ndarray:
    return IsingHamiltonian(net, h, J).apply(np.asarray(psi, dtype=np.complex128))


def krylov_expm(apply: Callable[[np.ndarray], np.ndarray], v: np.ndarray, dt: float,
                tol: float = KRYLOV_TOL, m_max: int = 40) -> np.ndarray:
    """exp(-i H dt) v by Lanczos with the standard a-posteriori error estimate.

    If ``m_max`` vectors do not reach ``tol`` the step is split in two.
    """
    beta0 = np.linalg.norm(v)
    if beta0 == 0.0:
        return v.copy()
    basis = np.empty((m_max + 1, v.size), dtype=np.complex128)
    basis[0] = v / beta0
    alpha = np.empty(m_max)
    beta = np.empty(m_max)
    for j in range(m_max):
        w = apply(basis[j])
        alpha[j] = np.vdot(basis[j], w).real
        w -= alpha[j] * basis[j]
        if j > 0:
            w -= beta[j - 1] * basis[j - 1]
        # full reorthogonalization keeps the small basis numerically orthonormal
        w -= basis[: j + 1].T @ (basis[: j + 1].conj() @ w)
        beta[j] = np.linalg.norm(w)
        evals, evecs = eigh_tridiagonal(alpha[: j + 1], beta[:j]) if j > 0 else (alpha[:1], np.ones((1, 1)))
        coef = evecs @ (np.exp(-1j * evals * dt) * evecs[0])
        err = beta[j] * abs(coef[-1])
        if err < tol or beta[j] < 1e-14:
            return beta0 * (coef @ basis[: j + 1])
        basis[j + 1] = w / beta[j]
    half = krylov_expm(apply, v, dt / 2, tol / 2, m_max)
    return krylov_expm(apply, half, dt / 2, tol / 2, m_max)


def evolve(net: Network, spec: QuenchSpec, psi0: np.ndarray | None = None, *,
           method: str = "auto", dense_max: int = DENSE_MAX_SITES,
           max_sites: int = MAX_SITES, tol: float = KRYLOV_TOL) -> Iterator[np.ndarray]:
    """Yield exp(-i H(h_f) t) psi0 at every grid time, starting with t = 0.

    ``method`` is ``"eig"`` (dense eigendecomposition, exact at any t),
    ``"krylov"`` (Lanczos stepping between grid points) or ``"auto"``
    (eig for N <= dense_max).
    """
    n = net.n_vertices
    if n > max_sites:
        raise SystemTooLarge(f"N = {n} exceeds the exact-solver maximum {max_sites}")
    psi0 = all_up(n) if psi0 is None else np.asarray(psi0, dtype=np.complex128)
    ham = IsingHamiltonian(net, spec.h_f, spec.J)
    if psi0.shape != (ham.dim,):
        raise DimensionError(f"initial state has shape {psi0.shape}, expected ({ham.dim},)")
    if method == "auto":
        method = "eig" if n <= dense_max else "krylov"

    if method == "eig":
        energies, vecs = np.linalg.eigh(ham.dense())
        coeffs = vecs.T @ psi0.real + 1j * (vecs.T @ psi0.imag)
        times = spec.times
        for start in range(0, len(times), 64):
            block = np.exp(-1j * np.outer(energies, times[start:start + 64])) * coeffs[:, None]
            states = vecs @ block.real + 1j * (vecs @ block.imag)
            if start == 0 and times[0] == 0.0:
                states[:, 0] = psi0  # exact at t = 0 rather than V V^T psi0
            yield from states.T
    elif method == "krylov":
        psi = psi0.copy()
        yield psi
        for _ in range(spec.n_steps):
            psi = krylov_expm(ham.apply, psi, spec.dt, tol)
            yield psi
    else:
        raise ValueError(f"unknown evolution method {method!r}")


def loschmidt(psi0: np.ndarray, psi_t: np.ndarray) -> tuple[complex, float]:
    """Amplitude <psi0|psi_t> and log|G|^2 (``-inf`` if exactly zero)."""
    if psi0.shape != psi_t.shape:
        raise DimensionError("states have different dimensions")
    amp = complex(np.vdot(psi0, psi_t))
    mag = abs(amp)
    return amp, (2.0 * math.log(mag) if mag > 0.0 else -math.inf)


def rate_function(log_g2, n: int):
    """-(1/N) ln|G|^2 from its logarithm; +inf where |G|^2 = 0."""
    return -np.asarray(log_g2, dtype=float) / n if np.ndim(log_g2) else -float(log_g2) / n


@dataclass
class ThetaMoments:
    theta_z: float
    theta_z_sq: float
    site_z: np.ndarray
    pair_zz: dict[tuple[int, int], float] = field(default_factory=dict)


def basis_probabilities(psi: np.ndarray) -> np.ndarray:
    return psi.real ** 2 + psi.imag ** 2


def theta_moments(psi: np.ndarray, pairs: Sequence[tuple[int, int]] = ()) -> ThetaMoments:
    n = int(round(math.log2(psi.size)))
    z = spin_table(n)
    prob = basis_probabilities(psi)
    site_z = prob @ z
    mag = z.sum(axis=1) / n
    pair_zz = {(i, j): float(prob @ (z[:, i] * z[:, j])) for i, j in pairs}
    return ThetaMoments(float(site_z.mean()), float(prob @ mag ** 2), site_z, pair_zz)


def pair_correlations(psi: np.ndarray) -> np.ndarray:
    """Full matrix <z_i z_j> (ones on the diagonal)."""
    n = int(round(math.log2(psi.size)))
    z = spin_table(n)
    prob = basis_probabilities(psi)
    return (z * prob[:, None]).T @ z


def delta_zz_diagonal(net: Network, J: float = 1.0) -> np.ndarray:
    """Diagonal of sum_{E_p} (JN/|E_p|) z z - sum_{E_1} (JN/|E_1|) z z."""
    n = net.n_vertices
    z = spin_table(n)
    mag = z.sum(axis=1)
    complete_pairs = n * (n - 1) / 2
    full = J * n / complete_pairs * (mag ** 2 - n) / 2 if n > 1 else np.zeros(2 ** n)
    return -ising_diagonal(net, J) - full


def fidelity_derivative(net: Network, psi_t: np.ndarray, J: float = 1.0) -> float:
    """|<psi_p(t)| (H_p - H_1) |psi_p(t)>|; the field term cancels so h is not needed."""
    return abs(float(basis_probabilities(psi_t) @ delta_zz_diagonal(net, J)))


def fidelity_cross_term(net: Network, psi_p: np.ndarray, psi_1: np.ndarray, J: float = 1.0) -> float:
    """|<psi_p(t)| (H_p - H_1) |psi_1(t)>|, the variant that bounds d/dt <psi_p|psi_1>."""
    return abs(complex(np.vdot(psi_p, delta_zz_diagonal(net, J) * psi_1)))


@dataclass
class ObservableTrace:
    n: int
    times: np.ndarray
    theta_z: np.ndarray
    theta_z_sq: np.ndarray
    log_g2: np.ndarray
    amplitude: np.ndarray
    site_z: np.ndarray | None = None
    energy: np.ndarray | None = None

    @property
    def rate(self) -> np.ndarray:
        return rate_function(self.log_g2, self.n)

    def write_csv(self, path: str | Path) -> None:
        write_trace_csv(path, self)


def write_trace_csv(path: str | Path, trace: ObservableTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in zip(trace.times, trace.theta_z, trace.theta_z_sq, trace.log_g2,
                       trace.amplitude.real, trace.amplitude.imag, trace.rate):
            w.writerow([repr(float(x)) for x in row])


def read_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0]
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    return {c: data[:, k] for k, c in enumerate(cols)}


def quench_trace(net: Network, spec: QuenchSpec, *, keep_sites: bool = False,
                 track_energy: bool = False, **evolve_kw) -> ObservableTrace:
    """Evolve the all-up state and record the standard observables."""
    n = net.n_vertices
    times = spec.times
    nt = len(times)
    theta = np.empty(nt)
    theta_sq = np.empty(nt)
    log_g2 = np.empty(nt)
    amp = np.empty(nt, dtype=np.complex128)
    sites = np.empty((nt, n)) if keep_sites else None
    energy = np.empty(nt) if track_energy else None
    ham = IsingHamiltonian(net, spec.h_f, spec.J) if track_energy else None
    psi0 = all_up(n)
    for k, psi in enumerate(evolve(net, spec, psi0, **evolve_kw)):
        mom = theta_moments(psi)
        theta[k], theta_sq[k] = mom.theta_z, mom.theta_z_sq
        amp[k], log_g2[k] = loschmidt(psi0, psi)
        if sites is not None:
            sites[k] = mom.site_z
        if ham is not None:
            energy[k] = ham.energy(psi)
    return ObservableTrace(n, times, theta, theta_sq, log_g2, amp, sites, energy)
