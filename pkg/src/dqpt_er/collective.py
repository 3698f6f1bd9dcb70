"""Fully connected (p = 1) reference solver and closed-form classical results.

The collective solver works in the (N+1)-dimensional maximal-spin sector
|S = N/2, m>, m = -S..S (array index ``m + S``).  Its Hamiltonian is the
exact restriction of the full-space operator on the complete graph,

    H = -(2J/(N-1)) (2 Jz^2 - N/2) - 2 h Jx,

so amplitudes, energies and Loschmidt phases coincide with ``hamcore``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hamcore import ObservableTrace, QuenchSpec


class SeparatrixError(ValueError):
    """Classical orbit with a diverging period (h >= J)."""


# --- elliptic integral ------------------------------------------------------

def elliptic_K(m: float) -> float:
    """Complete elliptic integral of the first kind, parameter convention.

    K(m) = int_0^{pi/2} dtheta / sqrt(1 - m sin^2 theta), computed as
    pi / (2 AGM(1, sqrt(1 - m))).
    """
    if m != m or m < 0.0:
        raise ValueError(f"elliptic_K requires 0 <= m < 1, got {m}")
    if m >= 1.0:
        raise ValueError(f"K(m) diverges for m >= 1 (got m = {m})")
    a, b = 1.0, math.sqrt(1.0 - m)
    for _ in range(64):
        if abs(a - b) <= 4e-16 * a:
            break
        a, b = 0.5 * (a + b), math.sqrt(a * b)
    return math.pi / (a + b)


def equilibrium_order(h: float) -> float:
    """Ground-state order parameter of the p = 1 model in the thermodynamic limit."""
    if h < 0:
        raise ValueError(f"h must be non-negative, got {h}")
    return math.sin(math.acos(h / 2)) if h <= 2 else 0.0


def classical_period(h: float, J: float = 1.0) -> float:
    """Period K((h/J)^2) of the collective orbit started at Theta^z = 1."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    if h >= J:
        raise SeparatrixError(f"orbit at h/J = {h / J:g} >= 1 has no finite period")
    return elliptic_K((h / J) ** 2)


def time_avg_theta_thermo(h_f: float, J: float = 1.0) -> float:
    """Long-time average of Theta^z for N -> infinity; NaN at the separatrix h_f = J."""
    if not h_f > 0:
        raise ValueError(f"h_f must be positive, got {h_f}")
    if h_f > J:
        return 0.0
    if h_f == J:
        return math.nan
    return math.pi / (2 * elliptic_K((h_f / J) ** 2))


def write_analytic_csv(path: str | Path, h_values, J: float = 1.0) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("h_f", "time_avg_theta", "period"))
        for h in h_values:
            avg = time_avg_theta_thermo(h, J)
            period = classical_period(h, J) if h < J else math.inf
            w.writerow((repr(float(h)), repr(avg), repr(period)))


# --- collective quantum solver ---------------------------------------------

def spin_operators(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(Jz diagonal, Jx matrix) for spin S = n/2 in the m = -S..S basis."""
    s = n / 2
    m = np.arange(n + 1) - s
    jx = np.zeros((n + 1, n + 1))
    up = 0.5 * np.sqrt(s * (s + 1) - m[:-1] * (m[:-1] + 1))  # <m+1|Jx|m>
    idx = np.arange(n)
    jx[idx + 1, idx] = up
    jx[idx, idx + 1] = up
    return m, jx


def build_collective_hamiltonian(n: int, h: float, J: float = 1.0) -> np.ndarray:
    if n < 2:
        raise ValueError(f"collective Hamiltonian needs n >= 2, got {n}")
    m, jx = spin_operators(n)
    return np.diag(-(2 * J / (n - 1)) * (2 * m ** 2 - n / 2)) - 2 * h * jx


def evolve_collective(n: int, spec: QuenchSpec) -> ObservableTrace:
    """Exact evolution from m = +N/2 by eigendecomposition of the (N+1)-dim matrix."""
    ham = build_collective_hamiltonian(n, spec.h_f, spec.J)
    energies, vecs = np.linalg.eigh(ham)
    m, _ = spin_operators(n)
    times = spec.times
    # columns: psi(t) = V exp(-iEt) V^T e_top
    phases = np.exp(-1j * np.outer(times, energies))
    psi = (phases * vecs[-1]) @ vecs.T  # (nt, n+1)
    prob = psi.real ** 2 + psi.imag ** 2
    theta = prob @ (2 * m / n)
    theta_sq = prob @ (2 * m / n) ** 2
    amp = psi[:, -1]
    with np.errstate(divide="ignore"):
        log_g2 = 2.0 * np.log(np.abs(amp))
    return ObservableTrace(n, times, theta, theta_sq, log_g2, amp)


# --- classical single-spin orbit --------------------------------------------

@dataclass
class ClassicalOrbit:
    h_over_J: float
    times: np.ndarray
    theta_z: np.ndarray
    k: np.ndarray
    energy: np.ndarray
    period: float  # analytic value, inf at or beyond the separatrix
    spins: np.ndarray  # (nt, 3) Bloch vector

    def theta_z_of_k(self, k):
        """Conservation relation Theta^z = sqrt(1 - (h/J)^2 cos^2 2k)."""
        return np.sqrt(np.clip(1 - self.h_over_J ** 2 * np.cos(2 * np.asarray(k)) ** 2, 0, None))

    def conservation_residual(self) -> np.ndarray:
        """Theta_z^2 + (h/J)^2 cos^2 2k - 1; NaN on the poles where k is a convention."""
        res = self.theta_z ** 2 + self.h_over_J ** 2 * np.cos(2 * self.k) ** 2 - 1
        pole = (self.spins[:, 0] == 0) & (self.spins[:, 1] == 0)
        return np.where(pole, np.nan, res)


def _collective_rhs(s: np.ndarray, h: float, J: float) -> np.ndarray:
    x, y, z = s
    b = 4 * J * z
    return np.array([b * y, -b * x + 2 * h * z, -2 * h * y])


def _rk4(s, dt, h, J):
    k1 = _collective_rhs(s, h, J)
    k2 = _collective_rhs(s + 0.5 * dt * k1, h, J)
    k3 = _collective_rhs(s + 0.5 * dt * k2, h, J)
    k4 = _collective_rhs(s + dt * k3, h, J)
    return s + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def momentum(sx, sy, sz=None):
    """k = atan2(-s^y, s^x) / 2, defined as 0 at the poles where s^x = s^y = 0."""
    k = 0.5 * np.arctan2(-np.asarray(sy), np.asarray(sx))
    pole = (np.asarray(sx) == 0) & (np.asarray(sy) == 0)
    return np.where(pole, 0.0, k)


def classical_energy(theta_z, sx, h: float, J: float = 1.0):
    """Per-spin energy -J Theta_z^2 - h Theta_x of the collective spin."""
    return -J * np.asarray(theta_z) ** 2 - h * np.asarray(sx)


def classical_orbit(h: float, J: float = 1.0, times=None, *, dt: float = 0.001) -> ClassicalOrbit:
    """Integrate the collective classical spin from (Theta^z, k) = (1, 0).

    The flow is integrated in Cartesian Bloch coordinates (regular at the pole)
    with RK4 substeps of at most ``dt`` and reported at ``times``.
    """
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    times = np.arange(0, 10 + 1e-12, 0.01) if times is None else np.asarray(times, dtype=float)
    s = np.array([0.0, 0.0, 1.0])
    out = np.empty((len(times), 3))
    t = 0.0
    for idx, target in enumerate(times):
        span = target - t
        if span > 0:
            n_sub = max(1, math.ceil(span / dt - 1e-9))
            step = span / n_sub
            for _ in range(n_sub):
                s = _rk4(s, step, h, J)
        t = target
        out[idx] = s
    k = momentum(out[:, 0], out[:, 1])
    period = classical_period(h, J) if h < J else math.inf
    return ClassicalOrbit(h / J, times, out[:, 2], k, classical_energy(out[:, 2], out[:, 0], h, J),
                          period, out)


def orbit_return_times(h: float, J: float = 1.0, t_max: float = 10.0, dt: float = 0.001) -> np.ndarray:
    """Times at which s^y changes sign from negative to positive (one per period).

    Crossings are located between RK4 steps and refined by bisection on the
    step length, so their accuracy is limited by RK4 truncation only.
    """
    s = np.array([0.0, 0.0, 1.0])
    # leave the pole first: s^y grows as 2 h t
    t = 0.0
    crossings = []
    while t < t_max:
        nxt = _rk4(s, dt, h, J)
        if s[1] < 0 <= nxt[1]:
            lo, hi = 0.0, dt
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if _rk4(s, mid, h, J)[1] < 0:
                    lo = mid
                else:
                    hi = mid
            crossings.append(t + 0.5 * (lo + hi))
        s, t = nxt, t + dt
    return np.array(crossings)
