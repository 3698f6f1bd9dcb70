"""Joint central moments of local magnetizations and their disorder statistics.

For a state with site magnetizations z_l = <sigma^z_l> and q_l = (1 + z_l)/2,
the Loschmidt echo of the all-up state factorizes exactly as

    |G|^2 = <prod_l (sigma^z_l + 1)/2> = sum_T 2^-|T| Delta_T prod_{l not in T} q_l,

where T runs over site subsets and Delta_T = <prod_{l in T} (sigma^z_l - z_l)>
is the joint central moment (Delta_T = 0 for |T| = 1, 1 for T empty).  This
module samples Delta_T together with the complementary log-product
sum_{l not in T} ln q_l over tuples and network realizations, resolves the
samples by the edge pattern induced on the tuple, and reduces them to the
covariance sigma_{0,m} that shifts the disorder-averaged echo.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hamcore, netgen
from .ensemble import EnsembleSpec, SeriesEnsemble, log_mean_exp, map_realizations
from .netgen import Network

TUPLE_STREAM = 2
MAX_MOMENT_SITES = 16
MIN_REALIZATIONS = 30
SAMPLE_COLUMNS = ("realization", "t", "sites", "edge_config", "delta", "log_prod")
STATS_COLUMNS = ("t", "config", "mu_m", "var_m", "cov_0m", "p_config")


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class MomentSample:
    realization: int
    sites: tuple[int, ...]
    delta: float
    log_prod: float  # -inf when some complementary factor vanishes
    edge_config: int
    t: float = 0.0
    n_sites: int = 0
    log_prod_full: float = 0.0  # sum over all N sites, for the direct shift

    @property
    def m(self) -> int:
        return len(self.sites)

    @property
    def zero_factor(self) -> bool:
        return self.log_prod == -math.inf


@dataclass
class SampleTable:
    """Column-oriented batch of moment samples (the bulk form of MomentSample)."""
    realization: np.ndarray
    t: np.ndarray
    sites: np.ndarray  # (K, m)
    edge_config: np.ndarray
    delta: np.ndarray
    log_prod: np.ndarray
    log_prod_full: np.ndarray
    n_sites: int

    def __len__(self) -> int:
        return len(self.delta)

    @property
    def m(self) -> int:
        return self.sites.shape[1]

    @classmethod
    def from_samples(cls, samples) -> SampleTable:
        samples = list(samples)
        if not samples:
            raise InsufficientSamples("no samples")
        ms = {s.m for s in samples}
        if len(ms) != 1:
            raise ValueError(f"samples mix tuple sizes {sorted(ms)}")
        return cls(np.array([s.realization for s in samples]), np.array([s.t for s in samples]),
                   np.array([s.sites for s in samples], dtype=np.int64),
                   np.array([s.edge_config for s in samples], dtype=np.int64),
                   np.array([s.delta for s in samples]), np.array([s.log_prod for s in samples]),
                   np.array([s.log_prod_full for s in samples]), samples[0].n_sites)

    @classmethod
    def concat(cls, tables) -> SampleTable:
        tables = list(tables)
        cat = lambda name: np.concatenate([getattr(tb, name) for tb in tables])  # noqa: E731
        return cls(cat("realization"), cat("t"), cat("sites"), cat("edge_config"), cat("delta"),
                   cat("log_prod"), cat("log_prod_full"), tables[0].n_sites)

    def samples(self) -> list[MomentSample]:
        return [MomentSample(int(r), tuple(int(x) for x in s), float(d), float(lp), int(c), float(t),
                             self.n_sites, float(lf))
                for r, t, s, c, d, lp, lf in zip(self.realization, self.t, self.sites, self.edge_config,
                                                  self.delta, self.log_prod, self.log_prod_full)]

    def at_time(self, t: float, tol: float = 1e-9) -> SampleTable:
        keep = np.abs(self.t - t) <= tol
        return SampleTable(self.realization[keep], self.t[keep], self.sites[keep],
                           self.edge_config[keep], self.delta[keep], self.log_prod[keep],
                           self.log_prod_full[keep], self.n_sites)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SAMPLE_COLUMNS)
            for r, t, s, c, d, lp in zip(self.realization, self.t, self.sites, self.edge_config,
                                         self.delta, self.log_prod):
                w.writerow([int(r), repr(float(t)), "-".join(map(str, s)), int(c),
                            repr(float(d)), repr(float(lp))])


# --- tuples and edge patterns -----------------------------------------------

def tuple_pairs(m: int) -> list[tuple[int, int]]:
    """Positions (a, b), a < b, inside an m-tuple; bit k of a pattern is pair k."""
    return list(itertools.combinations(range(m), 2))


def edge_pattern(net: Network, sites) -> int:
    bits = 0
    for k, (a, b) in enumerate(tuple_pairs(len(sites))):
        if net.has_edge(sites[a], sites[b]):
            bits |= 1 << k
    return bits


def edge_patterns(net: Network, tuples: np.ndarray) -> np.ndarray:
    adj = net.adjacency(np.int64)
    out = np.zeros(len(tuples), dtype=np.int64)
    for k, (a, b) in enumerate(tuple_pairs(tuples.shape[1])):
        out |= adj[tuples[:, a], tuples[:, b]] << k
    return out


def config_probability(config: int, m: int, p: float) -> float:
    """p^k (1-p)^(M-k) for a pattern with k of the M = m(m-1)/2 tuple pairs present."""
    n_pairs = m * (m - 1) // 2
    k = bin(config).count("1")
    return p ** k * (1 - p) ** (n_pairs - k)


def select_tuples(n: int, m: int, budget: int | None = None, seed: int = 0) -> np.ndarray:
    """All m-subsets of range(n) in lexicographic order, or ``budget`` of them.

    Subsampling draws distinct combination ranks uniformly from a Philox
    stream keyed by ``seed``; the result is sorted, so it depends only on
    (n, m, budget, seed).
    """
    if m < 2 or m > n:
        raise ValueError(f"need 2 <= m <= n, got m = {m}, n = {n}")
    combos = np.array(list(itertools.combinations(range(n), m)), dtype=np.int64)
    if budget is None or budget >= len(combos):
        return combos
    if budget < 1:
        raise ValueError("tuple budget must be positive")
    rng = np.random.Generator(np.random.Philox(key=(TUPLE_STREAM << 64) | seed))
    pick = np.sort(rng.choice(len(combos), size=budget, replace=False))
    return combos[pick]


# --- moments of a single state ----------------------------------------------

def _n_of(psi: np.ndarray) -> int:
    n = int(round(math.log2(psi.size)))
    if 2 ** n != psi.size:
        raise hamcore.DimensionError(f"state size {psi.size} is not a power of two")
    return n


def local_factors(psi: np.ndarray) -> np.ndarray:
    """q_l = <(sigma^z_l + 1)/2> for every site."""
    n = _n_of(psi)
    # summing the up-probabilities directly keeps q_l = 0 exact for a fully down site
    up = (hamcore.spin_table(n) > 0).astype(float)
    return hamcore.basis_probabilities(psi) @ up


def _safe_log(q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(q > 0, np.log(np.clip(q, 0, None)), -np.inf)


def central_moments(psi: np.ndarray, tuples: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Delta_T = <prod_{l in T} (sigma^z_l - z_l)> for each row T of ``tuples``."""
    n = _n_of(psi)
    prob = hamcore.basis_probabilities(psi)
    spins = hamcore.spin_table(n)
    dev = spins - prob @ spins
    tuples = np.asarray(tuples, dtype=np.int64)
    out = np.empty(len(tuples))
    for start in range(0, len(tuples), chunk):
        block = tuples[start:start + chunk]
        prod = dev[:, block[:, 0]].copy()
        for a in range(1, block.shape[1]):
            prod *= dev[:, block[:, a]]
        out[start:start + chunk] = prob @ prod
    return out


def complement_log_products(log_q: np.ndarray, tuples: np.ndarray) -> np.ndarray:
    """sum_{l not in T} ln q_l; -inf exactly when a vanishing factor lies outside T."""
    finite = np.where(np.isfinite(log_q), log_q, 0.0)
    zero = ~np.isfinite(log_q)
    total = finite.sum()
    n_zero = int(zero.sum())
    inside = finite[tuples].sum(axis=1)
    zeros_inside = zero[tuples].sum(axis=1)
    out = total - inside
    return np.where(n_zero - zeros_inside > 0, -np.inf, out)


def state_samples(psi: np.ndarray, net: Network, tuples: np.ndarray, *, realization: int = 0,
                  t: float = 0.0) -> SampleTable:
    n = _n_of(psi)
    if net.n_vertices != n:
        raise hamcore.DimensionError("network and state sizes differ")
    log_q = _safe_log(local_factors(psi))
    full = float(np.sum(log_q))
    k = len(tuples)
    return SampleTable(np.full(k, realization), np.full(k, float(t)), np.asarray(tuples),
                       edge_patterns(net, np.asarray(tuples)), central_moments(psi, tuples),
                       complement_log_products(log_q, np.asarray(tuples)), np.full(k, full), n)


def collect_moments(states, m: int = 2, pair_budget: int | None = None, *, t: float = 0.0,
                    tuple_seed: int = 0) -> list[MomentSample]:
    """Moment samples for every (realization, tuple).

    ``states`` is an iterable of ``(realization_id, network, state_vector)``.
    m = 2 enumerates all pairs unless ``pair_budget`` is given; m >= 3 uses
    ``pair_budget`` tuples drawn with ``tuple_seed`` (shared by all states).
    """
    if m < 2:
        raise ValueError(f"moment order must be >= 2, got {m}")
    tables = []
    tuples = None
    for rid, net, psi in states:
        psi = np.asarray(psi)
        if psi.ndim != 1:
            raise TypeError("collect_moments needs exact state vectors")
        n = _n_of(psi)
        if n > MAX_MOMENT_SITES:
            raise hamcore.SystemTooLarge(f"exact moments need N <= {MAX_MOMENT_SITES}, got {n}")
        if tuples is None:
            budget = pair_budget if m >= 3 or pair_budget is not None else None
            tuples = select_tuples(n, m, budget, tuple_seed)
        tables.append(state_samples(psi, net, tuples, realization=rid, t=t))
    if not tables:
        return []
    return SampleTable.concat(tables).samples()


# --- moment expansion of the echo ---------------------------------------------

def expansion_orders(psi: np.ndarray) -> np.ndarray:
    """Order-resolved terms of the echo expansion: out[k] = sum_{|T| = k} 2^-k Delta_T prod q.

    Enumerates all 2^N subsets, so only for small N.
    """
    n = _n_of(psi)
    prob = hamcore.basis_probabilities(psi)
    spins = hamcore.spin_table(n)
    z = prob @ spins
    dev = 0.5 * (spins - z)
    q = 0.5 * (1 + z)
    out = np.zeros(n + 1)

    # depth-first over subsets in increasing site order; ``vec`` = prod_{l in T} dev_l
    # and ``rest`` = prod over sites l < next that are not in T
    def walk(start, size, vec, rest):
        tail = np.prod(q[start:]) if start < n else 1.0
        out[size] += float(prob @ vec) * rest * tail
        for l in range(start, n):
            walk(l + 1, size + 1, vec * dev[:, l], rest * np.prod(q[start:l]))

    walk(0, 0, np.ones(2 ** n), 1.0)
    return out


def moment_expansion_check(psi: np.ndarray, m_max: int | None = None) -> tuple[float, float]:
    """(|G|^2 with respect to all-up, expansion summed to order ``m_max``)."""
    n = _n_of(psi)
    lhs = float(hamcore.basis_probabilities(psi)[-1])
    orders = expansion_orders(psi)
    m_max = n if m_max is None else m_max
    return lhs, float(orders[:m_max + 1].sum())


# --- disorder statistics ------------------------------------------------------

def _moments(x: np.ndarray) -> tuple[float, float, float, float]:
    """mean, variance (ddof 1), skewness, excess kurtosis; NaN when undefined."""
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return (math.nan,) * 4
    mean = float(x.mean())
    var = float(x.var(ddof=1)) if len(x) > 1 else math.nan
    c = x - mean
    m2 = float(np.mean(c ** 2))
    if m2 <= 0:
        return mean, var, math.nan, math.nan
    return mean, var, float(np.mean(c ** 3) / m2 ** 1.5), float(np.mean(c ** 4) / m2 ** 2 - 3)


def _cov(x: np.ndarray, y: np.ndarray) -> float:
    if len(x) < 2:
        return math.nan
    return float(np.sum((x - x.mean()) * (y - y.mean())) / (len(x) - 1))


@dataclass
class ConfigStats:
    config: int
    p_config: float
    count: int
    mu: float
    var: float
    cov_raw: float  # sample covariance of delta and exp(log_prod)
    cov: float  # cov_raw / mean(exp(log_prod))
    cov_closed: float  # normal x log-normal form, cov(delta, log_prod)
    skew: float
    kurtosis: float


@dataclass
class MomentStats:
    m: int
    n_sites: int
    p: float
    n_realizations: int
    configs: dict[int, ConfigStats]
    mu0: float
    var0: float
    log_prod_skew: float
    log_prod_kurtosis: float
    n_zero_factor: int
    coverage: float = 1.0  # total p(C) of the configurations that were sampled
    extras: dict[str, float] = field(default_factory=dict)

    def _weighted(self, attr: str) -> float:
        tot = sum(c.p_config for c in self.configs.values())
        if tot == 0:
            return math.nan
        return sum(c.p_config * getattr(c, attr) for c in self.configs.values()) / tot

    @property
    def mu_m(self) -> float:
        return self._weighted("mu")

    @property
    def sigma_0m(self) -> float:
        return self._weighted("cov")

    @property
    def sigma_0m_closed(self) -> float:
        return self._weighted("cov_closed")

    @property
    def p_total(self) -> float:
        return sum(config_probability(c, self.m, self.p) for c in range(1 << (self.m * (self.m - 1) // 2)))


def resolve_statistics(samples, p: float, *, min_realizations: int = MIN_REALIZATIONS) -> MomentStats:
    """Edge-pattern resolved statistics of one time slice of samples.

    Per pattern C: mean and variance of delta, its skewness and excess
    kurtosis, and the covariance between delta and exp(log_prod) divided by
    the mean of exp(log_prod).  Aggregates weight patterns by p(C),
    renormalized over the patterns actually present (``coverage`` records the
    missing weight).
    """
    table = samples if isinstance(samples, SampleTable) else SampleTable.from_samples(samples)
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    n_real = len(np.unique(table.realization))
    if n_real < min_realizations:
        raise InsufficientSamples(f"{n_real} realizations, need at least {min_realizations}")
    m = table.m
    # stable order so that permuting the samples cannot change any sum
    order = np.lexsort((table.sites.T[::-1].tolist() + [table.realization, table.t]))
    delta = table.delta[order]
    logp = table.log_prod[order]
    conf = table.edge_config[order]
    weight = np.where(np.isfinite(logp), np.exp(np.where(np.isfinite(logp), logp, 0.0)), 0.0)

    configs = {}
    for c in np.unique(conf):
        sel = conf == c
        d, w, lp = delta[sel], weight[sel], logp[sel]
        mu, var, skew, kurt = _moments(d)
        raw = _cov(d, w)
        wbar = float(w.mean())
        fin = np.isfinite(lp)
        configs[int(c)] = ConfigStats(int(c), config_probability(int(c), m, p), int(sel.sum()), mu, var,
                                      raw, raw / wbar if wbar > 0 else math.nan,
                                      _cov(d[fin], lp[fin]), skew, kurt)
    fin = np.isfinite(logp)
    per_site = table.n_sites - m
    lmean, lvar, lskew, lkurt = _moments(logp[fin])
    mu0 = lmean / per_site if per_site else math.nan
    var0 = lvar / per_site ** 2 if per_site else math.nan
    coverage = sum(c.p_config for c in configs.values())
    return MomentStats(m, table.n_sites, p, n_real, configs, mu0, var0, lskew, lkurt,
                       int((~fin).sum()), coverage)


def write_stats_csv(path: str | Path, rows) -> None:
    """``rows``: iterable of (t, MomentStats)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_COLUMNS)
        for t, st in rows:
            for c in sorted(st.configs):
                cs = st.configs[c]
                w.writerow([repr(float(t)), c, repr(cs.mu), repr(cs.var), repr(cs.cov), repr(cs.p_config)])


# --- shift of the echo ---------------------------------------------------------

def delta_m(stats_or_sigma, n: int, m: int, mean_theta: float) -> float:
    """C(N, m) sigma_{0,m} / <<Theta^z + 1>>^m.

    Returns +-inf (sign of sigma) when mean_theta <= -1 and sigma != 0.
    """
    sigma = stats_or_sigma.sigma_0m if isinstance(stats_or_sigma, MomentStats) else float(stats_or_sigma)
    if sigma == 0:
        return 0.0
    base = mean_theta + 1.0
    if base <= 0:
        return math.copysign(math.inf, sigma)
    return math.comb(n, m) * sigma / base ** m


def delta_m_factor_form(stats_or_sigma, n: int, m: int, mean_theta: float) -> float:
    """C(N, m) sigma_{0,m} / <<(Theta^z + 1)/2>>^m, i.e. 2^m times :func:`delta_m`."""
    return 2.0 ** m * delta_m(stats_or_sigma, n, m, mean_theta)


def delta_m_direct(samples) -> float:
    """Directly measured shift 2^-m sum_T (<<Delta_T P_T>> - <<Delta_T>><<P_T>>) / <<P_all>>.

    P_T is the complementary product exp(log_prod) and P_all the product over
    all sites; averages run over realizations, sums over the sampled tuples
    (rescaled to all C(N, m) tuples when subsampled).
    """
    table = samples if isinstance(samples, SampleTable) else SampleTable.from_samples(samples)
    m, n = table.m, table.n_sites
    keys = [tuple(s) for s in table.sites]
    groups: dict[tuple, list[int]] = {}
    for idx, key in enumerate(keys):
        groups.setdefault(key, []).append(idx)
    w = np.where(np.isfinite(table.log_prod), np.exp(np.where(np.isfinite(table.log_prod), table.log_prod, 0)), 0.0)
    total = 0.0
    for idx in groups.values():
        d, ww = table.delta[idx], w[idx]
        total += float(np.mean(d * ww) - np.mean(d) * np.mean(ww))
    total *= math.comb(n, m) / len(groups)
    _, first = np.unique(table.realization, return_index=True)
    full = np.exp(log_mean_exp(table.log_prod_full[first]))
    return total / (2 ** m * full) if full > 0 else math.copysign(math.inf, total)


def gbar_over_theta(series: SeriesEnsemble) -> np.ndarray:
    """<<|G|^2>>^(1/N) / <<(Theta^z + 1)/2>>, evaluated in log space.

    NaN where the denominator is not positive.
    """
    if "log_g2" not in series.traces or "theta_z" not in series.traces:
        raise KeyError("series needs per-realization log|G|^2 and theta_z")
    log_num = log_mean_exp(series.traces["log_g2"], axis=0) / series.n
    den = 0.5 * (1.0 + series.mean("theta_z"))
    ok = den > np.finfo(float).tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.exp(log_num - np.log(np.where(ok, den, 1.0)))
    return np.where(ok, out, np.nan)


# --- ensemble pipeline -----------------------------------------------------------

@dataclass
class CorrelationRun:
    series: SeriesEnsemble
    samples: SampleTable
    sample_times: np.ndarray
    p: float
    tuple_seed: int

    def stats_at(self, t: float, **kw) -> MomentStats:
        return resolve_statistics(self.samples.at_time(t), self.p, **kw)

    def stats_series(self, **kw) -> list[tuple[float, MomentStats]]:
        return [(float(t), self.stats_at(t, **kw)) for t in self.sample_times]

    def sigma_series(self, **kw) -> np.ndarray:
        return np.array([st.sigma_0m for _, st in self.stats_series(**kw)])

    def delta_m_series(self, **kw) -> np.ndarray:
        theta = np.interp(self.sample_times, self.series.times, self.series.mean("theta_z"))
        return np.array([delta_m(st, st.n_sites, st.m, th)
                         for (_, st), th in zip(self.stats_series(**kw), theta)])


def _sample_indices(times: np.ndarray, window: tuple[float, float] | None, stride: int) -> np.ndarray:
    idx = np.arange(len(times))
    if window is not None:
        lo, hi = window
        idx = idx[(times >= lo - 1e-12) & (times <= hi + 1e-12)]
    return idx[::max(1, stride)]


def _correlation_realization(args):
    spec, seed, rid, m, budget, tuple_seed, window, stride = args
    net = netgen.generate(spec.n, spec.p, seed)
    q = spec.quench
    times = q.times
    keep = set(_sample_indices(times, window, stride).tolist())
    tuples = select_tuples(spec.n, m, budget if (m >= 3 or budget is not None) else None, tuple_seed)
    psi0 = hamcore.all_up(spec.n)
    theta = np.empty(len(times))
    log_g2 = np.empty(len(times))
    tables = []
    for k, psi in enumerate(hamcore.evolve(net, q, psi0, method=spec.exact_method)):
        theta[k] = hamcore.theta_moments(psi).theta_z
        log_g2[k] = hamcore.loschmidt(psi0, psi)[1]
        if k in keep:
            tables.append(state_samples(psi, net, tuples, realization=rid, t=float(times[k])))
    return theta, log_g2, SampleTable.concat(tables)


def correlation_ensemble(spec: EnsembleSpec, *, m: int = 2, window: tuple[float, float] | None = None,
                         stride: int = 1, tuple_budget: int | None = None, tuple_seed: int = 0,
                         workers: int = 1) -> CorrelationRun:
    """Exact-solver ensemble that also samples moments at grid times inside ``window``."""
    if spec.solver != "exact":
        raise ValueError("moment statistics need the exact solver")
    if spec.n > MAX_MOMENT_SITES:
        raise hamcore.SystemTooLarge(f"exact moments need N <= {MAX_MOMENT_SITES}, got {spec.n}")
    items = [(spec, seed, r, m, tuple_budget, tuple_seed, window, stride)
             for r, seed in enumerate(spec.seeds)]
    results = map_realizations(_correlation_realization, items, workers)
    times = spec.quench.times
    series = SeriesEnsemble(spec.n, times, spec.seeds,
                            {"theta_z": np.stack([r[0] for r in results]),
                             "log_g2": np.stack([r[1] for r in results])})
    table = SampleTable.concat([r[2] for r in results])
    return CorrelationRun(series, table, times[_sample_indices(times, window, stride)], spec.p, tuple_seed)
