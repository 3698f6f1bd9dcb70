"""Seeded Erdős–Rényi networks and their edge-list text format.

Each unordered pair ``(i, j)`` with ``i < j`` owns a fixed slot in a
counter-based Philox stream keyed by the seed.  The slot index is
``j * (j - 1) // 2 + i`` so the draw for a pair depends only on
``(seed, i, j)``: any sub-range can be generated independently and a graph
on ``N`` vertices is the induced subgraph of the one on ``N + 1``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

# Philox key word reserved for edge draws (other streams use other tags).
EDGE_STREAM = 0
_MASK64 = (1 << 64) - 1


class NetworkFormatError(ValueError):
    """Malformed edge-list file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def philox_uniform(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Uniform doubles at positions ``start .. start+count-1`` of a keyed stream."""
    raw = philox_bits(seed, stream, start, count)
    return (raw >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def philox_bits(seed: int, stream: int, start: int, count: int) -> np.ndarray:
    """Raw 64-bit words at positions ``start .. start+count-1`` of a keyed stream."""
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    bitgen = np.random.Philox(key=(stream << 64) | seed)
    bitgen.advance(start // 4)
    return bitgen.random_raw(start % 4 + count)[start % 4:]


@dataclass(frozen=True, eq=False)
class Network:
    n_vertices: int
    p: float
    seed: int
    edges: np.ndarray = field(repr=False)  # (|E|, 2) int64, rows (i, j) with i < j, sorted

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (self.n_vertices == other.n_vertices and self.p == other.p
                and self.seed == other.seed and np.array_equal(self.edges, other.edges))

    def __hash__(self):
        return hash((self.n_vertices, self.p, self.seed, self.edges.tobytes()))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    def adjacency(self, dtype=np.float64) -> np.ndarray:
        """Dense symmetric 0/1 adjacency matrix."""
        a = np.zeros((self.n_vertices, self.n_vertices), dtype=dtype)
        i, j = self.edges.T
        a[i, j] = 1
        a[j, i] = 1
        return a

    def sparse_adjacency(self, dtype=np.float64) -> sp.csr_matrix:
        i, j = self.edges.T
        data = np.ones(2 * len(i), dtype=dtype)
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        n = self.n_vertices
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def has_edge(self, i: int, j: int) -> bool:
        if i > j:
            i, j = j, i
        return (i, j) in self._edge_set

    @cached_property
    def _edge_set(self) -> frozenset:
        return frozenset(map(tuple, self.edges.tolist()))


@dataclass(frozen=True)
class KacFactor:
    """Interaction normalization |E_p| / N.

    ``zero_interaction`` is set for edgeless graphs; the Ising term is then
    identically zero instead of being divided by zero.
    """
    value: float
    zero_interaction: bool = False

    @property
    def coupling_scale(self) -> float:
        """1 / value, or 0 when there is no interaction."""
        return 0.0 if self.zero_interaction else 1.0 / self.value


def _pair_slots(n: int) -> tuple[np.ndarray, np.ndarray]:
    """All pairs i < j ordered by slot index j(j-1)/2 + i."""
    j, i = np.tril_indices(n, k=-1)
    return i.astype(np.int64), j.astype(np.int64)


def generate(n: int, p: float, seed: int) -> Network:
    """Draw G_ER(n, p): every pair is kept independently with probability p."""
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"p must lie in (0, 1], got {p}")
    n = int(n)
    i, j = _pair_slots(n)
    if p == 1.0:
        keep = np.ones(len(i), dtype=bool)
    else:
        keep = philox_uniform(seed, EDGE_STREAM, 0, len(i)) < p
    edges = np.stack([i[keep], j[keep]], axis=1)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return Network(n, float(p), int(seed), edges[order])


def complete(n: int) -> Network:
    return generate(n, 1.0, 0)


def kac(net: Network) -> KacFactor:
    if net.n_edges == 0:
        return KacFactor(0.0, zero_interaction=True)
    return KacFactor(net.n_edges / net.n_vertices)


def serialize(net: Network) -> bytes:
    buf = io.StringIO()
    buf.write(f"{net.n_vertices} {net.p!r} {net.seed}\n")
    for i, j in net.edges.tolist():
        buf.write(f"{i} {j}\n")
    return buf.getvalue().encode()


def deserialize(data: bytes | str) -> Network:
    text = data.decode() if isinstance(data, bytes) else data
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise NetworkFormatError("missing header 'N p seed'", 1)
    head = lines[0].split()
    if len(head) != 3:
        raise NetworkFormatError("header must be 'N p seed'", 1)
    try:
        n, p, seed = int(head[0]), float(head[1]), int(head[2])
    except ValueError as exc:
        raise NetworkFormatError(f"bad header: {exc}", 1) from None
    if n < 1 or not (0.0 < p <= 1.0):
        raise NetworkFormatError("header values out of range", 1)

    edges = []
    prev = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise NetworkFormatError("expected 'i j'", lineno)
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise NetworkFormatError("non-integer vertex", lineno) from None
        if i == j:
            raise NetworkFormatError(f"self-loop on vertex {i}", lineno)
        if not (0 <= i < j < n):
            raise NetworkFormatError(f"pair ({i}, {j}) must satisfy 0 <= i < j < {n}", lineno)
        if prev is not None and (i, j) <= prev:
            kind = "duplicate edge" if (i, j) == prev else "edges not ascending"
            raise NetworkFormatError(f"{kind} ({i}, {j})", lineno)
        prev = (i, j)
        edges.append((i, j))
    return Network(n, p, seed, np.array(edges, dtype=np.int64).reshape(-1, 2))


def save(net: Network, path: str | Path) -> None:
    Path(path).write_bytes(serialize(net))


def load(path: str | Path) -> Network:
    return deserialize(Path(path).read_bytes())
