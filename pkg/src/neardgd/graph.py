"""Network topologies, consensus (mixing) matrices and nested consensus rounds."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Consecutive mixing states are remembered for at most this many rounds when
# looking for a floating-point fixed point / cycle (see ``apply_consensus``).
_CYCLE_MEMORY = 4096


class InvalidTopologyError(ValueError):
    """Raised for malformed topology parameters or disconnected edge lists."""


class MalformedMatrixError(ValueError):
    """Raised when a matrix does not look like a consensus matrix."""


@dataclass(frozen=True)
class Topology:
    """Undirected, connected communication graph over ``n`` agents.

    ``edges`` holds each undirected edge once as ``(i, j)`` with ``i < j``.
    """

    n: int
    kind: str
    edges: tuple[tuple[int, int], ...]
    params: dict = field(default_factory=dict, compare=False)

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def describe(self) -> str:
        if self.kind == "cyclic":
            return f"cyclic({self.params['c']})"
        if self.kind == "star":
            return f"star({self.params['hub']})"
        return self.kind


def _normalize_edges(n: int, edges: Iterable[Sequence[int]]) -> tuple[tuple[int, int], ...]:
    out = set()
    for e in edges:
        if len(e) != 2:
            raise InvalidTopologyError(f"edge {e!r} must have exactly two endpoints")
        a, b = int(e[0]), int(e[1])
        if not (0 <= a < n and 0 <= b < n):
            raise InvalidTopologyError(f"edge {e!r} references an agent outside [0, {n})")
        if a == b:
            raise InvalidTopologyError(f"self-loop {e!r} is not allowed")
        out.add((min(a, b), max(a, b)))
    return tuple(sorted(out))


def is_connected(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    """Breadth-first connectivity check."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


def build_topology(kind: str, n: int, *, c: int | None = None, hub: int = 0,
                   edges: Iterable[Sequence[int]] | None = None) -> Topology:
    """Build one of the preset topologies (or validate a custom edge list).

    Parameters
    ----------
    kind : {"cyclic", "complete", "star", "custom"}
        Graph family. ``cyclic`` links every node to its ``c`` nearest
        neighbours on a ring (``c/2`` on each side).
    n : int
        Number of agents.
    c : int, optional
        Ring degree for ``cyclic``; must be even and smaller than ``n``.
    hub : int, optional
        Centre node for ``star``.
    edges : iterable of pairs, optional
        Undirected edge list for ``custom``.
    """
    if int(n) != n or n < 1:
        raise InvalidTopologyError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    params: dict = {}
    if kind == "cyclic":
        if c is None:
            raise InvalidTopologyError("cyclic topology needs the ring degree c")
        if c < 2 or c % 2:
            raise InvalidTopologyError(f"cyclic degree c must be a positive even integer, got {c}")
        if c >= n:
            raise InvalidTopologyError(f"cyclic degree c={c} must be smaller than n={n}")
        raw = [(i, (i + d) % n) for i in range(n) for d in range(1, c // 2 + 1)]
        params = {"c": int(c)}
    elif kind == "complete":
        raw = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif kind == "star":
        if not 0 <= hub < n:
            raise InvalidTopologyError(f"hub {hub} out of range for n={n}")
        raw = [(hub, j) for j in range(n) if j != hub]
        params = {"hub": int(hub)}
    elif kind == "custom":
        raw = list(edges or [])
    else:
        raise InvalidTopologyError(f"unknown topology kind {kind!r}")

    norm = _normalize_edges(n, raw)
    if not is_connected(n, norm):
        raise InvalidTopologyError(f"{kind} topology on {n} agents is disconnected")
    return Topology(n=n, kind=kind, edges=norm, params=params)


def topology_from_config(block: dict) -> Topology:
    """Build a topology from ``{kind, n, c?, hub?, edges?}``."""
    known = {"kind", "n", "c", "hub", "edges"}
    extra = set(block) - known
    if extra:
        raise InvalidTopologyError(f"unknown topology keys: {sorted(extra)}")
    if "kind" not in block or "n" not in block:
        raise InvalidTopologyError("topology needs 'kind' and 'n'")
    return build_topology(block["kind"], block["n"], c=block.get("c"),
                          hub=block.get("hub", 0), edges=block.get("edges"))


@dataclass(frozen=True, eq=False)
class ConsensusMatrix:
    """Symmetric doubly-stochastic mixing matrix and its spectral parameter."""

    w: np.ndarray
    beta: float
    topology: Topology | None = None

    @property
    def n(self) -> int:
        return self.w.shape[0]

    def to_csv(self, path: str | Path) -> None:
        """Write the matrix row-major with round-trip float precision."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in self.w:
                writer.writerow([repr(float(v)) for v in row])

    @staticmethod
    def read_csv(path: str | Path) -> np.ndarray:
        with open(path, newline="") as fh:
            return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def spectral_gap(w: np.ndarray, tol: float = 1e-8) -> float:
    """Second largest eigenvalue magnitude of a symmetric mixing matrix.

    Despite the name this returns ``beta`` itself (the gap is ``1 - beta``),
    i.e. the largest ``|lambda|`` once the unit eigenvalue is removed.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise MalformedMatrixError(f"expected a square matrix, got shape {w.shape}")
    eig = np.linalg.eigvalsh(w)
    top = eig[-1]
    if abs(top - 1.0) > tol:
        raise MalformedMatrixError(f"largest eigenvalue is {top!r}, expected 1")
    if w.shape[0] == 1:
        return 0.0
    rest = np.abs(eig[:-1])
    # eigvalsh sorts ascending, so eig[0] may carry the largest magnitude
    return float(min(max(rest.max(), 0.0), 1.0))


def metropolis_weights(topology: Topology) -> ConsensusMatrix:
    """Metropolis-Hastings weights: ``w_ij = 1 / (1 + max(d_i, d_j))`` on edges."""
    n = topology.n
    deg = topology.degrees()
    w = np.zeros((n, n))
    for a, b in topology.edges:
        v = 1.0 / (1.0 + max(deg[a], deg[b]))
        w[a, b] = v
        w[b, a] = v
    for i in range(n):
        w[i, i] = 1.0 - (w[i, :i].sum() + w[i, i + 1:].sum())
    return ConsensusMatrix(w=w, beta=spectral_gap(w), topology=topology)


def uniform_weights(n: int) -> ConsensusMatrix:
    """Averaging matrix ``(1/n) 11^T`` of a star/server (federated) network."""
    if int(n) != n or n < 1:
        raise InvalidTopologyError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    topo = build_topology("complete", n)
    return ConsensusMatrix(w=np.full((n, n), 1.0 / n), beta=0.0, topology=topo)


def check_consensus_matrix(cm: ConsensusMatrix, tol: float = 1e-12) -> None:
    """Raise :class:`MalformedMatrixError` if any structural property fails."""
    w = cm.w
    if not np.array_equal(w, w.T):
        raise MalformedMatrixError("matrix is not exactly symmetric")
    if np.any(w < 0):
        raise MalformedMatrixError("negative entries")
    if np.max(np.abs(w.sum(axis=1) - 1.0)) > tol or np.max(np.abs(w.sum(axis=0) - 1.0)) > tol:
        raise MalformedMatrixError("rows/columns do not sum to 1")
    if np.any(np.diag(w) <= 0):
        raise MalformedMatrixError("non-positive diagonal entry")
    if cm.topology is not None and cm.topology.kind != "complete":
        adj = np.zeros_like(w, dtype=bool)
        for a, b in cm.topology.edges:
            adj[a, b] = adj[b, a] = True
        off = ~np.eye(cm.n, dtype=bool)
        if not np.array_equal((w > 0) & off, adj):
            raise MalformedMatrixError("sparsity pattern differs from the topology")
    if not 0.0 <= cm.beta < 1.0:
        raise MalformedMatrixError(f"beta={cm.beta} outside [0, 1)")


def apply_consensus(w: np.ndarray | ConsensusMatrix, state: np.ndarray, t_c: int) -> np.ndarray:
    """Return ``W^{t_c} Y`` computed as ``t_c`` successive mixing rounds.

    Rounds are applied one at a time. Because the map is deterministic in
    floating point, once a state repeats (typically a bitwise fixed point a
    few hundred rounds in) the remaining rounds are resolved by cycle
    arithmetic; the result is bit-identical to running every round.
    """
    if isinstance(w, ConsensusMatrix):
        w = w.w
    y = np.asarray(state, dtype=float)
    if y.ndim != 2 or y.shape[0] != w.shape[0]:
        raise ValueError(f"state shape {y.shape} does not match a {w.shape[0]}-agent matrix")
    if int(t_c) != t_c or t_c < 0:
        raise ValueError(f"t_c must be a nonnegative integer, got {t_c!r}")
    t_c = int(t_c)
    y = y.copy()
    if t_c == 0:
        return y

    seen: dict[bytes, int] = {}
    history: list[np.ndarray] = []
    for t in range(t_c):
        if t < _CYCLE_MEMORY:
            key = y.tobytes()
            first = seen.get(key)
            if first is not None:
                period = t - first
                return history[first + (t_c - first) % period].copy()
            seen[key] = t
            history.append(y)
        y = w @ y
    return y
