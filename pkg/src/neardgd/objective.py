"""Local objectives and the seeded strongly convex quadratic benchmark."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np


class InvalidProblemError(ValueError):
    pass


class LocalFunction(Protocol):
    """What the solver needs from an agent's private objective."""

    mu: float
    l: float

    def value(self, x: np.ndarray) -> float: ...

    def gradient(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class LocalQuadratic:
    """``f(x) = 1/2 x^T A x + b^T x`` with a diagonal positive definite ``A``.

    Only the diagonal is stored, so ``mu``/``l`` are exact.
    """

    diag: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=float)
        if d.ndim != 1 or np.any(d <= 0):
            raise InvalidProblemError("diagonal Hessian must be a vector of positive entries")
        if np.shape(self.b) != d.shape:
            raise InvalidProblemError("b must have the same length as the diagonal")

    @property
    def a(self) -> np.ndarray:
        return np.diag(self.diag)

    @property
    def mu(self) -> float:
        return float(np.min(self.diag))

    @property
    def l(self) -> float:
        return float(np.max(self.diag))

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * np.dot(x, self.diag * x) + np.dot(self.b, x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.diag * x + self.b

    def minimizer(self) -> np.ndarray:
        return -self.b / self.diag


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """``n`` agents, each holding one :class:`LocalQuadratic` in ``R^p``."""

    locals: tuple[LocalQuadratic, ...]
    seed: int | None = None
    requested_kappa: float | None = None

    def __post_init__(self):
        if not self.locals:
            raise InvalidProblemError("an instance needs at least one agent")
        p = self.locals[0].diag.shape[0]
        if any(f.diag.shape[0] != p for f in self.locals):
            raise InvalidProblemError("all local objectives must share the dimension p")
        diags = np.stack([f.diag for f in self.locals])
        object.__setattr__(self, "_diags", diags)
        object.__setattr__(self, "_bs", np.stack([f.b for f in self.locals]))

    @property
    def n(self) -> int:
        return len(self.locals)

    @property
    def p(self) -> int:
        return self._diags.shape[1]

    @property
    def diags(self) -> np.ndarray:
        """``n x p`` array whose row ``i`` is the diagonal of ``A_i``."""
        return self._diags

    @property
    def bs(self) -> np.ndarray:
        return self._bs

    @property
    def mus(self) -> np.ndarray:
        return self._diags.min(axis=1)

    @property
    def ls(self) -> np.ndarray:
        return self._diags.max(axis=1)

    @property
    def l_max(self) -> float:
        return float(self.ls.max())

    @property
    def mu_bar(self) -> float:
        return float(self.mus.mean())

    @property
    def l_bar(self) -> float:
        return float(self.ls.mean())

    @property
    def kappa(self) -> float:
        return self.l_bar / self.mu_bar

    @property
    def x_star(self) -> np.ndarray:
        return optimal_solution(self)

    @property
    def u_star(self) -> np.ndarray:
        return -self._bs / self._diags

    # --- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "neardgd-quadratic/1",
            "n": self.n,
            "p": self.p,
            "seed": self.seed,
            "kappa": self.requested_kappa,
            "diag": [[repr(float(v)) for v in row] for row in self._diags],
            "b": [[repr(float(v)) for v in row] for row in self._bs],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemInstance":
        if data.get("format") != "neardgd-quadratic/1":
            raise InvalidProblemError(f"unrecognised instance format {data.get('format')!r}")
        diag = np.array([[float(v) for v in row] for row in data["diag"]])
        b = np.array([[float(v) for v in row] for row in data["b"]])
        if diag.shape != (data["n"], data["p"]) or b.shape != diag.shape:
            raise InvalidProblemError("stored arrays do not match the declared n, p")
        return cls(tuple(LocalQuadratic(d, bb) for d, bb in zip(diag, b)),
                   seed=data.get("seed"), requested_kappa=data.get("kappa"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ProblemInstance":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_instance(diags: Sequence[Sequence[float]], bs: Sequence[Sequence[float]]) -> ProblemInstance:
    """Assemble an instance from explicit Hessian diagonals and linear terms."""
    return ProblemInstance(tuple(LocalQuadratic(np.asarray(d, dtype=float), np.asarray(b, dtype=float))
                                 for d, b in zip(diags, bs)))


def spectrum_levels(kappa: float) -> np.ndarray:
    """Geometric grid ``1, 10, 100, ...`` up to ``sqrt(kappa)`` (at least two points)."""
    root = np.sqrt(kappa)
    m = max(1, int(round(np.log10(root))))
    return root ** (np.arange(m + 1) / m)


def generate_quadratic(n: int, p: int, kappa: float, seed: int) -> ProblemInstance:
    """Seeded heterogeneous quadratic benchmark with ``L_bar / mu_bar == kappa``.

    The Hessians are diagonal with a split spectrum shared by all agents:
    the first ``p // 2`` coordinates are *soft* with entries in
    ``[1, sqrt(kappa)]``, the rest are *stiff* with entries in
    ``[sqrt(kappa), kappa]``. Each entry is picked uniformly from a
    powers-of-ten style grid (see :func:`spectrum_levels`). Every agent then
    has one random soft entry pinned to ``1`` and one random stiff entry pinned
    to ``kappa``, so ``mu_i = 1`` and ``L_i = kappa`` exactly. Linear terms are
    uniform on ``[0, 1)``.

    Draw order from ``numpy.random.Generator(PCG64(seed))``: soft levels
    ``(n, p//2)``, stiff levels ``(n, p - p//2)``, two pin positions per agent,
    then ``b`` as ``(n, p)``.
    """
    if int(n) != n or n < 1:
        raise InvalidProblemError(f"n must be a positive integer, got {n!r}")
    if int(p) != p or p < 1:
        raise InvalidProblemError(f"p must be a positive integer, got {p!r}")
    if not kappa >= 1:
        raise InvalidProblemError(f"kappa must be >= 1, got {kappa!r}")
    if p < 2 and kappa > 1:
        raise InvalidProblemError("p >= 2 is needed to pin both curvature extremes")
    n, p, kappa = int(n), int(p), float(kappa)

    rng = np.random.Generator(np.random.PCG64(seed))
    levels = spectrum_levels(kappa)
    root = levels[-1]
    h = p // 2
    # clipping only absorbs rounding in root * root for non-square kappa
    soft = np.maximum(root / rng.choice(levels, size=(n, h)), 1.0)
    stiff = np.minimum(root * rng.choice(levels, size=(n, p - h)), kappa)
    for i in range(n):
        if h:
            soft[i, rng.integers(h)] = 1.0
        stiff[i, rng.integers(p - h)] = kappa
    diags = np.hstack([soft, stiff])
    bs = rng.uniform(0.0, 1.0, size=(n, p))
    return ProblemInstance(tuple(LocalQuadratic(d, b) for d, b in zip(diags, bs)),
                           seed=seed, requested_kappa=kappa)


def local_gradient(instance: ProblemInstance, i: int, x: np.ndarray) -> np.ndarray:
    if not 0 <= i < instance.n:
        raise IndexError(f"agent index {i} out of range for n={instance.n}")
    return instance.locals[i].gradient(np.asarray(x, dtype=float))


def stacked_gradient(instance: ProblemInstance, x: np.ndarray) -> np.ndarray:
    """Row ``i`` of the result is ``A_i x_i + b_i``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (instance.n, instance.p):
        raise ValueError(f"expected an {instance.n}x{instance.p} stacked state, got {x.shape}")
    return instance.diags * x + instance.bs


def optimal_solution(instance: ProblemInstance) -> np.ndarray:
    """Minimiser of ``sum_i f_i`` via a direct solve of ``(sum A_i) x = -sum b_i``."""
    h = np.diag(instance.diags.sum(axis=0))
    rhs = -instance.bs.sum(axis=0)
    try:
        return np.linalg.solve(h, rhs)
    except np.linalg.LinAlgError as exc:
        raise InvalidProblemError("aggregate Hessian is singular; instance is corrupted") from exc


def curvature_constants(instance: ProblemInstance) -> tuple[float, float, float, float]:
    """Return ``(L, mu_bar, L_bar, gamma)`` with ``gamma = min_i mu_i L_i / (mu_i + L_i)``."""
    mus, ls = instance.mus, instance.ls
    gamma = float(np.min(mus * ls / (mus + ls)))
    return instance.l_max, instance.mu_bar, instance.l_bar, gamma
