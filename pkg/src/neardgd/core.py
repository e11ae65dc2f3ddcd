"""Nested consensus/gradient iterations (NEAR-DGD family) and the DGD baseline.

Iterations are numbered ``k = 1, 2, ...``; iteration ``k`` runs ``t_g(k)``
local gradient steps on the current iterate followed by ``t_c(k)`` mixing
rounds. State ``k = 0`` is the replicated starting point.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .graph import ConsensusMatrix, apply_consensus
from .objective import ProblemInstance, stacked_gradient

DIVERGENCE_THRESHOLD = 1e12

RULES = ("constant", "linear_in_k", "increase_every", "decrease_to_one", "decrease_every")


class InvalidConfigError(ValueError):
    pass


class StepLengthError(InvalidConfigError):
    pass


class DivergedError(RuntimeError):
    def __init__(self, k: int, norm: float):
        super().__init__(f"iterate norm {norm:.3e} exceeded {DIVERGENCE_THRESHOLD:.0e} at iteration {k}")
        self.k = k
        self.norm = norm


@dataclass(frozen=True)
class Schedule:
    """Integer-valued step-count rule ``k -> t(k) >= 1`` for ``k >= 1``.

    ``init`` is the value at ``k = 1`` for every rule; ``period`` is the
    number of iterations between unit changes for the ``*_every`` rules.

    ===================  ==========================================
    constant             ``init``
    linear_in_k          ``init + k - 1``  (``t(k) = k`` for init 1)
    increase_every       ``init + (k - 1) // period``
    decrease_to_one      ``max(init - (k - 1), 1)``
    decrease_every       ``max(init - (k - 1) // period, 1)``
    ===================  ==========================================
    """

    rule: str
    init: int = 1
    period: int = 1

    def __post_init__(self):
        if self.rule not in RULES:
            raise InvalidConfigError(f"unknown schedule rule {self.rule!r}")
        if int(self.init) != self.init or self.init < 1:
            raise InvalidConfigError(f"schedule init must be an integer >= 1, got {self.init!r}")
        if int(self.period) != self.period or self.period < 1:
            raise InvalidConfigError(f"schedule period must be an integer >= 1, got {self.period!r}")

    @classmethod
    def constant(cls, t: int) -> "Schedule":
        return cls("constant", t)

    @classmethod
    def linear(cls, start: int = 1) -> "Schedule":
        return cls("linear_in_k", start)

    @classmethod
    def increase_every(cls, init: int, period: int) -> "Schedule":
        return cls("increase_every", init, period)

    @classmethod
    def decrease_to_one(cls, init: int) -> "Schedule":
        return cls("decrease_to_one", init)

    @classmethod
    def decrease_every(cls, init: int, period: int) -> "Schedule":
        return cls("decrease_every", init, period)

    def __call__(self, k: int) -> int:
        if k < 1:
            raise ValueError(f"schedules are defined for k >= 1, got {k}")
        i, m = self.init, k - 1
        if self.rule == "constant":
            return i
        if self.rule == "linear_in_k":
            return i + m
        if self.rule == "increase_every":
            return i + m // self.period
        if self.rule == "decrease_to_one":
            return max(i - m, 1)
        return max(i - m // self.period, 1)

    def values(self, upto: int) -> list[int]:
        return [self(k) for k in range(1, upto + 1)]

    def total(self, upto: int) -> int:
        return sum(self.values(upto))

    @property
    def is_constant(self) -> bool:
        return self.rule == "constant" or (self.rule == "decrease_to_one" and self.init == 1) \
            or (self.rule == "decrease_every" and self.init == 1)


def _as_schedule(s: Schedule | int) -> Schedule:
    return s if isinstance(s, Schedule) else Schedule.constant(int(s))


def step_bound(instance: ProblemInstance) -> float:
    """``min{1/L, 2/(mu_bar + L_bar)}``."""
    return min(1.0 / instance.l_max, 2.0 / (instance.mu_bar + instance.l_bar))


def default_alpha(instance: ProblemInstance) -> float:
    return 0.999 * step_bound(instance)


def dgd_step_bound(instance: ProblemInstance, w: ConsensusMatrix | np.ndarray) -> float:
    """Stability limit ``0.999 (1 + lambda_min(W)) / L`` of the DGD baseline."""
    w = w.w if isinstance(w, ConsensusMatrix) else np.asarray(w)
    lam_min = float(np.linalg.eigvalsh(w)[0])
    return 0.999 * (1.0 + lam_min) / instance.l_max


def check_step_length(instance: ProblemInstance, alpha: float, unsafe: bool = False) -> None:
    if not alpha > 0:
        raise StepLengthError(f"step length must be positive, got {alpha!r}")
    bound = step_bound(instance)
    if alpha > bound and not unsafe:
        raise StepLengthError(f"step length {alpha!r} exceeds the admissible bound {bound!r}")


@dataclass(frozen=True)
class SolverConfig:
    alpha: float | None = None
    tc_schedule: Schedule = field(default_factory=lambda: Schedule.constant(1))
    tg_schedule: Schedule = field(default_factory=lambda: Schedule.constant(1))
    max_iters: int = 1000
    x0: np.ndarray | None = None
    variant: str = "near_dgd"
    record_inner: bool = False
    tol: float | None = None
    unsafe: bool = False

    def __post_init__(self):
        if self.variant not in ("near_dgd", "dgd_baseline"):
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise InvalidConfigError(f"max_iters must be a nonnegative integer, got {self.max_iters!r}")
        object.__setattr__(self, "tc_schedule", _as_schedule(self.tc_schedule))
        object.__setattr__(self, "tg_schedule", _as_schedule(self.tg_schedule))

    def resolve(self, instance: ProblemInstance) -> "SolverConfig":
        """Fill in the default step length / start point and validate against ``instance``."""
        alpha = default_alpha(instance) if self.alpha is None else float(self.alpha)
        check_step_length(instance, alpha, self.unsafe)
        x0 = np.zeros(instance.p) if self.x0 is None else np.asarray(self.x0, dtype=float)
        if x0.shape != (instance.p,):
            raise InvalidConfigError(f"x0 must have length {instance.p}, got shape {x0.shape}")
        return replace(self, alpha=alpha, x0=x0)


@dataclass
class SolverState:
    """Snapshot after iteration ``k``.

    ``x`` is the post-consensus iterate ``x_k``. For ``k >= 1``, ``y`` is the
    output of the gradient phase of iteration ``k`` (so ``x = W^{t_c} y``) and
    ``inner`` optionally holds the gradient-phase iterates
    ``x_{k-1}^0, ..., x_{k-1}^{t_g}``. ``t_c``/``t_g`` are the counts used by
    iteration ``k``; the counters are cumulative over iterations ``1..k``.
    """

    k: int
    x: np.ndarray
    y: np.ndarray | None = None
    inner: list[np.ndarray] | None = None
    grad_rounds: int = 0
    comm_rounds: int = 0
    t_c: int = 0
    t_g: int = 0

    @property
    def x_bar(self) -> np.ndarray:
        return self.x.mean(axis=0)

    @property
    def y_bar(self) -> np.ndarray | None:
        return None if self.y is None else self.y.mean(axis=0)


def initial_state(instance: ProblemInstance, x0: np.ndarray | None = None) -> SolverState:
    x0 = np.zeros(instance.p) if x0 is None else np.asarray(x0, dtype=float)
    return SolverState(k=0, x=np.tile(x0, (instance.n, 1)))


def gradient_phase(instance: ProblemInstance, x: np.ndarray, t_g: int, alpha: float,
                   record_inner: bool = False) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """``t_g`` local gradient steps per agent with no communication.

    Returns the final iterate and, if requested, the list ``[x^0, ..., x^{t_g}]``.
    """
    if int(t_g) != t_g or t_g < 1:
        raise ValueError(f"t_g must be an integer >= 1, got {t_g!r}")
    cur = np.array(x, dtype=float)
    inner = [cur] if record_inner else None
    for _ in range(int(t_g)):
        cur = cur - alpha * stacked_gradient(instance, cur)
        if inner is not None:
            inner.append(cur)
    return cur, inner


def near_dgd_step(state: SolverState, instance: ProblemInstance, w: ConsensusMatrix | np.ndarray,
                  config: SolverConfig) -> SolverState:
    k = state.k + 1
    t_c, t_g = config.tc_schedule(k), config.tg_schedule(k)
    y, inner = gradient_phase(instance, state.x, t_g, config.alpha, config.record_inner)
    x = apply_consensus(w, y, t_c)
    return SolverState(k=k, x=x, y=y, inner=inner,
                       grad_rounds=state.grad_rounds + t_g,
                       comm_rounds=state.comm_rounds + t_c,
                       t_c=t_c, t_g=t_g)


def dgd_step(state: SolverState, instance: ProblemInstance, w: ConsensusMatrix | np.ndarray,
             alpha: float) -> SolverState:
    """Classic DGD: ``x' = W x - alpha grad f(x)`` (one round of each)."""
    x = apply_consensus(w, state.x, 1) - alpha * stacked_gradient(instance, state.x)
    return SolverState(k=state.k + 1, x=x, grad_rounds=state.grad_rounds + 1,
                       comm_rounds=state.comm_rounds + 1, t_c=1, t_g=1)


def relative_error(x_bar: np.ndarray, x_star: np.ndarray) -> float:
    """``||x_bar - x*||^2 / ||x*||^2`` (plain squared error when ``x* = 0``)."""
    den = float(np.dot(x_star, x_star))
    num = float(np.sum((x_bar - x_star) ** 2))
    return num / den if den > 0 else num


def iterate(instance: ProblemInstance, w: ConsensusMatrix | np.ndarray, config: SolverConfig,
            x_star: np.ndarray | None = None) -> Iterator[SolverState]:
    """Yield the initial state and then one snapshot per iteration."""
    config = config.resolve(instance)
    state = initial_state(instance, config.x0)
    yield state
    for _ in range(config.max_iters):
        if config.variant == "dgd_baseline":
            state = dgd_step(state, instance, w, config.alpha)
        else:
            state = near_dgd_step(state, instance, w, config)
        norm = float(np.linalg.norm(state.x))
        if not np.isfinite(norm) or norm > DIVERGENCE_THRESHOLD:
            raise DivergedError(state.k, norm)
        yield state
        if config.tol is not None and x_star is not None \
                and relative_error(state.x_bar, x_star) < config.tol:
            return


def run(instance: ProblemInstance, w: ConsensusMatrix | np.ndarray, config: SolverConfig,
        x_star: np.ndarray | None = None) -> list[SolverState]:
    """Run to ``config.max_iters`` (or early tolerance) and return all snapshots."""
    return list(iterate(instance, w, config, x_star))
