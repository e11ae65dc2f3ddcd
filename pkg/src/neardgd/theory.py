"""Convergence constants and bounds for the nested method, checked on trajectories.

Index convention: the analysis index ``m`` of a quantity is used in the
reports. State ``k`` of a trajectory carries ``x_k``; its ``y``/``inner``
fields belong to index ``m = k - 1`` (they are the gradient phase applied to
``x_{k-1}``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (Schedule, SolverState, _as_schedule, check_step_length,
                   gradient_phase, initial_state)
from .graph import ConsensusMatrix
from .objective import ProblemInstance, curvature_constants, optimal_solution, stacked_gradient

SLACK = 1e-9


class MissingInnerIteratesError(ValueError):
    pass


class ScheduleMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TheoryConstants:
    alpha: float
    beta: float
    l_max: float
    mu_bar: float
    l_bar: float
    n: int
    gamma: float
    nu: float
    eta: float
    d_big: float
    d_hat: float
    m_big: float
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    nu_bar: float
    tg0: int
    dist0: float
    c3_hat: float
    c5_hat: float
    t_seq: tuple[float, ...]
    tau: float
    rho: float
    c_big: float

    @property
    def eta_minus_one(self) -> float:
        return self.alpha * self.l_max

    def eta_pow_minus_one(self, t: int) -> float:
        """``eta^t - 1`` without cancellation."""
        return math.expm1(t * math.log1p(self.eta_minus_one))

    def t_value(self, t: int) -> float:
        """``eta^t - 1 - t (eta - 1)``; exactly zero for ``t = 1``."""
        return t_value(self.alpha * self.l_max, t)

    def one_minus_c1_pow(self, t: int) -> float:
        """``1 - c1^t`` with ``c1 = sqrt(1 - alpha c2)``."""
        return -math.expm1(0.5 * t * math.log1p(-self.alpha * self.c2))


def t_value(eta_minus_one: float, t: int) -> float:
    # eta^t - 1 - t(eta - 1) == (eta - 1) * sum_{j=1}^{t-1} (eta^j - 1); every term is >= 0
    lg = math.log1p(eta_minus_one)
    return eta_minus_one * math.fsum(math.expm1(j * lg) for j in range(1, int(t)))


def theorem2_tg(tg0: int, m: int) -> int:
    """Gradient steps at analysis index ``m``: ``max(tg0 - m, 1)``."""
    return max(tg0 - m, 1)


def compute_constants(instance: ProblemInstance, w: ConsensusMatrix, alpha: float, tg0: int = 1,
                      x0: np.ndarray | None = None, unsafe: bool = False) -> TheoryConstants:
    """Evaluate every closed-form constant for ``(instance, W, alpha)``.

    ``y_0`` (used in ``D``) is the output of the first gradient phase, i.e.
    ``tg0`` local steps from the replicated start ``x0``.
    """
    check_step_length(instance, alpha, unsafe)
    if int(tg0) != tg0 or tg0 < 1:
        raise ValueError(f"tg0 must be an integer >= 1, got {tg0!r}")
    tg0 = int(tg0)
    n = instance.n
    l_max, mu_bar, l_bar, gamma = curvature_constants(instance)
    beta = float(w.beta)
    x_star = optimal_solution(instance)
    u_star = instance.u_star

    start = initial_state(instance, x0)
    y0, _ = gradient_phase(instance, start.x, tg0, alpha)

    nu = 2.0 * alpha * gamma
    eta_m1 = alpha * l_max
    eta = 1.0 + eta_m1
    d_big = float(np.linalg.norm(y0 - u_star) + (nu + 4.0) / nu * np.linalg.norm(u_star))
    d_hat = float(np.linalg.norm(x_star) + d_big / math.sqrt(n))
    grads_at_opt = stacked_gradient(instance, np.tile(x_star, (n, 1)))
    m_big = float(2.0 * l_max * d_hat + np.linalg.norm(grads_at_opt, axis=1).sum())
    c2 = 2.0 * mu_bar * l_bar / (mu_bar + l_bar)
    c1 = math.sqrt(1.0 - alpha * c2)
    c3 = alpha * d_big * l_max / eta_m1
    c4 = 2.0 / (mu_bar + l_bar)
    c5 = alpha * m_big / eta_m1
    nu_bar = alpha * c2

    t_seq = tuple(t_value(eta_m1, theorem2_tg(tg0, m)) for m in range(tg0 + 1))
    ratios = [t_seq[i + 1] / t_seq[i] for i in range(tg0) if t_seq[i] > 0]
    tau = max(ratios) if ratios else 0.0
    c3_hat = c3 * math.expm1(tg0 * math.log1p(eta_m1))
    c5_hat = c5 * t_seq[0]
    rho = max(beta, tau, 1.0 - alpha * c2 / 2.0)
    dist0 = float(np.linalg.norm(start.x_bar - x_star))
    c_big = max(dist0, 8.0 * (c3_hat + c5_hat) / (alpha * c2) ** 2)

    return TheoryConstants(alpha=float(alpha), beta=beta, l_max=l_max, mu_bar=mu_bar, l_bar=l_bar,
                           n=n, gamma=gamma, nu=nu, eta=eta, d_big=d_big, d_hat=d_hat,
                           m_big=m_big, c1=c1, c2=c2, c3=c3, c4=c4, c5=c5, nu_bar=nu_bar,
                           tg0=tg0, dist0=dist0, c3_hat=c3_hat, c5_hat=c5_hat, t_seq=t_seq,
                           tau=tau, rho=rho, c_big=c_big)


# --- closed-form bounds ------------------------------------------------------

def neighborhood(c: TheoryConstants, t_c: int, t_g: int) -> tuple[float, float]:
    """The two limiting terms of the fixed-schedule bound (consensus part, drift part)."""
    den = c.one_minus_c1_pow(t_g)
    return (c.c3 * c.beta ** t_c * c.eta_pow_minus_one(t_g) / den,
            c.c5 * c.t_value(t_g) / den)


def rate_factor(c: TheoryConstants, t_g: int) -> float:
    """Per-iteration contraction ``c1^{t_g}`` of the first bound term."""
    return c.c1 ** t_g


def theorem1_bound(c: TheoryConstants, k: int, t_c: int, t_g: int, dist0: float) -> float:
    """Bound on ``||x_bar_k - x*||`` for fixed ``(t_c, t_g)``."""
    cons, drift = neighborhood(c, t_c, t_g)
    return c.c1 ** (k * t_g) * dist0 + cons + drift


def theorem2_bound(c: TheoryConstants, k: int) -> float:
    """``C rho^k`` for ``t_c(k) = k`` and ``t_g(k) = max(t_g(0) - k, 1)``."""
    return c.c_big * c.rho ** k


def corollary1_bounds(c: TheoryConstants, k: int, t_c: int, t_g: int,
                      dist0: float) -> tuple[float, float]:
    """Per-agent bounds ``(||x_{i,k} - x*||, ||y_{i,k} - x*||)`` for fixed schedules."""
    den = c.one_minus_c1_pow(t_g)
    delta = c.c3 * c.eta_pow_minus_one(t_g) / den + c.d_big
    drift = c.c5 * c.t_value(t_g) / den
    x_bound = c.c1 ** (k * t_g) * dist0 + c.beta ** t_c * delta + drift
    y_bound = c.c1 ** ((k + 1) * t_g) * dist0 + c.beta ** t_c * delta + drift + 2.0 * c.d_big
    return x_bound, y_bound


def corollary2_bounds(c: TheoryConstants, k: int) -> tuple[float, float]:
    """Per-agent bounds under the increasing-consensus / decreasing-gradient schedules."""
    return (c.c_big * c.rho ** k + c.beta ** k * c.d_big,
            c.c_big * c.rho ** (k + 1) + c.beta ** (k + 1) * c.d_big + 2.0 * c.d_big)


# --- reports -----------------------------------------------------------------

@dataclass
class DiagnosticReport:
    """Rows of ``(k, inequality_id, lhs, rhs, satisfied)``."""

    rows: list[tuple[int, str, float, float, bool]] = field(default_factory=list)
    slack: float = SLACK

    def add(self, k: int, ineq: str, lhs: float, rhs: float, slack: float | None = None) -> None:
        slack = self.slack if slack is None else slack
        self.rows.append((int(k), ineq, float(lhs), float(rhs), bool(lhs <= rhs + slack)))

    def extend(self, other: "DiagnosticReport") -> "DiagnosticReport":
        self.rows.extend(other.rows)
        return self

    @property
    def violations(self) -> list[tuple[int, str, float, float, bool]]:
        return [r for r in self.rows if not r[4]]

    @property
    def ok(self) -> bool:
        return not self.violations

    def min_margin(self) -> float:
        """Smallest ``rhs - lhs`` over all rows (negative means a violation)."""
        return min((r[3] - r[2] for r in self.rows), default=math.inf)

    def ids(self) -> list[str]:
        return sorted({r[1] for r in self.rows})

    def summary(self) -> str:
        lines = []
        for ineq in self.ids():
            sel = [r for r in self.rows if r[1] == ineq]
            bad = sum(not r[4] for r in sel)
            margin = min(r[3] - r[2] for r in sel)
            lines.append(f"{ineq:<26s} checks={len(sel):<7d} violations={bad:<5d} min_margin={margin:.3e}")
        verdict = "all bounds satisfied" if self.ok else f"{len(self.violations)} bound violation(s)"
        lines.append(verdict)
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["k", "inequality_id", "lhs", "rhs", "satisfied"])
            for k, ineq, lhs, rhs, ok in self.rows:
                wr.writerow([k, ineq, repr(lhs), repr(rhs), "true" if ok else "false"])


def _dist(states: Sequence[SolverState], x_star: np.ndarray) -> list[float]:
    return [float(np.linalg.norm(s.x_bar - x_star)) for s in states]


def check_theorem1(c: TheoryConstants, trajectory: Sequence[SolverState], t_c: int, t_g: int,
                   x_star: np.ndarray) -> DiagnosticReport:
    rep = DiagnosticReport()
    dist0 = float(np.linalg.norm(trajectory[0].x_bar - x_star))
    for s, d in zip(trajectory, _dist(trajectory, x_star)):
        rep.add(s.k, "theorem1", d, theorem1_bound(c, s.k, t_c, t_g, dist0))
    return rep


def check_theorem2(c: TheoryConstants, trajectory: Sequence[SolverState],
                   x_star: np.ndarray) -> DiagnosticReport:
    rep = DiagnosticReport()
    for s, d in zip(trajectory, _dist(trajectory, x_star)):
        rep.add(s.k, "theorem2", d, theorem2_bound(c, s.k))
    return rep


def _agent_dev(x: np.ndarray, ref: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(x - ref, axis=1)))


def check_corollary1(c: TheoryConstants, trajectory: Sequence[SolverState], t_c: int, t_g: int,
                     x_star: np.ndarray) -> DiagnosticReport:
    rep = DiagnosticReport()
    dist0 = float(np.linalg.norm(trajectory[0].x_bar - x_star))
    for s in trajectory:
        xb, _ = corollary1_bounds(c, s.k, t_c, t_g, dist0)
        rep.add(s.k, "corollary1_x", _agent_dev(s.x, x_star), xb)
        if s.y is not None:
            m = s.k - 1
            _, yb = corollary1_bounds(c, m, t_c, t_g, dist0)
            rep.add(m, "corollary1_y", _agent_dev(s.y, x_star), yb)
    return rep


def check_corollary2(c: TheoryConstants, trajectory: Sequence[SolverState],
                     x_star: np.ndarray) -> DiagnosticReport:
    rep = DiagnosticReport()
    for s in trajectory:
        rep.add(s.k, "corollary2_x", _agent_dev(s.x, x_star), corollary2_bounds(c, s.k)[0])
        if s.y is not None:
            m = s.k - 1
            rep.add(m, "corollary2_y", _agent_dev(s.y, x_star), corollary2_bounds(c, m)[1])
    return rep


def averaged_gradient_path(instance: ProblemInstance, start: np.ndarray, t_g: int,
                           alpha: float) -> list[np.ndarray]:
    """Gradient descent on the average objective from ``start``: ``[x^0, ..., x^{t_g}]``."""
    path = [np.asarray(start, dtype=float)]
    for _ in range(t_g):
        cur = path[-1]
        g = (instance.diags * cur + instance.bs).mean(axis=0)
        path.append(cur - alpha * g)
    return path


def lemma_diagnostics(instance: ProblemInstance, w: ConsensusMatrix,
                      trajectory: Sequence[SolverState], c: TheoryConstants,
                      t_c: Schedule | int, t_g: Schedule | int) -> DiagnosticReport:
    """Measure both sides of the iterate, gradient-spread and deviation bounds.

    ``t_c``/``t_g`` may be fixed counts or schedules; the count in force at
    each index is used. Every state past the first must carry ``inner``.
    """
    tc_s, tg_s = _as_schedule(t_c), _as_schedule(t_g)
    x_star = optimal_solution(instance)
    d, dh, m_big, beta, eta, alpha = c.d_big, c.d_hat, c.m_big, c.beta, c.eta, c.alpha
    eta_m1 = c.eta_minus_one
    rep = DiagnosticReport()

    by_k = {s.k: s for s in trajectory}

    def tc_into(k: int) -> int:
        # consensus rounds that produced x_k; x_0 is already a consensus state
        return tc_s(k) if k >= 1 else tc_s(1)

    for s in trajectory:
        rep.add(s.k, "lemma1_x", float(np.linalg.norm(s.x)), d)
        rep.add(s.k, "lemma3_p1", _agent_dev(s.x, s.x_bar), beta ** tc_into(s.k) * d)
        if s.k == 0:
            continue
        if s.inner is None:
            raise MissingInnerIteratesError(f"state {s.k} has no inner iterates; run with record_inner")
        m = s.k - 1
        prev = by_k.get(m)
        tg = tg_s(s.k)
        if len(s.inner) != tg + 1:
            raise ValueError(f"state {s.k}: expected {tg + 1} inner iterates, found {len(s.inner)}")
        if prev is not None and not np.array_equal(s.inner[0], prev.x):
            raise ValueError(f"state {s.k}: inner iterates do not start from x_{m}")
        tc = tc_into(m)
        bt = beta ** tc

        rep.add(m, "lemma1_y", float(np.linalg.norm(s.y)), d)
        rep.add(m, "lemma3_p4", _agent_dev(s.y, s.y_bar), beta ** s.t_c * d + 2.0 * d)

        xhat = averaged_gradient_path(instance, s.inner[0].mean(axis=0), tg, alpha)
        for j, (xi, xh) in enumerate(zip(s.inner, xhat)):
            eta_j_m1 = math.expm1(j * math.log1p(eta_m1))
            rhs = (1.0 + eta_j_m1) * bt * d + alpha * m_big * eta_j_m1 / eta_m1
            rep.add(m, f"lemma3_p2[j={j}]", _agent_dev(xi, xh), rhs)
            rep.add(m, "lemma1_xhat", float(np.linalg.norm(xh - x_star)), dh)
            grads = instance.diags * xh + instance.bs
            rep.add(m, "lemma2", _agent_dev(grads, grads.mean(axis=0)), m_big)

        g = sum(stacked_gradient(instance, xi).mean(axis=0) for xi in s.inner[:-1])
        g_bar = sum((instance.diags * xh + instance.bs).mean(axis=0) for xh in xhat[:-1])
        geo = math.expm1(tg * math.log1p(eta_m1)) / eta_m1
        rhs = bt * d * c.l_max * geo + m_big * (geo - tg)
        rep.add(m, "lemma3_p3", float(np.linalg.norm(g - g_bar)), rhs)
    return rep


def mean_evolution_residuals(instance: ProblemInstance, trajectory: Sequence[SolverState],
                             alpha: float) -> np.ndarray:
    """``max |x_bar_{k+1} - (x_bar_k - alpha g_k)|`` for each consecutive pair.

    ``g_k`` is the averaged sum of the local gradients along the gradient phase;
    the phase is replayed from ``x_k`` when inner iterates were not recorded.
    DGD snapshots (no ``y``) use the single gradient at ``x_k``.
    """
    out = []
    for prev, cur in zip(trajectory[:-1], trajectory[1:]):
        if cur.y is None:
            g = stacked_gradient(instance, prev.x).mean(axis=0)
        else:
            inner = cur.inner
            if inner is None:
                _, inner = gradient_phase(instance, prev.x, cur.t_g, alpha, record_inner=True)
            g = sum(stacked_gradient(instance, xi).mean(axis=0) for xi in inner[:-1])
        out.append(float(np.max(np.abs(cur.x_bar - (prev.x_bar - alpha * g)))))
    return np.array(out)


@dataclass
class CounterReport:
    iterations: int
    comm_rounds: int
    grad_rounds: int
    expected_comm: int
    expected_grad_direct: int
    expected_grad_closed_form: int | None

    @property
    def ok(self) -> bool:
        closed = self.expected_grad_closed_form
        return (self.comm_rounds == self.expected_comm
                and self.grad_rounds == self.expected_grad_direct
                and (closed is None or closed == self.expected_grad_direct))


def work_counters_check(trajectory: Sequence[SolverState], tc_schedule: Schedule,
                        tg_schedule: Schedule) -> CounterReport:
    """Compare the run's counters with the closed-form work totals.

    Communication: ``K(K+1)/2``. Gradients: the direct sum of the schedule,
    which for ``K >= t_g(0) - 1`` equals ``K + (t_g(0)^2 - t_g(0))/2``.
    """
    last = trajectory[-1]
    big_k = last.k
    tg0 = tg_schedule(1)
    probe = max(big_k, tg0 + 1)
    if tc_schedule.values(probe) != list(range(1, probe + 1)):
        raise ScheduleMismatchError("consensus schedule is not t_c(k) = k")
    if tg_schedule.values(probe) != [max(tg0 - (k - 1), 1) for k in range(1, probe + 1)]:
        raise ScheduleMismatchError("gradient schedule is not t_g(k) = max(t_g(0) - (k - 1), 1)")
    direct = sum(tg_schedule(k) for k in range(1, big_k + 1))
    closed = big_k + (tg0 * tg0 - tg0) // 2 if big_k >= tg0 - 1 else None
    return CounterReport(iterations=big_k, comm_rounds=last.comm_rounds, grad_rounds=last.grad_rounds,
                         expected_comm=big_k * (big_k + 1) // 2, expected_grad_direct=direct,
                         expected_grad_closed_form=closed)
