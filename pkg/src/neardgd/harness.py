"""Experiment orchestration: variant notation, cost accounting, sweeps and CSV export."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Schedule, SolverConfig, default_alpha, dgd_step_bound, iterate, relative_error
from .graph import ConsensusMatrix
from .objective import ProblemInstance, optimal_solution

log = logging.getLogger(__name__)

ROW_HEADER = ["k", "rel_error", "consensus_error", "cum_comm", "cum_grad", "cum_cost"]
MANIFEST_HEADER = ["run_id", "variant", "n", "p", "kappa", "seed", "alpha", "beta",
                   "c_c", "c_g", "horizon", "topology"]


class VariantParseError(ValueError):
    def __init__(self, text: str, pos: int, msg: str):
        super().__init__(f"{msg} at position {pos} in {text!r}")
        self.text = text
        self.pos = pos


@dataclass(frozen=True)
class CostModel:
    c_c: float = 1.0
    c_g: float = 1.0

    def __post_init__(self):
        if self.c_c < 0 or self.c_g < 0:
            raise ValueError("costs must be nonnegative")
        object.__setattr__(self, "c_c", float(self.c_c))
        object.__setattr__(self, "c_g", float(self.c_g))

    def cost(self, comm: int, grad: int) -> float:
        return comm * self.c_c + grad * self.c_g


@dataclass(frozen=True)
class VariantSpec:
    """A method in the ``((g1,g2),(c1,c2))`` notation, or the DGD baseline.

    ``g2`` is ``"-"`` (constant) or ``"N-"`` (one fewer gradient step every
    ``N`` iterations, never below one). ``c2`` is ``"-"``, ``"k"``
    (``t_c(k) = k`` when ``c1 = 1``) or ``"N+"`` (one more consensus step
    every ``N`` iterations).
    """

    g1: int = 1
    g2: str = "-"
    c1: int = 1
    c2: str = "-"
    dgd: bool = False

    @property
    def name(self) -> str:
        if self.dgd:
            return "DGD"
        return f"(({self.g1},{self.g2}),({self.c1},{self.c2}))"

    def __str__(self) -> str:
        return self.name

    @property
    def tg_schedule(self) -> Schedule:
        if self.g2 == "-":
            return Schedule.constant(self.g1)
        return Schedule.decrease_every(self.g1, int(self.g2[:-1]))

    @property
    def tc_schedule(self) -> Schedule:
        if self.c2 == "-":
            return Schedule.constant(self.c1)
        if self.c2 == "k":
            return Schedule.linear(self.c1)
        return Schedule.increase_every(self.c1, int(self.c2[:-1]))

    @property
    def is_fixed(self) -> bool:
        return not self.dgd and self.g2 == "-" and self.c2 == "-"

    @property
    def is_exact_schedule(self) -> bool:
        """True for ``t_c(k) = k`` with one fewer gradient step per iteration."""
        return (not self.dgd and self.c1 == 1 and self.c2 == "k"
                and (self.g1 == 1 and self.g2 == "-" or self.g2 == "1-"))

    def solver_config(self, alpha: float | None, horizon: int, **kw) -> SolverConfig:
        if self.dgd:
            return SolverConfig(alpha=alpha, max_iters=horizon, variant="dgd_baseline", **kw)
        return SolverConfig(alpha=alpha, tc_schedule=self.tc_schedule, tg_schedule=self.tg_schedule,
                            max_iters=horizon, **kw)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, msg: str):
        raise VariantParseError(self.text, self.pos, msg)

    def ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, ch: str):
        self.ws()
        if self.text[self.pos:self.pos + 1] != ch:
            self.fail(f"expected {ch!r}")
        self.pos += 1

    def integer(self) -> int:
        self.ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if start == self.pos:
            self.fail("expected an integer")
        value = int(self.text[start:self.pos])
        if value < 1:
            self.pos = start
            self.fail("step counts and periods must be >= 1")
        return value

    def modifier(self, suffix: str, allow_k: bool) -> str:
        self.ws()
        if self.text[self.pos:self.pos + 1] == "-":
            self.pos += 1
            return "-"
        if allow_k and self.text[self.pos:self.pos + 1] == "k":
            self.pos += 1
            return "k"
        period = self.integer()
        if self.text[self.pos:self.pos + 1] != suffix:
            self.fail(f"expected {suffix!r} after the period")
        self.pos += 1
        return f"{period}{suffix}"

    def parse(self) -> VariantSpec:
        self.ws()
        if self.text[self.pos:].strip().upper() == "DGD":
            return VariantSpec(dgd=True)
        self.expect("(")
        self.expect("(")
        g1 = self.integer()
        self.expect(",")
        g2 = self.modifier("-", allow_k=False)
        self.expect(")")
        self.expect(",")
        self.expect("(")
        c1 = self.integer()
        self.expect(",")
        c2 = self.modifier("+", allow_k=True)
        self.expect(")")
        self.expect(")")
        self.ws()
        if self.pos != len(self.text):
            self.fail("unexpected trailing input")
        return VariantSpec(g1=g1, g2=g2, c1=c1, c2=c2)


def parse_variant(text: str) -> VariantSpec:
    """Parse ``"DGD"`` or ``"((g1,g2),(c1,c2))"``, e.g. ``"((5,10-),(2,500+))"``."""
    return _Parser(text).parse()


@dataclass
class TrajectoryRecord:
    variant: str
    k: np.ndarray
    rel_error: np.ndarray
    consensus_error: np.ndarray
    cum_comm: np.ndarray
    cum_grad: np.ndarray
    cum_cost: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.k)

    def rows(self) -> Iterable[tuple]:
        return zip(self.k.tolist(), self.rel_error.tolist(), self.consensus_error.tolist(),
                   self.cum_comm.tolist(), self.cum_grad.tolist(), self.cum_cost.tolist())

    def with_cost(self, cost_model: CostModel) -> "TrajectoryRecord":
        """Same trajectory re-priced under another cost model."""
        cost = self.cum_comm.astype(float) * cost_model.c_c + self.cum_grad.astype(float) * cost_model.c_g
        meta = dict(self.meta, c_c=cost_model.c_c, c_g=cost_model.c_g)
        return TrajectoryRecord(self.variant, self.k, self.rel_error, self.consensus_error,
                                self.cum_comm, self.cum_grad, cost, meta)

    def value_at_budget(self, budget: float) -> float:
        """``rel_error`` of the last row whose cumulative cost is within ``budget``."""
        idx = int(np.searchsorted(self.cum_cost, budget, side="right")) - 1
        return float(self.rel_error[max(idx, 0)])


def run_experiment(instance: ProblemInstance, w: ConsensusMatrix, variant: VariantSpec | str,
                   alpha: float | None = None, cost_model: CostModel | None = None,
                   horizon: int = 1000, x0: np.ndarray | None = None,
                   unsafe: bool = False) -> TrajectoryRecord:
    """Run one variant and fold every iteration into a metrics row.

    ``alpha=None`` selects the default step length. The DGD baseline is capped
    at its own stability limit ``0.999 (1 + lambda_min(W)) / L``.
    """
    spec = parse_variant(variant) if isinstance(variant, str) else variant
    cost_model = cost_model or CostModel()
    a = default_alpha(instance) if alpha is None else float(alpha)
    if spec.dgd and not unsafe:
        a = min(a, dgd_step_bound(instance, w))
    cfg = spec.solver_config(a, horizon, x0=x0, unsafe=unsafe)
    x_star = optimal_solution(instance)

    ks, rel, cons, comm, grad = [], [], [], [], []
    for s in iterate(instance, w, cfg):
        xb = s.x_bar
        ks.append(s.k)
        rel.append(relative_error(xb, x_star))
        cons.append(float(np.mean(np.sum((s.x - xb) ** 2, axis=1))))
        comm.append(s.comm_rounds)
        grad.append(s.grad_rounds)

    comm_a = np.array(comm, dtype=np.int64)
    grad_a = np.array(grad, dtype=np.int64)
    meta = {
        "variant": spec.name,
        "n": instance.n,
        "p": instance.p,
        "kappa": instance.kappa,
        "seed": instance.seed,
        "alpha": a,
        "beta": w.beta,
        "horizon": horizon,
        "topology": w.topology.describe() if w.topology is not None else "custom",
    }
    rec = TrajectoryRecord(spec.name, np.array(ks, dtype=np.int64), np.array(rel), np.array(cons),
                           comm_a, grad_a, np.zeros(len(ks)), meta)
    return rec.with_cost(cost_model)


@dataclass
class SweepResult:
    records: list[TrajectoryRecord]
    failures: list[tuple[str, str]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)


def _sweep_job(args):
    instance, w, spec, alpha, horizon, unsafe = args
    try:
        return run_experiment(instance, w, spec, alpha, None, horizon, unsafe=unsafe), None
    except Exception as exc:  # reported, not fatal for the sweep
        return None, f"{type(exc).__name__} (seed={instance.seed}, alpha={alpha!r}): {exc}"


def sweep(instance: ProblemInstance, w: ConsensusMatrix, variants: Sequence[VariantSpec | str],
          alphas: Sequence[float | None] = (), cost_models: Sequence[CostModel] = (),
          horizon: int = 1000, jobs: int = 1, unsafe: bool = False) -> SweepResult:
    """One record per ``variant x alpha x cost model``.

    Each (variant, alpha) pair is simulated once; cost models only re-price
    the counters. Records come back in input order regardless of ``jobs``.
    """
    if not variants:
        raise ValueError("sweep needs at least one variant")
    specs = [parse_variant(v) if isinstance(v, str) else v for v in variants]
    alphas = list(alphas) or [None]
    cost_models = list(cost_models) or [CostModel()]
    tasks = [(instance, w, s, a, horizon, unsafe) for s in specs for a in alphas]

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_job, tasks))
    else:
        outcomes = [_sweep_job(t) for t in tasks]

    result = SweepResult(records=[])
    for (_, _, spec, a, _, _), (rec, err) in zip(tasks, outcomes):
        if err is not None:
            log.warning("run %s failed: %s", spec.name, err)
            result.failures.append((spec.name, err))
            continue
        rec.meta["alpha_requested"] = "auto" if a is None else a
        for cm in cost_models:
            result.records.append(rec.with_cost(cm))
    return result


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def export_csv(records: Sequence[TrajectoryRecord], out_dir: str | Path,
               start_index: int = 0) -> list[Path]:
    """Write ``manifest.csv`` plus one ``<run_id>.csv`` per record.

    Floats are written with ``repr`` so reading them back is exact.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        manifest = out / "manifest.csv"
        with open(manifest, "w", newline="") as mf:
            mw = csv.writer(mf, lineterminator="\n")
            mw.writerow(MANIFEST_HEADER)
            for idx, rec in enumerate(records, start=start_index):
                run_id = f"run{idx:03d}"
                meta = dict(rec.meta, run_id=run_id, variant=rec.variant)
                mw.writerow([_fmt(meta.get(col)) for col in MANIFEST_HEADER])
                path = out / f"{run_id}.csv"
                with open(path, "w", newline="") as fh:
                    wr = csv.writer(fh, lineterminator="\n")
                    wr.writerow(ROW_HEADER)
                    for row in rec.rows():
                        wr.writerow([_fmt(v) for v in row])
                paths.append(path)
    except OSError as exc:
        raise OSError(f"cannot write records to {out}: {exc}") from exc
    return [manifest] + paths


def _num(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def load_records(out_dir: str | Path) -> list[TrajectoryRecord]:
    """Inverse of :func:`export_csv`."""
    out = Path(out_dir)
    manifest = out / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.csv in {out}")
    records = []
    with open(manifest, newline="") as mf:
        for meta in csv.DictReader(mf):
            meta = {k: (v if k in ("run_id", "variant", "topology") else _num(v)) for k, v in meta.items()}
            with open(out / f"{meta['run_id']}.csv", newline="") as fh:
                rows = list(csv.reader(fh))[1:]
            cols = list(zip(*rows)) if rows else [()] * len(ROW_HEADER)
            records.append(TrajectoryRecord(
                meta["variant"],
                np.array([int(v) for v in cols[0]], dtype=np.int64),
                np.array([float(v) for v in cols[1]]),
                np.array([float(v) for v in cols[2]]),
                np.array([int(v) for v in cols[3]], dtype=np.int64),
                np.array([int(v) for v in cols[4]], dtype=np.int64),
                np.array([float(v) for v in cols[5]]),
                meta))
    return records


def decimate(record: TrajectoryRecord, every: int) -> np.ndarray:
    """Row indices at ``k = 0, every, 2*every, ...`` plus the final row."""
    idx = np.flatnonzero(record.k % every == 0)
    if len(record) and (len(idx) == 0 or idx[-1] != len(record) - 1):
        idx = np.append(idx, len(record) - 1)
    return idx
