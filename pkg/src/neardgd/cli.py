"""Command-line front end: ``neardgd run | verify | plot``.

Configuration is a YAML file (or the name of a shipped preset)::

    problem:      {n, p, kappa, seed | seeds}
    topology:     {kind, n?, c?, hub?, edges?}      # n defaults to problem.n
    weights:      metropolis | uniform
    variants:     ["DGD", "((1,-),(1,k))", ...]
    alpha:        auto | <float>
    unsafe_alpha: false
    horizon:      <int>
    cost_models:  [{c_c, c_g}, ...]
    output:       <dir>                              # optional
    verify:       {theorem1, theorem2, lemma3, counters}
    plot:         {enabled, axes, marker_every}

Exit status: 0 success, 1 configuration error, 2 run failure, 3 bound violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .core import DivergedError, InvalidConfigError, default_alpha, iterate, step_bound
from .graph import (ConsensusMatrix, InvalidTopologyError, metropolis_weights, topology_from_config,
                    uniform_weights)
from .harness import (CostModel, TrajectoryRecord, VariantParseError, VariantSpec, export_csv,
                      load_records, parse_variant, sweep)
from .objective import InvalidProblemError, ProblemInstance, generate_quadratic, optimal_solution
from .theory import (DiagnosticReport, check_corollary1, check_corollary2, check_theorem1,
                     check_theorem2, compute_constants, lemma_diagnostics, mean_evolution_residuals,
                     work_counters_check)

log = logging.getLogger("neardgd")

OUTPUT_ENV = "NEARDGD_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_VIOLATION = 0, 1, 2, 3
MEAN_EVOLUTION_TOL = 1e-12
AXES = {"iters": ("k", "iterations"), "grads": ("cum_grad", "gradient evaluations"),
        "comms": ("cum_comm", "communications"), "cost": ("cum_cost", "cost")}
PRESETS = ("paper-fig1", "paper-fig2-costs", "paper-fig3-practical", "theorem2-verify")

_TOP_KEYS = {"problem", "topology", "weights", "variants", "alpha", "unsafe_alpha", "horizon",
             "cost_models", "output", "verify", "plot"}
_PROBLEM_KEYS = {"n", "p", "kappa", "seed", "seeds"}
_VERIFY_KEYS = {"theorem1", "theorem2", "lemma3", "counters"}
_PLOT_KEYS = {"enabled", "axes", "marker_every"}


class ConfigError(ValueError):
    def __init__(self, msg: str, source: str = "<config>", line: int | None = None):
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {msg}")


@dataclass
class RunConfig:
    n: int
    p: int
    kappa: float
    seeds: list[int]
    topology: dict
    weights: str
    variants: list[VariantSpec]
    alpha: float | None
    unsafe_alpha: bool
    horizon: int
    cost_models: list[CostModel]
    output: str | None = None
    verify: dict = field(default_factory=lambda: dict.fromkeys(sorted(_VERIFY_KEYS), False))
    plot: dict = field(default_factory=lambda: {"enabled": False, "axes": list(AXES), "marker_every": 500})
    source: str = "<config>"

    @property
    def any_verification(self) -> bool:
        return any(self.verify.values())

    def build_network(self) -> ConsensusMatrix:
        if self.weights == "uniform":
            return uniform_weights(self.n)
        return metropolis_weights(topology_from_config(self.topology))

    def build_instance(self, seed: int) -> ProblemInstance:
        return generate_quadratic(self.n, self.p, self.kappa, seed)


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            p = path + (str(key.value),)
            out[p] = key.start_mark.line + 1
            _line_map(value, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            p = path + (i,)
            out[p] = value.start_mark.line + 1
            _line_map(value, p, out)
    return out


def resolve_config_path(name: str) -> tuple[str, str]:
    """Return ``(text, source label)`` for a file path or a shipped preset name."""
    path = Path(name)
    if path.is_file():
        return path.read_text(), str(path)
    stem = name[:-5] if name.endswith(".yaml") else name
    if stem in PRESETS:
        res = resources.files("neardgd").joinpath("presets", f"{stem}.yaml")
        return res.read_text(), f"preset:{stem}"
    raise ConfigError(f"no such config file or preset (presets: {', '.join(PRESETS)})", name)


def load_config(name: str) -> RunConfig:
    text, source = resolve_config_path(name)
    return parse_config(text, source)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Validate a YAML config completely before anything is computed."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source,
                          mark.line + 1 if mark else None) from exc
    lines = _line_map(node) if node is not None else {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", source)

    def fail(path: tuple, msg: str):
        line = None
        for cut in range(len(path), 0, -1):
            line = lines.get(path[:cut])
            if line:
                break
        raise ConfigError(f"{'.'.join(map(str, path))}: {msg}", source, line)

    def reject_unknown(block: dict, allowed: set, path: tuple):
        for key in block:
            if key not in allowed:
                fail(path + (key,), f"unknown key (allowed: {', '.join(sorted(allowed))})")

    def mapping(key: str, required: bool) -> dict:
        block = data.get(key)
        if block is None:
            if required:
                fail((key,), "missing required section")
            return {}
        if not isinstance(block, dict):
            fail((key,), "must be a mapping")
        return block

    def integer(value, path, minimum=1) -> int:
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            fail(path, f"must be an integer >= {minimum}, got {value!r}")
        return value

    def number(value, path) -> float:
        # YAML 1.1 reads "1.0e4" (no exponent sign) as a string
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail(path, f"must be a number, got {value!r}")
        return float(value)

    def flag(value, path) -> bool:
        if not isinstance(value, bool):
            fail(path, f"must be true or false, got {value!r}")
        return value

    reject_unknown(data, _TOP_KEYS, ())

    prob = mapping("problem", True)
    reject_unknown(prob, _PROBLEM_KEYS, ("problem",))
    for key in ("n", "p", "kappa"):
        if key not in prob:
            fail(("problem", key), "missing")
    n = integer(prob["n"], ("problem", "n"))
    p = integer(prob["p"], ("problem", "p"))
    kappa = number(prob["kappa"], ("problem", "kappa"))
    if kappa < 1:
        fail(("problem", "kappa"), "must be >= 1")
    if ("seed" in prob) == ("seeds" in prob):
        fail(("problem",), "give exactly one of 'seed' or 'seeds'")
    if "seed" in prob:
        seeds = [integer(prob["seed"], ("problem", "seed"), 0)]
    else:
        if not isinstance(prob["seeds"], list) or not prob["seeds"]:
            fail(("problem", "seeds"), "must be a nonempty list")
        seeds = [integer(s, ("problem", "seeds", i), 0) for i, s in enumerate(prob["seeds"])]

    weights = data.get("weights", "metropolis")
    if weights not in ("metropolis", "uniform"):
        fail(("weights",), f"must be 'metropolis' or 'uniform', got {weights!r}")
    topo = dict(mapping("topology", weights == "metropolis"))
    reject_unknown(topo, {"kind", "n", "c", "hub", "edges"}, ("topology",))
    topo.setdefault("n", n)
    if topo.get("n") != n:
        fail(("topology", "n"), f"must equal problem.n={n}")
    if weights == "metropolis":
        try:
            topology_from_config(topo)
        except InvalidTopologyError as exc:
            fail(("topology",), str(exc))

    raw_variants = data.get("variants")
    if not isinstance(raw_variants, list) or not raw_variants:
        fail(("variants",), "must be a nonempty list of variant strings")
    variants = []
    for i, v in enumerate(raw_variants):
        try:
            variants.append(parse_variant(str(v)))
        except VariantParseError as exc:
            fail(("variants", i), str(exc))

    alpha_raw = data.get("alpha", "auto")
    alpha = None if alpha_raw == "auto" else number(alpha_raw, ("alpha",))
    if alpha is not None and alpha <= 0:
        fail(("alpha",), "must be positive or 'auto'")
    unsafe = flag(data.get("unsafe_alpha", False), ("unsafe_alpha",))
    horizon = integer(data.get("horizon", 1000), ("horizon",), 0)

    raw_costs = data.get("cost_models", [{"c_c": 1, "c_g": 1}])
    if not isinstance(raw_costs, list) or not raw_costs:
        fail(("cost_models",), "must be a nonempty list")
    costs = []
    for i, cm in enumerate(raw_costs):
        if not isinstance(cm, dict):
            fail(("cost_models", i), "must be a mapping {c_c, c_g}")
        reject_unknown(cm, {"c_c", "c_g"}, ("cost_models", i))
        c_c = number(cm.get("c_c", 1), ("cost_models", i, "c_c"))
        c_g = number(cm.get("c_g", 1), ("cost_models", i, "c_g"))
        if c_c < 0 or c_g < 0:
            fail(("cost_models", i), "costs must be nonnegative")
        costs.append(CostModel(c_c, c_g))

    output = data.get("output")
    if output is not None and not isinstance(output, str):
        fail(("output",), "must be a path string")

    ver = mapping("verify", False)
    reject_unknown(ver, _VERIFY_KEYS, ("verify",))
    verify = {k: flag(ver.get(k, False), ("verify", k)) for k in sorted(_VERIFY_KEYS)}

    pl = mapping("plot", False)
    reject_unknown(pl, _PLOT_KEYS, ("plot",))
    axes = pl.get("axes", list(AXES))
    if not isinstance(axes, list) or not axes or any(a not in AXES for a in axes):
        fail(("plot", "axes"), f"must be a nonempty subset of {list(AXES)}")
    plot = {"enabled": flag(pl.get("enabled", False), ("plot", "enabled")), "axes": axes,
            "marker_every": integer(pl.get("marker_every", 500), ("plot", "marker_every"))}

    cfg = RunConfig(n=n, p=p, kappa=kappa, seeds=seeds, topology=topo, weights=weights,
                    variants=variants, alpha=alpha, unsafe_alpha=unsafe, horizon=horizon,
                    cost_models=costs, output=output, verify=verify, plot=plot, source=source)
    for seed in seeds:
        try:
            instance = cfg.build_instance(seed)
        except InvalidProblemError as exc:
            fail(("problem",), str(exc))
        if alpha is not None and not unsafe and alpha > step_bound(instance):
            fail(("alpha",), f"{alpha!r} exceeds the admissible bound {step_bound(instance)!r} "
                             f"for seed {seed} (set unsafe_alpha: true to override)")
    return cfg


def output_dir(cfg: RunConfig | None, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg is not None and cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(OUTPUT_ENV, "neardgd-out"))


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_") or "run"


# --- verification -------------------------------------------------------------

def verify_variant(instance: ProblemInstance, w: ConsensusMatrix, spec: VariantSpec, cfg: RunConfig
                   ) -> tuple[DiagnosticReport, list[str]]:
    """Run one variant with inner recording and evaluate every applicable enabled check."""
    alpha = default_alpha(instance) if cfg.alpha is None else cfg.alpha
    flags = cfg.verify
    solver_cfg = spec.solver_config(alpha, cfg.horizon, record_inner=flags["lemma3"] and not spec.dgd,
                                    unsafe=cfg.unsafe_alpha)
    traj = []
    diverged = None
    try:
        traj.extend(iterate(instance, w, solver_cfg))
    except DivergedError as exc:
        # the partial trajectory is still checked; the blow-up itself breaks ||x_k|| <= D
        diverged = exc
    x_star = optimal_solution(instance)
    report = DiagnosticReport()
    skipped = []

    for k, r in enumerate(mean_evolution_residuals(instance, traj, alpha), start=1):
        report.add(k, "mean_evolution", r, MEAN_EVOLUTION_TOL, slack=0.0)
    if spec.dgd:
        if diverged is not None:
            raise diverged
        skipped += [f"{name}: not defined for DGD" for name, on in flags.items() if on]
        return report, skipped

    consts = compute_constants(instance, w, alpha, tg0=spec.tg_schedule(1), unsafe=cfg.unsafe_alpha)
    if diverged is not None:
        report.add(diverged.k, "lemma1_x", diverged.norm, consts.d_big)
    if flags["theorem1"]:
        if spec.is_fixed:
            report.extend(check_theorem1(consts, traj, spec.c1, spec.g1, x_star))
            report.extend(check_corollary1(consts, traj, spec.c1, spec.g1, x_star))
        else:
            skipped.append("theorem1: needs constant schedules")
    if flags["theorem2"]:
        if spec.is_exact_schedule:
            report.extend(check_theorem2(consts, traj, x_star))
            report.extend(check_corollary2(consts, traj, x_star))
        else:
            skipped.append("theorem2: needs t_c(k)=k with t_g decreasing by one per iteration")
    if flags["lemma3"]:
        report.extend(lemma_diagnostics(instance, w, traj, consts, spec.tc_schedule, spec.tg_schedule))
    if flags["counters"]:
        if spec.is_exact_schedule:
            cr = work_counters_check(traj, spec.tc_schedule, spec.tg_schedule)
            report.add(cr.iterations, "counters_comm", abs(cr.comm_rounds - cr.expected_comm), 0, slack=0.0)
            report.add(cr.iterations, "counters_grad", abs(cr.grad_rounds - cr.expected_grad_direct), 0,
                       slack=0.0)
            if cr.expected_grad_closed_form is not None:
                report.add(cr.iterations, "counters_grad_closed_form",
                           abs(cr.expected_grad_closed_form - cr.expected_grad_direct), 0, slack=0.0)
        else:
            skipped.append("counters: needs t_c(k)=k with t_g decreasing by one per iteration")
    return report, skipped


def run_verification(cfg: RunConfig, out: Path) -> tuple[bool, list[str]]:
    """Write one report CSV per (seed, variant) plus ``verification.txt``; return (ok, failures)."""
    out.mkdir(parents=True, exist_ok=True)
    w = cfg.build_network()
    ok = True
    failures = []
    lines = []
    for seed in cfg.seeds:
        instance = cfg.build_instance(seed)
        for spec in cfg.variants:
            tag = f"seed{seed}_{_slug(spec.name)}"
            try:
                report, skipped = verify_variant(instance, w, spec, cfg)
            except (DivergedError, FloatingPointError, InvalidConfigError) as exc:
                failures.append(f"{spec.name} seed={seed}: {exc}")
                lines.append(f"== {spec.name} (seed {seed}) ==\nrun failed: {exc}\n")
                continue
            report.to_csv(out / f"verify_{tag}.csv")
            ok &= report.ok
            body = report.summary()
            if skipped:
                body += "\n" + "\n".join(f"skipped {s}" for s in skipped)
            lines.append(f"== {spec.name} (seed {seed}) ==\n{body}\n")
    verdict = "all bounds satisfied" if ok and not failures else "verification FAILED"
    text = "\n".join(lines) + verdict + "\n"
    (out / "verification.txt").write_text(text)
    print(text, end="")
    return ok, failures


# --- plotting -----------------------------------------------------------------

def _group_key(rec: TrajectoryRecord) -> tuple:
    return (rec.meta.get("seed"), rec.meta.get("c_c"), rec.meta.get("c_g"))


def plot_records(records_dir: str | Path, axes: Sequence[str], marker_every: int = 500,
                 out: str | Path | None = None) -> list[Path]:
    """Write one log-scale SVG per (axis, problem/cost group) and ``plot_data.csv``.

    The plotted series are exactly the rows of ``plot_data.csv``: every
    ``max(1, marker_every // 50)``-th iteration plus the last one, with a
    ``marker`` flag on multiples of ``marker_every``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = load_records(records_dir)
    if not records:
        raise FileNotFoundError(f"no records in {records_dir}")
    out = Path(out or records_dir)
    out.mkdir(parents=True, exist_ok=True)
    stride = max(1, marker_every // 50)

    groups: dict[tuple, list[tuple[str, TrajectoryRecord, np.ndarray]]] = {}
    data_path = out / "plot_data.csv"
    with open(data_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["run_id", "variant", "seed", "c_c", "c_g", "k", "cum_grad", "cum_comm",
                     "cum_cost", "rel_error", "marker"])
        for rec in records:
            idx = np.flatnonzero(rec.k % stride == 0)
            if len(rec) and (len(idx) == 0 or idx[-1] != len(rec) - 1):
                idx = np.append(idx, len(rec) - 1)
            groups.setdefault(_group_key(rec), []).append((rec.meta["run_id"], rec, idx))
            for i in idx:
                wr.writerow([rec.meta["run_id"], rec.variant, rec.meta.get("seed"),
                             repr(float(rec.meta.get("c_c"))), repr(float(rec.meta.get("c_g"))),
                             int(rec.k[i]), int(rec.cum_grad[i]), int(rec.cum_comm[i]),
                             repr(float(rec.cum_cost[i])), repr(float(rec.rel_error[i])),
                             int(rec.k[i] % marker_every == 0)])

    plt.rcParams["svg.hashsalt"] = "neardgd"
    written = [data_path]
    many = len(groups) > 1
    for key, members in groups.items():
        seed, c_c, c_g = key
        suffix = f"_seed{seed}_cc{c_c:g}_cg{c_g:g}" if many else ""
        for axis in axes:
            column, label = AXES[axis]
            fig, ax = plt.subplots(figsize=(5.0, 3.8))
            for _, rec, idx in members:
                xs = getattr(rec, column)[idx]
                ys = rec.rel_error[idx]
                mark = np.flatnonzero(rec.k[idx] % marker_every == 0)
                ax.semilogy(xs, ys, marker="o", markevery=list(mark), markersize=3,
                            linewidth=1.0, label=rec.variant)
            ax.set_xlabel(label)
            ax.set_ylabel("relative error")
            ax.set_title(f"seed {seed}, c_c={c_c:g}, c_g={c_g:g}", fontsize=9)
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out / f"{axis}{suffix}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written


# --- commands -----------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(cfg, args.out)
    try:
        w = cfg.build_network()
        records, failures = [], []
        for seed in cfg.seeds:
            instance = cfg.build_instance(seed)
            res = sweep(instance, w, cfg.variants, [cfg.alpha], cfg.cost_models, cfg.horizon,
                        jobs=args.jobs, unsafe=cfg.unsafe_alpha)
            records += res.records
            failures += [f"{name} seed={seed}: {err}" for name, err in res.failures]
        export_csv(records, out)
    except OSError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(f"wrote {len(records)} record(s) to {out}")

    ok = True
    if cfg.any_verification:
        ok, vfail = run_verification(cfg, out)
        failures += vfail
    if cfg.plot["enabled"] and records:
        plot_records(out, cfg.plot["axes"], cfg.plot["marker_every"])
    if failures:
        print("run failures:\n" + "\n".join(f"  {f}" for f in failures), file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_verify(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not cfg.any_verification:
        print(f"config error: {cfg.source}: no verification flags enabled", file=sys.stderr)
        return EXIT_CONFIG
    try:
        ok, failures = run_verification(cfg, output_dir(cfg, args.out))
    except OSError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN
    if failures:
        print("run failures:\n" + "\n".join(f"  {f}" for f in failures), file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_plot(args) -> int:
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    bad = [a for a in axes if a not in AXES]
    if not axes or bad:
        print(f"config error: unknown axis {bad} (choose from {', '.join(AXES)})", file=sys.stderr)
        return EXIT_CONFIG
    if args.marker_every < 1:
        print("config error: --marker-every must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        paths = plot_records(args.records, axes, args.marker_every, args.out)
    except FileNotFoundError as exc:
        print(f"run failure: missing records: {exc}", file=sys.stderr)
        return EXIT_RUN
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neardgd", description="Nested decentralized gradient simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured sweep and export CSV records")
    p_run.add_argument("--config", required=True, help="YAML config path or preset name")
    p_run.add_argument("--out", help=f"output directory (default: config 'output', ${OUTPUT_ENV}, ./neardgd-out)")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_run.set_defaults(func=cmd_run)

    p_ver = sub.add_parser("verify", help="check the convergence bounds on configured runs")
    p_ver.add_argument("--config", required=True, help="YAML config path or preset name")
    p_ver.add_argument("--out", help="directory for the report files")
    p_ver.set_defaults(func=cmd_verify)

    p_plot = sub.add_parser("plot", help="plot exported records as SVG")
    p_plot.add_argument("--records", required=True, help="directory written by 'run'")
    p_plot.add_argument("--axes", default="iters,grads,comms,cost", help="comma list of iters,grads,comms,cost")
    p_plot.add_argument("--marker-every", type=int, default=500, help="iterations between markers")
    p_plot.add_argument("--out", help="image directory (default: the records directory)")
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("config error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
