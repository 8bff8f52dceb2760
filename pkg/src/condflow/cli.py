"""Command-line front end: ``condflow <subcommand> --scenario <path> --out <dir>``.

Every subcommand parses a scenario, runs one pipeline, writes CSV and JSON
outputs plus plot-ready CSVs, and finally writes ``manifest.json``.  The exit
status is 0 iff every check of the run passed.  ``CONDFLOW_SEED`` and
``CONDFLOW_THREADS`` override the master seed and the worker count when the
corresponding flag is absent.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .control import (
    controlled_pilot_tolerance,
    greedy_policy,
    kolmogorov_oracle_check,
    verification_check,
)
from .copies import (
    check_conditional_independence,
    check_conditional_law_equality,
    corrupted_copies,
    same_seed_copies,
    spawn_copies,
)
from .core import hp_norm_estimate
from .errors import CondflowError, InvalidState
from .flow import (
    counterexample_analytic,
    empirical_conditional_law,
    process_from_spec,
    verify_conditional_bracket,
    verify_conditional_integral,
)
from .ito import (
    TERM_NAMES,
    ToleranceModel,
    convergence_study,
    identity_check,
    pilot_tolerance,
    run_ledgers,
)
from .parallel import parallel_map
from .reporting import CheckReport, write_csv, write_json
from .rng import derive_seed
from .scenario import Scenario, dump_scenario, parse_scenario

SUBCOMMANDS = ("simulate", "verify-copies", "verify-condprocess", "verify-ito", "verify-control", "convergence")
PLOT_FILES = ("residual_vs_dt.csv", "residual_vs_M.csv", "ledger_terms.csv")
CHECK_HEADER = ["check", "statistic", "threshold", "pass", "n_common", "n_copies"]


@dataclass
class Experiment:
    """One pipeline stage: its checks, output files and plot rows."""

    name: str
    kind: str
    checks: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    convergence: list = field(default_factory=list)
    ledger_terms: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "pass": self.passed,
            "outputs": list(self.outputs),
            "checks": [c.line() for c in self.checks],
        }


@dataclass
class RunManifest:
    """Scenario hash, resolved parameters, outputs and pass summary of one run."""

    subcommand: str
    scenario_hash: str
    parameters: dict
    version: str = __version__
    threads: int = 1
    experiments: list = field(default_factory=list)
    extra_outputs: list = field(default_factory=list)
    complete: bool = False
    timestamp: str = ""

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.experiments)

    @property
    def outputs(self) -> list:
        return [p for e in self.experiments for p in e.outputs] + list(self.extra_outputs)

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "scenario_hash": self.scenario_hash,
            "parameters": self.parameters,
            "version": self.version,
            "threads": self.threads,
            "experiments": [e.to_dict() for e in self.experiments],
            "outputs": self.outputs,
            "pass": self.passed,
            "complete": self.complete,
            "timestamp": self.timestamp,
        }


class _Writer:
    """Writes into the output directory and records relative paths."""

    def __init__(self, out: Path, experiment: Experiment):
        self.out = out
        self.experiment = experiment

    def csv(self, name: str, header: Sequence[str], rows) -> str:
        write_csv(self.out / name, header, rows)
        self.experiment.outputs.append(name)
        return name

    def json(self, name: str, payload) -> str:
        write_json(payload, self.out / name)
        self.experiment.outputs.append(name)
        return name

    def text(self, name: str, text: str) -> str:
        (self.out / name).write_text(text, encoding="utf-8")
        self.experiment.outputs.append(name)
        return name

    def checks(self, name: str, checks: Sequence[CheckReport]) -> None:
        self.experiment.checks.extend(checks)
        self.csv(
            name + "_checks.csv",
            CHECK_HEADER,
            [(c.name, float(c.statistic), float(c.threshold), int(c.passed), c.n_common, c.n_copies) for c in checks],
        )
        self.json(name + "_report.json", [c.to_dict() for c in checks])


# pipelines


def _simulate(sc: Scenario, out: Path, threads: int) -> list[Experiment]:
    model, initial = sc.build_model(), sc.build_initial()
    seeds = sc.common_seeds()
    exp = Experiment("simulate", "simulate")
    w = _Writer(out, exp)
    finite = True
    n_export = int(sc.experiment["export_paths"])
    for K in sc.K_list:
        grid = sc.build_grid(K)
        for M in sc.M_list:
            flows = parallel_map(lambda c: empirical_conditional_law(model, grid, c, M, initial=initial), seeds, threads)
            rows = []
            for c, flow in zip(seeds, flows):
                vals = flow.paths.values
                finite = finite and bool(np.all(np.isfinite(vals)))
                mean, std = vals.mean(axis=0), vals.std(axis=0)
                for k in range(grid.K + 1):
                    rows.append((c, k, float(grid.nodes[k]), *map(float, mean[k]), *map(float, std[k])))
            cols = [f"mean_x{i + 1}" for i in range(model.n)] + [f"std_x{i + 1}" for i in range(model.n)]
            w.csv(f"simulate_K{K}_M{M}.csv", ["common_seed", "k", "t", *cols], rows)
            if K == sc.K_list[-1] and M == sc.M_list[-1]:
                paths = flows[0].paths
                for j in range(min(n_export, paths.M)):
                    w.text(f"path_{j}.csv", paths.record(j).to_csv())
                hp = hp_norm_estimate(paths, 2.0)
    report = CheckReport("finite_paths", 0.0 if finite else 1.0, 0.0, finite, len(seeds), sc.M_list[-1], seeds, {"H2_norm": hp})
    w.checks("simulate", [report])
    return [exp]


def _verify_copies(sc: Scenario, out: Path, threads: int) -> list[Experiment]:
    model, initial, grid = sc.build_model(), sc.build_initial(), sc.build_grid()
    ex = sc.experiment
    seeds = sc.common_seeds()
    n = sc.n_copies
    stats = [t.g for t in sc.build_statistics()]

    def ensembles(build: Callable):
        return parallel_map(lambda c: build(model, grid, c, initial, n, derive_seed(c, "base")), seeds, threads)

    law_kw = dict(level=ex["level"], confidence=ex["confidence"], min_common=ex["min_common"])
    ens = ensembles(spawn_copies)
    law = check_conditional_law_equality(ens, stats, **law_kw)
    ind = check_conditional_independence(ens, stats[0], stats[0], threshold=ex["t_threshold"], min_common=ex["min_common"])
    checks = [law, ind]
    exp = Experiment("copies", "copies")
    w = _Writer(out, exp)
    pvals = law.details["pvalues"]
    per_seed = len(pvals) // len(seeds)
    w.csv(
        "copies_pvalues.csv",
        ["common_seed", "test", "pvalue"],
        [(law.seeds[i // per_seed], i % per_seed, float(p)) for i, p in enumerate(pvals)],
    )
    if ex["negative_controls"]:
        bad = check_conditional_law_equality(ensembles(corrupted_copies), stats, **law_kw)
        same = check_conditional_independence(
            ensembles(same_seed_copies), stats[0], stats[0], threshold=ex["t_threshold"], min_common=ex["min_common"]
        )
        checks.append(_detected("corrupted_copies_detected", bad))
        checks.append(_detected("same_seed_copies_detected", same))
    w.checks("copies", checks)
    return [exp]


def _detected(name: str, report: CheckReport) -> CheckReport:
    """A negative control passes when the underlying check fails."""
    return CheckReport(
        name,
        report.statistic,
        report.threshold,
        not report.passed,
        report.n_common,
        report.n_copies,
        report.seeds,
        {"control": report.name},
    )


def _verify_condprocess(sc: Scenario, out: Path, threads: int) -> list[Experiment]:
    model, initial, grid = sc.build_model(), sc.build_initial(), sc.build_grid()
    ex = sc.experiment
    seeds = sc.common_seeds()
    M, n = sc.M_list[-1], sc.n_copies
    z = process_from_spec(ex["integrand"]) or process_from_spec({"kind": "one"})
    eta = process_from_spec(ex["eta"])
    analytic = counterexample_analytic if ex["analytic"] == "counterexample" else None
    integral = verify_conditional_integral(
        model,
        grid,
        seeds,
        M,
        n,
        z=z,
        x_component=ex["x_component"],
        eta=eta,
        analytic=analytic,
        initial=initial,
        t_threshold=ex["t_threshold"],
        violation_threshold=ex["violation_threshold"],
        relative_tolerance=ex["relative_tolerance"],
    )
    checks = [integral]
    if eta is not None:
        checks.append(
            CheckReport(
                "naive_identity_violated",
                integral.details["naive_violation_t"],
                ex["violation_threshold"],
                bool(integral.details["naive_violated"]),
                len(seeds),
                n,
                seeds,
            )
        )
    if model.n >= 2 and 0 <= ex["y_component"] < model.n:
        checks.append(
            verify_conditional_bracket(
                model,
                grid,
                seeds,
                M,
                n,
                z=z,
                x_component=ex["x_component"],
                y_component=ex["y_component"],
                initial=initial,
                z_threshold=ex["z_threshold"],
            )
        )
    exp = Experiment("condprocess", "condprocess")
    _Writer(out, exp).checks("condprocess", checks)
    return [exp]


def _y_kwargs(sc: Scenario) -> dict:
    ex = sc.experiment
    return {
        "pool": ex["pool"],
        "y_source": None if ex["y_source"] == "none" else ex["y_source"],
        "y0": None if ex["y0"] is None else np.asarray(ex["y0"], float),
        "initial": sc.build_initial(),
        "t_index": ex["t_index"],
    }


def _tolerance(sc: Scenario, pilot: Callable[[list, list, list], ToleranceModel]) -> ToleranceModel:
    ex = sc.experiment
    tol = ex["tolerance"]
    if tol["a"] is not None and tol["b"] is not None:
        return ToleranceModel(float(tol["a"]), float(tol["b"]), float(tol["c"]), float(tol["factor"]))
    K = ex["pilot"]["K"] or [max(2, sc.K_list[0] // 4), max(4, sc.K_list[0] // 2)]
    M = ex["pilot"]["M"] or [max(2, sc.M_list[0] // 8), max(4, sc.M_list[0] // 2)]
    model = pilot(K, M, sc.common_seeds(ex["pilot"]["n_common"], "pilot"))
    return ToleranceModel(model.a, model.b, model.c if tol["c"] else 0.0, float(tol["factor"]), model.pilot)


def _verify_ito(sc: Scenario, out: Path, threads: int) -> list[Experiment]:
    model, grid, phi = sc.build_model(), sc.build_grid(), sc.build_functional()
    M, n = sc.M_list[-1], sc.n_copies
    kw = _y_kwargs(sc)
    seeds = sc.common_seeds()
    ledgers = run_ledgers(phi, model, grid, seeds, M, n, threads=threads, **kw)
    tol = _tolerance(sc, lambda K, Ms, s: pilot_tolerance(phi, model, sc.T, K, Ms, s, threads=threads, **kw))
    check = identity_check(ledgers, tol, grid, M)
    exp = Experiment("ito", "ledger")
    w = _Writer(out, exp)
    subterms = sorted(ledgers[0].subterms)
    w.csv(
        "ito_ledgers.csv",
        ["common_seed", "lhs", *TERM_NAMES, *subterms, "residual"],
        [(l.common_seed, l.lhs, *(l.terms[t] for t in TERM_NAMES), *(l.subterms[t] for t in subterms), l.residual) for l in ledgers],
    )
    finite = all(l.finite() for l in ledgers)
    checks = [check, CheckReport("ledger_terms_finite", 0.0 if finite else 1.0, 0.0, finite, len(seeds), n, seeds)]
    w.checks("ito", checks)
    for t in (*TERM_NAMES, *subterms):
        vals = np.array([l.terms[t] if t in l.terms else l.subterms[t] for l in ledgers])
        exp.ledger_terms.append((exp.name, t, float(vals.mean()), float(np.abs(vals).mean())))
    return [exp]


def _verify_control(sc: Scenario, out: Path, threads: int) -> list[Experiment]:
    problem, grid, initial = sc.build_control_problem(), sc.build_grid(), sc.build_initial()
    ex = sc.experiment
    seeds = sc.common_seeds()
    M = sc.M_list[-1]
    v = sc.build_value_function()
    exp = Experiment("control", "control")
    w = _Writer(out, exp)
    checks = [problem.growth_check()]
    if v is None:
        oracle = ex["oracle"]
        checks.append(
            kolmogorov_oracle_check(
                problem,
                grid,
                seeds,
                M,
                initial=initial,
                x_max=oracle["x_max"],
                nx=oracle["nx"],
                nt_per_step=oracle["nt_per_step"],
                threads=threads,
            )
        )
        w.checks("control", checks)
        return [exp]
    phi = sc.build_functional()
    op = {"budget": ex["budget"], "double_jump": ex["double_jump"]}
    tol = _tolerance(
        sc,
        lambda K, Ms, s: controlled_pilot_tolerance(
            phi, problem, lambda g: greedy_policy(problem, v, g, **op), K, Ms, s, initial=initial, threads=threads, **op
        ),
    )
    report = verification_check(
        problem,
        v,
        grid,
        seeds,
        M,
        switch_nodes=ex["switch_nodes"],
        initial=initial,
        ledger_functional=phi,
        ledger_tolerance=tol,
        require_identical=len(problem.actions) > 1 and ex["value"]["kind"] == "linear_drift",
        threads=threads,
        **op,
    )
    checks.append(report)
    w.checks("control", checks)
    d = report.details
    w.json(
        "verification.json",
        {
            "greedy_value": d["greedy_value"],
            "ci": d["ci"],
            "baseline_best": d["baseline_best"],
            "baseline_policy_id": d["baseline_policy_id"],
            "ito_residual": d.get("ito_residual"),
            "pass": report.passed,
        },
    )
    if "ito_residual" in d:
        exp.ledger_terms.append((exp.name, "residual", d["ito_residual"], d["ito_residual"]))
    return [exp]


def _convergence(sc: Scenario, out: Path, threads: int) -> list[Experiment]:
    model, phi = sc.build_model(), sc.build_functional()
    ex = sc.experiment
    kw = _y_kwargs(sc)
    pool = kw.pop("pool")
    res = convergence_study(phi, model, sc.T, sc.K_list, sc.M_list, sc.common_seeds(), pool=pool, threads=threads, **kw)
    exp = Experiment("convergence", "convergence")
    w = _Writer(out, exp)
    res.to_csv(out / "convergence.csv")
    exp.outputs.append("convergence.csv")
    checks = []
    for label, slope, rng, levels in (
        ("slope_dt", res.slope_dt, ex["slope_dt"], sc.K_list),
        ("slope_M", res.slope_M, ex["slope_M"], sc.M_list),
    ):
        if len(levels) >= 2:
            ok = bool(np.isfinite(slope) and rng[0] <= slope <= rng[1])
            checks.append(CheckReport(label, slope, rng[1], ok, len(sc.common_seeds()), 0, [], {"range": list(rng)}))
    w.checks("convergence", checks)
    exp.convergence = [(r["K"], r["dt"], r["M"], r["mean_abs_residual"]) for r in res.rows]
    return [exp]


PIPELINES = {
    "simulate": _simulate,
    "verify-copies": _verify_copies,
    "verify-condprocess": _verify_condprocess,
    "verify-ito": _verify_ito,
    "verify-control": _verify_control,
    "convergence": _convergence,
}


# plot data


def emit_plot_data(manifest: RunManifest, out: str | Path) -> list[str]:
    """Tidy CSVs for external plotting; only positive residuals enter the log-log tables."""
    if not manifest.complete:
        raise InvalidState("manifest is incomplete; plot data needs a finished run")
    out = Path(out)
    conv = [r for e in manifest.experiments for r in e.convergence if r[3] > 0]
    write_csv(out / "residual_vs_dt.csv", ["K", "dt", "M", "mean_abs_residual"], sorted(conv, key=lambda r: (r[2], r[0])))
    write_csv(
        out / "residual_vs_M.csv",
        ["M", "inv_sqrt_M", "K", "mean_abs_residual"],
        sorted(((r[2], float(r[2] ** -0.5), r[0], r[3]) for r in conv), key=lambda r: (r[2], r[0])),
    )
    terms = [r for e in manifest.experiments for r in e.ledger_terms]
    write_csv(out / "ledger_terms.csv", ["experiment", "term", "mean", "mean_abs"], terms)
    manifest.extra_outputs.extend(PLOT_FILES)
    return list(PLOT_FILES)


# entry point


def run(
    subcommand: str, scenario: Scenario | str | Path, out: str | Path, *, seed: int | None = None, threads: int = 1
) -> RunManifest:
    if subcommand not in PIPELINES:
        raise CondflowError(f"unknown subcommand {subcommand!r}; known: {', '.join(SUBCOMMANDS)}")
    sc = scenario if isinstance(scenario, Scenario) else parse_scenario(scenario)
    if seed is not None:
        sc = sc.with_master_seed(seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(subcommand, sc.hash(), sc.to_dict(), threads=threads)
    try:
        manifest.experiments = PIPELINES[subcommand](sc, out, threads)
    except CondflowError as exc:
        raise type(exc)(f"scenario {sc.name!r} ({subcommand}): {exc}") from exc
    manifest.complete = True
    emit_plot_data(manifest, out)
    (out / "scenario.resolved.yaml").write_text(dump_scenario(sc), encoding="utf-8")
    manifest.extra_outputs.append("scenario.resolved.yaml")
    manifest.timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    missing = [p for p in manifest.outputs if not (out / p).exists()]
    if missing:
        raise InvalidState(f"outputs missing on completion: {missing}")
    write_json(manifest.to_dict(), out / "manifest.json")
    return manifest


def _env_int(name: str) -> int | None:
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise CondflowError(f"environment variable {name} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condflow", description="Conditional law flow verification harness.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="scenario YAML file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override (env CONDFLOW_SEED)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (env CONDFLOW_THREADS)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seed = args.seed if args.seed is not None else _env_int("CONDFLOW_SEED")
        threads = args.threads if args.threads is not None else (_env_int("CONDFLOW_THREADS") or 1)
        manifest = run(args.subcommand, args.scenario, args.out, seed=seed, threads=max(1, threads))
    except CondflowError as exc:
        print(f"condflow: error: {exc}", file=sys.stderr)
        return 2
    for e in manifest.experiments:
        for c in e.checks:
            print(c.line())
    print(f"{'PASS' if manifest.passed else 'FAIL'}: {args.subcommand} -> {Path(args.out) / 'manifest.json'}")
    return 0 if manifest.passed else 1


if __name__ == "__main__":
    sys.exit(main())
