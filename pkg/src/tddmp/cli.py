"""Command line interface.

Exit codes are a stable contract: 0 success, 2 input error, 3 infeasibility
(intrinsically unservable customers, or a solution that fails validation),
4 reserved for a timeout that produced no feasible solution (the current
pipeline always holds a feasible incumbent, so 4 is never emitted by it).
"""

from __future__ import annotations

import glob as globlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import click

from .evaluation import (
    BenchReport,
    NextMonthReport,
    aggregate_rows,
    evaluate_next_month,
    run_bench,
    SharedMapError,
)
from .exact import emit_milp, exact_solve
from .exact.milp import MilpModeError
from .exact.oracle import OracleGuardError
from .generators import (
    GeneratorParams,
    MonthlyProfile,
    SolomonFormatError,
    bundled_solomon_names,
    load_bundled_solomon,
    make_month_pair,
    make_monthly_instance,
    make_small_instance,
    parse_solomon,
)
from .geometry import CompactnessMode
from .model import Instance, InstanceError, Solution, SolutionStructureError, solution_cost, validate
from .render import territory_geojson, territory_svg
from .solver import InstanceInfeasibleError, SolverParams, solve

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_NO_SOLUTION = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _read_instance(path: str) -> Instance:
    try:
        return Instance.from_json(Path(path).read_text())
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"instance file not found: {path}")
    except (json.JSONDecodeError, InstanceError, KeyError, ValueError) as exc:
        _fail(EXIT_INPUT, f"cannot read instance {path}: {exc}")


def _read_solution(path: str) -> Solution:
    try:
        return Solution.from_json(Path(path).read_text())
    except FileNotFoundError:
        _fail(EXIT_INPUT, f"solution file not found: {path}")
    except (json.JSONDecodeError, InstanceError, KeyError, ValueError) as exc:
        _fail(EXIT_INPUT, f"cannot read solution {path}: {exc}")


def _parse_duration(text: str) -> float:
    raw = text.strip().lower()
    factor = 1.0
    if raw.endswith("m"):
        factor, raw = 60.0, raw[:-1]
    elif raw.endswith("s"):
        raw = raw[:-1]
    try:
        value = float(raw) * factor
    except ValueError:
        raise click.BadParameter(f"cannot parse duration {text!r} (use e.g. 60, 90s, 10m)")
    if value <= 0:
        raise click.BadParameter("duration must be positive")
    return value


def _load_params_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _solver_params(
    params_file: Optional[str],
    seed: Optional[int],
    ct_max: Optional[str],
    eta: Optional[int],
    pmax: Optional[int],
    kmax: Optional[int],
    fbound: Optional[float],
    mode: Optional[str],
) -> SolverParams:
    base = _load_params_file(params_file)
    kwargs = {
        "eta": base.get("eta", 5),
        "p_max": base.get("p_max", 5),
        "k_max": base.get("k_max", 3),
        "ct_max": float(base.get("ct_max", 60.0)),
        "rng_seed": int(base.get("rng_seed", 0)),
        "merge_attempt_factor": int(base.get("merge_attempt_factor", 50)),
        "compactness_bound": base.get("compactness_bound"),
        "compactness_mode": (
            CompactnessMode.parse(base["compactness_mode"])
            if "compactness_mode" in base
            else None
        ),
    }
    if seed is not None:
        kwargs["rng_seed"] = seed
    if ct_max is not None:
        kwargs["ct_max"] = _parse_duration(ct_max)
    if eta is not None:
        kwargs["eta"] = eta
    if pmax is not None:
        kwargs["p_max"] = pmax
    if kmax is not None:
        kwargs["k_max"] = kmax
    if fbound is not None:
        kwargs["compactness_bound"] = fbound
    if mode is not None:
        kwargs["compactness_mode"] = CompactnessMode.parse(mode)
    try:
        return SolverParams(**kwargs)
    except ValueError as exc:
        raise click.BadParameter(str(exc))


def solver_options(f):
    f = click.option("--params", "params_file", type=click.Path(exists=True), default=None,
                     help="JSON or TOML file with solver parameters.")(f)
    f = click.option("--seed", type=int, default=None, help="Random seed.")(f)
    f = click.option("--ct-max", "ct_max", default=None,
                     help="Search time budget, e.g. 60, 90s, 10m.")(f)
    f = click.option("--eta", type=int, default=None, help="Backtrack stack capacity.")(f)
    f = click.option("--pmax", type=int, default=None, help="Penalty ceiling.")(f)
    f = click.option("--kmax", type=int, default=None, help="Max ejections per forced merge.")(f)
    f = click.option("--F", "fbound", type=float, default=None, help="Compactness bound.")(f)
    f = click.option("--compactness-mode", "mode",
                     type=click.Choice(["sqrt-of-sum", "sum-of-sqrts"]), default=None)(f)
    return f


@click.group()
@click.version_option(package_name="tddmp")
def main():
    """Territory design for multi-period vehicle routing with time windows."""


# ---------------------------------------------------------------------------
# generate


@main.group()
def generate():
    """Write instance files."""


@generate.command("small")
@click.option("--solomon", "source", default="C101",
              help=f"Bundled name ({', '.join(bundled_solomon_names())}) or a path to a Solomon file.")
@click.option("--customers", type=int, default=10, show_default=True)
@click.option("--days", type=int, default=5, show_default=True)
@click.option("--frequency", type=float, default=0.7, show_default=True)
@click.option("--capacity-factor", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", type=click.Path(), required=True)
def generate_small(source, customers, days, frequency, capacity_factor, seed, out):
    """Solomon-derived multi-day instance (first customers kept verbatim)."""
    try:
        if Path(source).exists():
            solomon = parse_solomon(Path(source).read_text())
        else:
            solomon = load_bundled_solomon(source)
        params = GeneratorParams(
            customer_count=customers,
            horizon_days=days,
            service_frequency=frequency,
            capacity_factor=capacity_factor,
            rng_seed=seed,
        )
        instance = make_small_instance(solomon, params)
    except (SolomonFormatError, FileNotFoundError, ValueError) as exc:
        _fail(EXIT_INPUT, str(exc))
    _atomic_write(Path(out), instance.to_json())
    click.echo(f"wrote {out}: {instance.name} ({instance.n} customers, {instance.num_days} days)")


def _profile_from_options(profile_path, customers, days, active, new, seed_name) -> MonthlyProfile:
    if profile_path is not None:
        doc = _load_params_file(profile_path)
        return MonthlyProfile.from_dict(doc)
    kwargs = {}
    if customers is not None:
        kwargs["customers"] = customers
    if days is not None:
        kwargs["days"] = days
    if active is not None:
        kwargs["active_fraction"] = active
    if new is not None:
        kwargs["new_fraction"] = new
    if seed_name:
        kwargs["name"] = seed_name
    return MonthlyProfile(**kwargs)


@generate.command("monthly")
@click.option("--profile", "profile_path", type=click.Path(exists=True), default=None,
              help="JSON/TOML profile document.")
@click.option("--customers", type=int, default=None)
@click.option("--days", type=int, default=None)
@click.option("--active-fraction", "active", type=float, default=None)
@click.option("--name", "seed_name", default="monthly")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", type=click.Path(), required=True)
def generate_monthly(profile_path, customers, days, active, seed_name, seed, out):
    """Synthetic month with clustered customers and sparse daily activity."""
    try:
        profile = _profile_from_options(profile_path, customers, days, active, None, seed_name)
        instance = make_monthly_instance(profile, seed)
    except (ValueError, json.JSONDecodeError) as exc:
        _fail(EXIT_INPUT, str(exc))
    _atomic_write(Path(out), instance.to_json())
    click.echo(f"wrote {out}: {instance.name} ({instance.n} customers, {instance.num_days} days)")


@generate.command("pair")
@click.option("--profile", "profile_path", type=click.Path(exists=True), default=None)
@click.option("--customers", type=int, default=None)
@click.option("--days", type=int, default=None)
@click.option("--active-fraction", "active", type=float, default=None)
@click.option("--new-fraction", "new", type=float, default=None)
@click.option("--name", "seed_name", default="pair")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
def generate_pair(profile_path, customers, days, active, new, seed_name, seed, out_dir):
    """Two consecutive months plus the shared-customer map."""
    try:
        profile = _profile_from_options(profile_path, customers, days, active, new, seed_name)
        month1, month2, shared = make_month_pair(profile, seed)
    except (ValueError, json.JSONDecodeError) as exc:
        _fail(EXIT_INPUT, str(exc))
    out = Path(out_dir)
    _atomic_write(out / "month1.json", month1.to_json())
    _atomic_write(out / "month2.json", month2.to_json())
    _atomic_write(
        out / "shared.json",
        json.dumps({"schema": "tddmp-shared-1", "month1_to_month2": {str(k): v for k, v in shared.items()}}),
    )
    click.echo(f"wrote {out}/month1.json, month2.json, shared.json ({len(shared)} shared customers)")


# ---------------------------------------------------------------------------
# solve / validate


@main.command("solve")
@click.argument("instance_path", type=click.Path())
@solver_options
@click.option("-o", "--out", type=click.Path(), default=None, help="Solution file (default: alongside input).")
@click.option("--trace", "trace_path", type=click.Path(), default=None, help="JSONL trace file.")
def cmd_solve(instance_path, params_file, seed, ct_max, eta, pmax, kmax, fbound, mode, out, trace_path):
    """Solve one instance and write the solution."""
    instance = _read_instance(instance_path)
    params = _solver_params(params_file, seed, ct_max, eta, pmax, kmax, fbound, mode)
    t0 = time.monotonic()
    try:
        result = solve(instance, params)
    except InstanceInfeasibleError as exc:
        _fail(EXIT_INFEASIBLE, f"instance is intrinsically infeasible for customers {exc.customers}")
    cpu = time.monotonic() - t0
    solution = result.solution
    out_path = Path(out) if out else Path(instance_path).with_suffix(".solution.json")
    _atomic_write(out_path, solution.to_json())
    if trace_path:
        _atomic_write(Path(trace_path), "\n".join(json.dumps(e) for e in result.trace.events) + "\n")
    cost = solution_cost(instance, solution)
    acr = f"{cost.average_compactness:.3f}" if cost.average_compactness is not None else "-"
    click.echo(
        f"NV={cost.territories} TT={cost.total_travel_hours:.3f}h ACR={acr} CPU={cpu:.3f}s"
    )
    report = validate(instance, solution)
    if not report.ok:
        click.echo(str(report), err=True)
        sys.exit(EXIT_INFEASIBLE)
    sys.exit(EXIT_OK)


@main.command("validate")
@click.argument("instance_path", type=click.Path())
@click.argument("solution_path", type=click.Path())
def cmd_validate(instance_path, solution_path):
    """Check a solution file against every model restriction."""
    instance = _read_instance(instance_path)
    solution = _read_solution(solution_path)
    try:
        report = validate(instance, solution)
    except SolutionStructureError as exc:
        _fail(EXIT_INPUT, f"solution does not match the instance: {exc}")
    click.echo(str(report))
    sys.exit(EXIT_OK if report.ok else EXIT_INFEASIBLE)


# ---------------------------------------------------------------------------
# export-milp


@main.command("export-milp")
@click.argument("instance_path", type=click.Path())
@click.option("-o", "--out", type=click.Path(), required=True)
@click.option("--symmetry-breaking", is_flag=True, default=False,
              help="Add ordered-usage rows over the vehicle indices.")
def cmd_export_milp(instance_path, out, symmetry_breaking):
    """Write the exact model in LP format."""
    instance = _read_instance(instance_path)
    try:
        text, artifacts = emit_milp(instance, symmetry_breaking=symmetry_breaking)
    except MilpModeError as exc:
        _fail(EXIT_INPUT, str(exc))
    _atomic_write(Path(out), text)
    rows = sum(len(v) for v in artifacts.families.values())
    click.echo(f"wrote {out}: {len(artifacts.variables)} variables, {rows} rows, bigM={artifacts.big_m:g}")


# ---------------------------------------------------------------------------
# bench


def _load_baseline(path: Optional[str]) -> Optional[Dict[str, float]]:
    if path is None:
        return None
    p = Path(path)
    if p.is_dir():
        baseline = {}
        for sol_file in sorted(p.glob("*.json")):
            doc = json.loads(sol_file.read_text())
            if doc.get("schema") == "tddmp-baseline-1":
                baseline.update({k: float(v) for k, v in doc["tt_hours"].items()})
        return baseline
    doc = json.loads(p.read_text())
    if doc.get("schema") == "tddmp-baseline-1":
        return {k: float(v) for k, v in doc["tt_hours"].items()}
    return {k: float(v) for k, v in doc.items()}


@main.command("bench")
@click.argument("patterns", nargs=-1)
@solver_options
@click.option("--reps", type=int, default=1, show_default=True, help="Seeded repetitions per instance.")
@click.option("--baseline", type=click.Path(exists=True), default=None,
              help="Baseline travel times (JSON map name->hours) for delta-TT.")
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--workers", type=int, default=None, help="Worker processes (default: CPU count).")
def cmd_bench(patterns, params_file, seed, ct_max, eta, pmax, kmax, fbound, mode, reps, baseline, out_dir, workers):
    """Solve a batch of instance files and write CSV + JSON reports."""
    paths: List[str] = []
    for pattern in patterns:
        paths.extend(sorted(globlib.glob(pattern)))
    if not paths:
        _fail(EXIT_INPUT, "no instance files match the given patterns")
    instances = [_read_instance(p) for p in paths]
    params = _solver_params(params_file, seed, ct_max, eta, pmax, kmax, fbound, mode)
    baseline_map = _load_baseline(baseline)
    workers = workers if workers is not None else (os.cpu_count() or 1)
    report, solutions = run_bench(
        instances, params, repetitions=reps, workers=max(1, workers), baseline=baseline_map
    )
    out = Path(out_dir)
    _atomic_write(out / "report.json", json.dumps(report.to_json_dict(), indent=2))
    _atomic_write(out / "report.csv", report.to_csv())
    for solution, row in zip(solutions, report.rows):
        _atomic_write(out / f"{row.instance}.s{row.seed}.solution.json", solution.to_json())
    click.echo(f"{len(report.rows)} runs -> {out}/report.csv")
    for cls, agg in report.aggregates.items():
        line = (
            f"{cls}: ANV={agg['anv']:.2f} ATT={agg['att_hours']:.2f}h "
            f"ACR={agg['acr']:.2f} ACPU={agg['acpu_seconds']:.3f}s"
        )
        if "delta_tt_pct" in agg:
            line += f" dTT={agg['delta_tt_pct']:.1f}%"
        click.echo(line)
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# next-month


@main.command("next-month")
@click.argument("solution_path", type=click.Path())
@click.argument("month2_path", type=click.Path())
@click.argument("shared_path", type=click.Path())
@click.option("-o", "--out", type=click.Path(), default=None)
def cmd_next_month(solution_path, month2_path, shared_path, out):
    """Evaluate a frozen assignment on the following month."""
    solution = _read_solution(solution_path)
    month2 = _read_instance(month2_path)
    try:
        doc = json.loads(Path(shared_path).read_text())
        raw = doc["month1_to_month2"] if isinstance(doc, dict) and "month1_to_month2" in doc else doc
        shared = {int(k): int(v) for k, v in raw.items()}
    except (FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        _fail(EXIT_INPUT, f"cannot read shared map {shared_path}: {exc}")
    try:
        report = evaluate_next_month(solution, month2, shared)
    except (SharedMapError, SolutionStructureError) as exc:
        _fail(EXIT_INPUT, str(exc))
    if out:
        _atomic_write(Path(out), json.dumps(report.to_json_dict(), indent=2))
    click.echo(
        f"TIC={report.tic} TID={report.tid} IAC={report.iac_kg:.1f}kg IATW={report.iatw_hours:.3f}h"
    )
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# render


@main.command("render")
@click.argument("instance_path", type=click.Path())
@click.argument("solution_path", type=click.Path())
@click.option("-o", "--out", type=click.Path(), required=True, help="GeoJSON output path.")
@click.option("--svg", "svg_path", type=click.Path(), default=None, help="Optional SVG output path.")
def cmd_render(instance_path, solution_path, out, svg_path):
    """Write the territory map (GeoJSON, optionally SVG)."""
    instance = _read_instance(instance_path)
    solution = _read_solution(solution_path)
    try:
        doc = territory_geojson(instance, solution)
        _atomic_write(Path(out), json.dumps(doc))
        if svg_path:
            _atomic_write(Path(svg_path), territory_svg(instance, solution))
    except SolutionStructureError as exc:
        _fail(EXIT_INPUT, str(exc))
    click.echo(f"wrote {out} ({len(doc['features'])} territories)")
    sys.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# oracle (desk-scale exact solve, useful for cross-checks)


@main.command("oracle")
@click.argument("instance_path", type=click.Path())
@click.option("-o", "--out", type=click.Path(), default=None)
def cmd_oracle(instance_path, out):
    """Exact minimum territory count by exhaustive enumeration (tiny instances)."""
    instance = _read_instance(instance_path)
    try:
        result = exact_solve(instance)
    except OracleGuardError as exc:
        _fail(EXIT_INPUT, str(exc))
    if result.status == "infeasible":
        click.echo("infeasible")
        sys.exit(EXIT_INFEASIBLE)
    click.echo(f"optimum={result.optimum} status={result.status}")
    if out and result.solution is not None:
        _atomic_write(Path(out), result.solution.to_json())
    sys.exit(EXIT_OK)


if __name__ == "__main__":
    main()
