"""Benchmark batches and the next-month operational evaluation.

``run_bench`` solves a set of instances (optionally repeated over seeds, with
a bounded worker pool) and aggregates per-class averages; ``evaluate_next_month``
freezes a past month's customer-to-driver assignment, assigns each new
customer to the driver of its nearest old customer (by travel time, ties to
the smaller id), routes every driver-day by cheapest insertion plus 2-opt,
and reports which new customers could not be served feasibly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .model import Instance, Solution, solution_cost, validate
from .routing import fast_tables, route_metrics, two_opt
from .solver import SolveResult, SolverParams, solve

_EPS = 1e-9


# ---------------------------------------------------------------------------
# benchmark reports


def class_of(instance_name: str) -> str:
    """Solomon-style class label (letters plus first digit), else 'all'."""
    head = instance_name.split("-")[0]
    letters = ""
    pos = 0
    while pos < len(head) and head[pos].isalpha():
        letters += head[pos].upper()
        pos += 1
    if letters and pos < len(head) and head[pos].isdigit():
        return letters + head[pos]
    return "all"


@dataclass
class BenchRow:
    instance: str
    cls: str
    seed: int
    territories: int
    travel_hours: float
    average_cr: Optional[float]
    cpu_seconds: float
    baseline_travel_hours: Optional[float] = None

    @property
    def delta_tt_pct(self) -> Optional[float]:
        if self.baseline_travel_hours is None or self.baseline_travel_hours <= 0:
            return None
        return 100.0 * (self.baseline_travel_hours - self.travel_hours) / self.baseline_travel_hours


def aggregate_rows(rows: Sequence[BenchRow]) -> Dict[str, Dict[str, float]]:
    """Per-class means: ANV, ATT, ACR, ACPU, and mean delta-TT where defined."""
    out: Dict[str, Dict[str, float]] = {}
    by_cls: Dict[str, List[BenchRow]] = {}
    for r in rows:
        by_cls.setdefault(r.cls, []).append(r)
    for cls, group in sorted(by_cls.items()):
        crs = [r.average_cr for r in group if r.average_cr is not None]
        deltas = [r.delta_tt_pct for r in group if r.delta_tt_pct is not None]
        out[cls] = {
            "instances": float(len(group)),
            "anv": sum(r.territories for r in group) / len(group),
            "att_hours": sum(r.travel_hours for r in group) / len(group),
            "acr": sum(crs) / len(crs) if crs else math.nan,
            "acpu_seconds": sum(r.cpu_seconds for r in group) / len(group),
        }
        if deltas:
            out[cls]["delta_tt_pct"] = sum(deltas) / len(deltas)
    return out


@dataclass
class BenchReport:
    rows: List[BenchRow]
    aggregates: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate_rows(self.rows)

    def to_json_dict(self) -> dict:
        return {
            "schema": "tddmp-bench-1",
            "rows": [
                {
                    "instance": r.instance,
                    "class": r.cls,
                    "seed": r.seed,
                    "nv": r.territories,
                    "tt_hours": r.travel_hours,
                    "acr": r.average_cr,
                    "cpu_seconds": r.cpu_seconds,
                    "baseline_tt_hours": r.baseline_travel_hours,
                    "delta_tt_pct": r.delta_tt_pct,
                }
                for r in self.rows
            ],
            "aggregates": self.aggregates,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["instance", "class", "seed", "nv", "tt_hours", "acr", "cpu_seconds", "delta_tt_pct"]
        )
        for r in self.rows:
            writer.writerow(
                [
                    r.instance,
                    r.cls,
                    r.seed,
                    r.territories,
                    f"{r.travel_hours:.6f}",
                    "" if r.average_cr is None else f"{r.average_cr:.6f}",
                    f"{r.cpu_seconds:.6f}",
                    "" if r.delta_tt_pct is None else f"{r.delta_tt_pct:.3f}",
                ]
            )
        return buf.getvalue()


def _solve_one(instance: Instance, params: SolverParams) -> Tuple[BenchRow, SolveResult]:
    t0 = time.monotonic()
    result = solve(instance, params)
    cpu = time.monotonic() - t0
    cost = solution_cost(instance, result.solution)
    row = BenchRow(
        instance=instance.name,
        cls=class_of(instance.name),
        seed=params.rng_seed,
        territories=cost.territories,
        travel_hours=cost.total_travel_hours,
        average_cr=cost.average_compactness,
        cpu_seconds=cpu,
    )
    return row, result


def _bench_worker(payload: Tuple[str, dict]) -> Tuple[dict, str]:
    """Subprocess entry: (instance json text, params kwargs) -> (row, solution json)."""
    instance_json, params_kwargs = payload
    instance = Instance.from_json(instance_json)
    row, result = _solve_one(instance, SolverParams(**params_kwargs))
    return (
        {
            "instance": row.instance,
            "cls": row.cls,
            "seed": row.seed,
            "territories": row.territories,
            "travel_hours": row.travel_hours,
            "average_cr": row.average_cr,
            "cpu_seconds": row.cpu_seconds,
        },
        result.solution.to_json(),
    )


def run_bench(
    instances: Sequence[Instance],
    params: SolverParams,
    repetitions: int = 1,
    workers: int = 1,
    baseline: Optional[Mapping[str, float]] = None,
) -> Tuple[BenchReport, List[Solution]]:
    """Solve each instance ``repetitions`` times with consecutive seeds."""
    jobs: List[Tuple[str, dict]] = []
    params_dict = {
        "eta": params.eta,
        "p_max": params.p_max,
        "k_max": params.k_max,
        "ct_max": params.ct_max,
        "merge_attempt_factor": params.merge_attempt_factor,
        "compactness_bound": params.compactness_bound,
        "compactness_mode": params.compactness_mode,
        "max_steps": params.max_steps,
    }
    for instance in instances:
        text = instance.to_json()
        for rep in range(repetitions):
            kw = dict(params_dict)
            kw["rng_seed"] = params.rng_seed + rep
            jobs.append((text, kw))

    rows: List[BenchRow] = []
    solutions: List[Solution] = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_bench_worker, jobs))
    else:
        outcomes = [_bench_worker(job) for job in jobs]
    for row_dict, sol_json in outcomes:
        row = BenchRow(
            instance=row_dict["instance"],
            cls=row_dict["cls"],
            seed=row_dict["seed"],
            territories=row_dict["territories"],
            travel_hours=row_dict["travel_hours"],
            average_cr=row_dict["average_cr"],
            cpu_seconds=row_dict["cpu_seconds"],
        )
        if baseline and row.instance in baseline:
            row.baseline_travel_hours = float(baseline[row.instance])
        rows.append(row)
        solutions.append(Solution.from_json(sol_json))
    return BenchReport(rows=rows), solutions


# ---------------------------------------------------------------------------
# next-month evaluation


class SharedMapError(ValueError):
    pass


@dataclass(frozen=True)
class InfeasibleEvent:
    customer: int           # month-2 id
    day: int
    demand: float
    lateness_minutes: float  # smallest violation over insertion positions


@dataclass
class DriverDayPlan:
    territory: int
    day: int
    visits: List[int]
    lateness_minutes: float  # residual violation carried by fixed-roster customers


@dataclass
class NextMonthReport:
    events: List[InfeasibleEvent]
    plans: List[DriverDayPlan]
    assignment: Dict[int, int]          # month-2 customer -> driver (territory id)
    old_lateness_minutes: float = 0.0

    @property
    def tic(self) -> int:
        return len({e.customer for e in self.events})

    @property
    def tid(self) -> int:
        return len({e.day for e in self.events})

    @property
    def iac_kg(self) -> float:
        return sum(e.demand for e in self.events)

    @property
    def iatw_hours(self) -> float:
        if not self.events:
            return 0.0
        return sum(e.lateness_minutes for e in self.events) / len(self.events) / 60.0

    def to_json_dict(self) -> dict:
        return {
            "schema": "tddmp-nextmonth-1",
            "summary": {
                "tic": self.tic,
                "tid": self.tid,
                "iac_kg": self.iac_kg,
                "iatw_hours": self.iatw_hours,
            },
            "events": [
                {
                    "customer": e.customer,
                    "day": e.day,
                    "demand": e.demand,
                    "lateness_minutes": e.lateness_minutes,
                }
                for e in self.events
            ],
            "assignment": {str(c): t for c, t in sorted(self.assignment.items())},
            "plans": [
                {
                    "territory": p.territory,
                    "day": p.day,
                    "visits": p.visits,
                    "lateness_minutes": p.lateness_minutes,
                }
                for p in self.plans
            ],
            "old_lateness_minutes": self.old_lateness_minutes,
        }


def _cheapest_insertion(
    visits: List[int], customer: int, day: int, instance: Instance
) -> Tuple[Optional[int], float, float]:
    """(best feasible position or None, delta, min violation over positions)."""
    ft = fast_tables(instance)
    base_ret, base_late, base_over, base_load = route_metrics(visits, day, ft)
    base_pen = base_late + base_over
    new_load = base_load + ft.q[customer][day]
    cap_excess = max(0.0, new_load - ft.cap) - max(0.0, base_load - ft.cap)
    best_pos = None
    best_delta = math.inf
    min_violation = math.inf
    for pos in range(len(visits) + 1):
        trial = visits[:pos] + [customer] + visits[pos:]
        ret, late, over, _ = route_metrics(trial, day, ft)
        delta = ret - base_ret
        violation = cap_excess + max(0.0, (late + over) - base_pen)
        min_violation = min(min_violation, violation)
        if violation <= _EPS and delta < best_delta - _EPS:
            best_pos = pos
            best_delta = delta
    return best_pos, best_delta, min_violation


def assign_drivers(
    month1_solution: Solution, month2: Instance, shared: Mapping[int, int]
) -> Dict[int, int]:
    """month-2 customer -> driver, under the nearest-old-customer rule."""
    owner1 = month1_solution.territory_of()
    inverse: Dict[int, int] = {}
    for m1, m2 in shared.items():
        m1, m2 = int(m1), int(m2)
        if m1 not in owner1:
            raise SharedMapError(f"month-1 customer {m1} is not covered by the solution")
        if not 1 <= m2 <= month2.n:
            raise SharedMapError(f"month-2 customer {m2} does not exist")
        if m2 in inverse:
            raise SharedMapError(f"month-2 customer {m2} mapped twice")
        inverse[m2] = m1
    driver: Dict[int, int] = {}
    old_ids = sorted(inverse)
    if not old_ids:
        raise SharedMapError("shared map is empty; no old customers to anchor on")
    for j in month2.customers:
        if j in inverse:
            driver[j] = owner1[inverse[j]]
    for j in month2.customers:
        if j in driver:
            continue
        nearest = min(old_ids, key=lambda o: (float(month2.travel[j, o]), o))
        driver[j] = driver[nearest]
    return driver


def evaluate_next_month(
    month1_solution: Solution, month2: Instance, shared: Mapping[int, int]
) -> NextMonthReport:
    """Route month 2 day by day under the frozen assignment rule.

    Old customers stay with their driver (inserted even if that forces a
    violation, which the report tracks separately); each new customer gets its
    driver's best feasible insertion, or becomes an infeasibility event with
    its demand and the smallest window violation any position would cause.
    """
    ft = fast_tables(month2)
    driver = assign_drivers(month1_solution, month2, shared)
    shared_m2 = {int(v) for v in shared.values()}
    events: List[InfeasibleEvent] = []
    plans: List[DriverDayPlan] = []
    old_lateness = 0.0
    for day in month2.days:
        active = [j for j in month2.customers if month2.is_active(j, day)]
        by_driver: Dict[int, List[int]] = {}
        for j in active:
            by_driver.setdefault(driver[j], []).append(j)
        for terr in sorted(by_driver):
            olds = [j for j in by_driver[terr] if j in shared_m2]
            news = [j for j in by_driver[terr] if j not in shared_m2]
            visits: List[int] = []
            # fixed roster first: greedy cheapest insertion, forced if necessary
            remaining = list(olds)
            while remaining:
                best = None
                for j in remaining:
                    pos, delta, violation = _cheapest_insertion(visits, j, day, month2)
                    if pos is not None:
                        key = (0.0, delta, j)
                        cand = (key, j, pos)
                    else:
                        trial_pos, _, viol = _forced_position(visits, j, day, month2)
                        cand = ((viol, 0.0, j), j, trial_pos)
                    if best is None or cand[0] < best[0]:
                        best = cand
                key, j, pos = best
                if key[0] > _EPS:
                    old_lateness += key[0]
                visits.insert(pos, j)
                remaining.remove(j)
            visits = two_opt(visits, day, month2, objective="penalty")
            # new customers in id order
            for j in sorted(news):
                pos, delta, min_violation = _cheapest_insertion(visits, j, day, month2)
                if pos is None:
                    events.append(
                        InfeasibleEvent(
                            customer=j,
                            day=day,
                            demand=float(month2.demands[j, day]),
                            lateness_minutes=0.0 if math.isinf(min_violation) else min_violation,
                        )
                    )
                    continue
                visits.insert(pos, j)
            visits = two_opt(visits, day, month2, objective="penalty")
            _, late, over, _ = route_metrics(visits, day, ft)
            plans.append(
                DriverDayPlan(
                    territory=terr, day=day, visits=visits, lateness_minutes=late + over
                )
            )
    return NextMonthReport(
        events=events, plans=plans, assignment=driver, old_lateness_minutes=old_lateness
    )


def _forced_position(
    visits: List[int], customer: int, day: int, instance: Instance
) -> Tuple[int, float, float]:
    """Position minimizing the added violation when no feasible slot exists."""
    ft = fast_tables(instance)
    _, base_late, base_over, base_load = route_metrics(visits, day, ft)
    base_pen = base_late + base_over
    cap_excess = max(0.0, base_load + ft.q[customer][day] - ft.cap) - max(0.0, base_load - ft.cap)
    best = None
    for pos in range(len(visits) + 1):
        trial = visits[:pos] + [customer] + visits[pos:]
        ret, late, over, _ = route_metrics(trial, day, ft)
        violation = cap_excess + max(0.0, (late + over) - base_pen)
        key = (violation, ret, pos)
        if best is None or key < best:
            best = key
    return best[2], best[1], best[0]
