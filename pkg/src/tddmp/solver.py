"""Territory minimization: elimination loop, bounded backtracking, merge stages.

The search starts from one singleton territory per customer and repeatedly
tries to eliminate a territory, re-accommodating its basic units in the rest
through a three-stage merge procedure driven by an ejection pool with
penalty counters:

  stage 1  best fully feasible insertion into an adjacent territory,
  stage 2  cheapest violating insertion, then 2-opt/relocation repair,
  stage 3  forced merge into a random territory with up to ``k_max``
           ejections chosen to minimize the ejected penalty sum.

Improving solutions are pushed on a bounded stack; when no territory of the
current solution can be eliminated, the search rolls back to the most recent
stacked solution and resumes where it left off.  A final pass reoptimizes
travel time (2-opt) and compactness (relocation) without touching the
territory count.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from .geometry import CompactnessMode
from .model import Instance, Solution, Territory, propagate_schedule, validate
from .routing import (
    InsertionPlan,
    WorkingSolution,
    WorkingTerritory,
    best_insertion,
    fast_tables,
    relocate,
    repair_penalized,
    route_metrics,
    two_opt_sweep,
)

_EPS = 1e-9


class InstanceInfeasibleError(RuntimeError):
    """Some customer cannot be served alone within its window and workday."""

    def __init__(self, customers: Sequence[int]):
        self.customers = list(customers)
        super().__init__(f"intrinsically infeasible customers: {self.customers}")


@dataclass(frozen=True)
class SolverParams:
    """Knobs of the elimination/merge search."""

    eta: int = 5                      # backtrack stack capacity
    p_max: int = 5                    # penalty ceiling before giving up on a unit
    k_max: int = 3                    # max ejections per forced merge
    ct_max: float = 60.0              # wall-clock budget (seconds) for the search
    rng_seed: int = 0
    compactness_bound: Optional[float] = None      # override instance F
    compactness_mode: Optional[CompactnessMode] = None
    merge_attempt_factor: int = 50    # stage-3 attempt cap = factor * initial pool size
    max_steps: Optional[int] = None   # optional deterministic cutoff (elimination attempts)
    strict_checks: bool = False       # assert conservation invariants while searching

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if self.p_max < 1:
            raise ValueError("p_max must be >= 1")
        if self.k_max < 0:
            raise ValueError("k_max must be >= 0")
        if self.ct_max <= 0:
            raise ValueError("ct_max must be > 0")


class Trace:
    """Deterministic event log (JSON-ready dicts, no wall-clock fields)."""

    def __init__(self):
        self.events: List[dict] = []

    def emit(self, event: str, **fields):
        rec = {"event": event}
        rec.update(fields)
        self.events.append(rec)


class EjectionPool:
    """Unassigned units awaiting a merge, with their penalty counters."""

    def __init__(self, units: Iterable[int], penalties: Dict[int, int]):
        self.units: Set[int] = set(units)
        self.p = penalties

    def __len__(self) -> int:
        return len(self.units)

    def __contains__(self, unit: int) -> bool:
        return unit in self.units

    def over_ceiling(self, p_max: int) -> bool:
        return any(self.p[i] > p_max for i in self.units)


class BacktrackStack:
    """Bounded LIFO of search frames; pushing onto a full stack drops the oldest."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._frames: List["_Frame"] = []
        self.max_depth = 0

    def push(self, frame: "_Frame"):
        self._frames.append(frame)
        if len(self._frames) > self.capacity:
            del self._frames[0]
        self.max_depth = max(self.max_depth, len(self._frames))

    def pop_resumable(self) -> Optional["_Frame"]:
        """Discard exhausted frames; return the first that still has work."""
        while self._frames:
            frame = self._frames.pop()
            if frame.cursor < len(frame.order):
                return frame
        return None

    def __len__(self) -> int:
        return len(self._frames)


@dataclass
class _Frame:
    work: WorkingSolution
    order: List[int]
    cursor: int = 0


# ---------------------------------------------------------------------------
# initial solution


def initial_solution(instance: Instance) -> Solution:
    """One singleton territory per customer; fails if any customer is
    unreachable within its own window and the workday even on its own."""
    bad: List[int] = []
    territories: List[Territory] = []
    for i in instance.customers:
        routes = {}
        feasible = True
        for day in instance.active_days(i):
            res = propagate_schedule([i], day, instance)
            if not res.feasible:
                feasible = False
                break
            routes[day] = res.route
        if not feasible:
            bad.append(i)
            continue
        territories.append(Territory(territory_id=i, members=(i,), routes=routes))
    if bad:
        raise InstanceInfeasibleError(bad)
    return Solution(territories=territories, instance_name=instance.name)


# ---------------------------------------------------------------------------
# merge stages


def _adjacent_territories(unit: int, work: WorkingSolution, instance: Instance) -> List[int]:
    tids = {
        work.owner[j]
        for j in instance.geometry.neighbors_of(unit)
        if j in work.owner
    }
    return sorted(tids)


def stage1_feasible_merge(
    v_in: int, work: WorkingSolution, instance: Instance, bound: float
) -> Optional[Tuple[int, InsertionPlan]]:
    """Lowest-delta fully feasible merge into an adjacent territory, if any."""
    mode = instance.compactness_mode
    best: Optional[Tuple[float, int, InsertionPlan]] = None
    for tid in _adjacent_territories(v_in, work, instance):
        wt = work.territories[tid]
        if wt.compactness_with(v_in, instance, mode) > bound + _EPS:
            continue
        plan = best_insertion(v_in, wt, instance)
        if not plan.feasible:
            continue
        key = (plan.total_delta, tid)
        if best is None or key < (best[0], best[1]):
            best = (plan.total_delta, tid, plan)
    if best is None:
        return None
    return best[1], best[2]


def stage2_penalized_merge(
    v_in: int, work: WorkingSolution, instance: Instance, bound: float
) -> Optional[WorkingSolution]:
    """Accept the least-violating adjacent merge, then repair; None if the
    repair cannot reach zero violation (the merge is rolled back)."""
    mode = instance.compactness_mode
    best: Optional[Tuple[float, float, int, InsertionPlan]] = None
    for tid in _adjacent_territories(v_in, work, instance):
        wt = work.territories[tid]
        if wt.compactness_with(v_in, instance, mode) > bound + _EPS:
            continue
        plan = best_insertion(v_in, wt, instance)
        key = (plan.total_violation, plan.total_relaxed_delta, tid)
        if best is None or key < best[:3]:
            best = (key[0], key[1], tid, plan)
    if best is None:
        return None
    tid, plan = best[2], best[3]
    trial = work.clone()
    trial.territories[tid].add_member(v_in, plan.chosen(relaxed=True), instance)
    trial.owner[v_in] = tid
    if not repair_penalized(trial, instance):
        return None
    # relocation guards keep contiguity and the bound, but re-check the cheap
    # aggregate in case a repaired territory drifted over it
    for wt in trial.territories.values():
        if wt.compactness(mode) > bound + 1e-6:
            return None
    return trial


def _perimeter_without(
    wt: WorkingTerritory, ejected: Sequence[int], instance: Instance
) -> Tuple[float, float, float]:
    """(perimeter, area, sqrt_sum) of the territory after removing ``ejected``."""
    geo = instance.geometry
    out = set(ejected)
    perim = wt.perimeter
    area = wt.area_sum
    sqrt_sum = wt.sqrt_sum
    lost_pairs = 0.0
    for e in out:
        cell = geo.unit(e)
        perim -= cell.perimeter
        area -= cell.area
        sqrt_sum -= cell.sqrt_area
        for j, length in cell.neighbors:
            if j in wt.members and j not in out:
                lost_pairs += length
            elif j in out and j > e:
                lost_pairs += 0.0  # within-set side: both cell perimeters already dropped
    # sides between an ejected and a kept member become outer boundary again
    perim += 2.0 * lost_pairs
    return perim, area, sqrt_sum


def _component_anchored(
    ejected: Sequence[int], anchors: Set[int], v_in: int, instance: Instance
) -> bool:
    """Every connected component of the ejected set must contain an anchored
    unit (adjacent to the pool) or the incoming unit itself."""
    out = set(ejected)
    geo = instance.geometry
    seen: Set[int] = set()
    for start in ejected:
        if start in seen:
            continue
        comp = {start}
        queue = [start]
        while queue:
            u = queue.pop()
            for j in geo.neighbors_of(u):
                if j in out and j not in comp:
                    comp.add(j)
                    queue.append(j)
        seen |= comp
        if not any(u in anchors or u == v_in for u in comp):
            return False
    return True


def stage3_eject_merge(
    v_in: int,
    work: WorkingSolution,
    pool: EjectionPool,
    instance: Instance,
    bound: float,
    k_max: int,
    rng: np.random.Generator,
) -> Optional[Tuple[WorkingSolution, Tuple[int, ...]]]:
    """Force ``v_in`` into a random territory, ejecting at most ``k_max`` units.

    Among ejection sets that restore full feasibility (routes, contiguity,
    compactness) the one with the smallest penalty sum wins, ties broken by
    the residual territory's compactness ratio.  Ejectable units must chain
    back to the pool (or to ``v_in``) through other ejected units, so no unit
    is stranded in the interior of a foreign territory.
    """
    ft = fast_tables(instance)
    geo = instance.geometry
    mode = instance.compactness_mode
    adjacent = _adjacent_territories(v_in, work, instance)
    universe = adjacent if adjacent else sorted(work.territories)
    if not universe:
        return None
    tid = int(universe[rng.integers(len(universe))])
    target = work.territories[tid]
    plan = best_insertion(v_in, target, instance)
    trial_t = target.clone()
    trial_t.add_member(v_in, plan.chosen(relaxed=True), instance)

    pool_rest = pool.units - {v_in}
    anchors = {
        u for u in trial_t.members
        if any(j in pool_rest for j in geo.neighbors_of(u))
    }
    # only units within k_max-1 hops of an anchor (or v_in) can belong to a chain
    frontier = set(anchors) | {v_in}
    candidates: Set[int] = set(frontier)
    for _ in range(max(0, k_max - 1)):
        nxt = {
            j
            for u in frontier
            for j in geo.neighbors_of(u)
            if j in trial_t.members and j not in candidates
        }
        candidates |= nxt
        frontier = nxt
    candidates &= trial_t.members
    cand_list = sorted(candidates)

    best_key: Optional[Tuple[float, float]] = None
    best_set: Optional[Tuple[int, ...]] = None
    best_routes: Optional[Dict[int, List[int]]] = None
    for size in range(0, k_max + 1):
        if best_key is not None and best_key[0] < size:
            break  # penalties are >= 1 each, so larger sets cannot win
        for combo in itertools.combinations(cand_list, size):
            out = set(combo)
            residual = trial_t.members - out
            if not residual:
                continue
            if out and not _component_anchored(combo, anchors, v_in, instance):
                continue
            perim, area, sqrt_sum = _perimeter_without(trial_t, combo, instance)
            denom = math.sqrt(area) if mode is CompactnessMode.SQRT_OF_SUM else sqrt_sum
            cr = perim / denom
            if cr > bound + _EPS:
                continue
            p_sum = float(sum(pool.p[e] for e in combo))
            key = (p_sum, cr)
            if best_key is not None and key >= best_key:
                continue
            if not geo.is_contiguous(residual):
                continue
            routes: Dict[int, List[int]] = {}
            ok = True
            for day, visits in trial_t.day_visits.items():
                kept = [u for u in visits if u not in out]
                if not kept:
                    continue
                _, late, over, load = route_metrics(kept, day, ft)
                if late > _EPS or over > _EPS or load > ft.cap + _EPS:
                    ok = False
                    break
                routes[day] = kept
            if not ok:
                continue
            best_key = key
            best_set = combo
            best_routes = routes
    if best_key is None:
        return None

    assert best_set is not None and best_routes is not None
    result = work.clone()
    new_members = trial_t.members - set(best_set)
    result.territories[tid] = WorkingTerritory.build(tid, new_members, best_routes, instance)
    for e in best_set:
        result.owner.pop(e, None)
    if v_in in new_members:
        result.owner[v_in] = tid
    return result, tuple(sorted(best_set))


# ---------------------------------------------------------------------------
# merge heuristic


def merge_heuristic(
    work: WorkingSolution,
    pool: EjectionPool,
    params: SolverParams,
    instance: Instance,
    rng: np.random.Generator,
    deadline: Optional[float] = None,
    bound: Optional[float] = None,
) -> Optional[WorkingSolution]:
    """Re-accommodate every pool unit; None when the attempt must be abandoned
    (penalty ceiling reached, no selectable unit, attempt cap, or time up)."""
    bound = instance.compactness_bound if bound is None else bound
    attempt_cap = params.merge_attempt_factor * max(1, len(pool))
    stage3_attempts = 0
    cur = work
    while pool.units:
        if deadline is not None and time.monotonic() > deadline:
            return None
        if pool.over_ceiling(params.p_max):
            return None
        selectable = [
            i for i in sorted(pool.units)
            if _adjacent_territories(i, cur, instance)
        ]
        if not selectable:
            return None
        v_in = min(selectable, key=lambda i: (pool.p[i], i))

        res1 = stage1_feasible_merge(v_in, cur, instance, bound)
        if res1 is not None:
            tid, plan = res1
            cur.territories[tid].add_member(v_in, plan.chosen(relaxed=False), instance)
            cur.owner[v_in] = tid
            pool.units.discard(v_in)
            continue

        res2 = stage2_penalized_merge(v_in, cur, instance, bound)
        if res2 is not None:
            cur = res2
            pool.units.discard(v_in)
            continue

        pool.p[v_in] += 1
        if stage3_attempts >= attempt_cap:
            return None
        stage3_attempts += 1
        res3 = stage3_eject_merge(v_in, cur, pool, instance, bound, params.k_max, rng)
        if res3 is not None:
            cur, ejected = res3
            pool.units.discard(v_in)
            pool.units.update(ejected)
        if params.strict_checks:
            _assert_partition(cur, pool, instance)
    return cur


def _assert_partition(work: WorkingSolution, pool: Optional[EjectionPool], instance: Instance):
    assigned: Set[int] = set()
    for wt in work.territories.values():
        overlap = assigned & wt.members
        assert not overlap, f"units in two territories: {sorted(overlap)}"
        assigned |= wt.members
    pooled = set(pool.units) if pool is not None else set()
    dup = assigned & pooled
    assert not dup, f"units both assigned and pooled: {sorted(dup)}"
    everything = assigned | pooled
    expected = set(instance.customers)
    assert everything == expected, (
        f"partition broken: missing {sorted(expected - everything)}, "
        f"extra {sorted(everything - expected)}"
    )


# ---------------------------------------------------------------------------
# elimination loop


def _elimination_order(work: WorkingSolution, instance: Instance) -> List[int]:
    """Territory ids by ascending active customer-days (then id, then demand)."""
    def key(tid: int):
        wt = work.territories[tid]
        members = sorted(wt.members)
        active = instance.active_customer_days(members)
        demand = float(instance.demands[members].sum()) if members else 0.0
        return (active, tid, demand)

    return sorted(work.territories, key=key)


@dataclass
class SolveStats:
    eliminations_tried: int = 0
    eliminations_succeeded: int = 0
    rollbacks: int = 0
    max_stack_depth: int = 0
    time_limit_hit: bool = False
    elapsed_seconds: float = 0.0


def eliminate_territories(
    solution: Solution,
    params: SolverParams,
    instance: Instance,
    trace: Optional[Trace] = None,
    stats: Optional[SolveStats] = None,
) -> Solution:
    """Run the elimination search from ``solution`` within the time budget and
    return the incumbent (fewest territories found)."""
    trace = trace if trace is not None else Trace()
    stats = stats if stats is not None else SolveStats()
    bound = params.compactness_bound if params.compactness_bound is not None else instance.compactness_bound
    rng = np.random.default_rng(np.random.SeedSequence([params.rng_seed, 0xE11]))
    deadline = time.monotonic() + params.ct_max

    base = WorkingSolution.from_solution(solution, instance)
    incumbent = base.clone()
    working = _Frame(base, _elimination_order(base, instance), 0)
    stack = BacktrackStack(params.eta)
    steps = 0

    while True:
        if time.monotonic() > deadline:
            stats.time_limit_hit = True
            trace.emit("stop", reason="time_limit")
            break
        if params.max_steps is not None and steps >= params.max_steps:
            trace.emit("stop", reason="step_limit")
            break
        if working.cursor >= len(working.order):
            frame = stack.pop_resumable()
            if frame is None:
                trace.emit("stop", reason="stack_exhausted")
                break
            working = frame
            stats.rollbacks += 1
            trace.emit("rollback", territories=working.work.num_territories)
            continue

        tid = working.order[working.cursor]
        working.cursor += 1
        steps += 1
        stats.eliminations_tried += 1

        partial = working.work.clone()
        removed = partial.territories.pop(tid)
        for i in removed.members:
            del partial.owner[i]
        pool = EjectionPool(removed.members, {i: 1 for i in instance.customers})

        merged = merge_heuristic(partial, pool, params, instance, rng, deadline, bound)
        if merged is None:
            trace.emit(
                "eliminate", territory=tid, pool=len(removed.members),
                outcome="failed", territories=working.work.num_territories,
            )
            continue

        if params.strict_checks:
            _assert_partition(merged, None, instance)
        stats.eliminations_succeeded += 1
        trace.emit(
            "eliminate", territory=tid, pool=len(removed.members),
            outcome="merged", territories=merged.num_territories,
        )
        new_frame = _Frame(merged, _elimination_order(merged, instance), 0)
        if merged.num_territories < incumbent.num_territories:
            incumbent = merged.clone()
            stack.push(new_frame)
            trace.emit("incumbent", territories=incumbent.num_territories, step=steps)
        working = new_frame
        stats.max_stack_depth = max(stats.max_stack_depth, len(stack))

    stats.max_stack_depth = max(stats.max_stack_depth, stack.max_depth)
    return incumbent.to_solution(instance)


# ---------------------------------------------------------------------------
# final reoptimization


def reoptimize(solution: Solution, instance: Instance, max_rounds: int = 100) -> Solution:
    """Travel-time 2-opt and compactness relocation to a joint local optimum.

    Keeps the territory count, never exceeds the incoming total travel time,
    and never increases the total compactness ratio.
    """
    work = WorkingSolution.from_solution(solution, instance)
    budget = work.total_travel_minutes()
    for _ in range(max_rounds):
        improved = two_opt_sweep(work, instance, objective="travel")
        improved |= relocate(work, instance, objective="compactness", travel_budget=budget)
        if not improved:
            break
    return work.to_solution(instance)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class SolveResult:
    solution: Solution
    trace: Trace
    stats: SolveStats
    params: SolverParams


def solve(instance: Instance, params: SolverParams = SolverParams()) -> SolveResult:
    """Full pipeline: singleton start, elimination search, reoptimization."""
    if params.compactness_bound is not None or params.compactness_mode is not None:
        instance = replace(
            instance,
            compactness_bound=params.compactness_bound
            if params.compactness_bound is not None
            else instance.compactness_bound,
            compactness_mode=params.compactness_mode
            if params.compactness_mode is not None
            else instance.compactness_mode,
        )
    trace = Trace()
    stats = SolveStats()
    t0 = time.monotonic()
    trace.emit(
        "start",
        instance=instance.name,
        customers=instance.n,
        days=instance.num_days,
        eta=params.eta,
        p_max=params.p_max,
        k_max=params.k_max,
        seed=params.rng_seed,
        compactness_bound=instance.compactness_bound,
        compactness_mode=instance.compactness_mode.value,
    )
    start = initial_solution(instance)
    trace.emit("initial", territories=start.num_territories)
    best = eliminate_territories(start, params, instance, trace, stats)
    final = reoptimize(best, instance)
    stats.elapsed_seconds = time.monotonic() - t0
    trace.emit(
        "final",
        territories=final.num_territories,
        eliminations=stats.eliminations_succeeded,
        rollbacks=stats.rollbacks,
        max_stack=stats.max_stack_depth,
    )
    if params.strict_checks:
        report = validate(instance, final)
        assert report.ok, f"solver emitted an infeasible solution:\n{report}"
    return SolveResult(solution=final, trace=trace, stats=stats, params=params)
