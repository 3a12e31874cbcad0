"""Per-day route manipulation: insertion search, penalties, 2-opt, relocation.

Everything here works on plain visit sequences plus the lightweight
``WorkingTerritory`` / ``WorkingSolution`` search state, so the solver can
mutate candidate solutions cheaply and only materialize full schedules when a
solution is emitted.  Penalized evaluation follows the repair convention:
service may start after the window closes (lateness accumulates and cascades)
and the vehicle may return after the workday (overtime), while capacity excess
is tracked in demand units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .geometry import CompactnessMode
from .model import Instance, Route, Solution, Territory, propagate_schedule

INF = math.inf
_EPS = 1e-9


# ---------------------------------------------------------------------------
# fast lookups


class _FastTables:
    """Plain-list mirrors of the instance arrays for tight evaluation loops."""

    def __init__(self, instance: Instance):
        self.t = instance.travel.tolist()
        self.a = instance.window_open.tolist()
        self.b = instance.window_close.tolist()
        self.g = instance.service.tolist()
        self.q = instance.demands.tolist()
        self.h = float(instance.workday)
        self.cap = float(instance.capacity)
        self.depart = float(instance.window_open[0])
        self.active_days = {i: instance.active_days(i) for i in instance.customers}


def fast_tables(instance: Instance) -> _FastTables:
    cache = getattr(instance, "_routing_cache", None)
    if cache is None:
        cache = _FastTables(instance)
        instance._routing_cache = cache
    return cache


def route_metrics(visits: Sequence[int], day: int, ft: _FastTables) -> Tuple[float, float, float, float]:
    """Relaxed earliest-start pass: (return_time, lateness, overtime, load)."""
    t, a, b, g = ft.t, ft.a, ft.b, ft.g
    now = ft.depart
    prev = 0
    lateness = 0.0
    load = 0.0
    q = ft.q
    for i in visits:
        arr = now + g[prev] + t[prev][i]
        ai = a[i]
        start = arr if arr > ai else ai
        late = start - b[i]
        if late > 0.0:
            lateness += late
        load += q[i][day]
        now = start
        prev = i
    ret = now + g[prev] + t[prev][0] if visits else ft.depart
    overtime = ret - ft.h
    if overtime < 0.0:
        overtime = 0.0
    return ret, lateness, overtime, load


def route_travel_minutes(visits: Sequence[int], ft: _FastTables) -> float:
    if not visits:
        return 0.0
    t = ft.t
    total = t[0][visits[0]]
    prev = visits[0]
    for i in visits[1:]:
        total += t[prev][i]
        prev = i
    return total + t[prev][0]


# ---------------------------------------------------------------------------
# penalties


@dataclass(frozen=True)
class PenaltyBreakdown:
    """Capacity and time-window violation totals of a (partial) solution."""

    capacity_excess: float          # kg over capacity, summed over routes
    lateness: float                 # minutes, window lateness + depot overtime
    overtime: float                 # the depot-overtime share of ``lateness``
    weight_capacity: float = 1.0
    weight_lateness: float = 1.0

    @property
    def combined(self) -> float:
        return self.weight_capacity * self.capacity_excess + self.weight_lateness * self.lateness

    @property
    def feasible(self) -> bool:
        return self.combined <= _EPS


def penalty(
    day_visits_by_territory: Iterable[Mapping[int, Sequence[int]]],
    instance: Instance,
    weight_capacity: float = 1.0,
    weight_lateness: float = 1.0,
) -> PenaltyBreakdown:
    """Exact violation sums over every route of every territory."""
    ft = fast_tables(instance)
    cap_excess = 0.0
    late = 0.0
    over = 0.0
    for day_visits in day_visits_by_territory:
        for day, visits in day_visits.items():
            _, lateness, overtime, load = route_metrics(visits, day, ft)
            late += lateness + overtime
            over += overtime
            if load > ft.cap:
                cap_excess += load - ft.cap
    return PenaltyBreakdown(
        capacity_excess=cap_excess,
        lateness=late,
        overtime=over,
        weight_capacity=weight_capacity,
        weight_lateness=weight_lateness,
    )


def penalty_of_solution(solution: Solution, instance: Instance) -> PenaltyBreakdown:
    return penalty(
        ({d: r.visits for d, r in terr.routes.items()} for terr in solution.territories),
        instance,
    )


# ---------------------------------------------------------------------------
# insertion search


@dataclass(frozen=True)
class InsertionCandidate:
    day: int
    position: int
    delta_cost: float               # increase of the day's completion time
    feasible: bool
    capacity_excess: float = 0.0
    lateness: float = 0.0           # window lateness + overtime added by the move

    @property
    def violation(self) -> Tuple[float, float]:
        return (self.capacity_excess, self.lateness)


@dataclass
class InsertionPlan:
    """Best insertion of one customer into one territory, per active day.

    ``best_feasible`` has an entry per active day only when a fully feasible
    position exists that day; ``best_relaxed`` always has an entry (minimum
    added violation, then minimum delta, then leftmost position).
    """

    customer: int
    best_feasible: Dict[int, InsertionCandidate] = field(default_factory=dict)
    best_relaxed: Dict[int, InsertionCandidate] = field(default_factory=dict)
    active_days: Tuple[int, ...] = ()

    @property
    def feasible(self) -> bool:
        return all(d in self.best_feasible for d in self.active_days)

    @property
    def total_delta(self) -> float:
        if not self.feasible:
            return INF
        return sum(self.best_feasible[d].delta_cost for d in self.active_days)

    @property
    def total_violation(self) -> float:
        return sum(
            self.best_relaxed[d].capacity_excess + self.best_relaxed[d].lateness
            for d in self.active_days
        )

    @property
    def total_relaxed_delta(self) -> float:
        return sum(self.best_relaxed[d].delta_cost for d in self.active_days)

    def chosen(self, relaxed: bool) -> Dict[int, int]:
        """day -> position of the selected insertion."""
        source = self.best_relaxed if relaxed else self.best_feasible
        return {d: source[d].position for d in self.active_days}


def _day_visits_of(territory) -> Mapping[int, Sequence[int]]:
    if isinstance(territory, Territory):
        return {d: list(r.visits) for d, r in territory.routes.items()}
    if isinstance(territory, WorkingTerritory):
        return territory.day_visits
    return territory


def _members_of(territory) -> Optional[Iterable[int]]:
    if isinstance(territory, Territory):
        return territory.members
    if isinstance(territory, WorkingTerritory):
        return territory.members
    return None


def best_insertion(customer: int, territory, instance: Instance) -> InsertionPlan:
    """Scan every position of every active day of ``customer`` in ``territory``.

    ``territory`` may be a model ``Territory``, a ``WorkingTerritory``, or a
    plain mapping of day to visit list.  The customer must not already belong
    to the territory.
    """
    members = _members_of(territory)
    if members is not None and customer in set(members):
        raise ValueError(f"customer {customer} is already a member of the territory")
    day_visits = _day_visits_of(territory)
    ft = fast_tables(instance)
    if customer not in ft.active_days:
        raise ValueError(f"unknown customer {customer}")
    days = ft.active_days[customer]
    # a customer with no active day joins the member set without touching routes
    plan = InsertionPlan(customer=customer, active_days=tuple(days))
    for day in days:
        base = list(day_visits.get(day, ()))
        base_ret, base_late, base_over, base_load = route_metrics(base, day, ft)
        base_pen = base_late + base_over
        new_load = base_load + ft.q[customer][day]
        cap_excess_new = max(0.0, new_load - ft.cap)
        cap_excess_old = max(0.0, base_load - ft.cap)
        added_excess = cap_excess_new - cap_excess_old
        best_f: Optional[InsertionCandidate] = None
        best_r: Optional[InsertionCandidate] = None
        best_r_key = None
        for pos in range(len(base) + 1):
            trial = base[:pos] + [customer] + base[pos:]
            ret, late, over, _ = route_metrics(trial, day, ft)
            delta = ret - base_ret
            added_late = (late + over) - base_pen
            if added_late < 0.0:
                added_late = 0.0
            feasible = late <= _EPS and over <= _EPS and new_load <= ft.cap + _EPS
            if feasible and (best_f is None or delta < best_f.delta_cost - _EPS):
                best_f = InsertionCandidate(day, pos, delta, True)
            key = (added_excess + added_late, delta, pos)
            if best_r_key is None or key < best_r_key:
                best_r_key = key
                best_r = InsertionCandidate(
                    day, pos, delta, feasible,
                    capacity_excess=added_excess, lateness=added_late,
                )
        if best_f is not None:
            plan.best_feasible[day] = best_f
        plan.best_relaxed[day] = best_r
    return plan


# ---------------------------------------------------------------------------
# search state


class WorkingTerritory:
    """Mutable territory state: members, per-day visit lists, cached geometry."""

    __slots__ = ("tid", "members", "day_visits", "perimeter", "area_sum", "sqrt_sum", "travel_minutes")

    def __init__(self, tid: int, members: Iterable[int], day_visits: Dict[int, List[int]],
                 perimeter: float, area_sum: float, sqrt_sum: float, travel_minutes: float):
        self.tid = tid
        self.members = set(members)
        self.day_visits = day_visits
        self.perimeter = perimeter
        self.area_sum = area_sum
        self.sqrt_sum = sqrt_sum
        self.travel_minutes = travel_minutes

    # -- construction

    @classmethod
    def build(cls, tid: int, members: Iterable[int], day_visits: Dict[int, List[int]], instance: Instance) -> "WorkingTerritory":
        members = set(members)
        geo = instance.geometry
        ft = fast_tables(instance)
        perimeter = geo.territory_perimeter(members) if members else 0.0
        area_sum = sum(geo.unit(i).area for i in members)
        sqrt_sum = sum(geo.unit(i).sqrt_area for i in members)
        travel = sum(route_travel_minutes(v, ft) for v in day_visits.values())
        return cls(tid, members, {d: list(v) for d, v in day_visits.items()}, perimeter, area_sum, sqrt_sum, travel)

    def clone(self) -> "WorkingTerritory":
        return WorkingTerritory(
            self.tid, set(self.members), {d: list(v) for d, v in self.day_visits.items()},
            self.perimeter, self.area_sum, self.sqrt_sum, self.travel_minutes,
        )

    # -- geometry caches

    def compactness(self, mode: CompactnessMode) -> float:
        if not self.members:
            return 0.0
        denom = math.sqrt(self.area_sum) if mode is CompactnessMode.SQRT_OF_SUM else self.sqrt_sum
        return self.perimeter / denom

    def compactness_with(self, unit: int, instance: Instance, mode: CompactnessMode) -> float:
        """CR after hypothetically adding ``unit``; no mutation."""
        geo = instance.geometry
        cell = geo.unit(unit)
        shared = sum(l for j, l in cell.neighbors if j in self.members)
        perim = self.perimeter + cell.perimeter - 2.0 * shared
        area = self.area_sum + cell.area
        sqrt_sum = self.sqrt_sum + cell.sqrt_area
        denom = math.sqrt(area) if mode is CompactnessMode.SQRT_OF_SUM else sqrt_sum
        return perim / denom

    def is_adjacent_to(self, unit: int, instance: Instance) -> bool:
        nbrs = instance.geometry.neighbors_of(unit)
        return any(j in self.members for j in nbrs)

    # -- mutation

    def add_member(self, unit: int, positions: Mapping[int, int], instance: Instance):
        """Insert ``unit`` into the member set and its active days' routes."""
        geo = instance.geometry
        ft = fast_tables(instance)
        cell = geo.unit(unit)
        shared = sum(l for j, l in cell.neighbors if j in self.members)
        self.perimeter += cell.perimeter - 2.0 * shared
        self.area_sum += cell.area
        self.sqrt_sum += cell.sqrt_area
        self.members.add(unit)
        for day in ft.active_days[unit]:
            visits = self.day_visits.setdefault(day, [])
            self.travel_minutes -= route_travel_minutes(visits, ft)
            visits.insert(positions[day], unit)
            self.travel_minutes += route_travel_minutes(visits, ft)

    def remove_member(self, unit: int, instance: Instance):
        geo = instance.geometry
        ft = fast_tables(instance)
        cell = geo.unit(unit)
        self.members.discard(unit)
        shared = sum(l for j, l in cell.neighbors if j in self.members)
        self.perimeter -= cell.perimeter - 2.0 * shared
        self.area_sum -= cell.area
        self.sqrt_sum -= cell.sqrt_area
        for day in ft.active_days[unit]:
            visits = self.day_visits.get(day)
            if visits and unit in visits:
                self.travel_minutes -= route_travel_minutes(visits, ft)
                visits.remove(unit)
                if visits:
                    self.travel_minutes += route_travel_minutes(visits, ft)
                else:
                    del self.day_visits[day]

    def replace_route(self, day: int, visits: List[int], ft: _FastTables):
        old = self.day_visits.get(day, [])
        self.travel_minutes += route_travel_minutes(visits, ft) - route_travel_minutes(old, ft)
        if visits:
            self.day_visits[day] = visits
        else:
            self.day_visits.pop(day, None)

    # -- evaluation

    def penalty_terms(self, ft: _FastTables) -> Tuple[float, float, float]:
        """(capacity excess, lateness incl. overtime, overtime) over all days."""
        cap = 0.0
        late = 0.0
        over = 0.0
        for day, visits in self.day_visits.items():
            _, lateness, overtime, load = route_metrics(visits, day, ft)
            late += lateness + overtime
            over += overtime
            if load > ft.cap:
                cap += load - ft.cap
        return cap, late, over

    def is_route_feasible(self, ft: _FastTables) -> bool:
        for day, visits in self.day_visits.items():
            _, lateness, overtime, load = route_metrics(visits, day, ft)
            if lateness > _EPS or overtime > _EPS or load > ft.cap + _EPS:
                return False
        return True


class WorkingSolution:
    """Mutable partition state used by the elimination and merge loops."""

    __slots__ = ("territories", "owner")

    def __init__(self, territories: Dict[int, WorkingTerritory], owner: Dict[int, int]):
        self.territories = territories
        self.owner = owner

    @classmethod
    def from_solution(cls, solution: Solution, instance: Instance) -> "WorkingSolution":
        territories = {}
        owner = {}
        for terr in solution.territories:
            if not terr.members:
                continue
            wt = WorkingTerritory.build(
                terr.territory_id,
                terr.members,
                {d: list(r.visits) for d, r in terr.routes.items()},
                instance,
            )
            territories[wt.tid] = wt
            for i in wt.members:
                owner[i] = wt.tid
        return cls(territories, owner)

    def clone(self) -> "WorkingSolution":
        return WorkingSolution(
            {tid: wt.clone() for tid, wt in self.territories.items()},
            dict(self.owner),
        )

    @property
    def num_territories(self) -> int:
        return len(self.territories)

    def total_travel_minutes(self) -> float:
        return sum(wt.travel_minutes for wt in self.territories.values())

    def total_compactness(self, mode: CompactnessMode) -> float:
        return sum(wt.compactness(mode) for wt in self.territories.values())

    def penalty(self, instance: Instance) -> PenaltyBreakdown:
        ft = fast_tables(instance)
        cap = late = over = 0.0
        for wt in self.territories.values():
            c, l, o = wt.penalty_terms(ft)
            cap += c
            late += l
            over += o
        return PenaltyBreakdown(capacity_excess=cap, lateness=late, overtime=over)

    def to_solution(self, instance: Instance) -> Solution:
        """Materialize model territories with relaxed earliest-start schedules."""
        territories = []
        for tid in sorted(self.territories):
            wt = self.territories[tid]
            routes = {}
            for day in sorted(wt.day_visits):
                res = propagate_schedule(wt.day_visits[day], day, instance, relaxed=True)
                routes[day] = res.route
            territories.append(Territory(territory_id=tid, members=tuple(sorted(wt.members)), routes=routes))
        return Solution(territories=territories, instance_name=instance.name)


# ---------------------------------------------------------------------------
# local search: intra-route 2-opt


def two_opt(
    visits: Sequence[int], day: int, instance: Instance, objective: str = "travel",
    max_sweeps: int = 200,
) -> List[int]:
    """First-improvement 2-opt (segment reversal) to local optimality.

    ``objective="travel"`` only accepts reversals that keep the route fully
    feasible and strictly shorten it.  ``objective="penalty"`` orders routes
    by (violation, travel) lexicographically, so it never worsens the
    violation total and breaks ties toward shorter travel.
    """
    if objective not in ("travel", "penalty"):
        raise ValueError(f"unknown 2-opt objective: {objective!r}")
    ft = fast_tables(instance)
    route = list(visits)
    n = len(route)
    if n < 2:
        return route

    def score(seq):
        _, late, over, _ = route_metrics(seq, day, ft)
        travel = route_travel_minutes(seq, ft)
        return late + over, travel

    cur_pen, cur_travel = score(route)
    for _ in range(max_sweeps):
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                trial = route[:i] + route[i : j + 1][::-1] + route[j + 1 :]
                pen, travel = score(trial)
                if objective == "travel":
                    ok = pen <= _EPS and travel < cur_travel - _EPS
                else:
                    ok = (pen < cur_pen - _EPS) or (
                        pen <= cur_pen + _EPS and travel < cur_travel - _EPS
                    )
                if ok:
                    route = trial
                    cur_pen, cur_travel = pen, travel
                    improved = True
                    break
            if improved:
                break
        if not improved:
            break
    return route


def two_opt_sweep(work: WorkingSolution, instance: Instance, objective: str) -> bool:
    """2-opt every route of every territory once; True if anything improved."""
    ft = fast_tables(instance)
    improved = False
    for tid in sorted(work.territories):
        wt = work.territories[tid]
        for day in sorted(wt.day_visits):
            old = wt.day_visits[day]
            new = two_opt(old, day, instance, objective=objective)
            if new != old:
                wt.replace_route(day, new, ft)
                improved = True
    return improved


# ---------------------------------------------------------------------------
# local search: inter-territory relocation


def _removal_admissible(wt: WorkingTerritory, unit: int, instance: Instance, mode: CompactnessMode, bound: float) -> bool:
    rest = wt.members - {unit}
    if not rest:
        return False  # relocation never empties a territory
    if not instance.geometry.is_contiguous(rest):
        return False
    geo = instance.geometry
    cell = geo.unit(unit)
    shared = sum(l for j, l in cell.neighbors if j in rest)
    perim = wt.perimeter - (cell.perimeter - 2.0 * shared)
    area = wt.area_sum - cell.area
    sqrt_sum = wt.sqrt_sum - cell.sqrt_area
    denom = math.sqrt(area) if mode is CompactnessMode.SQRT_OF_SUM else sqrt_sum
    return perim / denom <= bound + _EPS


def _try_relocate_once(
    work: WorkingSolution,
    instance: Instance,
    objective: str,
    travel_budget: Optional[float],
) -> bool:
    """Scan customers in id order; apply the first strictly improving move."""
    ft = fast_tables(instance)
    geo = instance.geometry
    mode = instance.compactness_mode
    bound = instance.compactness_bound
    for unit in sorted(work.owner):
        src_tid = work.owner[unit]
        src = work.territories[src_tid]
        if len(src.members) <= 1:
            continue
        if not _removal_admissible(src, unit, instance, mode, bound):
            continue
        nbr_tids = sorted(
            {work.owner[j] for j in geo.neighbors_of(unit) if j in work.owner and work.owner[j] != src_tid}
        )
        if not nbr_tids:
            continue
        if objective == "compactness":
            src_pen_cap, src_pen_late, _ = src.penalty_terms(ft)
            if src_pen_cap > _EPS or src_pen_late > _EPS:
                continue  # compactness moves only reshape feasible solutions
        base_cr_src = src.compactness(mode)
        for dst_tid in nbr_tids:
            dst = work.territories[dst_tid]
            if dst.compactness_with(unit, instance, mode) > bound + _EPS:
                continue
            plan = best_insertion(unit, dst, instance)
            if objective == "compactness":
                if not plan.feasible:
                    continue
                after_src = src.clone()
                after_src.remove_member(unit, instance)
                if not after_src.is_route_feasible(ft):
                    continue  # only with triangle-violating travel matrices
                cr_gain = (base_cr_src + dst.compactness(mode)) - (
                    after_src.compactness(mode) + dst.compactness_with(unit, instance, mode)
                )
                if cr_gain <= 1e-9:
                    continue
                if travel_budget is not None:
                    delta_travel = plan.total_delta + (after_src.travel_minutes - src.travel_minutes)
                    if work.total_travel_minutes() + delta_travel > travel_budget + 1e-6:
                        continue
                src.remove_member(unit, instance)
                dst.add_member(unit, plan.chosen(relaxed=False), instance)
                work.owner[unit] = dst_tid
                return True
            else:  # penalty objective
                cap0_s, late0_s, _ = src.penalty_terms(ft)
                cap0_d, late0_d, _ = dst.penalty_terms(ft)
                before = cap0_s + late0_s + cap0_d + late0_d
                src_trial = src.clone()
                dst_trial = dst.clone()
                src_trial.remove_member(unit, instance)
                dst_trial.add_member(unit, plan.chosen(relaxed=True), instance)
                cap1_s, late1_s, _ = src_trial.penalty_terms(ft)
                cap1_d, late1_d, _ = dst_trial.penalty_terms(ft)
                after = cap1_s + late1_s + cap1_d + late1_d
                if after < before - _EPS:
                    work.territories[src_tid] = src_trial
                    work.territories[dst_tid] = dst_trial
                    work.owner[unit] = dst_tid
                    return True
    return False


def relocate(
    work: WorkingSolution,
    instance: Instance,
    objective: str = "compactness",
    travel_budget: Optional[float] = None,
    max_moves: int = 10000,
) -> bool:
    """Single-customer inter-territory relocation to local optimality.

    A move shifts one customer (all of its days at once) to an adjacent
    territory; it must keep both territories contiguous and within the
    compactness bound and must strictly improve the stated objective
    (total compactness ratio, or the violation total for repair).
    Returns True if at least one move was applied.
    """
    if objective not in ("compactness", "penalty"):
        raise ValueError(f"unknown relocation objective: {objective!r}")
    if work.num_territories < 2:
        return False
    any_move = False
    for _ in range(max_moves):
        if not _try_relocate_once(work, instance, objective, travel_budget):
            break
        any_move = True
    return any_move


# ---------------------------------------------------------------------------
# penalized repair (alternating 2-opt / relocation)


def repair_penalized(
    work: WorkingSolution,
    instance: Instance,
    max_alternations: int = 50,
) -> bool:
    """Alternate penalty-objective 2-opt and relocation sweeps.

    Stops when the violation total reaches zero, a full alternation brings no
    improvement, or the alternation cap is hit.  Returns True iff the state
    ended feasible.
    """
    for _ in range(max_alternations):
        pen = work.penalty(instance)
        if pen.combined <= _EPS:
            return True
        improved = two_opt_sweep(work, instance, objective="penalty")
        improved |= relocate(work, instance, objective="penalty")
        if work.penalty(instance).combined <= _EPS:
            return True
        if not improved:
            return False
    return work.penalty(instance).combined <= _EPS
