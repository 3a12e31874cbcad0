"""Instance and solution data model, JSON round-trip, and the full validator.

An instance couples the geometric side (basic-unit cells, adjacency) with the
routing side (travel times, per-day demands, time windows, capacity, workday)
over a multi-day horizon.  A solution partitions the customers into
territories, each carrying one route per day on which at least one member is
active.  ``validate`` certifies a solution against every restriction and is
the contract every solver path must satisfy.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CompactnessMode, GeometryTable, bounding_box_for, build_voronoi, from_polygons

SCHEMA_INSTANCE = "tddmp-1"
SCHEMA_SOLUTION = "tddmp-solution-1"

# Absolute tolerance for schedule arithmetic, in minutes.
TIME_EPS = 1e-6


class InstanceError(ValueError):
    """Instance data violates a structural invariant."""


class SolutionStructureError(ValueError):
    """Solution references ids or days that do not exist in the instance."""


# ---------------------------------------------------------------------------
# instance


@dataclass
class Instance:
    """One multi-period routing instance over nodes ``0..n`` (0 is the depot)."""

    name: str
    coords: np.ndarray           # (n+1, 2) planar positions
    travel: np.ndarray           # (n+1, n+1) minutes
    demands: np.ndarray          # (n+1, days) kg; row 0 is all zeros
    service: np.ndarray          # (n+1,) minutes; service[0] == 0
    window_open: np.ndarray      # (n+1,) minutes
    window_close: np.ndarray     # (n+1,) minutes
    capacity: float
    workday: float
    compactness_bound: float
    compactness_mode: CompactnessMode
    geometry: GeometryTable
    geometry_source: dict = field(default_factory=lambda: {"kind": "voronoi"})

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.travel = np.asarray(self.travel, dtype=float)
        self.demands = np.asarray(self.demands, dtype=float)
        self.service = np.asarray(self.service, dtype=float)
        self.window_open = np.asarray(self.window_open, dtype=float)
        self.window_close = np.asarray(self.window_close, dtype=float)
        self.compactness_mode = CompactnessMode.parse(self.compactness_mode)
        self._check()

    def _check(self):
        m = self.coords.shape[0]
        if self.travel.shape != (m, m):
            raise InstanceError("travel matrix shape mismatch")
        if self.demands.shape[0] != m or self.demands.ndim != 2:
            raise InstanceError("demand table shape mismatch")
        for arr, label in ((self.service, "service"), (self.window_open, "window_open"), (self.window_close, "window_close")):
            if arr.shape != (m,):
                raise InstanceError(f"{label} shape mismatch")
        if np.any(self.demands < 0):
            raise InstanceError("negative demand")
        if np.any(self.demands > self.capacity + 1e-9):
            bad = np.argwhere(self.demands > self.capacity + 1e-9)[0]
            raise InstanceError(
                f"demand of customer {bad[0]} on day {bad[1]} exceeds vehicle capacity"
            )
        if np.any(self.demands[0] > 0):
            raise InstanceError("depot cannot carry demand")
        if self.service[0] != 0:
            raise InstanceError("depot service time must be 0")
        if np.any(self.window_open > self.window_close):
            raise InstanceError("window_open > window_close for some node")
        if np.any(self.window_open < 0) or np.any(self.window_close > self.workday + 1e-9):
            raise InstanceError("time windows must lie inside [0, workday]")
        if np.any(self.travel < 0):
            raise InstanceError("negative travel time")
        if np.any(np.abs(np.diag(self.travel)) > 1e-12):
            raise InstanceError("travel[i][i] must be 0")
        for uid in range(m):
            if uid not in self.geometry:
                raise InstanceError(f"node {uid} missing from geometry table")
        self._warn_triangle()

    def _warn_triangle(self):
        t = self.travel
        m = t.shape[0]
        if m > 60:  # full check is cubic; sample on big instances
            rng = np.random.default_rng(0)
            ks = rng.integers(0, m, size=20)
        else:
            ks = range(m)
        worst = 0.0
        for k in ks:
            slack = t[:, None, k] + t[k, None, :].reshape(1, m) - t
            worst = min(worst, float(slack.min()))
        if worst < -1e-6 * max(1.0, float(t.max())):
            warnings.warn(
                f"travel times violate the triangle inequality by up to {-worst:.6g} minutes",
                stacklevel=3,
            )

    # ---- shape -----------------------------------------------------------

    @property
    def n(self) -> int:
        return self.coords.shape[0] - 1

    @property
    def num_days(self) -> int:
        return self.demands.shape[1]

    @property
    def days(self) -> range:
        return range(self.num_days)

    @property
    def customers(self) -> range:
        return range(1, self.n + 1)

    def is_active(self, customer: int, day: int) -> bool:
        return self.demands[customer, day] > 0

    def active_days(self, customer: int) -> List[int]:
        return [d for d in self.days if self.demands[customer, d] > 0]

    def active_customer_days(self, customers: Iterable[int]) -> int:
        ids = list(customers)
        if not ids:
            return 0
        return int(np.count_nonzero(self.demands[ids] > 0))

    # ---- construction helpers --------------------------------------------

    @classmethod
    def build(
        cls,
        name: str,
        coords: Sequence[Tuple[float, float]],
        travel: np.ndarray,
        demands: np.ndarray,
        service: Sequence[float],
        window_open: Sequence[float],
        window_close: Sequence[float],
        capacity: float,
        workday: float,
        compactness_bound: float = 10.0,
        compactness_mode: CompactnessMode | str = CompactnessMode.SQRT_OF_SUM,
        bounding_box=None,
    ) -> "Instance":
        """Build an instance, deriving cell geometry from the coordinates."""
        coords = np.asarray(coords, dtype=float)
        if bounding_box is None:
            bounding_box = bounding_box_for(coords)
        geometry = build_voronoi([tuple(p) for p in coords], bounding_box)
        return cls(
            name=name,
            coords=coords,
            travel=travel,
            demands=demands,
            service=np.asarray(service, dtype=float),
            window_open=np.asarray(window_open, dtype=float),
            window_close=np.asarray(window_close, dtype=float),
            capacity=float(capacity),
            workday=float(workday),
            compactness_bound=float(compactness_bound),
            compactness_mode=compactness_mode,
            geometry=geometry,
            geometry_source={"kind": "voronoi", "bounding_box": list(bounding_box)},
        )

    # ---- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        nodes = [
            {
                "id": i,
                "x": float(self.coords[i, 0]),
                "y": float(self.coords[i, 1]),
                "window": [float(self.window_open[i]), float(self.window_close[i])],
                "service": float(self.service[i]),
            }
            for i in range(self.n + 1)
        ]
        doc = {
            "schema": SCHEMA_INSTANCE,
            "name": self.name,
            "days": self.num_days,
            "capacity": self.capacity,
            "workday": self.workday,
            "compactness_bound": self.compactness_bound,
            "compactness_mode": self.compactness_mode.value,
            "nodes": nodes,
            "demands": [
                {"id": i, "q": [float(v) for v in self.demands[i]]} for i in self.customers
            ],
            "travel_times": [[float(v) for v in row] for row in self.travel],
            "geometry": self.geometry_source,
        }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Instance":
        if doc.get("schema") != SCHEMA_INSTANCE:
            raise InstanceError(f"unsupported instance schema: {doc.get('schema')!r}")
        nodes = sorted(doc["nodes"], key=lambda r: r["id"])
        if [r["id"] for r in nodes] != list(range(len(nodes))):
            raise InstanceError("node ids must be 0..n without gaps")
        m = len(nodes)
        days = int(doc["days"])
        coords = np.array([[r["x"], r["y"]] for r in nodes], dtype=float)
        window_open = np.array([r["window"][0] for r in nodes], dtype=float)
        window_close = np.array([r["window"][1] for r in nodes], dtype=float)
        service = np.array([r["service"] for r in nodes], dtype=float)
        demands = np.zeros((m, days), dtype=float)
        for row in doc["demands"]:
            i = int(row["id"])
            if not 1 <= i < m:
                raise InstanceError(f"demand row for unknown customer {i}")
            q = row["q"]
            if len(q) != days:
                raise InstanceError(f"demand row for customer {i} has {len(q)} days, expected {days}")
            demands[i] = q
        travel = np.array(doc["travel_times"], dtype=float)
        geo_src = doc.get("geometry", {"kind": "voronoi"})
        if geo_src.get("kind") == "polygons":
            geometry = GeometryTable.from_geojson(geo_src["geojson"])
        else:
            bbox = geo_src.get("bounding_box")
            bbox = tuple(bbox) if bbox else bounding_box_for(coords)
            geometry = build_voronoi([tuple(p) for p in coords], bbox)
            geo_src = {"kind": "voronoi", "bounding_box": list(bbox)}
        return cls(
            name=doc["name"],
            coords=coords,
            travel=travel,
            demands=demands,
            service=service,
            window_open=window_open,
            window_close=window_close,
            capacity=float(doc["capacity"]),
            workday=float(doc["workday"]),
            compactness_bound=float(doc["compactness_bound"]),
            compactness_mode=doc["compactness_mode"],
            geometry=geometry,
            geometry_source=geo_src,
        )

    @classmethod
    def from_json(cls, text: str) -> "Instance":
        return cls.from_json_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.travel, other.travel)
            and np.array_equal(self.demands, other.demands)
            and np.array_equal(self.service, other.service)
            and np.array_equal(self.window_open, other.window_open)
            and np.array_equal(self.window_close, other.window_close)
            and self.capacity == other.capacity
            and self.workday == other.workday
            and self.compactness_bound == other.compactness_bound
            and self.compactness_mode == other.compactness_mode
            and self.geometry_source == other.geometry_source
        )


# ---------------------------------------------------------------------------
# routes and schedules


@dataclass
class Route:
    """One day's visit sequence with its earliest-start schedule.

    The depot is implicit at both ends; ``starts[p]`` is the service start at
    ``visits[p]`` and ``waits[p]`` the pre-service idle time there.
    """

    day: int
    visits: List[int]
    starts: List[float]
    waits: List[float]

    def travel_time(self, instance: Instance) -> float:
        if not self.visits:
            return 0.0
        t = instance.travel
        total = t[0, self.visits[0]]
        for a, b in zip(self.visits, self.visits[1:]):
            total += t[a, b]
        total += t[self.visits[-1], 0]
        return float(total)

    def load(self, instance: Instance) -> float:
        return float(sum(instance.demands[i, self.day] for i in self.visits))

    def return_time(self, instance: Instance) -> float:
        if not self.visits:
            return float(instance.window_open[0])
        last = self.visits[-1]
        return float(self.starts[-1] + instance.service[last] + instance.travel[last, 0])


@dataclass
class ScheduleResult:
    """Outcome of forward schedule propagation along a visit sequence."""

    route: Optional[Route]
    reason: Optional[str] = None
    lateness: float = 0.0      # sum of (start - window_close)+ over visits
    overtime: float = 0.0      # (depot return - workday)+

    @property
    def feasible(self) -> bool:
        return self.reason is None and self.lateness <= TIME_EPS and self.overtime <= TIME_EPS


def propagate_schedule(
    visits: Sequence[int],
    day: int,
    instance: Instance,
    relaxed: bool = False,
) -> ScheduleResult:
    """Earliest-start schedule for ``visits`` on ``day``.

    The vehicle leaves the depot at the depot window opening; each visit
    starts at max(window open, arrival).  In strict mode the first missed
    window or a late depot return aborts with a reason.  In relaxed mode the
    schedule is always built and lateness / overtime are accumulated instead
    (late starts cascade; there is no clamping at the window close).
    """
    t = instance.travel
    starts: List[float] = []
    waits: List[float] = []
    now = float(instance.window_open[0])
    prev = 0
    for i in visits:
        i = int(i)
        if not 1 <= i <= instance.n:
            raise SolutionStructureError(f"unknown customer {i} in route")
        if not instance.is_active(i, day):
            raise SolutionStructureError(f"customer {i} is inactive on day {day}")
        arrival = now + float(instance.service[prev]) + float(t[prev, i])
        start = max(arrival, float(instance.window_open[i]))
        late = start - float(instance.window_close[i])
        if late > TIME_EPS and not relaxed:
            return ScheduleResult(
                route=None,
                reason=f"window missed at customer {i} by {late:.6g}",
            )
        starts.append(start)
        waits.append(start - arrival)
        now = start
        prev = i
    lateness = 0.0
    if relaxed:
        lateness = sum(
            max(0.0, s - float(instance.window_close[i])) for i, s in zip(visits, starts)
        )
    if visits:
        ret = now + float(instance.service[prev]) + float(t[prev, 0])
    else:
        ret = float(instance.window_open[0])
    overtime = max(0.0, ret - instance.workday)
    if overtime > TIME_EPS and not relaxed:
        return ScheduleResult(
            route=None,
            reason=f"depot return late by {overtime:.6g}",
        )
    route = Route(day=day, visits=[int(v) for v in visits], starts=starts, waits=waits)
    return ScheduleResult(route=route, lateness=lateness, overtime=overtime)


# ---------------------------------------------------------------------------
# territories and solutions


@dataclass
class Territory:
    """A set of customers served by one vehicle over the whole horizon."""

    territory_id: int
    members: Tuple[int, ...]
    routes: Dict[int, Route] = field(default_factory=dict)

    def __post_init__(self):
        self.members = tuple(sorted(int(i) for i in self.members))

    def perimeter(self, instance: Instance) -> float:
        return instance.geometry.territory_perimeter(self.members)

    def compactness(self, instance: Instance) -> float:
        return instance.geometry.compactness_ratio(self.members, instance.compactness_mode)


@dataclass
class Solution:
    """A partition of the customers into territories plus daily routes."""

    territories: List[Territory]
    instance_name: str = ""

    @property
    def num_territories(self) -> int:
        return sum(1 for t in self.territories if t.members)

    def territory_of(self) -> Dict[int, int]:
        owner: Dict[int, int] = {}
        for terr in self.territories:
            for i in terr.members:
                owner[i] = terr.territory_id
        return owner

    def to_json_dict(self) -> dict:
        return {
            "schema": SCHEMA_SOLUTION,
            "instance": self.instance_name,
            "territories": [
                {
                    "id": terr.territory_id,
                    "members": list(terr.members),
                    "routes": [
                        {
                            "day": r.day,
                            "visits": list(r.visits),
                            "starts": [float(s) for s in r.starts],
                            "waits": [float(w) for w in r.waits],
                        }
                        for _, r in sorted(terr.routes.items())
                    ],
                }
                for terr in self.territories
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Solution":
        if doc.get("schema") != SCHEMA_SOLUTION:
            raise InstanceError(f"unsupported solution schema: {doc.get('schema')!r}")
        territories = []
        for td in doc["territories"]:
            routes = {
                int(rd["day"]): Route(
                    day=int(rd["day"]),
                    visits=[int(v) for v in rd["visits"]],
                    starts=[float(s) for s in rd["starts"]],
                    waits=[float(w) for w in rd["waits"]],
                )
                for rd in td["routes"]
            }
            territories.append(
                Territory(territory_id=int(td["id"]), members=tuple(td["members"]), routes=routes)
            )
        return cls(territories=territories, instance_name=doc.get("instance", ""))

    @classmethod
    def from_json(cls, text: str) -> "Solution":
        return cls.from_json_dict(json.loads(text))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Solution):
            return NotImplemented
        return self.to_json_dict() == other.to_json_dict()


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    """One constraint violation; family names group the model's restrictions."""

    family: str                 # "2", "3", "10", "11-13", "14-16", "17-20"
    message: str
    territory: Optional[int] = None
    day: Optional[int] = None
    customer: Optional[int] = None
    magnitude: float = 0.0


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, *args, **kwargs):
        self.violations.append(Violation(*args, **kwargs))

    def by_family(self, family: str) -> List[Violation]:
        return [v for v in self.violations if v.family == family]

    def __str__(self) -> str:
        if self.ok:
            return "feasible (no violations)"
        lines = [f"{len(self.violations)} violation(s):"]
        lines += [
            f"  [{v.family}] {v.message}"
            for v in self.violations
        ]
        return "\n".join(lines)


def validate(instance: Instance, solution: Solution) -> ValidationReport:
    """Check ``solution`` against every restriction of the model.

    Returns an empty report iff the solution is feasible.  References to
    unknown customers or days raise ``SolutionStructureError`` instead of
    being reported, so structural garbage cannot masquerade as mere
    infeasibility.
    """
    report = ValidationReport()
    n = instance.n

    seen: Dict[int, int] = {}
    for terr in solution.territories:
        for i in terr.members:
            if not 1 <= i <= n:
                raise SolutionStructureError(f"territory {terr.territory_id} references unknown customer {i}")
            if i in seen:
                report.add(
                    "2",
                    f"customer {i} assigned to territories {seen[i]} and {terr.territory_id}",
                    territory=terr.territory_id,
                    customer=i,
                )
            seen[i] = terr.territory_id
    for i in instance.customers:
        if i not in seen:
            report.add("2", f"customer {i} is not assigned to any territory", customer=i)

    for terr in solution.territories:
        tid = terr.territory_id
        members = set(terr.members)
        if not members:
            report.add("2", f"territory {tid} is empty", territory=tid)
            continue

        # contiguity (flow constraints in the exact model)
        if not instance.geometry.is_contiguous(members):
            report.add(
                "11-13",
                f"territory {tid} is not contiguous",
                territory=tid,
            )

        # compactness
        cr = instance.geometry.compactness_ratio(members, instance.compactness_mode)
        if cr > instance.compactness_bound + 1e-9:
            report.add(
                "10",
                f"territory {tid} compactness {cr:.4f} exceeds bound {instance.compactness_bound}",
                territory=tid,
                magnitude=cr - instance.compactness_bound,
            )

        # day coverage within the territory
        for day in instance.days:
            if day in terr.routes and terr.routes[day].day != day:
                raise SolutionStructureError(
                    f"territory {tid}: route stored under day {day} is labelled {terr.routes[day].day}"
                )
            active = {i for i in members if instance.is_active(i, day)}
            route = terr.routes.get(day)
            visits = list(route.visits) if route is not None else []
            for i in visits:
                if not 1 <= i <= n:
                    raise SolutionStructureError(f"route of territory {tid} visits unknown customer {i}")
                if i not in members:
                    report.add(
                        "14-16",
                        f"territory {tid} visits customer {i} on day {day} but {i} is not a member",
                        territory=tid,
                        day=day,
                        customer=i,
                    )
                elif not instance.is_active(i, day):
                    report.add(
                        "2",
                        f"customer {i} is visited on day {day} but has no demand",
                        territory=tid,
                        day=day,
                        customer=i,
                    )
            counts = {i: visits.count(i) for i in set(visits)}
            for i, c in counts.items():
                if c > 1:
                    report.add(
                        "2",
                        f"customer {i} appears {c} times on day {day} of territory {tid}",
                        territory=tid,
                        day=day,
                        customer=i,
                    )
            for i in sorted(active - set(visits)):
                report.add(
                    "2",
                    f"customer {i} requires service on day {day} but territory {tid} does not visit it",
                    territory=tid,
                    day=day,
                    customer=i,
                )
            if route is None:
                continue

            # capacity
            load = route.load(instance)
            if load > instance.capacity + 1e-9:
                report.add(
                    "3",
                    f"territory {tid} day {day}: load {load:.6g} exceeds capacity {instance.capacity}",
                    territory=tid,
                    day=day,
                    magnitude=load - instance.capacity,
                )

            # schedule: recompute the earliest-start schedule and compare
            only_valid = [i for i in visits if i in members and instance.is_active(i, day)]
            if only_valid != visits:
                continue  # schedule checks are meaningless with structural defects above
            relaxed = propagate_schedule(visits, day, instance, relaxed=True)
            sched = relaxed.route
            assert sched is not None
            if relaxed.lateness > TIME_EPS:
                for i, s in zip(sched.visits, sched.starts):
                    late = s - float(instance.window_close[i])
                    if late > TIME_EPS:
                        report.add(
                            "17-20",
                            f"territory {tid} day {day}: start at customer {i} misses window by {late:.6g} min",
                            territory=tid,
                            day=day,
                            customer=i,
                            magnitude=late,
                        )
            if relaxed.overtime > TIME_EPS:
                report.add(
                    "17-20",
                    f"territory {tid} day {day}: depot return late by {relaxed.overtime:.6g} min",
                    territory=tid,
                    day=day,
                    magnitude=relaxed.overtime,
                )
            stored = list(zip(route.starts, route.waits))
            recomputed = list(zip(sched.starts, sched.waits))
            if len(stored) != len(recomputed):
                raise SolutionStructureError(
                    f"territory {tid} day {day}: schedule arrays do not match the visit count"
                )
            drift = max(
                (abs(a - b) + abs(wa - wb) for (a, wa), (b, wb) in zip(stored, recomputed)),
                default=0.0,
            )
            if drift > 1e-6:
                report.add(
                    "17-20",
                    f"territory {tid} day {day}: stored schedule deviates from the "
                    f"earliest-start recursion by {drift:.6g} min",
                    territory=tid,
                    day=day,
                    magnitude=drift,
                )
    return report


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class SolutionCost:
    territories: int
    total_travel_hours: float
    average_compactness: Optional[float]


def solution_cost(instance: Instance, solution: Solution) -> SolutionCost:
    """Territory count, total travel time in hours, mean compactness ratio."""
    minutes = 0.0
    crs = []
    for terr in solution.territories:
        if not terr.members:
            continue
        crs.append(instance.geometry.compactness_ratio(terr.members, instance.compactness_mode))
        for route in terr.routes.values():
            minutes += route.travel_time(instance)
    return SolutionCost(
        territories=solution.num_territories,
        total_travel_hours=minutes / 60.0,
        average_compactness=(sum(crs) / len(crs)) if crs else None,
    )
