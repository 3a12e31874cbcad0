"""Instance generators: Solomon-derived small instances and synthetic months.

Small instances take the first customers of a Solomon VRPTW file verbatim
(coordinates, demands, windows, service times), halve the vehicle capacity,
and spread activity over a short horizon with a per-customer-day service
probability.  Monthly instances are synthetic: clustered customers around a
central depot, shift-style time windows, sparse daily activity matching a
target fraction.  All generators are pure functions of their inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CompactnessMode
from .model import Instance

# shift windows for monthly instances (minutes into the workday)
_SHIFTS = ((0.0, 180.0), (60.0, 240.0), (120.0, 300.0), (180.0, 360.0), (240.0, 420.0), (0.0, 420.0))
_REGION = 180.0                    # square side, in travel minutes
_CLUSTER_SIZE = 150                # target customers per spatial cluster


class SolomonFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SolomonCustomer:
    cust_id: int
    x: float
    y: float
    demand: float
    ready: float
    due: float
    service: float


@dataclass(frozen=True)
class SolomonFile:
    name: str
    vehicle_count: int
    capacity: float
    rows: Tuple[SolomonCustomer, ...]   # rows[0] is the depot

    @property
    def depot(self) -> SolomonCustomer:
        return self.rows[0]

    @property
    def customers(self) -> Tuple[SolomonCustomer, ...]:
        return self.rows[1:]


def parse_solomon(text: str) -> SolomonFile:
    """Parse the published Solomon VRPTW text layout."""
    lines = text.splitlines()
    name = None
    vehicle_idx = None
    customer_idx = None
    for idx, line in enumerate(lines):
        token = line.strip()
        if name is None and token:
            name = token
            continue
        if token.upper() == "VEHICLE":
            vehicle_idx = idx
        elif token.upper() == "CUSTOMER":
            customer_idx = idx
    if name is None:
        raise SolomonFormatError("empty file: missing instance name")
    if vehicle_idx is None:
        raise SolomonFormatError("missing VEHICLE section")
    if customer_idx is None:
        raise SolomonFormatError("missing CUSTOMER section")

    vehicle_count = capacity = None
    for idx in range(vehicle_idx + 1, customer_idx):
        parts = lines[idx].split()
        if len(parts) == 2 and all(_is_number(p) for p in parts):
            vehicle_count, capacity = int(float(parts[0])), float(parts[1])
            break
    if capacity is None:
        raise SolomonFormatError("VEHICLE section has no NUMBER/CAPACITY row")

    rows: List[SolomonCustomer] = []
    for idx in range(customer_idx + 1, len(lines)):
        parts = lines[idx].split()
        if not parts:
            continue
        if not _is_number(parts[0]):
            continue  # column header line
        if len(parts) != 7 or not all(_is_number(p) for p in parts):
            raise SolomonFormatError(f"line {idx + 1}: malformed customer row: {lines[idx]!r}")
        vals = [float(p) for p in parts]
        rows.append(
            SolomonCustomer(
                cust_id=int(vals[0]), x=vals[1], y=vals[2], demand=vals[3],
                ready=vals[4], due=vals[5], service=vals[6],
            )
        )
    if not rows:
        raise SolomonFormatError("CUSTOMER section has no data rows")
    if rows[0].cust_id != 0:
        raise SolomonFormatError("first customer row must be the depot (id 0)")
    for pos, row in enumerate(rows):
        if row.cust_id != pos:
            raise SolomonFormatError(f"customer rows must be numbered consecutively, got {row.cust_id} at position {pos}")
    return SolomonFile(name=name, vehicle_count=vehicle_count, capacity=capacity, rows=tuple(rows))


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def bundled_solomon_names() -> List[str]:
    root = resources.files("tddmp") / "data" / "solomon"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


def load_bundled_solomon(name: str) -> SolomonFile:
    """Load one of the Solomon-derived files shipped with the package."""
    path = resources.files("tddmp") / "data" / "solomon" / f"{name}.txt"
    return parse_solomon(path.read_text())


# ---------------------------------------------------------------------------
# small instances


@dataclass(frozen=True)
class GeneratorParams:
    customer_count: int = 10
    horizon_days: int = 5
    service_frequency: float = 0.7
    capacity_factor: float = 0.5
    rng_seed: int = 0
    compactness_bound: float = 10.0
    compactness_mode: CompactnessMode = CompactnessMode.SUM_OF_SQRTS

    def __post_init__(self):
        if not 0 < self.service_frequency <= 1:
            raise ValueError("service_frequency must be in (0, 1]")
        if self.customer_count < 1:
            raise ValueError("customer_count must be >= 1")
        if self.horizon_days < 1:
            raise ValueError("horizon_days must be >= 1")


def make_small_instance(solomon: SolomonFile, params: GeneratorParams) -> Instance:
    """Multi-day instance from the first ``customer_count`` Solomon customers.

    Coordinates, demands, windows, and service times are taken verbatim;
    capacity is scaled by ``capacity_factor``; each customer-day is active
    with probability ``service_frequency`` (seeded, independent draws);
    travel times are Euclidean with the time unit equal to the distance unit.
    """
    k = params.customer_count
    if k > len(solomon.customers):
        raise ValueError(f"instance {solomon.name} has only {len(solomon.customers)} customers")
    rows = [solomon.depot] + list(solomon.customers[:k])
    coords = np.array([[r.x, r.y] for r in rows], dtype=float)
    diff = coords[:, None, :] - coords[None, :, :]
    travel = np.sqrt((diff ** 2).sum(axis=2))
    days = params.horizon_days
    rng = np.random.default_rng(np.random.SeedSequence([params.rng_seed, 0x501]))
    demands = np.zeros((k + 1, days), dtype=float)
    for i in range(1, k + 1):
        for d in range(days):
            if rng.random() < params.service_frequency:
                demands[i, d] = rows[i].demand
    capacity = math.floor(params.capacity_factor * solomon.capacity)
    h = solomon.depot.due
    return Instance.build(
        name=f"{solomon.name}-n{k}-d{days}-s{params.rng_seed}",
        coords=coords,
        travel=travel,
        demands=demands,
        service=[r.service for r in rows],
        window_open=[r.ready for r in rows],
        window_close=[r.due for r in rows],
        capacity=capacity,
        workday=h,
        compactness_bound=params.compactness_bound,
        compactness_mode=params.compactness_mode,
    )


# ---------------------------------------------------------------------------
# monthly instances


@dataclass(frozen=True)
class MonthlyProfile:
    """Target statistics for one synthetic month (defaults mirror a typical
    distribution-center month: ~23 working days, ~1784 customers, ~19.2%
    of them active per day, ~11.5% customer turnover between months)."""

    name: str = "monthly"
    days: int = 23
    customers: int = 1784
    active_fraction: float = 0.192
    new_fraction: float = 0.115
    capacity: float = 5000.0
    workday: float = 600.0
    mean_order_kg: float = 300.0
    compactness_bound: float = 10.0
    compactness_mode: CompactnessMode = CompactnessMode.SQRT_OF_SUM

    def __post_init__(self):
        if not 0 < self.active_fraction <= 1:
            raise ValueError("active_fraction must be in (0, 1]")
        if not 0 <= self.new_fraction < 1:
            raise ValueError("new_fraction must be in [0, 1)")
        if self.customers < 1 or self.days < 1:
            raise ValueError("customers and days must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "MonthlyProfile":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown profile fields: {sorted(unknown)}")
        if "compactness_mode" in doc:
            doc = dict(doc)
            doc["compactness_mode"] = CompactnessMode.parse(doc["compactness_mode"])
        return cls(**doc)


def _place_customers(
    n: int, rng: np.random.Generator, centers: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Clustered spatial mixture inside the region square; returns (coords, centers)."""
    if centers is None:
        n_clusters = max(1, math.ceil(n / _CLUSTER_SIZE))
        centers = rng.uniform(0.15 * _REGION, 0.85 * _REGION, size=(n_clusters, 2))
    sigma = _REGION / 15.0
    lo, hi = 0.02 * _REGION, 0.98 * _REGION
    pts = np.empty((n, 2), dtype=float)
    for i in range(n):
        if rng.random() < 0.8:
            c = centers[rng.integers(len(centers))]
            p = rng.normal(c, sigma, size=2)
        else:
            p = rng.uniform(lo, hi, size=2)
        pts[i] = np.clip(p, lo, hi)
    return pts, centers


def _dedupe(points: np.ndarray, depot: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Nudge coincident sites apart; Voronoi cells need distinct generators."""
    all_pts = np.vstack([depot[None, :], points])
    for _ in range(100):
        order = np.lexsort((all_pts[:, 1], all_pts[:, 0]))
        dup = None
        for a, b in zip(order[:-1], order[1:]):
            if np.hypot(*(all_pts[a] - all_pts[b])) < 1e-6 * _REGION:
                dup = b if b != 0 else a
                break
        if dup is None:
            return all_pts[1:]
        all_pts[dup] += rng.uniform(-0.002 * _REGION, 0.002 * _REGION, size=2)
    raise RuntimeError("could not separate coincident customer sites")


def _activity_matrix(
    n: int, days: int, fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Bernoulli activity, redrawn until the realized mean is within 2pp of target."""
    for _ in range(200):
        act = rng.random((n, days)) < fraction
        if abs(act.mean() - fraction) <= 0.02:
            return act
    raise RuntimeError("could not match the target active fraction")


def _draw_demands(
    active: np.ndarray, profile: MonthlyProfile, rng: np.random.Generator
) -> np.ndarray:
    n, days = active.shape
    mu = math.log(profile.mean_order_kg)
    vals = rng.lognormal(mean=mu, sigma=0.7, size=(n, days))
    vals = np.clip(np.round(vals, 1), 20.0, min(2000.0, profile.capacity))
    return np.where(active, vals, 0.0)


def _windows_services(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    shifts = np.array(_SHIFTS)
    pick = rng.integers(0, len(shifts), size=n)
    opens = shifts[pick, 0]
    closes = shifts[pick, 1]
    services = np.round(rng.uniform(5.0, 65.0, size=n), 1)
    return opens, closes, services


def _assemble_month(
    name: str,
    coords_cust: np.ndarray,
    opens: np.ndarray,
    closes: np.ndarray,
    services: np.ndarray,
    profile: MonthlyProfile,
    rng: np.random.Generator,
) -> Instance:
    n = len(coords_cust)
    depot = np.array([_REGION / 2.0, _REGION / 2.0])
    coords = np.vstack([depot[None, :], coords_cust])
    diff = coords[:, None, :] - coords[None, :, :]
    travel = np.sqrt((diff ** 2).sum(axis=2))
    active = _activity_matrix(n, profile.days, profile.active_fraction, rng)
    q = _draw_demands(active, profile, rng)
    demands = np.vstack([np.zeros((1, profile.days)), q])
    return Instance.build(
        name=name,
        coords=coords,
        travel=travel,
        demands=demands,
        service=np.concatenate([[0.0], services]),
        window_open=np.concatenate([[0.0], opens]),
        window_close=np.concatenate([[profile.workday], closes]),
        capacity=profile.capacity,
        workday=profile.workday,
        compactness_bound=profile.compactness_bound,
        compactness_mode=profile.compactness_mode,
    )


def make_monthly_instance(profile: MonthlyProfile, rng_seed: int = 0) -> Instance:
    """One synthetic month with the profile's size and activity statistics."""
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x0a11]))
    pts, _ = _place_customers(profile.customers, rng)
    depot = np.array([_REGION / 2.0, _REGION / 2.0])
    pts = _dedupe(pts, depot, rng)
    opens, closes, services = _windows_services(profile.customers, rng)
    return _assemble_month(
        f"{profile.name}-s{rng_seed}", pts, opens, closes, services, profile, rng
    )


def make_month_pair(
    profile: MonthlyProfile, rng_seed: int = 0
) -> Tuple[Instance, Instance, Dict[int, int]]:
    """Two consecutive months sharing ``1 - new_fraction`` of their customers.

    Returns (month1, month2, shared) where ``shared`` maps month-1 customer
    ids to the ids of the same physical customers in month 2.  Retained
    customers keep coordinates, windows, and service times; activity and
    demands are fresh draws.  New customers follow the same spatial process.
    """
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x0a12]))
    n = profile.customers
    pts1, centers = _place_customers(n, rng)
    depot = np.array([_REGION / 2.0, _REGION / 2.0])
    pts1 = _dedupe(pts1, depot, rng)
    opens1, closes1, services1 = _windows_services(n, rng)
    month1 = _assemble_month(
        f"{profile.name}-s{rng_seed}-m1", pts1, opens1, closes1, services1, profile, rng
    )

    n_new = int(round(profile.new_fraction * n))
    keep = np.sort(rng.choice(np.arange(1, n + 1), size=n - n_new, replace=False))
    shared = {int(old): pos + 1 for pos, old in enumerate(keep)}

    pts_new, _ = _place_customers(n_new, rng, centers=centers) if n_new else (np.empty((0, 2)), centers)
    pts2 = np.vstack([pts1[keep - 1], pts_new])
    pts2 = _dedupe(pts2, depot, rng)
    opens_new, closes_new, services_new = _windows_services(n_new, rng)
    opens2 = np.concatenate([opens1[keep - 1], opens_new])
    closes2 = np.concatenate([closes1[keep - 1], closes_new])
    services2 = np.concatenate([services1[keep - 1], services_new])
    month2 = _assemble_month(
        f"{profile.name}-s{rng_seed}-m2", pts2, opens2, closes2, services2, profile, rng
    )
    return month1, month2, shared
