"""Brute-force minimum-territory oracle for tiny instances.

Enumerates all set partitions of the customers, keeps those whose blocks are
contiguous and compact, and certifies each block-day by a Held-Karp style
dynamic program over visit subsets with time windows, capacity, and the
workday return bound.  Exponential on purpose; guarded to desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from ..model import Instance, Route, Solution, Territory, propagate_schedule, validate

_EPS = 1e-9


class OracleGuardError(ValueError):
    """Instance too large for exhaustive enumeration."""


@dataclass(frozen=True)
class OracleLimits:
    max_customers: int = 8
    max_days: int = 3
    max_partitions: int = 500_000


@dataclass
class OracleResult:
    status: str                      # "optimal" | "infeasible" | "unknown"
    optimum: Optional[int]           # best bound found when status == "unknown"
    solution: Optional[Solution]
    partitions_seen: int


def _day_sequence(
    members: Sequence[int], day: int, instance: Instance
) -> Optional[List[int]]:
    """A feasible visit order for the day's active members, or None.

    Exact subset DP on earliest service starts; earliest-start schedules
    dominate, so feasibility here is feasibility outright.
    """
    active = [i for i in members if instance.is_active(i, day)]
    if not active:
        return []
    if sum(instance.demands[i, day] for i in active) > instance.capacity + _EPS:
        return None
    t = instance.travel
    a = instance.window_open
    b = instance.window_close
    g = instance.service
    depart = float(instance.window_open[0])
    m = len(active)
    full = (1 << m) - 1
    # dp[(mask, last)] = earliest service start at active[last] after visiting mask
    dp: Dict[Tuple[int, int], float] = {}
    parent: Dict[Tuple[int, int], Optional[Tuple[int, int]]] = {}
    for j, cj in enumerate(active):
        start = max(float(a[cj]), depart + float(t[0, cj]))
        if start <= float(b[cj]) + _EPS:
            dp[(1 << j, j)] = start
            parent[(1 << j, j)] = None
    for mask in range(1, full + 1):
        for last in range(m):
            key = (mask, last)
            if key not in dp:
                continue
            s_last = dp[key]
            cl = active[last]
            for nxt in range(m):
                if mask & (1 << nxt):
                    continue
                cn = active[nxt]
                start = max(float(a[cn]), s_last + float(g[cl]) + float(t[cl, cn]))
                if start > float(b[cn]) + _EPS:
                    continue
                nkey = (mask | (1 << nxt), nxt)
                if nkey not in dp or start < dp[nkey] - _EPS:
                    dp[nkey] = start
                    parent[nkey] = key
    best_last = None
    best_ret = math.inf
    for last in range(m):
        key = (full, last)
        if key not in dp:
            continue
        cl = active[last]
        ret = dp[key] + float(g[cl]) + float(t[cl, 0])
        if ret < best_ret - _EPS:
            best_ret = ret
            best_last = last
    if best_last is None or best_ret > instance.workday + _EPS:
        return None
    seq: List[int] = []
    key: Optional[Tuple[int, int]] = (full, best_last)
    while key is not None:
        seq.append(active[key[1]])
        key = parent[key]
    seq.reverse()
    return seq


def _block_routes(
    block: FrozenSet[int], instance: Instance
) -> Optional[Dict[int, List[int]]]:
    """Feasible per-day visit orders for a candidate territory, or None."""
    if not instance.geometry.is_contiguous(block):
        return None
    cr = instance.geometry.compactness_ratio(block, instance.compactness_mode)
    if cr > instance.compactness_bound + _EPS:
        return None
    routes: Dict[int, List[int]] = {}
    members = sorted(block)
    for day in instance.days:
        seq = _day_sequence(members, day, instance)
        if seq is None:
            return None
        if seq:
            routes[day] = seq
    return routes


def _partitions(items: Sequence[int]):
    """All set partitions, yielded as lists of lists (canonical order)."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for sub in _partitions(rest):
        for i in range(len(sub)):
            yield sub[:i] + [[first] + sub[i]] + sub[i + 1 :]
        yield [[first]] + sub


def exact_solve(instance: Instance, limits: OracleLimits = OracleLimits()) -> OracleResult:
    """Provably minimum number of territories by exhaustive partitioning."""
    if instance.n > limits.max_customers:
        raise OracleGuardError(
            f"{instance.n} customers exceed the oracle guard ({limits.max_customers})"
        )
    if instance.num_days > limits.max_days:
        raise OracleGuardError(
            f"{instance.num_days} days exceed the oracle guard ({limits.max_days})"
        )
    customers = list(instance.customers)
    cache: Dict[FrozenSet[int], Optional[Dict[int, List[int]]]] = {}

    def block_ok(block: FrozenSet[int]) -> Optional[Dict[int, List[int]]]:
        if block not in cache:
            cache[block] = _block_routes(block, instance)
        return cache[block]

    best_count: Optional[int] = None
    best_blocks: Optional[List[FrozenSet[int]]] = None
    seen = 0
    truncated = False
    for part in _partitions(customers):
        seen += 1
        if seen > limits.max_partitions:
            truncated = True
            break
        if best_count is not None and len(part) >= best_count:
            continue
        blocks = [frozenset(b) for b in part]
        if all(block_ok(b) is not None for b in blocks):
            best_count = len(blocks)
            best_blocks = blocks

    if best_blocks is None:
        status = "unknown" if truncated else "infeasible"
        return OracleResult(status=status, optimum=None, solution=None, partitions_seen=seen)

    territories = []
    for block in sorted(best_blocks, key=min):
        routes_raw = block_ok(block)
        assert routes_raw is not None
        routes = {}
        for day, seq in routes_raw.items():
            res = propagate_schedule(seq, day, instance)
            assert res.feasible, "oracle route must propagate feasibly"
            routes[day] = res.route
        territories.append(
            Territory(territory_id=min(block), members=tuple(sorted(block)), routes=routes)
        )
    solution = Solution(territories=territories, instance_name=instance.name)
    status = "unknown" if truncated else "optimal"
    return OracleResult(
        status=status, optimum=best_count, solution=solution, partitions_seen=seen
    )


@dataclass(frozen=True)
class VerifyOutcome:
    status: str          # "optimal" | "suboptimal" | "infeasible"
    gap: int = 0
    oracle_optimum: Optional[int] = None


def verify_against_oracle(
    solution: Solution, instance: Instance, limits: OracleLimits = OracleLimits()
) -> VerifyOutcome:
    """Compare a candidate solution with the exhaustive optimum."""
    report = validate(instance, solution)
    oracle = exact_solve(instance, limits)
    if oracle.status != "optimal":
        raise OracleGuardError(f"oracle did not complete: {oracle.status}")
    assert oracle.optimum is not None
    if not report.ok:
        return VerifyOutcome(status="infeasible", oracle_optimum=oracle.optimum)
    count = solution.num_territories
    if count < oracle.optimum:
        raise RuntimeError(
            f"solution with {count} territories beats the oracle optimum "
            f"{oracle.optimum}; one of validator and oracle is wrong"
        )
    if count == oracle.optimum:
        return VerifyOutcome(status="optimal", oracle_optimum=oracle.optimum)
    return VerifyOutcome(
        status="suboptimal", gap=count - oracle.optimum, oracle_optimum=oracle.optimum
    )
