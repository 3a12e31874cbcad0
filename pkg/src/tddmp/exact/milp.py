"""LP-format export of the exact territory-design model.

Emits the complete mixed-integer formulation in the CPLEX-style LP text
dialect: territory-count objective, assignment and capacity rows, compactness
rows over the linear sum-of-square-roots denominator, single-commodity-flow
contiguity, degree and depot-flow rows, person consistency, and big-M
activated start-time propagation (which also eliminates subtours).  Variable
names encode their indices (``x_i_j_k_d``); a registry of every variable and
row family is returned alongside the text so tests can audit the model shape.

Two deliberate deviations from a literal transcription, recorded in the row
comments:
  * the start-time rows multiply a binary by a continuous waiting time in the
    original statement; here the product is replaced by the equivalent big-M
    activation, keeping the waiting variables explicit;
  * the depot-flow rows allow a used vehicle to stay at the depot on days
    when no member is active (customers with zero demand are not visited, so
    forcing one departure per used vehicle and day would be unsatisfiable on
    such days).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from ..geometry import CompactnessMode
from ..model import Instance, Solution

_EPS = 1e-9


class MilpModeError(ValueError):
    """The proper square-root compactness denominator cannot be linearized."""


@dataclass
class MilpArtifacts:
    """Registry of what was emitted: name -> (kind, indices), family -> rows."""

    variables: Dict[str, Tuple] = field(default_factory=dict)
    families: Dict[str, List[str]] = field(default_factory=dict)
    big_m: float = 0.0
    num_vehicles: int = 0

    def add_var(self, name: str, kind: str, *indices: int):
        self.variables[name] = (kind, *indices)

    def add_row(self, family: str, name: str):
        self.families.setdefault(family, []).append(name)

    def count(self, family: str) -> int:
        return len(self.families.get(family, []))

    def vars_of_kind(self, kind: str) -> List[str]:
        return [n for n, spec in self.variables.items() if spec[0] == kind]


def _fmt(value: float) -> str:
    return f"{value:.12g}"


class _Row:
    __slots__ = ("name", "terms", "sense", "rhs")

    def __init__(self, name: str, sense: str, rhs: float):
        self.name = name
        self.terms: List[Tuple[float, str]] = []
        self.sense = sense
        self.rhs = rhs

    def add(self, coeff: float, var: str):
        if abs(coeff) > 0.0:
            self.terms.append((coeff, var))

    def render(self) -> str:
        if not self.terms:
            raise ValueError(f"row {self.name} has no terms")
        parts = []
        for pos, (coeff, var) in enumerate(self.terms):
            sign = "-" if coeff < 0 else ("+" if pos else "")
            mag = abs(coeff)
            coeff_txt = "" if abs(mag - 1.0) < 1e-15 else f"{_fmt(mag)} "
            parts.append(f"{sign} {coeff_txt}{var}".strip())
        return f" {self.name}: " + " ".join(parts) + f" {self.sense} {_fmt(self.rhs)}"


def emit_milp(
    instance: Instance, symmetry_breaking: bool = False
) -> Tuple[str, MilpArtifacts]:
    """Render the full model as LP text; also returns the registry.

    Requires the linear compactness denominator (sum of per-cell square
    roots); the vehicle set has one vehicle per customer so the fleet size
    never binds.
    """
    if instance.compactness_mode is not CompactnessMode.SUM_OF_SQRTS:
        raise MilpModeError(
            "the square root of a territory's total area is nonlinear; "
            "export requires the sum-of-square-roots compactness mode"
        )
    n = instance.n
    V = list(range(n + 1))
    C = list(range(1, n + 1))
    K = list(range(1, n + 1))
    D = list(instance.days)
    t = instance.travel
    g = instance.service
    a = instance.window_open
    b = instance.window_close
    h = instance.workday
    geo = instance.geometry
    F = instance.compactness_bound
    o = {(i, d): (1 if instance.is_active(i, d) else 0) for i in C for d in D}
    adj_c = {i: sorted(j for j in geo.neighbors_of(i) if 1 <= j <= n) for i in C}

    big_m = 2.0 * h + float(g.max()) + float(t.max())
    art = MilpArtifacts(big_m=big_m, num_vehicles=len(K))

    def x(i, j, k, d):
        return f"x_{i}_{j}_{k}_{d}"

    def y(i, k, d):
        return f"y_{i}_{k}_{d}"

    def z(k):
        return f"z_{k}"

    def zh(i, k):
        return f"zh_{i}_{k}"

    def zb(i, j, k):
        return f"zb_{i}_{j}_{k}"

    def w(i, k):
        return f"w_{i}_{k}"

    def s(i, d):
        return f"s_{i}_{d}"

    def e(j, d):
        return f"e_{j}_{d}"

    def u(i, j, k):
        return f"u_{i}_{j}_{k}"

    for k in K:
        art.add_var(z(k), "z", k)
    for i in C:
        for k in K:
            art.add_var(zh(i, k), "zhat", i, k)
            art.add_var(w(i, k), "w", i, k)
    for i in C:
        for j in C:
            if i != j:
                for k in K:
                    art.add_var(zb(i, j, k), "zbar", i, j, k)
    for i in V:
        for j in V:
            if i != j:
                for k in K:
                    for d in D:
                        art.add_var(x(i, j, k, d), "x", i, j, k, d)
    for i in C:
        for k in K:
            for d in D:
                art.add_var(y(i, k, d), "y", i, k, d)
    for i in V:
        for d in D:
            art.add_var(s(i, d), "s", i, d)
    for j in C:
        for d in D:
            art.add_var(e(j, d), "e", j, d)
    for i in C:
        for j in adj_c[i]:
            for k in K:
                art.add_var(u(i, j, k), "u", i, j, k)

    rows: List[_Row] = []

    def row(family: str, name: str, sense: str, rhs: float) -> _Row:
        r = _Row(name, sense, rhs)
        rows.append(r)
        art.add_row(family, name)
        return r

    # (2) serve every active customer-day exactly once
    for i in C:
        for d in D:
            r = row("2", f"c02_{i}_{d}", "=", o[(i, d)])
            for k in K:
                r.add(1.0, y(i, k, d))

    # (3) vehicle capacity per day
    for k in K:
        for d in D:
            r = row("3", f"c03_{k}_{d}", "<=", instance.capacity)
            for i in C:
                q = float(instance.demands[i, d])
                if q > 0:
                    r.add(q, y(i, k, d))

    # (4) a vehicle with an assigned customer is used
    for i in C:
        for k in K:
            r = row("4", f"c04_{i}_{k}", ">=", 0.0)
            r.add(1.0, z(k))
            r.add(-1.0, zh(i, k))

    # (5)-(6) day assignment <-> horizon assignment
    for i in C:
        for k in K:
            for d in D:
                r = row("5", f"c05_{i}_{k}_{d}", ">=", 0.0)
                r.add(1.0, zh(i, k))
                r.add(-1.0, y(i, k, d))
    for i in C:
        for k in K:
            r = row("6", f"c06_{i}_{k}", "<=", 0.0)
            r.add(1.0, zh(i, k))
            for d in D:
                r.add(-1.0, y(i, k, d))

    # (7)-(9) same-territory indicators
    for i in C:
        for j in C:
            if i == j:
                continue
            for k in K:
                r = row("7", f"c07_{i}_{j}_{k}", "<=", 0.0)
                r.add(1.0, zb(i, j, k))
                r.add(-1.0, zh(i, k))
                r = row("8", f"c08_{i}_{j}_{k}", "<=", 0.0)
                r.add(1.0, zb(i, j, k))
                r.add(-1.0, zh(j, k))
                r = row("9", f"c09_{i}_{j}_{k}", "<=", 1.0)
                r.add(1.0, zh(i, k))
                r.add(1.0, zh(j, k))
                r.add(-1.0, zb(i, j, k))

    # (10) territory perimeter bounded by F times the linear area term
    for k in K:
        r = row("10", f"c10_{k}", "<=", 0.0)
        for i in C:
            cell = geo.unit(i)
            r.add(cell.perimeter - F * cell.sqrt_area, zh(i, k))
            for j, length in cell.neighbors:
                if 1 <= j <= n and j != i:
                    r.add(-length, zb(i, j, k))

    # (11)-(13) contiguity: every assigned unit pushes net flow toward the sink
    cap_flow = float(n)  # |V| - 1
    for i in C:
        for k in K:
            r = row("11", f"c11_{i}_{k}", ">=", 0.0)
            for j in adj_c[i]:
                r.add(1.0, u(i, j, k))
                r.add(-1.0, u(j, i, k))
            r.add(-1.0, zh(i, k))
            r.add(cap_flow, w(i, k))
    for k in K:
        r = row("12", f"c12_{k}", "=", 1.0)
        for i in C:
            r.add(1.0, w(i, k))
    for i in C:
        for k in K:
            r = row("13", f"c13_{i}_{k}", "<=", 0.0)
            for j in adj_c[i]:
                r.add(1.0, u(j, i, k))
            r.add(-cap_flow, zh(i, k))

    # (14) unit in/out degree equals the day assignment
    for j in C:
        for k in K:
            for d in D:
                r = row("14", f"c14in_{j}_{k}_{d}", "=", 0.0)
                for i in V:
                    if i != j:
                        r.add(1.0, x(i, j, k, d))
                r.add(-1.0, y(j, k, d))
                r = row("14", f"c14out_{j}_{k}_{d}", "=", 0.0)
                for i in V:
                    if i != j:
                        r.add(1.0, x(j, i, k, d))
                r.add(-1.0, y(j, k, d))

    # (15) depot flow: balanced, at most one departure, only for used vehicles.
    # Relaxed to allow idle days (a used vehicle may stay home when none of
    # its customers is active; zero-demand customers are never visited).
    for k in K:
        for d in D:
            r = row("15", f"c15bal_{k}_{d}", "=", 0.0)
            for j in C:
                r.add(1.0, x(0, j, k, d))
            for i in C:
                r.add(-1.0, x(i, 0, k, d))
            r = row("15", f"c15cap_{k}_{d}", "<=", 0.0)
            for j in C:
                r.add(1.0, x(0, j, k, d))
            r.add(-1.0, z(k))

    # (16) person consistency across day pairs
    for i in C:
        for k in K:
            for alpha in D:
                for beta in D:
                    if alpha == beta:
                        continue
                    r = row("16", f"c16_{i}_{k}_{alpha}_{beta}", ">=", o[(i, alpha)] + o[(i, beta)] - 2)
                    r.add(1.0, y(i, k, alpha))
                    r.add(-1.0, y(i, k, beta))

    # (17)-(18) start-time propagation; big-M activation of
    # s_j = s_i + g_i + t_ij + e_j whenever arc (i,j) is used on (k,d).
    # The increasing starts along used arcs also rule out subtours.
    for i in V:
        for j in C:
            if i == j:
                continue
            step = float(g[i]) + float(t[i, j])
            for k in K:
                for d in D:
                    r = row("17", f"c17_{i}_{j}_{k}_{d}", "<=", big_m)
                    r.add(1.0, s(i, d))
                    r.add(step + big_m, x(i, j, k, d))
                    r.add(1.0, e(j, d))
                    r.add(-1.0, s(j, d))
                    r = row("18", f"c18_{i}_{j}_{k}_{d}", ">=", -big_m)
                    r.add(1.0, s(i, d))
                    r.add(step - big_m, x(i, j, k, d))
                    r.add(1.0, e(j, d))
                    r.add(-1.0, s(j, d))

    # (19) return to the depot within the workday
    for i in C:
        for d in D:
            r = row("19", f"c19_{i}_{d}", "<=", h - float(g[i]) - float(t[i, 0]))
            r.add(1.0, s(i, d))

    # (20) start times inside the window when active, pinned to 0 otherwise
    for i in V:
        for d in D:
            oid = o[(i, d)] if i != 0 else 0
            r = row("20", f"c20lo_{i}_{d}", ">=", float(a[i]) * oid)
            r.add(1.0, s(i, d))
            r = row("20", f"c20hi_{i}_{d}", "<=", float(b[i]) * oid)
            r.add(1.0, s(i, d))

    if symmetry_breaking:
        for k in K[:-1]:
            r = row("sym", f"csym_{k}", ">=", 0.0)
            r.add(1.0, z(k))
            r.add(-1.0, z(k + 1))

    lines: List[str] = []
    lines.append("\\ territory design over a multi-period routing horizon")
    lines.append(f"\\ nodes={n + 1} vehicles={len(K)} days={len(D)} bigM={_fmt(big_m)}")
    lines.append("\\ row prefixes c02..c20 name the model's constraint families")
    lines.append("Minimize")
    lines.append(" obj: " + " + ".join(z(k) for k in K))
    lines.append("Subject To")
    for r in rows:
        lines.append(r.render())
    lines.append("Bounds")
    for j in C:
        for d in D:
            lines.append(f" 0 <= {e(j, d)} <= {_fmt(h)}")
    lines.append("Binaries")
    binaries = (
        art.vars_of_kind("z")
        + art.vars_of_kind("zhat")
        + art.vars_of_kind("zbar")
        + art.vars_of_kind("w")
        + art.vars_of_kind("x")
        + art.vars_of_kind("y")
    )
    for pos in range(0, len(binaries), 8):
        lines.append(" " + " ".join(binaries[pos : pos + 8]))
    lines.append("End")
    return "\n".join(lines) + "\n", art


# ---------------------------------------------------------------------------
# constructive mapping and external-solution ingestion


def solution_assignment(
    instance: Instance, solution: Solution, artifacts: MilpArtifacts
) -> Dict[str, float]:
    """Map a feasible solution onto the emitted variables.

    Territories are assigned to vehicles in ascending territory-id order; the
    flow certificate routes one unit from every member along a spanning tree
    toward the lowest-id member, which is chosen as the sink.  Unused
    vehicles still need a nominal sink to satisfy the one-sink row.
    """
    values: Dict[str, float] = {name: 0.0 for name in artifacts.variables}
    geo = instance.geometry
    n = instance.n
    terrs = sorted((t for t in solution.territories if t.members), key=lambda t: t.territory_id)
    if len(terrs) > artifacts.num_vehicles:
        raise ValueError("more territories than vehicles in the model")

    for idx, terr in enumerate(terrs):
        k = idx + 1
        values[f"z_{k}"] = 1.0
        members = sorted(terr.members)
        for i in members:
            values[f"zh_{i}_{k}"] = 1.0
        for i in members:
            for j in members:
                if i != j:
                    values[f"zb_{i}_{j}_{k}"] = 1.0
        sink = members[0]
        values[f"w_{sink}_{k}"] = 1.0
        # spanning tree toward the sink; u[PARENT edge] = subtree size
        adj = {
            i: [j for j in geo.neighbors_of(i) if j in terr.members]
            for i in members
        }
        parent: Dict[int, Optional[int]] = {sink: None}
        order = [sink]
        queue = [sink]
        while queue:
            cur = queue.pop(0)
            for j in sorted(adj[cur]):
                if j not in parent:
                    parent[j] = cur
                    order.append(j)
                    queue.append(j)
        if len(parent) != len(members):
            raise ValueError(f"territory {terr.territory_id} is not contiguous")
        subtree = {i: 1 for i in members}
        for node in reversed(order):
            p = parent[node]
            if p is not None:
                subtree[p] += subtree[node]
        for node in order:
            p = parent[node]
            if p is not None:
                values[f"u_{node}_{p}_{k}"] = float(subtree[node])
        # routing variables
        for day, route in terr.routes.items():
            visits = list(route.visits)
            if not visits:
                continue
            arcs = [(0, visits[0])] + list(zip(visits, visits[1:])) + [(visits[-1], 0)]
            for i, j in arcs:
                values[f"x_{i}_{j}_{k}_{day}"] = 1.0
            for i in visits:
                values[f"y_{i}_{k}_{day}"] = 1.0
            for i, start, wait in zip(visits, route.starts, route.waits):
                values[f"s_{i}_{day}"] = float(start)
                values[f"e_{i}_{day}"] = float(wait)

    # nominal sinks for unused vehicles
    for k in range(len(terrs) + 1, artifacts.num_vehicles + 1):
        values[f"w_1_{k}"] = 1.0
    return values


def read_solver_solution(text: str) -> Dict[str, float]:
    """Parse space-separated ``name value`` lines written by an external solver."""
    values: Dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", "\\", "//")):
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'name value', got {line!r}")
        try:
            values[parts[0]] = float(parts[1])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value in {line!r}") from exc
    return values


def objective_value(values: Dict[str, float], artifacts: MilpArtifacts) -> float:
    return sum(values.get(name, 0.0) for name in artifacts.vars_of_kind("z"))
