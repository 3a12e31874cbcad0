"""Test-side bridge: parse emitted LP text and solve it with HiGHS (scipy).

This is the 'external MILP solver' leg of the cross-checks.  The parser
covers exactly the LP dialect the exporter writes (single-line rows,
Minimize / Subject To / Bounds / Binaries / End) and is intentionally
independent of the exporter's internal data structures: it sees only text.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import lil_matrix


@dataclass
class ParsedLP:
    objective: Dict[str, float]
    rows: List[Tuple[str, Dict[str, float], str, float]]   # name, coeffs, sense, rhs
    bounds: Dict[str, Tuple[float, float]]
    binaries: List[str]
    variables: List[str] = field(default_factory=list)

    def __post_init__(self):
        seen = dict()
        for name in self.objective:
            seen.setdefault(name, None)
        for _, coeffs, _, _ in self.rows:
            for name in coeffs:
                seen.setdefault(name, None)
        for name in self.bounds:
            seen.setdefault(name, None)
        for name in self.binaries:
            seen.setdefault(name, None)
        self.variables = list(seen)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _parse_terms(tokens: List[str]) -> Dict[str, float]:
    coeffs: Dict[str, float] = {}
    sign = 1.0
    pending: Optional[float] = None
    for tok in tokens:
        if tok == "+":
            sign = 1.0
        elif tok == "-":
            sign = -1.0
        elif _is_number(tok):
            pending = float(tok)
        else:
            value = sign * (pending if pending is not None else 1.0)
            coeffs[tok] = coeffs.get(tok, 0.0) + value
            sign = 1.0
            pending = None
    return coeffs


def parse_lp(text: str) -> ParsedLP:
    objective: Dict[str, float] = {}
    rows: List[Tuple[str, Dict[str, float], str, float]] = []
    bounds: Dict[str, Tuple[float, float]] = {}
    binaries: List[str] = []
    section = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        lower = line.lower()
        if lower in ("minimize", "maximize"):
            section = "obj"
            continue
        if lower in ("subject to", "st", "s.t."):
            section = "rows"
            continue
        if lower == "bounds":
            section = "bounds"
            continue
        if lower in ("binaries", "binary", "generals", "general"):
            section = "binaries" if lower.startswith("binar") else "generals"
            continue
        if lower == "end":
            break
        if section == "obj":
            body = line.split(":", 1)[1] if ":" in line else line
            objective.update(_parse_terms(body.split()))
        elif section == "rows":
            name, body = line.split(":", 1)
            tokens = body.split()
            sense_idx = next(i for i, tok in enumerate(tokens) if tok in ("<=", ">=", "=", "<", ">"))
            sense = tokens[sense_idx].rstrip()
            sense = {"<": "<=", ">": ">="}.get(sense, sense)
            rhs = float(tokens[sense_idx + 1])
            coeffs = _parse_terms(tokens[:sense_idx])
            rows.append((name.strip(), coeffs, sense, rhs))
        elif section == "bounds":
            tokens = line.split()
            # only the "lo <= var <= hi" form is emitted
            assert len(tokens) == 5 and tokens[1] == "<=" and tokens[3] == "<="
            bounds[tokens[2]] = (float(tokens[0]), float(tokens[4]))
        elif section == "binaries":
            binaries.extend(line.split())
    return ParsedLP(objective=objective, rows=rows, bounds=bounds, binaries=binaries)


def evaluate_assignment(
    parsed: ParsedLP, values: Dict[str, float], tol: float = 1e-6
) -> List[str]:
    """Row names violated by ``values`` (missing variables count as 0)."""
    bad = []
    for name, coeffs, sense, rhs in parsed.rows:
        lhs = sum(c * values.get(v, 0.0) for v, c in coeffs.items())
        if sense == "<=" and lhs > rhs + tol:
            bad.append(name)
        elif sense == ">=" and lhs < rhs - tol:
            bad.append(name)
        elif sense == "=" and abs(lhs - rhs) > tol:
            bad.append(name)
    for var, (lo, hi) in parsed.bounds.items():
        val = values.get(var, 0.0)
        if val < lo - tol or val > hi + tol:
            bad.append(f"bound:{var}")
    for var in parsed.binaries:
        val = values.get(var, 0.0)
        if min(abs(val), abs(val - 1.0)) > tol:
            bad.append(f"binary:{var}")
    return bad


@dataclass
class MilpRun:
    status: int
    message: str
    objective: Optional[float]
    values: Dict[str, float]

    @property
    def optimal(self) -> bool:
        return self.status == 0


def solve_with_highs(parsed: ParsedLP, time_limit: float = 300.0) -> MilpRun:
    """Hand the parsed model to scipy's HiGHS MILP solver at zero gap."""
    var_index = {name: i for i, name in enumerate(parsed.variables)}
    nvar = len(parsed.variables)
    c = np.zeros(nvar)
    for name, coeff in parsed.objective.items():
        c[var_index[name]] = coeff

    a = lil_matrix((len(parsed.rows), nvar))
    lo = np.full(len(parsed.rows), -np.inf)
    hi = np.full(len(parsed.rows), np.inf)
    for r, (_, coeffs, sense, rhs) in enumerate(parsed.rows):
        for name, coeff in coeffs.items():
            a[r, var_index[name]] = coeff
        if sense == "<=":
            hi[r] = rhs
        elif sense == ">=":
            lo[r] = rhs
        else:
            lo[r] = hi[r] = rhs

    lb = np.zeros(nvar)
    ub = np.full(nvar, np.inf)
    for name, (vlo, vhi) in parsed.bounds.items():
        lb[var_index[name]] = vlo
        ub[var_index[name]] = vhi
    integrality = np.zeros(nvar)
    for name in parsed.binaries:
        idx = var_index[name]
        integrality[idx] = 1
        lb[idx] = 0.0
        ub[idx] = 1.0

    res = milp(
        c=c,
        constraints=LinearConstraint(a.tocsr(), lo, hi),
        bounds=Bounds(lb, ub),
        integrality=integrality,
        options={"mip_rel_gap": 0.0, "time_limit": time_limit, "presolve": True},
    )
    values = {}
    if res.x is not None:
        values = {name: float(res.x[var_index[name]]) for name in parsed.variables}
    return MilpRun(
        status=int(res.status),
        message=str(res.message),
        objective=float(res.fun) if res.fun is not None else None,
        values=values,
    )


def dump_solution(values: Dict[str, float]) -> str:
    """Write 'name value' lines, the exchange format the exact module reads."""
    return "\n".join(f"{name} {value:.12g}" for name, value in sorted(values.items())) + "\n"
