"""Exact ground truth at desk scale: partition oracle and MILP export."""

from .oracle import OracleLimits, OracleResult, exact_solve, verify_against_oracle
from .milp import (
    MilpArtifacts,
    emit_milp,
    read_solver_solution,
    solution_assignment,
)

__all__ = [
    "OracleLimits",
    "OracleResult",
    "exact_solve",
    "verify_against_oracle",
    "MilpArtifacts",
    "emit_milp",
    "read_solver_solution",
    "solution_assignment",
]
