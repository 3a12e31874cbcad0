"""Territory design for dynamic multi-period vehicle routing with time windows."""

__version__ = "0.1.0"

from .geometry import (
    BasicUnitGeometry,
    CompactnessMode,
    GeometryTable,
    bounding_box_for,
    build_voronoi,
)
from .model import (
    Instance,
    Route,
    Solution,
    Territory,
    ValidationReport,
    Violation,
    propagate_schedule,
    solution_cost,
    validate,
)

__all__ = [
    "BasicUnitGeometry",
    "CompactnessMode",
    "GeometryTable",
    "bounding_box_for",
    "build_voronoi",
    "Instance",
    "Route",
    "Solution",
    "Territory",
    "ValidationReport",
    "Violation",
    "propagate_schedule",
    "solution_cost",
    "validate",
    "__version__",
]
