"""Planar basic-unit geometry: Voronoi cells, adjacency, perimeters, compactness.

Every customer (and the depot) owns one convex polygonal cell obtained by
clipping its Voronoi region to a rectangular bounding box.  Territories are
unions of cells; the quantities the solver needs from geometry are

* ``perimeter(unit)`` and the shared boundary length between adjacent cells,
* the outer perimeter of a union of cells,
* the compactness ratio ``perimeter / sqrt(area)`` (or the MILP-friendly
  variant ``perimeter / sum(sqrt(cell areas))``),
* contiguity of a unit set under side-sharing adjacency.

Tables are immutable after construction and safe to share between threads.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.spatial import Voronoi
from shapely.geometry import Polygon, box as shapely_box
from shapely.ops import unary_union

Point = Tuple[float, float]
BoundingBox = Tuple[float, float, float, float]  # minx, miny, maxx, maxy


class GeometryError(ValueError):
    """Invalid input to a geometry constructor (duplicate or out-of-box sites)."""


class CompactnessMode(enum.Enum):
    """Denominator used in the compactness ratio.

    SQRT_OF_SUM is the geometrically proper sqrt(total area); SUM_OF_SQRTS
    replaces it by the sum of per-cell sqrt(area) terms, which is the variant
    a linear model can carry.
    """

    SQRT_OF_SUM = "sqrt_of_sum"
    SUM_OF_SQRTS = "sum_of_sqrts"

    @classmethod
    def parse(cls, value: "CompactnessMode | str") -> "CompactnessMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown compactness mode: {value!r}")


@dataclass(frozen=True)
class BasicUnitGeometry:
    """One cell: ordered convex polygon plus cached aggregates.

    ``neighbors`` maps adjacent unit ids to the shared boundary length; only
    positive-length contacts count (touching at a corner is not adjacency).
    """

    unit_id: int
    polygon: Tuple[Point, ...]
    area: float
    perimeter: float
    sqrt_area: float
    neighbors: Tuple[Tuple[int, float], ...]

    def shared_length(self, other_id: int) -> float:
        for j, length in self.neighbors:
            if j == other_id:
                return length
        return 0.0


class GeometryTable:
    """Immutable lookup of all basic-unit cells of one instance."""

    def __init__(self, units: Dict[int, BasicUnitGeometry], bounding_box: BoundingBox):
        self._units = dict(units)
        self.bounding_box = tuple(float(v) for v in bounding_box)
        self._adjacency: Dict[int, Dict[int, float]] = {
            uid: dict(unit.neighbors) for uid, unit in self._units.items()
        }

    def __contains__(self, unit_id: int) -> bool:
        return unit_id in self._units

    def __len__(self) -> int:
        return len(self._units)

    def unit(self, unit_id: int) -> BasicUnitGeometry:
        try:
            return self._units[unit_id]
        except KeyError:
            raise GeometryError(f"unknown unit id: {unit_id}") from None

    def unit_ids(self) -> List[int]:
        return sorted(self._units)

    def neighbors_of(self, unit_id: int) -> Dict[int, float]:
        self.unit(unit_id)
        return dict(self._adjacency[unit_id])

    def are_adjacent(self, i: int, j: int) -> bool:
        return j in self._adjacency.get(i, ())

    @property
    def box_diagonal(self) -> float:
        minx, miny, maxx, maxy = self.bounding_box
        return math.hypot(maxx - minx, maxy - miny)

    # ---- territory aggregates -------------------------------------------

    def _check_units(self, units: Iterable[int]) -> List[int]:
        ids = sorted(set(units))
        for uid in ids:
            if uid not in self._units:
                raise GeometryError(f"unknown unit id: {uid}")
        return ids

    def territory_perimeter(self, units: Iterable[int]) -> float:
        """Outer boundary length of the union of the given cells.

        Every internal side appears once in each of the two cells' perimeters,
        so it is subtracted twice from the plain perimeter sum.
        """
        ids = self._check_units(units)
        if not ids:
            raise GeometryError("territory_perimeter of an empty unit set")
        member = set(ids)
        total = 0.0
        for uid in ids:
            total += self._units[uid].perimeter
            for j, length in self._adjacency[uid].items():
                if j in member:
                    total -= length
        return total

    def territory_area(self, units: Iterable[int]) -> float:
        ids = self._check_units(units)
        return sum(self._units[uid].area for uid in ids)

    def compactness_ratio(
        self, units: Iterable[int], mode: CompactnessMode | str = CompactnessMode.SQRT_OF_SUM
    ) -> float:
        ids = self._check_units(units)
        if not ids:
            raise GeometryError("compactness_ratio of an empty unit set")
        mode = CompactnessMode.parse(mode)
        perimeter = self.territory_perimeter(ids)
        if mode is CompactnessMode.SQRT_OF_SUM:
            denom = math.sqrt(sum(self._units[uid].area for uid in ids))
        else:
            denom = sum(self._units[uid].sqrt_area for uid in ids)
        return perimeter / denom

    def is_contiguous(self, units: Iterable[int]) -> bool:
        """True iff the side-sharing adjacency graph induced by ``units`` is connected."""
        ids = self._check_units(units)
        if len(ids) <= 1:
            return True
        member = set(ids)
        seen = {ids[0]}
        stack = [ids[0]]
        while stack:
            u = stack.pop()
            for j in self._adjacency[u]:
                if j in member and j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == len(member)

    def dissolve(self, units: Iterable[int]) -> Polygon:
        """Shapely union of the member cells (used for map export)."""
        ids = self._check_units(units)
        return unary_union([Polygon(self._units[uid].polygon) for uid in ids])

    # ---- GeoJSON ---------------------------------------------------------

    def to_geojson(self) -> dict:
        features = []
        for uid in self.unit_ids():
            unit = self._units[uid]
            ring = [list(p) for p in unit.polygon]
            ring.append(list(unit.polygon[0]))
            features.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                    "properties": {
                        "unit_id": uid,
                        "area": unit.area,
                        "perimeter": unit.perimeter,
                        "neighbors": [[j, length] for j, length in unit.neighbors],
                    },
                }
            )
        return {
            "type": "FeatureCollection",
            "bbox": list(self.bounding_box),
            "features": features,
        }

    def to_geojson_str(self) -> str:
        return json.dumps(self.to_geojson())

    @classmethod
    def from_geojson(cls, doc: dict | str) -> "GeometryTable":
        if isinstance(doc, str):
            doc = json.loads(doc)
        polygons = {}
        for feature in doc["features"]:
            uid = int(feature["properties"]["unit_id"])
            ring = feature["geometry"]["coordinates"][0]
            pts = [tuple(map(float, p)) for p in ring]
            if pts[0] == pts[-1]:
                pts = pts[:-1]
            polygons[uid] = pts
        bbox = doc.get("bbox")
        return from_polygons(polygons, bounding_box=tuple(bbox) if bbox else None)


# ---------------------------------------------------------------------------
# construction


def bounding_box_for(points: Sequence[Point], inflate: float = 0.1) -> BoundingBox:
    """Axis-aligned hull of ``points`` inflated by ``inflate`` of its extent per side."""
    arr = np.asarray(points, dtype=float)
    minx, miny = arr.min(axis=0)
    maxx, maxy = arr.max(axis=0)
    w, h = maxx - minx, maxy - miny
    pad_x = inflate * (w if w > 0 else (h if h > 0 else 1.0))
    pad_y = inflate * (h if h > 0 else (w if w > 0 else 1.0))
    return (minx - pad_x, miny - pad_y, maxx + pad_x, maxy + pad_y)


def _polygon_cached(uid: int, pts: Sequence[Point], neighbors: List[Tuple[int, float]]) -> BasicUnitGeometry:
    poly = Polygon(pts)
    area = poly.area
    if area <= 0:
        raise GeometryError(f"unit {uid} has non-positive area")
    return BasicUnitGeometry(
        unit_id=uid,
        polygon=tuple((float(x), float(y)) for x, y in pts),
        area=float(area),
        perimeter=float(poly.exterior.length),
        sqrt_area=float(math.sqrt(area)),
        neighbors=tuple(sorted(neighbors)),
    )


def _ordered_vertices(poly: Polygon) -> List[Point]:
    coords = list(poly.exterior.coords)[:-1]
    if Polygon(coords).exterior.is_ccw:
        return [(float(x), float(y)) for x, y in coords]
    return [(float(x), float(y)) for x, y in reversed(coords)]


def _adjacency_from_polygons(
    cells: Dict[int, Polygon], threshold: float
) -> Dict[int, List[Tuple[int, float]]]:
    ids = sorted(cells)
    neighbors: Dict[int, List[Tuple[int, float]]] = {uid: [] for uid in ids}
    # Bounding-box prefilter keeps this near-linear for Voronoi tilings.
    bounds = {uid: cells[uid].bounds for uid in ids}
    for a_pos, i in enumerate(ids):
        bi = bounds[i]
        for j in ids[a_pos + 1 :]:
            bj = bounds[j]
            if bi[2] < bj[0] - threshold or bj[2] < bi[0] - threshold:
                continue
            if bi[3] < bj[1] - threshold or bj[3] < bi[1] - threshold:
                continue
            length = cells[i].intersection(cells[j]).length
            if length > threshold:
                neighbors[i].append((j, float(length)))
                neighbors[j].append((i, float(length)))
    return neighbors


def from_polygons(
    polygons: Dict[int, Sequence[Point]], bounding_box: BoundingBox | None = None
) -> GeometryTable:
    """Build a table from explicit convex cell polygons (GeoJSON ingest path)."""
    cells: Dict[int, Polygon] = {}
    for uid, pts in polygons.items():
        if len(pts) < 3:
            raise GeometryError(f"unit {uid}: polygon needs at least 3 vertices")
        poly = Polygon(pts)
        if not poly.is_valid or poly.area <= 0:
            raise GeometryError(f"unit {uid}: invalid polygon")
        cells[uid] = poly
    if bounding_box is None:
        all_pts = [p for pts in polygons.values() for p in pts]
        arr = np.asarray(all_pts, dtype=float)
        bounding_box = (
            float(arr[:, 0].min()),
            float(arr[:, 1].min()),
            float(arr[:, 0].max()),
            float(arr[:, 1].max()),
        )
    diag = math.hypot(bounding_box[2] - bounding_box[0], bounding_box[3] - bounding_box[1])
    neighbors = _adjacency_from_polygons(cells, threshold=1e-9 * diag)
    units = {
        uid: _polygon_cached(uid, _ordered_vertices(cells[uid]), neighbors[uid])
        for uid in cells
    }
    return GeometryTable(units, bounding_box)


def build_voronoi(
    sites: Sequence[Point], bounding_box: BoundingBox
) -> GeometryTable:
    """Voronoi tessellation of ``sites`` clipped to ``bounding_box``.

    Cells are made finite by mirroring every site across the four box sides
    before triangulating, which pins each original cell exactly to the box.
    Unit ids are the site indices.  Sites must be pairwise distinct and lie
    strictly inside the box.
    """
    pts = np.asarray(sites, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 1:
        raise GeometryError("need at least one 2-D site")
    minx, miny, maxx, maxy = (float(v) for v in bounding_box)
    if not (maxx > minx and maxy > miny):
        raise GeometryError("degenerate bounding box")
    diag = math.hypot(maxx - minx, maxy - miny)
    tol = 1e-9 * diag

    for idx, (x, y) in enumerate(pts):
        if not (minx + tol < x < maxx - tol and miny + tol < y < maxy - tol):
            raise GeometryError(f"site {idx} at ({x}, {y}) is not strictly inside the bounding box")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    for a, b in zip(order[:-1], order[1:]):
        if math.hypot(*(pts[a] - pts[b])) <= tol:
            lo, hi = sorted((int(a), int(b)))
            raise GeometryError(f"duplicate sites: {lo} and {hi}")

    n = len(pts)
    if n == 1:
        box_pts = [(minx, miny), (maxx, miny), (maxx, maxy), (minx, maxy)]
        unit = _polygon_cached(0, box_pts, [])
        return GeometryTable({0: unit}, (minx, miny, maxx, maxy))

    mirrored = np.vstack(
        [
            pts,
            np.column_stack([2 * minx - pts[:, 0], pts[:, 1]]),
            np.column_stack([2 * maxx - pts[:, 0], pts[:, 1]]),
            np.column_stack([pts[:, 0], 2 * miny - pts[:, 1]]),
            np.column_stack([pts[:, 0], 2 * maxy - pts[:, 1]]),
        ]
    )
    vor = Voronoi(mirrored)
    clip = shapely_box(minx, miny, maxx, maxy)
    cells: Dict[int, Polygon] = {}
    for i in range(n):
        region = vor.regions[vor.point_region[i]]
        if -1 in region or len(region) < 3:
            raise GeometryError(f"unbounded Voronoi region for site {i}")
        verts = vor.vertices[region]
        # Convex cell: order by angle around the centroid.
        center = verts.mean(axis=0)
        ang = np.arctan2(verts[:, 1] - center[1], verts[:, 0] - center[0])
        verts = verts[np.argsort(ang)]
        cell = Polygon(verts).intersection(clip)
        if cell.is_empty or cell.area <= 0:
            raise GeometryError(f"empty clipped cell for site {i}")
        cells[i] = cell
    neighbors = _adjacency_from_polygons(cells, threshold=tol)
    units = {
        uid: _polygon_cached(uid, _ordered_vertices(cells[uid]), neighbors[uid])
        for uid in cells
    }
    return GeometryTable(units, (minx, miny, maxx, maxy))
