"""Territory map export: dissolved GeoJSON features and a static SVG."""

from __future__ import annotations

import colorsys
import json
from typing import Dict, List

from shapely.geometry import mapping

from .model import Instance, Solution, SolutionStructureError


def _check_pair(instance: Instance, solution: Solution):
    for terr in solution.territories:
        for i in terr.members:
            if not 1 <= i <= instance.n:
                raise SolutionStructureError(
                    f"solution references customer {i}, instance has 1..{instance.n}"
                )


def territory_geojson(instance: Instance, solution: Solution) -> dict:
    """One Feature per territory: the dissolved union of its member cells."""
    _check_pair(instance, solution)
    features: List[dict] = []
    for terr in sorted(solution.territories, key=lambda t: t.territory_id):
        if not terr.members:
            continue
        shape = instance.geometry.dissolve(terr.members)
        cr = instance.geometry.compactness_ratio(terr.members, instance.compactness_mode)
        features.append(
            {
                "type": "Feature",
                "geometry": mapping(shape),
                "properties": {
                    "territory_id": terr.territory_id,
                    "compactness_ratio": cr,
                    "perimeter": instance.geometry.territory_perimeter(terr.members),
                    "members": list(terr.members),
                },
            }
        )
    return {
        "type": "FeatureCollection",
        "bbox": list(instance.geometry.bounding_box),
        "features": features,
    }


def _color(idx: int, total: int) -> str:
    hue = (idx * 0.618033988749895) % 1.0
    r, g, b = colorsys.hls_to_rgb(hue, 0.55, 0.65)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def territory_svg(instance: Instance, solution: Solution, width: int = 800) -> str:
    """Direct planar projection: member cells filled per territory, depot marked."""
    _check_pair(instance, solution)
    minx, miny, maxx, maxy = instance.geometry.bounding_box
    span_x = maxx - minx
    span_y = maxy - miny
    height = int(round(width * span_y / span_x)) if span_x > 0 else width
    sx = width / span_x if span_x else 1.0
    sy = height / span_y if span_y else 1.0

    def pt(x: float, y: float) -> str:
        return f"{(x - minx) * sx:.2f},{(maxy - y) * sy:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="#f8f8f8"/>',
    ]
    terrs = [t for t in sorted(solution.territories, key=lambda t: t.territory_id) if t.members]
    for idx, terr in enumerate(terrs):
        fill = _color(idx, len(terrs))
        for i in terr.members:
            cell = instance.geometry.unit(i)
            pts = " ".join(pt(x, y) for x, y in cell.polygon)
            parts.append(
                f'<polygon points="{pts}" fill="{fill}" stroke="#ffffff" '
                f'stroke-width="0.6" fill-opacity="0.85"/>'
            )
    # depot cell outline and marker
    depot_cell = instance.geometry.unit(0)
    pts = " ".join(pt(x, y) for x, y in depot_cell.polygon)
    parts.append(f'<polygon points="{pts}" fill="#dddddd" stroke="#666666" stroke-width="0.8"/>')
    dx, dy = instance.coords[0]
    parts.append(
        f'<circle cx="{(dx - minx) * sx:.2f}" cy="{(maxy - dy) * sy:.2f}" r="4" fill="#222222"/>'
    )
    parts.append("</svg>")
    return "\n".join(parts)
