"""Analytic signed distance primitives built from plain descriptor dicts.

A descriptor looks like::

    {"type": "sphere", "radius": 0.04, "transform": {"translation": [0, 0, 0.05]}}

Supported types: sphere, capsule, box, cylinder, torus, union, smooth_union.
Distances are metric (meters); ``analytic_sdf`` converts to a truncated grid.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidShape
from .grid import GridSpec, SdfGrid, truncate
from .transforms import RigidTransform

MAX_DEPTH = 8
DEFAULT_SHARPNESS = 100.0  # 1/m for smooth_union


def _positive(desc, key):
    try:
        val = np.asarray(desc[key], dtype=float)
    except KeyError:
        raise InvalidShape(f"{desc.get('type')}: missing '{key}'") from None
    if not np.all(np.isfinite(val)) or np.any(val <= 0):
        raise InvalidShape(f"{desc.get('type')}: '{key}' must be positive, got {desc[key]}")
    return val


def _sphere(p, d):
    return np.linalg.norm(p, axis=1) - float(_positive(d, "radius"))


def _capsule(p, d):
    r = float(_positive(d, "radius"))
    if "a" in d and "b" in d:
        a = np.asarray(d["a"], float)
        b = np.asarray(d["b"], float)
        if np.linalg.norm(b - a) <= 0:
            raise InvalidShape("capsule: endpoints coincide")
    else:
        half = 0.5 * float(_positive(d, "length"))
        a = np.array([0.0, 0.0, -half])
        b = np.array([0.0, 0.0, half])
    return segment_distance(p, a, b) - r


def _box(p, d):
    half = 0.5 * _positive(d, "size") * np.ones(3)
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _cylinder(p, d):
    r = float(_positive(d, "radius"))
    h = 0.5 * float(_positive(d, "height"))
    dr = np.linalg.norm(p[:, :2], axis=1) - r
    dz = np.abs(p[:, 2]) - h
    inside = np.minimum(np.maximum(dr, dz), 0.0)
    outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
    return inside + outside


def _torus(p, d):
    R = float(_positive(d, "major_radius"))
    r = float(_positive(d, "minor_radius"))
    qx = np.linalg.norm(p[:, :2], axis=1) - R
    return np.hypot(qx, p[:, 2]) - r


_PRIMITIVES = {
    "sphere": _sphere,
    "capsule": _capsule,
    "box": _box,
    "cylinder": _cylinder,
    "torus": _torus,
}


def segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def shape_sdf(desc: dict, points: np.ndarray, _depth: int = 0) -> np.ndarray:
    """Metric signed distance of ``desc`` at metric ``points`` (N, 3)."""
    if _depth >= MAX_DEPTH:
        raise InvalidShape(f"shape nesting deeper than {MAX_DEPTH}")
    if not isinstance(desc, dict) or "type" not in desc:
        raise InvalidShape(f"not a shape descriptor: {desc!r}")
    kind = desc["type"]
    try:
        t = RigidTransform.from_dict(desc.get("transform"))
    except (TypeError, ValueError) as exc:
        raise InvalidShape(f"bad transform in shape descriptor: {exc}") from exc
    local = t.apply_inverse(np.asarray(points, dtype=float).reshape(-1, 3))
    if kind in _PRIMITIVES:
        dist = _PRIMITIVES[kind](local, desc)
    elif kind in ("union", "smooth_union"):
        children = desc.get("children") or []
        if not children:
            raise InvalidShape(f"{kind}: needs at least one child")
        stack = np.stack([shape_sdf(c, local, _depth + 1) for c in children])
        if kind == "union":
            dist = stack.min(axis=0)
        else:
            k = float(desc.get("sharpness", DEFAULT_SHARPNESS))
            if k <= 0:
                raise InvalidShape("smooth_union: sharpness must be positive")
            m = stack.min(axis=0)
            dist = m - np.log(np.exp(-k * (stack - m)).sum(axis=0)) / k
    else:
        raise InvalidShape(f"unknown shape type '{kind}'")
    return t.scale * dist


def analytic_sdf(desc: dict, grid: GridSpec | None = None) -> SdfGrid:
    spec = grid or GridSpec()
    d = shape_sdf(desc, spec.centers()) / spec.half_extent
    return SdfGrid(spec, truncate(d).reshape(spec.shape))


def bounding_radius(desc: dict, reach: float = 0.3, n: int = 64) -> float:
    """Largest distance from the local origin to a point inside the shape."""
    spec = GridSpec.cube(n, reach)
    pts = spec.centers()
    inside = shape_sdf(desc, pts) <= 0.5 * spec.voxel_size
    if not inside.any():
        return 0.0
    return float(np.linalg.norm(pts[inside], axis=1).max() + spec.voxel_size)
