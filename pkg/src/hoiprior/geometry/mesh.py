"""Triangle meshes: conversion to truncated SDF grids, isosurfaces, OBJ IO."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from ..errors import EmptyMesh, IoFailure, ShapeMismatch
from .grid import GridSpec, SdfGrid, truncate

DEGENERATE_AREA = 1e-12


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ShapeMismatch("face index out of range")
        if self.faces.size:
            keep = self.face_areas() > DEGENERATE_AREA
            self.faces = self.faces[keep]

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum()) if self.faces.size else 0.0

    def sample_surface(self, count: int, seed: int = 0) -> np.ndarray:
        """Area-weighted uniform surface samples."""
        if self.is_empty:
            raise EmptyMesh("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        areas = self.face_areas()
        idx = rng.choice(len(areas), size=count, p=areas / areas.sum())
        u, v = rng.random((2, count))
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        t = self.triangles()[idx]
        return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])

    def transformed(self, t) -> "TriMesh":
        return TriMesh(t.apply(self.vertices), self.faces.copy())


def concatenate(meshes) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    if not verts:
        return TriMesh.empty()
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


# --------------------------------------------------------------------------
# primitive meshes
# --------------------------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius + np.asarray(center, float), np.array(faces))


def box_mesh(size=(0.1, 0.1, 0.1), center=(0.0, 0.0, 0.0)) -> TriMesh:
    h = 0.5 * np.asarray(size, float) * np.ones(3)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float) * h
    # outward-facing, counter-clockwise seen from outside
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriMesh(corners + np.asarray(center, float), np.array(faces))


def capsule_mesh(a, b, radius: float, segments: int = 12, rings: int = 4) -> TriMesh:
    """Closed triangulated capsule around segment a-b."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    axis = b - a
    length = np.linalg.norm(axis)
    z = axis / length if length > 0 else np.array([0.0, 0.0, 1.0])
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    phis = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    # latitude rings from the bottom pole to the top pole
    lats = np.concatenate([np.linspace(-np.pi / 2, 0, rings + 1)[1:], np.linspace(0, np.pi / 2, rings + 1)[:-1]])
    verts = [a - radius * z]
    for n, lat in enumerate(lats):
        base = a if n < rings else b
        for phi in phis:
            d = np.cos(lat) * (np.cos(phi) * x + np.sin(phi) * y) + np.sin(lat) * z
            verts.append(base + radius * d)
    verts.append(b + radius * z)
    faces = []
    S = segments
    for s in range(S):
        faces.append((0, 1 + (s + 1) % S, 1 + s))
    for r in range(len(lats) - 1):
        o0, o1 = 1 + r * S, 1 + (r + 1) * S
        for s in range(S):
            s1 = (s + 1) % S
            faces += [(o0 + s, o0 + s1, o1 + s1), (o0 + s, o1 + s1, o1 + s)]
    top = len(verts) - 1
    last = 1 + (len(lats) - 1) * S
    for s in range(S):
        faces.append((last + s, last + (s + 1) % S, top))
    return TriMesh(np.array(verts), np.array(faces))


# --------------------------------------------------------------------------
# mesh -> SDF
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@numba.njit(cache=True)
def _point_triangle_dist2(px, py, pz, t):
    # closest point on triangle by Voronoi region (Ericson, Real-Time Collision Detection 5.1.5)
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    bx, by, bz = t[1, 0], t[1, 1], t[1, 2]
    cx, cy, cz = t[2, 0], t[2, 1], t[2, 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = _dot(abx, aby, abz, apx, apy, apz)
    d2 = _dot(acx, acy, acz, apx, apy, apz)
    if d1 <= 0.0 and d2 <= 0.0:
        return _dot(apx, apy, apz, apx, apy, apz)
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = _dot(abx, aby, abz, bpx, bpy, bpz)
    d4 = _dot(acx, acy, acz, bpx, bpy, bpz)
    if d3 >= 0.0 and d4 <= d3:
        return _dot(bpx, bpy, bpz, bpx, bpy, bpz)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        qx, qy, qz = px - (ax + v * abx), py - (ay + v * aby), pz - (az + v * abz)
        return _dot(qx, qy, qz, qx, qy, qz)
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = _dot(abx, aby, abz, cpx, cpy, cpz)
    d6 = _dot(acx, acy, acz, cpx, cpy, cpz)
    if d6 >= 0.0 and d5 <= d6:
        return _dot(cpx, cpy, cpz, cpx, cpy, cpz)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        qx, qy, qz = px - (ax + w * acx), py - (ay + w * acy), pz - (az + w * acz)
        return _dot(qx, qy, qz, qx, qy, qz)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = px - (bx + w * (cx - bx))
        qy = py - (by + w * (cy - by))
        qz = pz - (bz + w * (cz - bz))
        return _dot(qx, qy, qz, qx, qy, qz)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    qx = px - (ax + abx * v + acx * w)
    qy = py - (ay + aby * v + acy * w)
    qz = pz - (az + abz * v + acz * w)
    return _dot(qx, qy, qz, qx, qy, qz)


@numba.njit(cache=True)
def _unsigned_distance_kernel(points, tris, centroids, radii):
    N = points.shape[0]
    M = tris.shape[0]
    out = np.empty(N)
    dc = np.empty(M)
    for n in range(N):
        px, py, pz = points[n, 0], points[n, 1], points[n, 2]
        best = np.inf
        for m in range(M):
            dx = px - centroids[m, 0]
            dy = py - centroids[m, 1]
            dz = pz - centroids[m, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz)
            dc[m] = d
            if d < best:
                best = d
        best2 = best * best
        for m in range(M):
            lb = dc[m] - radii[m]
            if lb > 0.0 and lb * lb >= best2:
                continue
            d2 = _point_triangle_dist2(px, py, pz, tris[m])
            if d2 < best2:
                best2 = d2
        out[n] = np.sqrt(best2)
    return out


@numba.njit(cache=True)
def _winding_kernel(points, tris):
    N = points.shape[0]
    M = tris.shape[0]
    out = np.empty(N)
    for n in range(N):
        px, py, pz = points[n, 0], points[n, 1], points[n, 2]
        total = 0.0
        for m in range(M):
            ax, ay, az = tris[m, 0, 0] - px, tris[m, 0, 1] - py, tris[m, 0, 2] - pz
            bx, by, bz = tris[m, 1, 0] - px, tris[m, 1, 1] - py, tris[m, 1, 2] - pz
            cx, cy, cz = tris[m, 2, 0] - px, tris[m, 2, 1] - py, tris[m, 2, 2] - pz
            la = np.sqrt(_dot(ax, ay, az, ax, ay, az))
            lb = np.sqrt(_dot(bx, by, bz, bx, by, bz))
            lc = np.sqrt(_dot(cx, cy, cz, cx, cy, cz))
            det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
            den = (la * lb * lc + _dot(ax, ay, az, bx, by, bz) * lc
                   + _dot(ax, ay, az, cx, cy, cz) * lb + _dot(bx, by, bz, cx, cy, cz) * la)
            total += 2.0 * np.arctan2(det, den)
        out[n] = total / (4.0 * np.pi)
    return out


def unsigned_distance(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    if mesh.is_empty:
        raise EmptyMesh("mesh has no faces")
    tris = np.ascontiguousarray(mesh.triangles())
    centroids = tris.mean(axis=1)
    radii = np.linalg.norm(tris - centroids[:, None, :], axis=2).max(axis=1)
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    return _unsigned_distance_kernel(pts, tris, np.ascontiguousarray(centroids), radii)


def winding_number(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Generalized winding number; exactly 0 is returned outside the mesh bounding box."""
    if mesh.is_empty:
        raise EmptyMesh("mesh has no faces")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    # outside the convex hull the surface spans less than a hemisphere: |w| <= 1/2
    inside_box = np.all((pts >= lo) & (pts <= hi), axis=1)
    out = np.zeros(len(pts))
    if inside_box.any():
        out[inside_box] = _winding_kernel(np.ascontiguousarray(pts[inside_box]),
                                          np.ascontiguousarray(mesh.triangles()))
    return out


def mesh_signed_distance(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Metric signed distance; negative where the winding number exceeds 0.5."""
    d = unsigned_distance(mesh, points)
    return np.where(winding_number(mesh, points) > 0.5, -d, d)


def mesh_to_sdf(mesh: TriMesh, grid: GridSpec | None = None) -> SdfGrid:
    spec = grid or GridSpec()
    d = mesh_signed_distance(mesh, spec.centers()) / spec.half_extent
    return SdfGrid(spec, truncate(d).reshape(spec.shape))


# --------------------------------------------------------------------------
# isosurface
# --------------------------------------------------------------------------

def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriMesh:
    """Isosurface of a grid with vertices in meters; empty when there is no crossing."""
    from skimage.measure import marching_cubes as _mc

    v = grid.values
    if not (v.min() < iso < v.max()):
        return TriMesh.empty()
    spec = grid.spec
    verts, faces, _, _ = _mc(v, level=iso, allow_degenerate=False)
    # index space -> meters (voxel centers at cell midpoints)
    pitch = 2.0 * spec.half_extent / np.array(spec.resolution)
    verts = -spec.half_extent + (verts + 0.5) * pitch
    return TriMesh(verts, faces)


# --------------------------------------------------------------------------
# OBJ
# --------------------------------------------------------------------------

def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return TriMesh(np.array(verts, float).reshape(-1, 3), np.array(faces, np.int64).reshape(-1, 3))
