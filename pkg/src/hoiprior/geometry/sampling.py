"""Trilinear sampling of voxel grids with analytic gradients.

Points are given in normalized coordinates (grid spans [-1, 1] per axis,
voxel centers at cell midpoints).  Points outside the span of voxel centers
take the border value and get zero gradient along the clamped axis.
"""

from __future__ import annotations

import numba
import numpy as np

from .grid import GridSpec, SdfGrid, truncate
from .transforms import RigidTransform, hat, so3_right_jacobian


@numba.njit(cache=True)
def _axis_coord(p, n):
    u = (p + 1.0) * n * 0.5 - 0.5
    du = n * 0.5
    # snap round-off so lattice-aligned queries return stored values exactly
    r = np.floor(u + 0.5)
    if abs(u - r) < 1e-10:
        u = r
    if u <= 0.0:
        return 0, 0.0, 0.0
    if u >= n - 1:
        return n - 2, 1.0, 0.0
    i0 = int(np.floor(u))
    if i0 > n - 2:
        i0 = n - 2
    return i0, u - i0, du


@numba.njit(cache=True)
def _trilinear_kernel(values, points, need_grad):
    C, nx, ny, nz = values.shape
    P = points.shape[0]
    out = np.empty((C, P))
    grad = np.zeros((C, P, 3)) if need_grad else np.zeros((C, 0, 3))
    for p in range(P):
        i, fx, dx = _axis_coord(points[p, 0], nx)
        j, fy, dy = _axis_coord(points[p, 1], ny)
        k, fz, dz = _axis_coord(points[p, 2], nz)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for c in range(C):
            v000 = values[c, i, j, k]
            v100 = values[c, i + 1, j, k]
            v010 = values[c, i, j + 1, k]
            v110 = values[c, i + 1, j + 1, k]
            v001 = values[c, i, j, k + 1]
            v101 = values[c, i + 1, j, k + 1]
            v011 = values[c, i, j + 1, k + 1]
            v111 = values[c, i + 1, j + 1, k + 1]
            # interpolate along x, then y, then z
            a00 = gx * v000 + fx * v100
            a10 = gx * v010 + fx * v110
            a01 = gx * v001 + fx * v101
            a11 = gx * v011 + fx * v111
            b0 = gy * a00 + fy * a10
            b1 = gy * a01 + fy * a11
            out[c, p] = gz * b0 + fz * b1
            if need_grad:
                ex00 = v100 - v000
                ex10 = v110 - v010
                ex01 = v101 - v001
                ex11 = v111 - v011
                dvx = gz * (gy * ex00 + fy * ex10) + fz * (gy * ex01 + fy * ex11)
                dvy = gz * (a10 - a00) + fz * (a11 - a01)
                dvz = b1 - b0
                grad[c, p, 0] = dvx * dx
                grad[c, p, 1] = dvy * dy
                grad[c, p, 2] = dvz * dz
    return out, grad


@numba.njit(cache=True)
def _trilinear_vjp_kernel(shape_c, nx, ny, nz, points, cot):
    gvals = np.zeros((shape_c, nx, ny, nz))
    P = points.shape[0]
    for p in range(P):
        i, fx, _ = _axis_coord(points[p, 0], nx)
        j, fy, _ = _axis_coord(points[p, 1], ny)
        k, fz, _ = _axis_coord(points[p, 2], nz)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        for c in range(shape_c):
            g = cot[c, p]
            if g == 0.0:
                continue
            gvals[c, i, j, k] += g * gx * gy * gz
            gvals[c, i + 1, j, k] += g * fx * gy * gz
            gvals[c, i, j + 1, k] += g * gx * fy * gz
            gvals[c, i + 1, j + 1, k] += g * fx * fy * gz
            gvals[c, i, j, k + 1] += g * gx * gy * fz
            gvals[c, i + 1, j, k + 1] += g * fx * gy * fz
            gvals[c, i, j + 1, k + 1] += g * gx * fy * fz
            gvals[c, i + 1, j + 1, k + 1] += g * fx * fy * fz
    return gvals


def _as_channels(values):
    v = np.asarray(values, dtype=np.float64)
    squeeze = v.ndim == 3
    if squeeze:
        v = v[None]
    return np.ascontiguousarray(v), squeeze


def sample_trilinear(values, points, need_grad: bool = True):
    """Sample ``values`` ((C,) X, Y, Z) at normalized ``points`` (P, 3).

    Returns ``(vals, grads)`` shaped ((C,) P) and ((C,) P, 3); gradients are
    with respect to normalized coordinates.  ``grads`` is None when
    ``need_grad`` is false.
    """
    if isinstance(values, SdfGrid):
        values = values.values
    v, squeeze = _as_channels(values)
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    out, grad = _trilinear_kernel(v, pts, need_grad)
    if not need_grad:
        grad = None
    if squeeze:
        out = out[0]
        grad = grad[0] if grad is not None else None
    return out, grad


def sample_trilinear_vjp(shape, points, cotangent) -> np.ndarray:
    """Transpose of sampling: gradient of ``sum(cot * sample(values))`` w.r.t. values."""
    shape = tuple(shape)
    squeeze = len(shape) == 3
    c = 1 if squeeze else shape[0]
    nx, ny, nz = shape[-3:]
    cot = np.asarray(cotangent, dtype=np.float64).reshape(c, -1)
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    g = _trilinear_vjp_kernel(c, nx, ny, nz, pts, np.ascontiguousarray(cot))
    return g[0] if squeeze else g


# --------------------------------------------------------------------------
# rigid resampling
# --------------------------------------------------------------------------

def transform_query_points(spec_out: GridSpec, half_extent_in: float, t: RigidTransform) -> np.ndarray:
    """Normalized source coordinates ``t^-1(x_v)`` for every output voxel center."""
    y = spec_out.centers()
    return t.apply_inverse(y) / half_extent_in


@numba.njit(cache=True)
def _resample_kernel(values, R, t, s, h_out, h_in, out_shape, need_grad, Jr, cot):
    """Fused ``s * f(R^T (y - t) / (s h_in))`` over output voxel centers, with parameter grads.

    Gradient rows: rotation (3, premultiplied by ``Jr``), translation (3), scale.
    When ``cot`` is non-empty the rows are contracted with it over unclipped
    voxels instead of stored.
    """
    nx, ny, nz = values.shape
    ox, oy, oz = out_shape
    N = ox * oy * oz
    out = np.empty(N)
    contract = cot.size > 0
    grads = np.zeros((7, N)) if need_grad and not contract else np.zeros((7, 0))
    acc = np.zeros(7)
    row = np.empty(7)
    inv = 1.0 / (s * h_in)
    p = 0
    for a in range(ox):
        yx = (-1.0 + (a + 0.5) * (2.0 / ox)) * h_out - t[0]
        for b in range(oy):
            yy = (-1.0 + (b + 0.5) * (2.0 / oy)) * h_out - t[1]
            for c in range(oz):
                yz = (-1.0 + (c + 0.5) * (2.0 / oz)) * h_out - t[2]
                q0 = (R[0, 0] * yx + R[1, 0] * yy + R[2, 0] * yz) * inv
                q1 = (R[0, 1] * yx + R[1, 1] * yy + R[2, 1] * yz) * inv
                q2 = (R[0, 2] * yx + R[1, 2] * yy + R[2, 2] * yz) * inv
                i, fx, dx = _axis_coord(q0, nx)
                j, fy, dy = _axis_coord(q1, ny)
                k, fz, dz = _axis_coord(q2, nz)
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                v000 = values[i, j, k]
                v100 = values[i + 1, j, k]
                v010 = values[i, j + 1, k]
                v110 = values[i + 1, j + 1, k]
                v001 = values[i, j, k + 1]
                v101 = values[i + 1, j, k + 1]
                v011 = values[i, j + 1, k + 1]
                v111 = values[i + 1, j + 1, k + 1]
                a00 = gx * v000 + fx * v100
                a10 = gx * v010 + fx * v110
                a01 = gx * v001 + fx * v101
                a11 = gx * v011 + fx * v111
                b0 = gy * a00 + fy * a10
                b1 = gy * a01 + fy * a11
                f = gz * b0 + fz * b1
                out[p] = s * f
                if need_grad:
                    ex00 = v100 - v000
                    ex10 = v110 - v010
                    ex01 = v101 - v001
                    ex11 = v111 - v011
                    d0 = (gz * (gy * ex00 + fy * ex10) + fz * (gy * ex01 + fy * ex11)) * dx
                    d1 = (gz * (a10 - a00) + fz * (a11 - a01)) * dy
                    d2 = (b1 - b0) * dz
                    # translation: -(R df) / h_in
                    row[3] = -(R[0, 0] * d0 + R[0, 1] * d1 + R[0, 2] * d2) / h_in
                    row[4] = -(R[1, 0] * d0 + R[1, 1] * d1 + R[1, 2] * d2) / h_in
                    row[5] = -(R[2, 0] * d0 + R[2, 1] * d1 + R[2, 2] * d2) / h_in
                    row[6] = f - (d0 * q0 + d1 * q1 + d2 * q2)
                    # right perturbation: -s (q x df), then times Jr
                    c0 = -s * (q1 * d2 - q2 * d1)
                    c1 = -s * (q2 * d0 - q0 * d2)
                    c2 = -s * (q0 * d1 - q1 * d0)
                    row[0] = c0 * Jr[0, 0] + c1 * Jr[1, 0] + c2 * Jr[2, 0]
                    row[1] = c0 * Jr[0, 1] + c1 * Jr[1, 1] + c2 * Jr[2, 1]
                    row[2] = c0 * Jr[0, 2] + c1 * Jr[1, 2] + c2 * Jr[2, 2]
                    if contract:
                        if abs(s * f) <= 1.0:
                            for r in range(7):
                                acc[r] += row[r] * cot[p]
                    else:
                        for r in range(7):
                            grads[r, p] = row[r]
                p += 1
    return out, grads, acc


def resample_under_transform(grid: SdfGrid, t: RigidTransform, with_grad: bool = False,
                             out_spec: GridSpec | None = None, tangent: bool = False):
    """Express ``grid`` in the frame reached by ``t``: ``out(x) = s * grid(t^-1 x)``.

    With ``with_grad`` also returns d(out voxel)/d(params) shaped (7, X, Y, Z)
    over (rotvec[3], translation[3] in meters, scale).  With ``tangent`` the
    first three rows are instead derivatives w.r.t. a right perturbation
    ``R -> R exp(delta)``.  Voxels clipped by re-truncation get zero gradient.
    """
    spec = out_spec or grid.spec
    raw, grads, _ = _run_resample(grid, t, spec, with_grad, tangent, np.zeros(0))
    out = SdfGrid(spec, truncate(raw).reshape(spec.shape))
    if not with_grad:
        return out
    grads[:, np.abs(raw) > 1.0] = 0.0
    return out, grads.reshape((7,) + spec.shape)


def resample_vjp(grid: SdfGrid, t: RigidTransform, cotangent, out_spec: GridSpec | None = None,
                 tangent: bool = False) -> np.ndarray:
    """Contraction of the ``resample_under_transform`` parameter gradient with ``cotangent`` (7,)."""
    spec = out_spec or grid.spec
    cot = np.ascontiguousarray(np.asarray(cotangent, dtype=np.float64).ravel())
    if cot.size != int(np.prod(spec.shape)):
        raise ValueError(f"cotangent size {cot.size} does not match output grid {spec.shape}")
    return _run_resample(grid, t, spec, True, tangent, cot)[2]


def _run_resample(grid, t, spec, with_grad, tangent, cot):
    Jr = np.eye(3) if tangent else so3_right_jacobian(t.rotvec)
    return _resample_kernel(np.ascontiguousarray(grid.values, dtype=np.float64), t.rotation,
                            t.translation, t.scale, spec.half_extent, grid.spec.half_extent,
                            np.array(spec.shape, dtype=np.int64), with_grad, Jr, cot)


def resample_param_grads(q, f, df, t: RigidTransform, half_extent: float, tangent: bool = False):
    """Per-point derivatives of ``s * f(q(params))`` with ``q = R^T (y - t) / (s h)``."""
    R = t.rotation
    s = t.scale
    P = q.shape[0]
    grads = np.empty((7, P))
    # d/dtranslation (meters)
    grads[3:6] = -(df @ R.T).T / half_extent
    # d/dscale
    grads[6] = f - np.einsum("pi,pi->p", df, q)
    # d/drotation: q moves by q x delta under R -> R exp(delta), so the row is
    # s * df^T hat(q) = -s * (q x df)
    rot = -s * np.cross(q, df)
    if not tangent:
        rot = rot @ so3_right_jacobian(t.rotvec)
    grads[0:3] = rot.T
    return grads


def resample_values_vjp(grid_shape, q, scale: float, cotangent) -> np.ndarray:
    """Gradient of ``sum(cot * s * grid(q))`` w.r.t. the source grid values."""
    return sample_trilinear_vjp(grid_shape, q, scale * np.asarray(cotangent).ravel())


__all__ = [
    "sample_trilinear",
    "sample_trilinear_vjp",
    "resample_under_transform",
    "resample_param_grads",
    "resample_vjp",
    "resample_values_vjp",
    "transform_query_points",
    "hat",
]
