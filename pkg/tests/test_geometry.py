import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import fd_match
from hoiprior.errors import EmptyMesh, InvalidShape, IoFailure, ShapeMismatch
from hoiprior.geometry import (GridSpec, RigidTransform, SdfGrid, analytic_sdf, box_mesh, eikonal_residual,
                               icosphere, load_sdf, marching_cubes, mesh_signed_distance, mesh_to_sdf, read_hopg,
                               read_obj, resample_under_transform, resample_vjp, sample_trilinear,
                               sample_trilinear_vjp, save_sdf, shape_sdf, so3_exp, so3_log, so3_right_jacobian,
                               truncate, write_hopg, write_obj)
from hoiprior.geometry.mesh import concatenate, unsigned_distance, winding_number
from hoiprior.geometry.shapes import segment_distance


def sphere_grid(radius=0.05, n=64, center=(0.0, 0.0, 0.0)):
    return analytic_sdf({"type": "sphere", "radius": radius, "transform": {"translation": list(center)}},
                         GridSpec.cube(n))


def smooth_grid(n=16, seed=0):
    spec = GridSpec.cube(n)
    p = spec.centers_normalized()
    rng = np.random.default_rng(seed)
    k = rng.normal(size=(4, 3)) * 2
    v = sum(0.2 * np.sin(p @ kk + ph) for kk, ph in zip(k, rng.uniform(0, 6, 4)))
    return SdfGrid(spec, v.reshape(spec.shape))


# --------------------------------------------------------------------------
# grid spec and IO
# --------------------------------------------------------------------------

def test_grid_spec_defaults():
    spec = GridSpec()
    assert spec.shape == (64, 64, 64)
    assert spec.half_extent == 0.15
    ax = spec.axis_normalized(0)
    assert ax[0] == pytest.approx(-1 + 1 / 64) and ax[-1] == pytest.approx(1 - 1 / 64)
    with pytest.raises(Exception):
        GridSpec((1, 4, 4))
    with pytest.raises(Exception):
        GridSpec((4, 4, 4), -1.0)


def test_sdf_grid_truncates_and_validates():
    spec = GridSpec.cube(4)
    g = SdfGrid(spec, np.full(spec.shape, 3.0))
    assert np.all(g.values == 1.0)
    with pytest.raises(ShapeMismatch):
        SdfGrid(spec, np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        SdfGrid(spec, np.full(spec.shape, np.nan))


@given(arrays(np.float64, (5, 4, 3), elements=st.floats(-5, 5)))
def test_truncation_idempotent(v):
    assert np.array_equal(truncate(truncate(v)), truncate(v))


def test_hopg_layout_is_bit_exact(tmp_path):
    data = np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5)
    path = tmp_path / "g.hopg"
    write_hopg(path, data, 0.15)
    raw = path.read_bytes()
    magic, version, nx, ny, nz, c, half = struct.unpack_from("<4sI3IIf", raw)
    assert (magic, version, nx, ny, nz, c) == (b"HOPG", 1, 3, 4, 5, 2)
    assert half == np.float32(0.15)
    body = np.frombuffer(raw, "<f4", offset=struct.calcsize("<4sI3IIf"))
    # channel-major, x fastest
    assert body[0] == data[0, 0, 0, 0] and body[1] == data[0, 1, 0, 0] and body[3] == data[0, 0, 1, 0]
    assert body[3 * 4 * 5] == data[1, 0, 0, 0]
    back, h = read_hopg(path)
    assert np.array_equal(back, data) and h == 0.15


def test_hopg_rejects_corruption(tmp_path):
    path = tmp_path / "g.hopg"
    write_hopg(path, np.zeros((2, 2, 2)), 0.15)
    raw = path.read_bytes()
    (tmp_path / "bad.hopg").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.hopg").write_bytes(raw[:-4])
    for name in ("bad.hopg", "short.hopg", "missing.hopg"):
        with pytest.raises(IoFailure):
            read_hopg(tmp_path / name)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (4, 6, 2), elements=st.floats(-1, 1, width=32)))
def test_sdf_file_roundtrip(tmp_path_factory, v):
    path = tmp_path_factory.mktemp("rt") / "g.hopg"
    grid = SdfGrid(GridSpec((4, 6, 2)), v)
    save_sdf(path, grid)
    back = load_sdf(path)
    assert back.spec == grid.spec
    assert np.array_equal(back.values, grid.values)


# --------------------------------------------------------------------------
# analytic shapes
# --------------------------------------------------------------------------

def test_sphere_center_value():
    g = sphere_grid(0.05, 64)
    centers = g.spec.centers()
    # voxel centers straddle the origin; the analytic distance at the nearest one
    k = np.argmin(np.linalg.norm(centers, axis=1))
    assert g.values.ravel()[k] == pytest.approx((np.linalg.norm(centers[k]) - 0.05) / 0.15)
    pts = np.zeros((1, 3))
    assert shape_sdf({"type": "sphere", "radius": 0.05}, pts)[0] / 0.15 == pytest.approx(-1 / 3)


def test_union_is_elementwise_min():
    spec = GridSpec.cube(32)
    a = {"type": "sphere", "radius": 0.03, "transform": {"translation": [-0.06, 0, 0]}}
    b = {"type": "sphere", "radius": 0.02, "transform": {"translation": [0.06, 0, 0]}}
    u = analytic_sdf({"type": "union", "children": [a, b]}, spec)
    assert np.array_equal(u.values, np.minimum(analytic_sdf(a, spec).values, analytic_sdf(b, spec).values))
    s = analytic_sdf({"type": "smooth_union", "children": [a, b], "sharpness": 1e4}, spec)
    assert np.allclose(s.values, u.values, atol=1e-3)


def _box_distance(p, half):
    # brute force: distance to the nearest of many surface samples, sign from containment
    inside = np.all(np.abs(p) <= half)
    q = np.clip(p, -half, half)
    if not inside:
        return float(np.linalg.norm(p - q))
    return -float(np.min(half - np.abs(p)))


def test_box_matches_independent_routine():
    spec = GridSpec.cube(64)
    g = analytic_sdf({"type": "box", "size": [0.1, 0.1, 0.1]}, spec)
    rng = np.random.default_rng(0)
    idx = rng.integers(0, spec.num_voxels, 500)
    centers = spec.centers()[idx]
    want = np.array([_box_distance(c, 0.05) for c in centers]) / 0.15
    assert np.allclose(g.values.ravel()[idx], np.clip(want, -1, 1), atol=1e-6)


def test_primitives_and_errors():
    p = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0]])
    cyl = shape_sdf({"type": "cylinder", "radius": 0.02, "height": 0.1}, p)
    assert cyl[0] == pytest.approx(-0.02) and cyl[1] == pytest.approx(0.08)
    tor = shape_sdf({"type": "torus", "major_radius": 0.05, "minor_radius": 0.01}, p)
    assert tor[0] == pytest.approx(0.04)
    cap = shape_sdf({"type": "capsule", "radius": 0.01, "length": 0.04}, np.array([[0, 0, 0.05]]))
    assert cap[0] == pytest.approx(0.02)
    for bad in ({"type": "sphere", "radius": -1}, {"type": "box", "size": 0}, {"type": "blob"},
                {"type": "union", "children": []},
                {"type": "sphere", "radius": 0.01, "transform": {"rotation": [0, 0, 1]}}):
        with pytest.raises(InvalidShape):
            shape_sdf(bad, p)
    deep = {"type": "sphere", "radius": 0.01}
    for _ in range(9):
        deep = {"type": "union", "children": [deep]}
    with pytest.raises(InvalidShape):
        shape_sdf(deep, p)


# --------------------------------------------------------------------------
# trilinear sampling
# --------------------------------------------------------------------------

def test_sample_at_voxel_center_is_exact():
    g = smooth_grid()
    pts = g.spec.centers_normalized()
    vals, _ = sample_trilinear(g, pts)
    assert np.array_equal(vals, g.values.ravel())


def test_sample_reproduces_linear_field():
    spec = GridSpec.cube(16)
    v = spec.centers_normalized()[:, 0].reshape(spec.shape)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-0.9, 0.9, (200, 3))
    vals, grads = sample_trilinear(v, pts)
    assert np.allclose(vals, pts[:, 0], atol=1e-12)
    assert np.allclose(grads, [1.0, 0.0, 0.0], atol=1e-9)


def test_sample_border_clamp():
    g = smooth_grid()
    vals, grads = sample_trilinear(g, np.array([[5.0, 0.0, 0.0]]))
    inner, _ = sample_trilinear(g, np.array([[1 - 1 / 16, 0.0, 0.0]]))
    assert vals[0] == pytest.approx(inner[0])
    assert grads[0, 0] == 0.0


def test_sample_gradient_finite_differences():
    g = smooth_grid()
    rng = np.random.default_rng(2)
    pts = rng.uniform(-0.85, 0.85, (100, 3))
    _, grads = sample_trilinear(g, pts)
    h = 1e-7
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (sample_trilinear(g, pts + e, False)[0] - sample_trilinear(g, pts - e, False)[0]) / (2 * h)
        assert np.allclose(grads[:, k], fd, rtol=1e-4, atol=1e-6)


def test_sample_vjp_is_transpose():
    g = smooth_grid()
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1.2, 1.2, (50, 3))
    cot = rng.normal(size=50)
    w = sample_trilinear_vjp(g.spec.shape, pts, cot)
    dv = rng.normal(size=g.spec.shape)
    lhs = np.sum(w * dv)
    rhs = np.sum(cot * sample_trilinear(dv, pts, False)[0])
    assert lhs == pytest.approx(rhs, rel=1e-12)


# --------------------------------------------------------------------------
# rigid resampling
# --------------------------------------------------------------------------

def test_resample_identity():
    g = sphere_grid(0.05, 32)
    out = resample_under_transform(g, RigidTransform())
    assert np.array_equal(out.values, g.values)


def test_resample_one_voxel_shift():
    g = smooth_grid(16)
    pitch = g.spec.voxel_size
    out = resample_under_transform(g, RigidTransform(translation=[pitch, 0, 0])).values
    assert np.allclose(out[1:], g.values[:-1], atol=1e-12)
    assert np.allclose(out[0], g.values[0], atol=1e-12)


def test_resample_quarter_turn_permutes_axes():
    g = smooth_grid(16)
    out = resample_under_transform(g, RigidTransform([0, 0, np.pi / 2])).values
    n = 16
    # out(x, y) = in(R^T (x, y)) = in(y, -x)
    expected = np.empty_like(out)
    for i in range(n):
        for j in range(n):
            expected[i, j] = g.values[j, n - 1 - i]
    assert np.allclose(out, expected, atol=1e-6)


def test_resample_inverse_roundtrip():
    g = sphere_grid(0.05, 32, center=(0.01, -0.01, 0.0))
    rng = np.random.default_rng(4)
    for _ in range(3):
        t = RigidTransform(rng.normal(size=3) * 0.2, rng.normal(size=3) * 0.01)
        back = resample_under_transform(resample_under_transform(g, t), t.inverse())
        inner = (slice(4, -4),) * 3
        assert np.max(np.abs(back.values[inner] - g.values[inner])) < 2 * g.spec.voxel_size_normalized


def test_resample_scale_rule():
    g = smooth_grid(16)
    out = resample_under_transform(g, RigidTransform(scale=2.0)).values
    q = g.spec.centers_normalized() / 2.0
    assert np.allclose(out.ravel(), truncate(2.0 * sample_trilinear(g, q, False)[0]))


def test_resample_gradients_finite_differences():
    g = smooth_grid(16)
    rng = np.random.default_rng(5)
    for _ in range(5):
        p = np.concatenate([rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.01, [1 + 0.1 * rng.random()]])
        t = RigidTransform.from_params(p)
        out, grads = resample_under_transform(g, t, with_grad=True)
        inside = np.abs(out.values) < 0.99
        for k in range(7):
            h = 1e-6
            e = np.zeros(7)
            e[k] = h
            fp = resample_under_transform(g, RigidTransform.from_params(p + e)).values
            fm = resample_under_transform(g, RigidTransform.from_params(p - e)).values
            ok = fd_match(grads[k], fp, fm, out.values, h)
            assert ok[inside].all()


def test_resample_vjp_contracts_gradients():
    g = smooth_grid(16)
    t = RigidTransform([0.1, -0.2, 0.3], [0.01, 0.0, -0.02], 1.1)
    cot = np.random.default_rng(6).normal(size=g.spec.shape)
    _, grads = resample_under_transform(g, t, with_grad=True)
    assert np.allclose(resample_vjp(g, t, cot), np.einsum("kxyz,xyz->k", grads, cot), rtol=1e-10)
    with pytest.raises(ValueError):
        resample_vjp(g, t, np.zeros(5))


def test_so3_helpers():
    rng = np.random.default_rng(7)
    for _ in range(20):
        w = rng.normal(size=3)
        R = so3_exp(w)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        if np.linalg.norm(w) < np.pi:
            assert np.allclose(so3_log(R), w, atol=1e-9)
    assert np.allclose(so3_exp(np.array([1e-9, 0, 0])), np.eye(3), atol=1e-8)
    # right Jacobian: exp(w + dw) ~ exp(w) exp(Jr dw)
    w = np.array([0.3, -0.4, 0.5])
    dw = np.array([1e-6, 2e-6, -1e-6])
    lhs = so3_exp(w + dw)
    rhs = so3_exp(w) @ so3_exp(so3_right_jacobian(w) @ dw)
    assert np.allclose(lhs, rhs, atol=1e-11)


def test_transform_compose_inverse():
    a = RigidTransform([0.1, 0.2, 0.3], [0.01, 0.02, 0.03], 1.5)
    p = np.random.default_rng(8).normal(size=(10, 3))
    assert np.allclose(a.inverse().apply(a.apply(p)), p)
    assert np.allclose(a.compose(a.inverse()).apply(p), p)
    with pytest.raises(InvalidShape):
        RigidTransform(scale=0.0)


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------

def test_marching_cubes_empty_for_positive_grid():
    spec = GridSpec.cube(8)
    assert marching_cubes(SdfGrid(spec, np.ones(spec.shape))).is_empty


def test_marching_cubes_sphere_radius():
    g = sphere_grid(0.05, 64)
    mesh = marching_cubes(g)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 0.05)) < 0.5 * g.spec.voxel_size


def test_marching_cubes_plane_area():
    spec = GridSpec.cube(64)
    c = 0.013
    v = (spec.centers()[:, 2] - c) / spec.half_extent
    mesh = marching_cubes(SdfGrid(spec, v.reshape(spec.shape)))
    # the isosurface spans the lattice of voxel centers
    span = (spec.resolution[0] - 1) * spec.voxel_size
    assert mesh.area() == pytest.approx(span**2, rel=0.02)
    assert np.allclose(mesh.vertices[:, 2], c, atol=1e-9)


@pytest.mark.parametrize("desc", [
    {"type": "sphere", "radius": 0.05},
    {"type": "box", "size": [0.08, 0.06, 0.1]},
    {"type": "capsule", "radius": 0.02, "length": 0.08},
    {"type": "cylinder", "radius": 0.03, "height": 0.08},
    {"type": "torus", "major_radius": 0.05, "minor_radius": 0.015},
])
def test_marching_cubes_vertices_near_surface(desc):
    spec = GridSpec.cube(64)
    mesh = marching_cubes(analytic_sdf(desc, spec))
    assert np.all(np.abs(shape_sdf(desc, mesh.vertices)) < spec.voxel_size)


def test_mesh_to_sdf_icosphere():
    spec = GridSpec.cube(64)
    g = mesh_to_sdf(icosphere(3, 0.05), spec)
    ref = sphere_grid(0.05, 64)
    band = np.abs(ref.values) < 1
    err = np.abs(g.values - ref.values)[band] * spec.half_extent
    assert err.max() < spec.voxel_size
    rng = np.random.default_rng(9)
    idx = rng.integers(0, spec.num_voxels, 100)
    probe = np.abs(g.values.ravel()[idx] - ref.values.ravel()[idx]) * spec.half_extent
    assert probe.max() < 0.25 * spec.voxel_size


def test_mesh_to_sdf_cube_center():
    spec = GridSpec((3, 3, 3), 0.15)
    g = mesh_to_sdf(box_mesh((0.1, 0.1, 0.1)), spec)
    assert g.values[1, 1, 1] == pytest.approx(-1 / 3)


def _point_triangle_distance(p, a, b, c):
    # project onto the plane, fall back to edges when the projection is outside
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    inside = True
    for u, v in ((a, b), (b, c), (c, a)):
        if np.cross(v - u, q - u) @ n < 0:
            inside = False
    if inside:
        return abs((p - a) @ n)
    return min(segment_distance(p[None], u, v)[0] for u, v in ((a, b), (b, c), (c, a)))


def test_mesh_distance_outside_bbox_brute_force():
    mesh = icosphere(1, 0.04)
    rng = np.random.default_rng(10)
    pts = rng.uniform(-0.14, 0.14, (40, 3))
    pts = pts[np.any(np.abs(pts) > 0.05, axis=1)]
    d = mesh_signed_distance(mesh, pts)
    for p, dp in zip(pts, d):
        want = min(_point_triangle_distance(p, *tri) for tri in mesh.triangles())
        assert dp == pytest.approx(want, abs=1e-12)


def test_mesh_sign_and_errors():
    mesh = icosphere(2, 0.05)
    w = winding_number(mesh, np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.049], [0.2, 0, 0]]))
    assert w[0] == pytest.approx(1.0) and w[1] > 0.5 and w[2] == 0.0
    with pytest.raises(EmptyMesh):
        mesh_to_sdf(icosphere(0).__class__.empty())
    with pytest.raises(EmptyMesh):
        unsigned_distance(icosphere(0).__class__.empty(), np.zeros((1, 3)))


def test_mesh_sdf_roundtrip_band():
    spec = GridSpec.cube(32)
    g = analytic_sdf({"type": "capsule", "radius": 0.03, "length": 0.06}, spec)
    back = mesh_to_sdf(marching_cubes(g), spec)
    band = np.abs(g.values) < 1
    assert np.max(np.abs(back.values - g.values)[band]) * spec.half_extent < 1.5 * spec.voxel_size


def test_obj_roundtrip(tmp_path):
    mesh = concatenate([icosphere(1, 0.02), box_mesh((0.01, 0.02, 0.03), (0.05, 0, 0))])
    write_obj(tmp_path / "m.obj", mesh)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, mesh.faces)
    assert np.allclose(back.vertices, mesh.vertices, rtol=1e-8)
    write_obj(tmp_path / "m2.obj", back)
    assert (tmp_path / "m.obj").read_bytes() == (tmp_path / "m2.obj").read_bytes()


def test_degenerate_faces_dropped():
    from hoiprior.geometry import TriMesh
    m = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2], [0, 1, 3]]))
    assert len(m.faces) == 1
    with pytest.raises(ShapeMismatch):
        TriMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))


# --------------------------------------------------------------------------
# eikonal
# --------------------------------------------------------------------------

def test_eikonal_sphere():
    g = sphere_grid(0.05, 64)
    core = np.linalg.norm(g.spec.centers(), axis=1).reshape(g.spec.shape) < 2 * g.spec.voxel_size
    assert eikonal_residual(g, exclude=core).mean < 0.02


def test_eikonal_linear_ramp():
    spec = GridSpec.cube(32)
    v = spec.centers_normalized()[:, 0].reshape(spec.shape)
    stats = eikonal_residual(SdfGrid(spec, v))
    assert stats.count > 0
    assert stats.max < 1e-9


def test_eikonal_doubled_sphere():
    g = sphere_grid(0.05, 64)
    doubled = SdfGrid(g.spec, 2 * g.values)
    core = np.linalg.norm(g.spec.centers(), axis=1).reshape(g.spec.shape) < 2 * g.spec.voxel_size
    assert eikonal_residual(doubled, exclude=core).mean == pytest.approx(1.0, abs=0.05)


def test_eikonal_loss_gradient():
    from hoiprior.geometry import eikonal_loss
    g = smooth_grid(8)
    step = g.spec.voxel_size_normalized
    loss, grad = eikonal_loss(g.values, step)
    rng = np.random.default_rng(11)
    for _ in range(10):
        idx = tuple(rng.integers(0, 8, 3))
        e = np.zeros_like(g.values)
        e[idx] = 1e-6
        fd = (eikonal_loss(g.values + e, step)[0] - eikonal_loss(g.values - e, step)[0]) / 2e-6
        assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)
