"""Reconstruction of an object SDF, hand poses and object-to-hand transforms from mask clips.

Cameras are orthographic and live in the hand-centric frame, so the object
mask of frame ``t`` depends on the object grid and ``T^t`` while the hand
mask depends on ``theta^t`` only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.spatial import cKDTree

from .codec import BlockStatsCodec, Codec
from .diffusion import Denoiser, adaptive_noise_bound, sds_gradient
from .errors import (DivergedOptimization, EmptySurface, FrameOutOfRange, IoFailure, ShapeMismatch)
from .geometry.eikonal import eikonal_loss
from .geometry.grid import GridSpec, SdfGrid, load_sdf, save_sdf
from .geometry.mesh import marching_cubes
from .geometry.sampling import _axis_coord
from .geometry.shapes import analytic_sdf
from .geometry.transforms import RigidTransform, so3_exp, so3_log
from .hand import NUM_ANGLES, HandSkeleton, _chain, _jacobian_from_chain, hand_capsules
from .interaction import InteractionAssembler, InteractionGrid, assemble_interaction_grid

ROTATION_WEIGHT = 0.1   # m per radian in the transform smoothness distance


# --------------------------------------------------------------------------
# cameras and observations
# --------------------------------------------------------------------------

@dataclass
class OrthoCamera:
    """Orthographic view along ``direction`` of the square [-h, h]^2 around the origin."""

    direction: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    resolution: int = 64
    half_extent: float = 0.15

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=float).reshape(3)
        self.up = np.asarray(self.up, dtype=float).reshape(3)
        n = np.linalg.norm(self.direction)
        if not n > 0:
            raise ShapeMismatch("camera direction must be nonzero")
        self.direction = self.direction / n
        if np.linalg.norm(np.cross(self.up, self.direction)) < 1e-6:
            self.up = np.array([0.0, 1.0, 0.0]) if abs(self.direction[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        self.resolution = int(self.resolution)
        self.half_extent = float(self.half_extent)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) orthonormal axes."""
        f = self.direction
        r = np.cross(self.up, f)
        r /= np.linalg.norm(r)
        return r, np.cross(f, r), f

    @property
    def pixel_size(self) -> float:
        return 2.0 * self.half_extent / self.resolution

    def pixel_coords(self) -> np.ndarray:
        """Image-plane coordinates of pixel centers, (H*W, 2); row index runs along ``up``."""
        c = -self.half_extent + (np.arange(self.resolution) + 0.5) * self.pixel_size
        V, U = np.meshgrid(c, c, indexing="ij")
        return np.stack([U.ravel(), V.ravel()], axis=1)

    def pixel_origins(self) -> np.ndarray:
        r, u, _ = self.basis()
        uv = self.pixel_coords()
        return uv[:, :1] * r + uv[:, 1:] * u

    def to_dict(self) -> dict:
        return {"direction": [float(v) for v in self.direction], "up": [float(v) for v in self.up],
                "resolution": self.resolution, "half_extent": self.half_extent}

    @classmethod
    def from_dict(cls, d: dict) -> "OrthoCamera":
        return cls(d["direction"], d.get("up", (0.0, 0.0, 1.0)), d.get("resolution", 64), d.get("half_extent", 0.15))


def axis_cameras(resolution: int = 64, half_extent: float = 0.15) -> list[OrthoCamera]:
    """Three views along +x, +y and +z."""
    return [OrthoCamera(np.eye(3)[k], resolution=resolution, half_extent=half_extent) for k in range(3)]


@dataclass
class SceneParams:
    object: SdfGrid
    thetas: np.ndarray                  # (F, 20)
    transforms: list                    # F RigidTransforms, object -> hand

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float).reshape(-1, NUM_ANGLES)
        if len(self.transforms) != len(self.thetas):
            raise ShapeMismatch(f"{len(self.thetas)} poses but {len(self.transforms)} transforms")
        if len(self.thetas) < 2:
            raise ShapeMismatch("a clip needs at least 2 frames")
        if not np.all(np.isfinite(self.thetas)):
            raise ValueError("poses must be finite")

    @property
    def num_frames(self) -> int:
        return len(self.thetas)

    def copy(self) -> "SceneParams":
        return SceneParams(self.object.copy(), self.thetas.copy(),
                           [RigidTransform.from_dict(t.to_dict()) for t in self.transforms])

    def frame_dicts(self) -> list[dict]:
        return [{"theta": [float(a) for a in th], "transform": tf.to_dict()}
                for th, tf in zip(self.thetas, self.transforms)]


@dataclass
class ClipObservation:
    cameras: list
    object_masks: np.ndarray            # (F, V, H, W) in [0, 1]
    hand_masks: np.ndarray

    def __post_init__(self):
        self.object_masks = np.asarray(self.object_masks, dtype=float)
        self.hand_masks = np.asarray(self.hand_masks, dtype=float)
        if self.object_masks.shape != self.hand_masks.shape or self.object_masks.ndim != 4:
            raise ShapeMismatch("object and hand masks must share an (F, V, H, W) shape")
        F, V, H, W = self.object_masks.shape
        if V != len(self.cameras) or any(c.resolution != H or H != W for c in self.cameras):
            raise ShapeMismatch("mask resolution or view count disagrees with the cameras")
        for m in (self.object_masks, self.hand_masks):
            if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
                raise ValueError("masks must lie in [0, 1]")

    @property
    def num_frames(self) -> int:
        return self.object_masks.shape[0]

    def save(self, directory) -> Path:
        """Write ``clip.json`` plus one 8-bit PGM per (frame, view, mask kind)."""
        out = Path(directory)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"cannot create {out}: {exc}") from exc
        frames = []
        for t in range(self.num_frames):
            views = []
            for v in range(len(self.cameras)):
                names = {}
                for kind, masks in (("object", self.object_masks), ("hand", self.hand_masks)):
                    name = f"frame_{t:03d}_view_{v}_{kind}.pgm"
                    write_pgm(out / name, masks[t, v])
                    names[kind] = name
                views.append(names)
            frames.append(views)
        manifest = {"format": "hoiprior-clip", "version": 1,
                    "cameras": [c.to_dict() for c in self.cameras], "frames": frames}
        from .synth import write_json
        write_json(out / "clip.json", manifest)
        return out / "clip.json"

    @classmethod
    def load(cls, path) -> "ClipObservation":
        from .synth import read_json
        p = Path(path)
        if p.is_dir():
            p = p / "clip.json"
        d = read_json(p)
        cams = [OrthoCamera.from_dict(c) for c in d["cameras"]]
        obj = [[read_pgm(p.parent / v["object"]) for v in views] for views in d["frames"]]
        hand = [[read_pgm(p.parent / v["hand"]) for v in views] for views in d["frames"]]
        return cls(cams, np.array(obj), np.array(hand))


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM; row 0 of ``image`` is written last so ``up`` points up."""
    img = np.clip(np.round(np.asarray(image, dtype=float) * 255.0), 0, 255).astype(np.uint8)[::-1]
    h, w = img.shape
    try:
        Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_pgm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise IoFailure(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pixels.size != w * h or maxval != 255:
        raise IoFailure(f"{path}: truncated or unsupported PGM")
    return pixels.reshape(h, w)[::-1].astype(float) / 255.0


# --------------------------------------------------------------------------
# silhouette rendering
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _log_sigmoid(x):
    if x >= 0:
        return -np.log1p(np.exp(-x))
    return x - np.log1p(np.exp(x))


@numba.njit(cache=True)
def _sample_point(values, R, t, h_obj, origin, fwd, s):
    x0 = origin[0] + s * fwd[0] - t[0]
    x1 = origin[1] + s * fwd[1] - t[1]
    x2 = origin[2] + s * fwd[2] - t[2]
    q0 = (R[0, 0] * x0 + R[1, 0] * x1 + R[2, 0] * x2) / h_obj
    q1 = (R[0, 1] * x0 + R[1, 1] * x1 + R[2, 1] * x2) / h_obj
    q2 = (R[0, 2] * x0 + R[1, 2] * x1 + R[2, 2] * x2) / h_obj
    return q0, q1, q2


@numba.njit(cache=True)
def _trilinear_value(values, q0, q1, q2):
    nx, ny, nz = values.shape
    i, fx, _ = _axis_coord(q0, nx)
    j, fy, _ = _axis_coord(q1, ny)
    k, fz, _ = _axis_coord(q2, nz)
    gx = 1.0 - fx
    gy = 1.0 - fy
    a00 = gx * values[i, j, k] + fx * values[i + 1, j, k]
    a10 = gx * values[i, j + 1, k] + fx * values[i + 1, j + 1, k]
    a01 = gx * values[i, j, k + 1] + fx * values[i + 1, j, k + 1]
    a11 = gx * values[i, j + 1, k + 1] + fx * values[i + 1, j + 1, k + 1]
    return (1.0 - fz) * (gy * a00 + fy * a10) + fz * (gy * a01 + fy * a11)


@numba.njit(cache=True)
def _trilinear_at(values, q0, q1, q2):
    nx, ny, nz = values.shape
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
    d0 = (gz * (gy * (v100 - v000) + fy * (v110 - v010)) + fz * (gy * (v101 - v001) + fy * (v111 - v011))) * dx
    d1 = (gz * (a10 - a00) + fz * (a11 - a01)) * dy
    d2 = (b1 - b0) * dz
    return f, d0, d1, d2, i, j, k, fx, fy, fz


@numba.njit(cache=True)
def _march_kernel(values, R, t, h_obj, origins, fwd, s0, ds, ns, inv_tau, cot, target, quad, grad_values):
    """Soft silhouette ``1 - prod_k (1 - alpha_k)`` with ``alpha_k = max(1 - Phi_{k+1} / Phi_k, 0)``.

    ``Phi = sigmoid(sdf / tau)``.  The product telescopes over the descending
    steps of the SDF along the ray, so a ray grazing a convex surface gets
    ``sigmoid(-min sdf / tau)``: the soft rim is centered on the true outline.
    The per-pixel cotangent is ``cot[p] + 2 quad (mask[p] - target[p])``;
    when both are absent only the forward pass runs.  Returns the masks,
    the accumulated transform gradient (rotation tangent, translation in m)
    and ``sum quad (mask - target)^2``.
    """
    P = origins.shape[0]
    mask = np.empty(P)
    acc = np.zeros(6)
    f = np.empty(ns)
    backward = cot.size > 0 or quad != 0.0
    sq = 0.0
    # each ray is a line in object coordinates: q_k = base + k * step
    st0 = (R[0, 0] * fwd[0] + R[1, 0] * fwd[1] + R[2, 0] * fwd[2]) * ds / h_obj
    st1 = (R[0, 1] * fwd[0] + R[1, 1] * fwd[1] + R[2, 1] * fwd[2]) * ds / h_obj
    st2 = (R[0, 2] * fwd[0] + R[1, 2] * fwd[1] + R[2, 2] * fwd[2]) * ds / h_obj
    for p in range(P):
        b0, b1, b2 = _sample_point(values, R, t, h_obj, origins[p], fwd, s0)
        for k in range(ns):
            f[k] = _trilinear_value(values, b0 + k * st0, b1 + k * st1, b2 + k * st2)
        # the log-transmittance telescopes over each run of descending samples
        log_trans = 0.0
        start = 0.0
        falling = False
        for k in range(ns - 1):
            down = f[k + 1] < f[k]
            if down and not falling:
                start = f[k]
            elif falling and not down:
                log_trans += _log_sigmoid(f[k] * inv_tau) - _log_sigmoid(start * inv_tau)
            falling = down
        if falling:
            log_trans += _log_sigmoid(f[ns - 1] * inv_tau) - _log_sigmoid(start * inv_tau)
        trans = np.exp(log_trans)
        m = 1.0 - trans
        mask[p] = m
        if not backward:
            continue
        c = 0.0
        if cot.size > 0:
            c += cot[p]
        if quad != 0.0:
            r = m - target[p]
            sq += quad * r * r
            c += 2.0 * quad * r
        if c == 0.0:
            continue
        for k in range(ns):
            # d log(trans) / d f_k collects +1 as the end of a descent, -1 as its start
            w = 0.0
            if k > 0 and f[k] < f[k - 1]:
                w += 1.0
            if k < ns - 1 and f[k + 1] < f[k]:
                w -= 1.0
            if w == 0.0:
                continue
            phi = 1.0 / (1.0 + np.exp(-f[k] * inv_tau))
            gf = -c * trans * w * (1.0 - phi) * inv_tau
            if gf == 0.0:
                continue
            q0, q1, q2 = _sample_point(values, R, t, h_obj, origins[p], fwd, s0 + k * ds)
            _, d0, d1, d2, i, j, kk, fx, fy, fz = _trilinear_at(values, q0, q1, q2)
            if grad_values.size > 0:
                gx = 1.0 - fx
                gy = 1.0 - fy
                gz = 1.0 - fz
                grad_values[i, j, kk] += gf * gx * gy * gz
                grad_values[i + 1, j, kk] += gf * fx * gy * gz
                grad_values[i, j + 1, kk] += gf * gx * fy * gz
                grad_values[i + 1, j + 1, kk] += gf * fx * fy * gz
                grad_values[i, j, kk + 1] += gf * gx * gy * fz
                grad_values[i + 1, j, kk + 1] += gf * fx * gy * fz
                grad_values[i, j + 1, kk + 1] += gf * gx * fy * fz
                grad_values[i + 1, j + 1, kk + 1] += gf * fx * fy * fz
            g0 = gf * d0
            g1 = gf * d1
            g2 = gf * d2
            # q = R^T (x - t) / h: right perturbation gives g x q, translation -R g / h
            acc[0] += g1 * q2 - g2 * q1
            acc[1] += g2 * q0 - g0 * q2
            acc[2] += g0 * q1 - g1 * q0
            acc[3] -= (R[0, 0] * g0 + R[0, 1] * g1 + R[0, 2] * g2) / h_obj
            acc[4] -= (R[1, 0] * g0 + R[1, 1] * g1 + R[1, 2] * g2) / h_obj
            acc[5] -= (R[2, 0] * g0 + R[2, 1] * g1 + R[2, 2] * g2) / h_obj
    return mask, acc, sq


def _ray_samples(camera: OrthoCamera, pitch: float) -> tuple[float, float, int]:
    """First offset, spacing and count of samples spanning the camera cube along the view."""
    span = camera.half_extent * float(np.abs(camera.direction).sum())
    n = int(np.ceil(2.0 * span / pitch - 1e-9))
    return -span + 0.5 * (2.0 * span / n), 2.0 * span / n, n


def default_tau(obj: SdfGrid) -> float:
    return obj.spec.voxel_size


def _march(obj: SdfGrid, transform: RigidTransform, camera: OrthoCamera, tau: float,
           cot=None, target=None, quad: float = 0.0, grad_values=None):
    s0, ds, ns = _ray_samples(camera, obj.spec.voxel_size)
    h = obj.spec.half_extent
    empty = np.zeros(0)
    cot_arr = empty if cot is None else np.ascontiguousarray(np.asarray(cot, dtype=float).ravel())
    tgt = empty if target is None else np.ascontiguousarray(np.asarray(target, dtype=float).ravel())
    gv = np.zeros((0, 0, 0)) if grad_values is None else grad_values
    mask, acc, sq = _march_kernel(np.ascontiguousarray(obj.values), transform.rotation, transform.translation,
                                  h, camera.pixel_origins(), camera.direction, s0, ds, ns, h / tau,
                                  cot_arr, tgt, float(quad), gv)
    return mask.reshape(camera.resolution, camera.resolution), acc, sq


def render_object_mask(obj: SdfGrid, transform: RigidTransform, camera: OrthoCamera,
                       tau: float | None = None) -> np.ndarray:
    """Soft object silhouette of ``obj`` placed in the hand frame by ``transform``."""
    return _march(obj, transform, camera, tau or default_tau(obj))[0]


def _capsule_projection(skel: HandSkeleton, theta, camera: OrthoCamera):
    caps = hand_capsules(skel, theta)
    r, u, _ = camera.basis()
    basis = np.stack([r, u], axis=1)
    return caps, caps.a @ basis, caps.b @ basis, basis


@numba.njit(cache=True)
def _hand_distance_kernel(uv, a2, b2, radius):
    """Per pixel: nearest capsule, its signed distance, segment parameter and unit direction to the pixel."""
    P = uv.shape[0]
    S = a2.shape[0]
    best = np.empty(P)
    owner = np.empty(P, dtype=np.int64)
    param = np.empty(P)
    normal = np.zeros((P, 2))
    for p in range(P):
        bd = np.inf
        for c in range(S):
            e0 = b2[c, 0] - a2[c, 0]
            e1 = b2[c, 1] - a2[c, 1]
            w0 = uv[p, 0] - a2[c, 0]
            w1 = uv[p, 1] - a2[c, 1]
            den = e0 * e0 + e1 * e1
            u = 0.0
            if den > 1e-300:
                u = min(max((w0 * e0 + w1 * e1) / den, 0.0), 1.0)
            r0 = w0 - u * e0
            r1 = w1 - u * e1
            dist = np.sqrt(r0 * r0 + r1 * r1)
            sd = dist - radius[c]
            if sd < bd:
                bd = sd
                owner[p] = c
                param[p] = u
                if dist > 0:
                    normal[p, 0] = r0 / dist
                    normal[p, 1] = r1 / dist
                else:
                    normal[p, 0] = 0.0
                    normal[p, 1] = 0.0
        best[p] = bd
    return best, owner, param, normal


def render_hand_mask(skeleton: HandSkeleton, theta, camera: OrthoCamera, tau: float) -> np.ndarray:
    """``sigmoid(-d / tau)`` with ``d`` the smallest hand SDF along each ray.

    Orthographic rays meet a capsule union at the 2D distance from the pixel
    to the projected segments minus the radius, so ``d`` is exact.  This is
    the same edge profile the object renderer produces for convex shapes.
    """
    caps, a2, b2, _ = _capsule_projection(skeleton, theta, camera)
    d = _hand_distance_kernel(camera.pixel_coords(), a2, b2, caps.radius)[0]
    return _sigmoid(-d / tau).reshape(camera.resolution, camera.resolution)


def _hand_mask_vjp(skel: HandSkeleton, theta, camera: OrthoCamera, tau: float, cot=None, target=None,
                   quad: float = 0.0):
    caps, a2, b2, basis = _capsule_projection(skel, theta, camera)
    d, k, sk, n = _hand_distance_kernel(camera.pixel_coords(), a2, b2, caps.radius)
    m = _sigmoid(-d / tau)
    c = np.zeros(len(d)) if cot is None else np.asarray(cot, float).ravel().copy()
    sq = 0.0
    if quad:
        r = m - np.asarray(target, float).ravel()
        sq = float(quad * np.sum(r * r))
        c += 2.0 * quad * r
    gd = -c * m * (1.0 - m) / tau
    # envelope theorem: moving an endpoint moves the closest point by (1 - s) or s,
    # and the distance changes along the unit vector from the pixel
    ga2 = np.zeros_like(a2)
    gb2 = np.zeros_like(b2)
    np.add.at(ga2, k, -(gd * (1.0 - sk))[:, None] * n)
    np.add.at(gb2, k, -(gd * sk)[:, None] * n)
    ga, gb = ga2 @ basis.T, gb2 @ basis.T
    # finger capsule (f, bone) runs from joint (f, bone-1) (or the fixed knuckle) to joint (f, bone)
    gj = np.zeros((5, 3, 3))
    fing = caps.finger >= 0
    gj[caps.finger[fing], caps.bone[fing]] += gb[fing]
    inner = fing & (caps.bone > 0)
    gj[caps.finger[inner], caps.bone[inner] - 1] += ga[inner]
    J = _jacobian_from_chain(_chain(skel, np.asarray(theta, float)))
    g_theta = np.einsum("ji,jik->k", gj.reshape(15, 3), J)
    return m.reshape(camera.resolution, camera.resolution), g_theta, sq


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Silhouette:
    object: np.ndarray
    hand: np.ndarray


def render_silhouette(scene: SceneParams, t: int, camera: OrthoCamera, skeleton: HandSkeleton | None = None,
                      tau: float | None = None) -> Silhouette:
    _check_frame(scene, t)
    tau = tau or default_tau(scene.object)
    skel = skeleton or HandSkeleton()
    return Silhouette(render_object_mask(scene.object, scene.transforms[t], camera, tau),
                      render_hand_mask(skel, scene.thetas[t], camera, tau))


@dataclass
class SceneGradient:
    object: np.ndarray          # d/d object voxel values
    transform: np.ndarray       # (6,) right-perturbation rotation, translation in meters
    theta: np.ndarray           # (20,)


def silhouette_vjp(scene: SceneParams, t: int, camera: OrthoCamera, cot_object=None, cot_hand=None,
                   skeleton: HandSkeleton | None = None, tau: float | None = None) -> SceneGradient:
    """Pull per-pixel cotangents on the two masks back to the frame's scene parameters."""
    _check_frame(scene, t)
    tau = tau or default_tau(scene.object)
    skel = skeleton or HandSkeleton()
    gv = np.zeros(scene.object.spec.shape)
    g_t = np.zeros(6)
    if cot_object is not None:
        _, g_t, _ = _march(scene.object, scene.transforms[t], camera, tau, cot=cot_object, grad_values=gv)
    g_theta = np.zeros(NUM_ANGLES)
    if cot_hand is not None:
        _, g_theta, _ = _hand_mask_vjp(skel, scene.thetas[t], camera, tau, cot=cot_hand)
    return SceneGradient(gv, g_t, g_theta)


def _check_frame(scene: SceneParams, t: int) -> None:
    if not 0 <= int(t) < scene.num_frames:
        raise FrameOutOfRange(f"frame {t} outside [0, {scene.num_frames})")


# --------------------------------------------------------------------------
# per-frame interaction grids
# --------------------------------------------------------------------------

def _is_identity(tf: RigidTransform) -> bool:
    return not np.any(tf.rotvec) and not np.any(tf.translation) and tf.scale == 1.0


def extract_frame_grid(scene: SceneParams, t: int, skeleton: HandSkeleton | None = None,
                       codec: Codec | None = None) -> InteractionGrid:
    """Object resampled into frame ``t``'s hand frame, encoded, joined with the skeletal field."""
    _check_frame(scene, t)
    codec = codec or BlockStatsCodec()
    skel = skeleton or HandSkeleton()
    tf = scene.transforms[t]
    if _is_identity(tf):
        return assemble_interaction_grid(codec.encode(scene.object), scene.thetas[t], skel)
    return InteractionAssembler(scene.object, skel, codec)(tf, scene.thetas[t]).grid


def frame_grid_vjp(scene: SceneParams, t: int, cotangent: np.ndarray, skeleton: HandSkeleton | None = None,
                   codec: Codec | None = None) -> SceneGradient:
    _check_frame(scene, t)
    asm = InteractionAssembler(scene.object, skeleton or HandSkeleton(), codec or BlockStatsCodec())
    state = asm(scene.transforms[t], scene.thetas[t])
    g_t, g_theta, g_obj = asm.vjp(state, cotangent, wrt_object=True)
    return SceneGradient(g_obj, g_t[:6], g_theta)


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

@dataclass
class ReconConfig:
    iters: int = 15000
    lr_object: float = 1e-2
    lr_pose: float = 1e-2
    lr_transform: float = 1e-2          # radians and normalized translation units
    w_reproj: float = 1.0
    w_eikonal: float = 0.1
    w_smooth: float = 0.1
    w_sds: float = 1e-3
    tau: float | None = None            # meters; one object voxel when unset
    noise_lower: float = 0.02
    noise_update_every: int = 100
    plateau_window: int = 100
    plateau_tol: float = 1e-3           # relative reprojection improvement per window
    min_iters: int = 300
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconResult:
    scene: SceneParams
    trace: list                 # deterministic loss (reprojection + eikonal + smoothness) per iteration
    reproj_trace: list
    sds_trace: list             # Monte-Carlo SDS loss of the sampled frame
    noise_bounds: list
    iterations: int


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.k = 0

    def step(self, grad):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.k)
        vh = self.v / (1 - self.b2**self.k)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def transform_distance(a: RigidTransform, b: RigidTransform) -> float:
    """``|t_a - t_b| + 0.1 * geodesic angle`` in meters."""
    return float(np.linalg.norm(a.translation - b.translation)
                 + ROTATION_WEIGHT * np.linalg.norm(so3_log(a.rotation.T @ b.rotation)))


def smoothness_terms(thetas: np.ndarray, rotations: list, translations: np.ndarray):
    """Temporal smoothness value and gradients (theta, rotation tangents, translations in m)."""
    F = len(thetas)
    dth = np.diff(thetas, axis=0)
    loss = float(np.sum(dth * dth))
    g_th = np.zeros_like(thetas)
    g_th[1:] += 2 * dth
    g_th[:-1] -= 2 * dth
    g_rot = np.zeros((F, 3))
    g_tr = np.zeros((F, 3))
    for k in range(F - 1):
        dt = translations[k + 1] - translations[k]
        nt = np.linalg.norm(dt)
        w = so3_log(rotations[k].T @ rotations[k + 1])
        ang = np.linalg.norm(w)
        d = nt + ROTATION_WEIGHT * ang
        loss += d * d
        ut = dt / nt if nt > 0 else np.zeros(3)
        # the rotation axis is fixed by both right perturbations, with opposite signs
        ua = w / ang if ang > 0 else np.zeros(3)
        g_tr[k + 1] += 2 * d * ut
        g_tr[k] -= 2 * d * ut
        g_rot[k + 1] += 2 * d * ROTATION_WEIGHT * ua
        g_rot[k] -= 2 * d * ROTATION_WEIGHT * ua
    return loss, g_th, g_rot, g_tr


def reconstruct_clip(obs: ClipObservation, init: SceneParams, denoiser: Denoiser | None = None,
                     condition=None, config: ReconConfig | None = None,
                     skeleton: HandSkeleton | None = None, codec: Codec | None = None) -> ReconResult:
    """Adam over object voxels, per-frame poses and per-frame transforms.

    Each iteration evaluates every reprojection term and the SDS term of one
    randomly drawn frame (scaled by the frame count, an unbiased estimate of
    the sum over frames).  The SDS noise ceiling follows
    ``adaptive_noise_bound`` and is refreshed every ``noise_update_every`` steps.
    """
    cfg = config or ReconConfig()
    skel = skeleton or HandSkeleton()
    codec = codec or BlockStatsCodec()
    if obs.num_frames != init.num_frames:
        raise ShapeMismatch(f"clip has {obs.num_frames} frames, initial scene {init.num_frames}")
    scene = init.copy()
    F = scene.num_frames
    spec = scene.object.spec
    h = spec.half_extent
    tau = cfg.tau or spec.voxel_size
    step = spec.voxel_size_normalized
    values = scene.object.values.copy()
    thetas = scene.thetas.copy()
    rots = [tf.rotation for tf in scene.transforms]
    trans = np.array([tf.translation for tf in scene.transforms])
    lo, hi = skel.limits.bounds()
    opt_v = _Adam(values.shape, cfg.lr_object)
    opt_th = _Adam(thetas.shape, cfg.lr_pose)
    opt_tf = _Adam((F, 6), cfg.lr_transform)
    rng = np.random.default_rng([int(cfg.seed), 3])
    V = len(obs.cameras)
    npix = obs.object_masks.shape[2] * obs.object_masks.shape[3]
    quad = cfg.w_reproj / (V * npix)
    use_sds = denoiser is not None and cfg.w_sds > 0
    u_b = adaptive_noise_bound(values)
    trace, reproj_trace, sds_trace, bounds = [], [], [], [u_b]
    it = 0
    for it in range(1, cfg.iters + 1):
        if it > 1 and (it - 1) % cfg.noise_update_every == 0:
            u_b = adaptive_noise_bound(values)
            bounds.append(u_b)
        obj = SdfGrid(spec, values)
        gv = np.zeros(spec.shape)
        g_th = np.zeros_like(thetas)
        g_tf = np.zeros((F, 6))
        reproj = 0.0
        for t in range(F):
            tf = RigidTransform(so3_log(rots[t]), trans[t])
            for v, cam in enumerate(obs.cameras):
                _, acc, sq = _march(obj, tf, cam, tau, target=obs.object_masks[t, v], quad=quad, grad_values=gv)
                g_tf[t] += acc
                _, gth, sqh = _hand_mask_vjp(skel, thetas[t], cam, tau, target=obs.hand_masks[t, v], quad=quad)
                g_th[t] += gth
                reproj += sq + sqh
        band = np.abs(values[1:-1, 1:-1, 1:-1]) < 1.0 - step
        eik, g_eik = eikonal_loss(values, step, band)
        gv += cfg.w_eikonal * g_eik
        smooth, s_th, s_rot, s_tr = smoothness_terms(thetas, rots, trans)
        g_th += cfg.w_smooth * s_th
        g_tf[:, :3] += cfg.w_smooth * s_rot
        g_tf[:, 3:] += cfg.w_smooth * s_tr
        total = reproj + cfg.w_eikonal * eik + cfg.w_smooth * smooth
        if use_sds:
            t = int(rng.integers(F))
            frame = SceneParams(obj, thetas, [RigidTransform(so3_log(r), tr) for r, tr in zip(rots, trans)])
            asm = InteractionAssembler(obj, skel, codec)
            state = asm(frame.transforms[t], thetas[t])
            noise_range = (cfg.noise_lower, max(u_b, cfg.noise_lower))
            g_x, sds = sds_gradient(state.grid.values, denoiser, condition, noise_range,
                                    seed=rng, return_loss=True)
            g_t7, g_theta, g_obj = asm.vjp(state, g_x, wrt_object=True)
            wsds = cfg.w_sds * F
            gv += wsds * g_obj
            g_th[t] += wsds * g_theta
            g_tf[t] += wsds * g_t7[:6]
            sds_trace.append(float(sds))
        trace.append(float(total))
        reproj_trace.append(float(reproj))
        if not (np.isfinite(total) and np.all(np.isfinite(gv)) and np.all(np.isfinite(g_th))
                and np.all(np.isfinite(g_tf))):
            raise DivergedOptimization(f"non-finite loss or gradient at iteration {it}")
        values = np.clip(values - opt_v.step(gv), -1.0, 1.0)
        thetas = np.clip(thetas - opt_th.step(g_th), lo, hi)
        # translations are stepped in normalized units, matching the voxel learning rate
        g_tf[:, 3:] *= h
        upd = opt_tf.step(g_tf)
        rots = [r @ so3_exp(-u) for r, u in zip(rots, upd[:, :3])]
        trans = trans - upd[:, 3:] * h
        if _plateaued(reproj_trace, cfg, it):
            break
    final = SceneParams(SdfGrid(spec, values), thetas,
                        [RigidTransform(so3_log(r), tr) for r, tr in zip(rots, trans)])
    return ReconResult(final, trace, reproj_trace, sds_trace, bounds, it)


def _plateaued(trace: list, cfg: ReconConfig, it: int) -> bool:
    w = cfg.plateau_window
    if it < max(cfg.min_iters, 2 * w) or it % w:
        return False
    prev = float(np.mean(trace[-2 * w:-w]))
    last = float(np.mean(trace[-w:]))
    return prev - last <= cfg.plateau_tol * max(prev, 1e-12)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> RigidTransform:
    """Least-squares similarity ``dst ~ s R src + t`` for paired points."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var = float(np.mean(np.sum(xs * xs, axis=1)))
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    return RigidTransform(so3_log(R), mu_d - s * R @ mu_s, s)


def icp(src: np.ndarray, dst: np.ndarray, iters: int = 50, with_scale: bool = True,
        tol: float = 1e-10) -> RigidTransform:
    """Align ``src`` onto ``dst`` by nearest-neighbor ICP, starting from the centroid offset."""
    tree = cKDTree(dst)
    tf = RigidTransform(translation=dst.mean(axis=0) - src.mean(axis=0))
    prev = np.inf
    for _ in range(iters):
        moved = tf.apply(src)
        d, idx = tree.query(moved)
        err = float(np.mean(d * d))
        tf = umeyama(src, dst[idx], with_scale)
        if prev - err <= tol:
            break
        prev = err
    return tf


def chamfer(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric mean nearest-neighbor distance ``(mean d_ab + mean d_ba) / 2`` and both distance sets."""
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return 0.5 * float(dab.mean() + dba.mean()), dab, dba


def fscore(dab: np.ndarray, dba: np.ndarray, threshold: float) -> float:
    p = float(np.mean(dab < threshold))
    r = float(np.mean(dba < threshold))
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class ReconMetrics:
    f5: float
    f10: float
    chamfer_mm: float           # after scaled ICP
    cd_h_mm: float              # hand-frame Chamfer averaged over frames, no alignment
    mpjpe_mm: list              # per frame
    raw_chamfer_mm: float = 0.0  # object frame, no alignment

    def as_row(self) -> dict:
        return {"f5": self.f5, "f10": self.f10, "chamfer_mm": self.chamfer_mm, "raw_chamfer_mm": self.raw_chamfer_mm,
                "cd_h_mm": self.cd_h_mm, "mpjpe_mm": float(np.mean(self.mpjpe_mm))}


def surface_points(obj: SdfGrid, count: int = 10000, seed: int = 0) -> np.ndarray:
    mesh = marching_cubes(obj)
    if mesh.is_empty:
        raise EmptySurface("object grid has no zero crossing")
    return mesh.sample_surface(count, seed)


def hand_frame_chamfer(pred: SceneParams, gt: SceneParams, count: int = 10000, seed: int = 0) -> float:
    """Mean over frames of the Chamfer distance between ``T^t O`` and ``T_hat^t O_hat`` (meters)."""
    pp = surface_points(pred.object, count, seed)
    gp = surface_points(gt.object, count, seed)
    return float(np.mean([chamfer(tp.apply(pp), tg.apply(gp))[0]
                          for tp, tg in zip(pred.transforms, gt.transforms)]))


def recon_metrics(pred: SceneParams, gt: SceneParams, skeleton: HandSkeleton | None = None,
                  count: int = 10000, seed: int = 0, with_scale: bool = True) -> ReconMetrics:
    if pred.num_frames != gt.num_frames:
        raise ShapeMismatch("predicted and ground-truth clips differ in frame count")
    skel = skeleton or HandSkeleton()
    pp = surface_points(pred.object, count, seed)
    gp = surface_points(gt.object, count, seed)
    raw = chamfer(pp, gp)[0]
    aligned = icp(pp, gp, with_scale=with_scale).apply(pp)
    cd, dab, dba = chamfer(aligned, gp)
    cd_h = hand_frame_chamfer(pred, gt, count, seed)
    mpjpe = []
    for tp, tg in zip(pred.thetas, gt.thetas):
        jp = _chain(skel, tp).joints.reshape(-1, 3)
        jg = _chain(skel, tg).joints.reshape(-1, 3)
        mpjpe.append(float(np.linalg.norm(jp - jg, axis=1).mean() * 1e3))
    return ReconMetrics(fscore(dab, dba, 0.005), fscore(dab, dba, 0.010), cd * 1e3, cd_h * 1e3, mpjpe,
                        raw * 1e3)


def mask_iou(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> float:
    a = np.asarray(pred) > threshold
    b = np.asarray(target) > threshold
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def render_clip(scene: SceneParams, cameras: list, skeleton: HandSkeleton | None = None,
                tau: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Object and hand masks for every (frame, view): two (F, V, H, W) arrays."""
    sil = [[render_silhouette(scene, t, c, skeleton, tau) for c in cameras] for t in range(scene.num_frames)]
    return (np.array([[s.object for s in row] for row in sil]),
            np.array([[s.hand for s in row] for row in sil]))


def silhouette_ious(scene: SceneParams, obs: ClipObservation, skeleton: HandSkeleton | None = None,
                    tau: float | None = None) -> np.ndarray:
    """Per-frame IoU of the union silhouette (object or hand) over all views, (F,)."""
    obj, hand = render_clip(scene, obs.cameras, skeleton, tau)
    pred = np.maximum(obj, hand) > 0.5
    gt = np.maximum(obs.object_masks, obs.hand_masks) > 0.5
    inter = np.logical_and(pred, gt).sum(axis=(1, 2, 3))
    union = np.logical_or(pred, gt).sum(axis=(1, 2, 3))
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


# --------------------------------------------------------------------------
# synthetic clips
# --------------------------------------------------------------------------

@dataclass
class SyntheticClipConfig:
    frames: int = 8
    radius: float = 0.04
    resolution: int = 64            # image pixels per side
    grid_resolution: int = 64
    half_extent: float = 0.15
    finger_wave: float = 0.05       # rad, flexion oscillation amplitude across the clip
    drift: float = 0.002            # m, object translation oscillation in the hand frame
    init_radius: float = 0.025
    init_pose_noise: float = 0.05   # rad
    init_translation_noise: float = 0.003
    init_rotation_noise: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_scene(config: SyntheticClipConfig, skeleton: HandSkeleton | None = None) -> SceneParams:
    """A sphere held in a procedural wrap grasp, with a gentle finger wave and object drift."""
    from .synth import GraspRecipe, SyntheticGraspSpec, generate_grasp_sample

    skel = skeleton or HandSkeleton()
    spec = GridSpec.cube(config.grid_resolution, config.half_extent)
    shape = {"type": "sphere", "radius": config.radius}
    sample = generate_grasp_sample(SyntheticGraspSpec("sphere-like", shape, GraspRecipe(), config.seed), skel, spec)
    obj = analytic_sdf(shape, spec)
    lo, hi = skel.limits.bounds()
    flex = np.tile([0.0, 1.0, 1.0, 1.0], 5)
    thetas, tfs = [], []
    for t in range(config.frames):
        phase = 2 * np.pi * t / config.frames
        thetas.append(np.clip(sample.pose.angles + config.finger_wave * np.sin(phase) * flex, lo, hi))
        shift = config.drift * np.array([np.sin(phase), np.cos(phase) - 1.0, 0.0])
        tfs.append(RigidTransform(sample.transform.rotvec, sample.transform.translation + shift))
    return SceneParams(obj, np.array(thetas), tfs)


def synthetic_clip(config: SyntheticClipConfig | None = None, skeleton: HandSkeleton | None = None):
    """(binary observation, ground-truth scene) for three axis-aligned views."""
    cfg = config or SyntheticClipConfig()
    gt = synthetic_scene(cfg, skeleton)
    cams = axis_cameras(cfg.resolution, cfg.half_extent)
    obj, hand = render_clip(gt, cams, skeleton)
    return ClipObservation(cams, (obj > 0.5).astype(float), (hand > 0.5).astype(float)), gt


def initial_scene(gt: SceneParams, config: SyntheticClipConfig | None = None,
                  skeleton: HandSkeleton | None = None) -> SceneParams:
    """Ground-truth poses and transforms perturbed by noise, object replaced by a small sphere.

    Stands in for the off-the-shelf hand and object pose estimates a video
    pipeline would start from.
    """
    cfg = config or SyntheticClipConfig()
    skel = skeleton or HandSkeleton()
    rng = np.random.default_rng([int(cfg.seed), 5])
    F = gt.num_frames
    # one perturbation for the whole clip so temporal smoothness is not violated at the start
    d_theta = rng.normal(0.0, cfg.init_pose_noise, NUM_ANGLES)
    d_rot = rng.normal(0.0, cfg.init_rotation_noise, 3)
    d_tr = rng.normal(0.0, cfg.init_translation_noise, 3)
    thetas = skel.limits.clamp(gt.thetas + d_theta[None])
    tfs = [RigidTransform(so3_log(tf.rotation @ so3_exp(d_rot)), tf.translation + d_tr) for tf in gt.transforms]
    obj = analytic_sdf({"type": "sphere", "radius": cfg.init_radius}, gt.object.spec)
    return SceneParams(obj, thetas.reshape(F, NUM_ANGLES), tfs)


def scene_to_dict(scene: SceneParams) -> dict:
    return {"frames": scene.frame_dicts(), "half_extent": scene.object.spec.half_extent,
            "resolution": list(scene.object.spec.shape)}


def save_scene(path, scene: SceneParams, extra: dict | None = None) -> None:
    """``<name>.json`` with per-frame poses plus the object grid in ``<name>.hopg`` beside it."""
    from .synth import write_json
    p = Path(path)
    grid_name = p.with_suffix(".hopg").name
    save_sdf(p.parent / grid_name, scene.object)
    write_json(p, {**scene_to_dict(scene), "object": grid_name, **(extra or {})})


def load_scene(path) -> SceneParams:
    from .synth import read_json
    p = Path(path)
    d = read_json(p)
    try:
        frames = d["frames"]
        obj = load_sdf(p.parent / d["object"])
        return SceneParams(obj, np.array([f["theta"] for f in frames], dtype=float),
                           [RigidTransform.from_dict(f["transform"]) for f in frames])
    except (KeyError, TypeError) as exc:
        raise IoFailure(f"malformed scene document {p.name}: {exc}") from exc


__all__ = [
    "OrthoCamera", "axis_cameras", "SceneParams", "ClipObservation", "Silhouette", "SceneGradient",
    "render_object_mask", "render_hand_mask", "render_silhouette", "silhouette_vjp", "extract_frame_grid",
    "frame_grid_vjp", "ReconConfig", "ReconResult", "reconstruct_clip", "ReconMetrics", "recon_metrics",
    "mask_iou", "silhouette_ious", "SyntheticClipConfig", "synthetic_scene", "synthetic_clip",
    "initial_scene", "scene_to_dict", "save_scene", "load_scene", "umeyama", "icp", "chamfer", "fscore",
    "write_pgm", "read_pgm",
]
