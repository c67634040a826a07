"""Simplified articulated right hand built from capsules.

Coordinate convention (hand-centric frame): palm in the z = 0 plane facing
+z, fingers pointing along +y, thumb on the +x side.  Flexion curls a finger
toward +z; the thumb curls toward +z and across the palm.

Each of the five fingers is a three-bone chain hanging off a fixed knuckle
anchor on the palm.  The 15 tracked joints are the three distal ends of those
bones (PIP, DIP, tip for the long fingers), ordered finger-major:
thumb, index, middle, ring, pinky.  The 20 pose angles are, per finger,
``[abduction, flex1, flex2, flex3]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import NonFiniteObjective
from .geometry.grid import GridSpec

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
NUM_FINGERS = 5
NUM_JOINTS = 15
NUM_ANGLES = 20
FIELD_CLAMP = 4.0

_Z = np.array([0.0, 0.0, 1.0])
# the thumb curls up and across the palm rather than straight up
_THUMB_CURL = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _default_fingers():
    # anchor (m), rest direction, proximal length (m), radius per bone (m)
    return {
        "thumb": ([0.032, -0.058, 0.0], _unit([0.7, 0.7, 0.0]), 0.040, [0.0105, 0.0095, 0.0085]),
        "index": ([0.027, -0.002, 0.0], _unit([0.08, 1.0, 0.0]), 0.045, [0.0090, 0.0085, 0.0080]),
        "middle": ([0.008, 0.0, 0.0], _unit([0.0, 1.0, 0.0]), 0.050, [0.0090, 0.0085, 0.0080]),
        "ring": ([-0.011, -0.003, 0.0], _unit([-0.06, 1.0, 0.0]), 0.046, [0.0085, 0.0080, 0.0075]),
        "pinky": ([-0.029, -0.010, 0.0], _unit([-0.14, 1.0, 0.0]), 0.036, [0.0080, 0.0075, 0.0070]),
    }


@dataclass
class JointLimits:
    abduction: tuple[float, float] = (-0.5, 0.5)
    flexion: tuple[float, float] = (-0.2, 1.8)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.tile([self.abduction[0]] + [self.flexion[0]] * 3, NUM_FINGERS)
        hi = np.tile([self.abduction[1]] + [self.flexion[1]] * 3, NUM_FINGERS)
        return lo, hi

    def clamp(self, angles) -> np.ndarray:
        lo, hi = self.bounds()
        return np.clip(np.asarray(angles, dtype=float), lo, hi)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.bounds()
        return rng.uniform(lo, hi)


@dataclass
class HandSkeleton:
    """Rest geometry of the capsule hand (meters)."""

    wrist: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.09, 0.0]))
    anchors: np.ndarray = None          # (5, 3) knuckle positions
    directions: np.ndarray = None       # (5, 3) unit rest bone direction
    bone_lengths: np.ndarray = None     # (5, 3)
    radii: np.ndarray = None            # (5, 3) capsule radius per finger bone
    palm_radius: float = 0.012
    flex_axes: np.ndarray = None        # (5, 3) unit hinge axes (default: direction x +z)
    abduction_axes: np.ndarray = None   # (5, 3) unit (default: +z)
    segment_ratios: tuple = (1.0, 0.65, 0.5)
    limits: JointLimits = field(default_factory=JointLimits)

    def __post_init__(self):
        defaults = _default_fingers()
        if self.anchors is None:
            self.anchors = np.array([defaults[f][0] for f in FINGERS])
        if self.directions is None:
            self.directions = np.array([defaults[f][1] for f in FINGERS])
        if self.bone_lengths is None:
            base = np.array([defaults[f][2] for f in FINGERS])
            self.bone_lengths = base[:, None] * np.asarray(self.segment_ratios)[None, :]
        if self.radii is None:
            self.radii = np.array([defaults[f][3] for f in FINGERS])
        self.wrist = np.asarray(self.wrist, float).reshape(3)
        self.anchors = np.asarray(self.anchors, float).reshape(NUM_FINGERS, 3)
        self.directions = np.array([_unit(d) for d in np.asarray(self.directions, float)])
        self.bone_lengths = np.asarray(self.bone_lengths, float).reshape(NUM_FINGERS, 3)
        self.radii = np.asarray(self.radii, float).reshape(NUM_FINGERS, 3)
        if self.flex_axes is None:
            self.flex_axes = np.cross(self.directions, _Z)
            self.flex_axes[0] = np.cross(self.directions[0], _THUMB_CURL)
        if self.abduction_axes is None:
            self.abduction_axes = np.tile(_Z, (NUM_FINGERS, 1))
        self.flex_axes = np.array([_unit(a) for a in np.asarray(self.flex_axes, float)])
        self.abduction_axes = np.array([_unit(a) for a in np.asarray(self.abduction_axes, float)])
        if np.any(self.bone_lengths <= 0) or np.any(self.radii <= 0) or self.palm_radius <= 0:
            raise ValueError("bone lengths and radii must be positive")
        if isinstance(self.limits, dict):
            self.limits = JointLimits(**self.limits)

    # -- topology ---------------------------------------------------------
    @property
    def parents(self) -> np.ndarray:
        """Parent joint per joint; -1 marks a chain root hanging off the wrist/palm."""
        p = np.arange(NUM_JOINTS) - 1
        p[0::3] = -1
        return p

    def rest_joints(self) -> np.ndarray:
        return forward_kinematics(self, np.zeros(NUM_ANGLES))

    def palm_segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Static palm capsules: wrist to every knuckle, plus the knuckle bar."""
        a = [self.wrist] * NUM_FINGERS + [self.anchors[i] for i in (1, 2, 3)]
        b = [self.anchors[i] for i in range(NUM_FINGERS)] + [self.anchors[i] for i in (2, 3, 4)]
        return np.array(a), np.array(b)

    def palm_center(self) -> np.ndarray:
        return 0.5 * (self.wrist + self.anchors[1:].mean(axis=0))

    def palm_contact_anchors(self) -> np.ndarray:
        """Three points on the upper palm surface."""
        pts = [self.wrist + 0.55 * (self.anchors[i] - self.wrist) for i in (1, 2, 4)]
        return np.array(pts) + self.palm_radius * _Z

    # -- config IO --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "wrist": self.wrist.tolist(),
            "anchors": self.anchors.tolist(),
            "directions": self.directions.tolist(),
            "bone_lengths": self.bone_lengths.tolist(),
            "radii": self.radii.tolist(),
            "palm_radius": self.palm_radius,
            "flex_axes": self.flex_axes.tolist(),
            "abduction_axes": self.abduction_axes.tolist(),
            "limits": {"abduction": list(self.limits.abduction), "flexion": list(self.limits.flexion)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HandSkeleton":
        d = dict(d)
        if "limits" in d:
            d["limits"] = JointLimits(**{k: tuple(v) for k, v in d["limits"].items()})
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "HandSkeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class HandPose:
    angles: np.ndarray = field(default_factory=lambda: np.zeros(NUM_ANGLES))

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float).reshape(NUM_ANGLES)
        if not np.all(np.isfinite(self.angles)):
            raise ValueError("pose angles must be finite")

    def clamped(self, limits: JointLimits) -> "HandPose":
        return HandPose(limits.clamp(self.angles))


def _angles(pose) -> np.ndarray:
    a = np.asarray(getattr(pose, "angles", pose), dtype=float).reshape(NUM_ANGLES)
    return a


def _rotations(axes: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Batched Rodrigues: axes (n, 3) unit, angles (n,) -> (n, 3, 3)."""
    n = len(angles)
    K = np.zeros((n, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -axes[:, 2], axes[:, 1]
    K[:, 1, 0], K[:, 1, 2] = axes[:, 2], -axes[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -axes[:, 1], axes[:, 0]
    s = np.sin(angles)[:, None, None]
    c = np.cos(angles)[:, None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


@dataclass
class _Chain:
    joints: np.ndarray      # (5, 3, 3) finger, bone, xyz
    frames: np.ndarray      # (5, 3, 3, 3) rotation of each bone
    axes: np.ndarray        # (5, 4, 3) world axis per angle
    pivots: np.ndarray      # (5, 4, 3) world pivot per angle


def _chain(skel: HandSkeleton, angles: np.ndarray) -> _Chain:
    th = angles.reshape(NUM_FINGERS, 4)
    Ra = _rotations(skel.abduction_axes, th[:, 0])
    R = Ra
    frames = np.empty((NUM_FINGERS, 3, 3, 3))
    joints = np.empty((NUM_FINGERS, 3, 3))
    axes = np.empty((NUM_FINGERS, 4, 3))
    pivots = np.empty((NUM_FINGERS, 4, 3))
    axes[:, 0] = skel.abduction_axes
    pivots[:, 0] = skel.anchors
    prev = skel.anchors
    for b in range(3):
        # hinge axis in world coordinates is the parent frame applied to the rest axis
        axes[:, b + 1] = np.einsum("fij,fj->fi", R, skel.flex_axes)
        pivots[:, b + 1] = prev
        R = R @ _rotations(skel.flex_axes, th[:, b + 1])
        frames[:, b] = R
        prev = prev + np.einsum("fij,fj->fi", R, skel.directions) * skel.bone_lengths[:, b:b + 1]
        joints[:, b] = prev
    return _Chain(joints, frames, axes, pivots)


def forward_kinematics(skeleton: HandSkeleton, pose) -> np.ndarray:
    """Joint positions (15, 3) in meters."""
    return _chain(skeleton, _angles(pose)).joints.reshape(NUM_JOINTS, 3)


def fk_jacobian(skeleton: HandSkeleton, pose) -> np.ndarray:
    """d(joint positions)/d(angles), shaped (15, 3, 20)."""
    return _jacobian_from_chain(_chain(skeleton, _angles(pose)))


# angle k of a finger moves bones >= max(k - 1, 0): abduction and flex1 move all three
_MOVES = np.array([[max(k - 1, 0) <= b for k in range(4)] for b in range(3)], dtype=float)


def _jacobian_from_chain(ch: _Chain) -> np.ndarray:
    lever = ch.joints[:, :, None, :] - ch.pivots[:, None, :, :]          # (5, bone, k, 3)
    cols = np.cross(np.broadcast_to(ch.axes[:, None], lever.shape), lever)
    cols = cols * _MOVES[None, :, :, None]
    J = np.zeros((NUM_FINGERS, 3, 3, NUM_FINGERS, 4))
    f = np.arange(NUM_FINGERS)
    J[f, :, :, f, :] = cols.transpose(0, 1, 3, 2)
    return J.reshape(NUM_JOINTS, 3, NUM_ANGLES)


# --------------------------------------------------------------------------
# capsule geometry
# --------------------------------------------------------------------------

@dataclass
class Capsules:
    """Segments ``a -> b`` with radii; ``finger``/``bone`` are -1 for palm capsules."""

    a: np.ndarray
    b: np.ndarray
    radius: np.ndarray
    finger: np.ndarray
    bone: np.ndarray

    def __len__(self):
        return len(self.radius)


def hand_capsules(skeleton: HandSkeleton, pose) -> Capsules:
    joints = forward_kinematics(skeleton, pose).reshape(NUM_FINGERS, 3, 3)
    starts = np.concatenate([skeleton.anchors[:, None, :], joints[:, :2]], axis=1)
    pa, pb = skeleton.palm_segments()
    n_palm = len(pa)
    return Capsules(
        a=np.concatenate([starts.reshape(-1, 3), pa]),
        b=np.concatenate([joints.reshape(-1, 3), pb]),
        radius=np.concatenate([skeleton.radii.ravel(), np.full(n_palm, skeleton.palm_radius)]),
        finger=np.concatenate([np.repeat(np.arange(NUM_FINGERS), 3), -np.ones(n_palm, int)]),
        bone=np.concatenate([np.tile(np.arange(3), NUM_FINGERS), -np.ones(n_palm, int)]),
    )


def segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Distance from each point to each segment: (P, S), plus closest parameters (P, S)."""
    ab = b - a
    ap = points[:, None, :] - a[None, :, :]
    denom = np.maximum(np.einsum("si,si->s", ab, ab), 1e-300)
    t = np.clip(np.einsum("psi,si->ps", ap, ab) / denom, 0.0, 1.0)
    diff = ap - t[..., None] * ab[None]
    return np.sqrt(np.einsum("psi,psi->ps", diff, diff)), t


def capsule_sdf(points: np.ndarray, caps: Capsules) -> np.ndarray:
    """Per-capsule signed distance (P, S)."""
    d, _ = segment_distances(np.asarray(points, float).reshape(-1, 3), caps.a, caps.b)
    return d - caps.radius[None, :]


def capsules_union_sdf(points: np.ndarray, caps: Capsules, chunk: int = 65536) -> np.ndarray:
    pts = np.asarray(points, float).reshape(-1, 3)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        out[s:s + chunk] = capsule_sdf(pts[s:s + chunk], caps).min(axis=1)
    return out


def hand_sdf(skeleton: HandSkeleton, pose, points) -> np.ndarray:
    """Signed distance (m) to the capsule-union hand; negative inside."""
    return capsules_union_sdf(points, hand_capsules(skeleton, pose))


_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))


def _capsule_lattice(a, b, r, density_m2):
    """Deterministic near-uniform samples on one capsule: points, per-point area."""
    axis = b - a
    length = float(np.linalg.norm(axis))
    e = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(e[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(e, helper)
    u /= np.linalg.norm(u)
    v = np.cross(e, u)
    pts, w = [], []
    cyl_area = 2 * np.pi * r * length
    n = max(1, int(round(density_m2 * cyl_area)))
    i = np.arange(n)
    s = (i + 0.5) / n
    phi = i * _GOLDEN
    ring = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v
    pts.append(a + s[:, None] * axis + r * ring)
    w.append(np.full(n, cyl_area / n))
    cap_area = 2 * np.pi * r * r
    n = max(1, int(round(density_m2 * cap_area)))
    i = np.arange(n)
    h = (i + 0.5) / n  # uniform height on a hemisphere is uniform in area
    rho = np.sqrt(1 - h * h)
    phi = i * _GOLDEN
    for center, sign in ((a, -1.0), (b, 1.0)):
        d = rho[:, None] * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * v) + sign * h[:, None] * e
        pts.append(center + r * d)
        w.append(np.full(n, cap_area / n))
    return np.concatenate(pts), np.concatenate(w)


@dataclass
class SurfaceSamples:
    points: np.ndarray     # (P, 3)
    weights: np.ndarray    # (P,) area, m^2
    capsule: np.ndarray    # (P,) owning capsule index


def capsule_surface_samples(caps: Capsules, density: float = 4.0, reject_tol: float = 1e-9) -> SurfaceSamples:
    """Samples on the union surface; ``density`` in points per cm^2."""
    if density <= 0:
        raise ValueError("density must be positive")
    dens_m2 = density * 1e4
    pts, w, owner = [], [], []
    for k in range(len(caps)):
        p, a = _capsule_lattice(caps.a[k], caps.b[k], caps.radius[k], dens_m2)
        pts.append(p)
        w.append(a)
        owner.append(np.full(len(p), k))
    pts = np.concatenate(pts)
    w = np.concatenate(w)
    owner = np.concatenate(owner)
    sd = capsule_sdf(pts, caps)
    sd[np.arange(len(pts)), owner] = np.inf
    # coincident surfaces (shared end spheres) belong to the lowest-index capsule only
    tied = (np.abs(sd) <= reject_tol) & (np.arange(len(caps))[None, :] < owner[:, None])
    keep = (sd.min(axis=1) >= -reject_tol) & ~tied.any(axis=1)
    return SurfaceSamples(pts[keep], w[keep], owner[keep])


def hand_surface_samples(skeleton: HandSkeleton, pose, density: float = 4.0) -> SurfaceSamples:
    return capsule_surface_samples(hand_capsules(skeleton, pose), density)


def contact_points(skeleton: HandSkeleton, pose) -> tuple[np.ndarray, np.ndarray]:
    """Five fingertip pads then three palm anchors, with their owning finger (-1 palm)."""
    ch = _chain(skeleton, _angles(pose))
    rest = np.cross(skeleton.flex_axes, skeleton.directions)
    rest /= np.linalg.norm(rest, axis=1, keepdims=True)
    pad_normals = np.einsum("fij,fj->fi", ch.frames[:, 2], rest)
    tips = ch.joints[:, 2] + skeleton.radii[:, 2:3] * pad_normals
    pts = np.concatenate([tips, skeleton.palm_contact_anchors()])
    owner = np.concatenate([np.arange(NUM_FINGERS), -np.ones(3, int)])
    return pts, owner


def rigid_point_jacobian(skeleton: HandSkeleton, pose, points, finger, bone) -> np.ndarray:
    """d(point)/d(angles) for points rigidly attached to a bone: (P, 3, 20).

    ``finger``/``bone`` give the owning bone; -1 marks static palm points.
    """
    ch = _chain(skeleton, _angles(pose))
    pts = np.asarray(points, float).reshape(-1, 3)
    finger = np.asarray(finger)
    bone = np.asarray(bone)
    J = np.zeros((len(pts), 3, NUM_ANGLES))
    for f in range(NUM_FINGERS):
        for k in range(4):
            # angle k moves bones >= k-1 (abduction and flex1 move bone 0 onward)
            sel = (finger == f) & (bone >= max(k - 1, 0))
            if sel.any():
                J[sel, :, 4 * f + k] = np.cross(ch.axes[f, k], pts[sel] - ch.pivots[f, k])
    return J


# --------------------------------------------------------------------------
# skeletal distance field
# --------------------------------------------------------------------------

def skeletal_field(skeleton: HandSkeleton, pose, grid: GridSpec | None = None) -> np.ndarray:
    """(15, X, Y, Z) squared normalized distance from each voxel center to each joint, clamped to [0, 4]."""
    spec = grid or GridSpec()
    joints = forward_kinematics(skeleton, pose) / spec.half_extent
    return field_from_joints(joints, spec)


def field_from_joints(joints_norm: np.ndarray, spec: GridSpec) -> np.ndarray:
    axes = [spec.axis_normalized(a) for a in range(3)]
    out = np.empty((NUM_JOINTS,) + spec.shape)
    for i, j in enumerate(joints_norm):
        dx = (axes[0] - j[0]) ** 2
        dy = (axes[1] - j[1]) ** 2
        dz = (axes[2] - j[2]) ** 2
        out[i] = dx[:, None, None] + dy[None, :, None] + dz[None, None, :]
    return np.minimum(out, FIELD_CLAMP)


def skeletal_field_joint_vjp(joints_norm: np.ndarray, spec: GridSpec, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(cot * field)`` w.r.t. normalized joint positions (15, 3)."""
    axes = [spec.axis_normalized(a) for a in range(3)]
    out = np.zeros((NUM_JOINTS, 3))
    for i, j in enumerate(joints_norm):
        d = [axes[a] - j[a] for a in range(3)]
        sq = d[0][:, None, None] ** 2 + d[1][None, :, None] ** 2 + d[2][None, None, :] ** 2
        g = np.where(sq < FIELD_CLAMP, cotangent[i], 0.0)
        # d(sq)/dj = -2 (x - j)
        out[i, 0] = -2.0 * np.einsum("xyz,x->", g, d[0])
        out[i, 1] = -2.0 * np.einsum("xyz,y->", g, d[1])
        out[i, 2] = -2.0 * np.einsum("xyz,z->", g, d[2])
    return out


# --------------------------------------------------------------------------
# pose recovery
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _split_moments(points, target, a, margin, clamp):
    """Moments (about anchor ``a``) of the never-clamped ball, the constant of the
    always-clamped region, and the indices of the shell in between."""
    lim = np.sqrt(clamp)
    lo2 = (lim - margin) ** 2
    hi2 = (lim + margin) ** 2
    m = np.zeros(17)  # n, sum_q2, sum_q, sum_qx[3], sum_x[3], sum_xx[6], const
    shell = np.empty(points.shape[0], dtype=np.int64)
    ns = 0
    for p in range(points.shape[0]):
        x0 = points[p, 0] - a[0]
        x1 = points[p, 1] - a[1]
        x2 = points[p, 2] - a[2]
        d2 = x0 * x0 + x1 * x1 + x2 * x2
        if d2 <= lo2:
            q = d2 - target[p]
            m[0] += 1.0
            m[1] += q * q
            m[2] += q
            m[3] += q * x0
            m[4] += q * x1
            m[5] += q * x2
            m[6] += x0
            m[7] += x1
            m[8] += x2
            m[9] += x0 * x0
            m[10] += x0 * x1
            m[11] += x0 * x2
            m[12] += x1 * x1
            m[13] += x1 * x2
            m[14] += x2 * x2
        elif d2 > hi2:
            m[16] += (clamp - target[p]) ** 2
        else:
            shell[ns] = p
            ns += 1
    return m, shell[:ns]


@numba.njit(cache=True)
def _field_terms(moments, anchors, points, target, shell, offsets, joints, clamp):
    """Objective and joint gradient for all channels from cached splits."""
    total = 0.0
    grad = np.zeros((joints.shape[0], 3))
    for c in range(joints.shape[0]):
        m = moments[c]
        # inner terms use coordinates relative to the anchor
        j0 = joints[c, 0] - anchors[c, 0]
        j1 = joints[c, 1] - anchors[c, 1]
        j2 = joints[c, 2] - anchors[c, 2]
        jj = j0 * j0 + j1 * j1 + j2 * j2
        xj = m[6] * j0 + m[7] * j1 + m[8] * j2
        xx0 = m[9] * j0 + m[10] * j1 + m[11] * j2
        xx1 = m[10] * j0 + m[12] * j1 + m[13] * j2
        xx2 = m[11] * j0 + m[13] * j1 + m[14] * j2
        qxj = m[3] * j0 + m[4] * j1 + m[5] * j2
        # inner voxels: sum of r^2 with r = q - 2 x.j + |j|^2
        total += (m[1] + 4.0 * (j0 * xx0 + j1 * xx1 + j2 * xx2) + m[0] * jj * jj
                  - 4.0 * qxj + 2.0 * jj * m[2] - 4.0 * jj * xj + m[16])
        sum_r = m[2] - 2.0 * xj + m[0] * jj
        g0 = m[3] - 2.0 * xx0 + jj * m[6] - sum_r * j0
        g1 = m[4] - 2.0 * xx1 + jj * m[7] - sum_r * j1
        g2 = m[5] - 2.0 * xx2 + jj * m[8] - sum_r * j2
        for k in range(offsets[c], offsets[c + 1]):
            p = shell[k]
            d0 = points[p, 0] - joints[c, 0]
            d1 = points[p, 1] - joints[c, 1]
            d2 = points[p, 2] - joints[c, 2]
            dd = d0 * d0 + d1 * d1 + d2 * d2
            if dd >= clamp:
                r = clamp - target[c, p]
                total += r * r
            else:
                r = dd - target[c, p]
                total += r * r
                g0 += r * d0
                g1 += r * d1
                g2 += r * d2
        # d/dj sum r^2 = -4 sum r (x - j) over unclamped voxels
        grad[c, 0] = -4.0 * g0
        grad[c, 1] = -4.0 * g1
        grad[c, 2] = -4.0 * g2
    return total, grad


class _FieldObjective:
    """Exact sum over voxels and channels of (clamp(|x - j_c|^2, 0, 4) - target_c)^2.

    Without the clamp each channel's sum is a quartic polynomial in ``j_c``
    whose coefficients are voxel moments.  Around an anchor position the
    voxels split into an inner ball (never clamped while the joint stays
    within ``margin``), an outer region (always clamped, constant
    contribution) and a thin shell evaluated explicitly.  A channel's split is
    rebuilt when its joint drifts beyond ``margin`` from the anchor.
    """

    def __init__(self, points: np.ndarray, target: np.ndarray, margin: float = 0.1):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.target = np.ascontiguousarray(target, dtype=float)
        self.margin = margin
        n = len(target)
        self.moments = np.zeros((n, 17))
        self.anchors = np.full((n, 3), np.inf)
        self.shells = [np.zeros(0, dtype=np.int64)] * n
        self._pack()

    def _pack(self):
        self.offsets = np.concatenate([[0], np.cumsum([len(s) for s in self.shells])]).astype(np.int64)
        self.shell = np.concatenate(self.shells).astype(np.int64)

    def value_and_grad(self, joints: np.ndarray):
        stale = np.nonzero(np.linalg.norm(joints - self.anchors, axis=1) > self.margin)[0]
        for c in stale:
            self.moments[c], self.shells[c] = _split_moments(
                self.points, self.target[c], joints[c], self.margin, FIELD_CLAMP)
            self.anchors[c] = joints[c]
        if len(stale):
            self._pack()
        return _field_terms(self.moments, self.anchors, self.points, self.target, self.shell, self.offsets,
                            np.ascontiguousarray(joints), FIELD_CLAMP)


@dataclass
class PoseFit:
    pose: HandPose
    residual: float
    history: list


def pose_from_field(field: np.ndarray, init=None, reg_weight: float = 1e-5, steps: int = 1000,
                    lr: float = 1e-2, skeleton: HandSkeleton | None = None,
                    grid: GridSpec | None = None, betas=(0.9, 0.99), eps: float = 1e-8) -> PoseFit:
    """Recover angles whose skeletal field matches ``field`` (15, X, Y, Z).

    Minimizes mean squared field residual + reg_weight * |theta|^2 with Adam,
    projecting onto the joint limits after every step.
    """
    skel = skeleton or HandSkeleton()
    field = np.asarray(field, dtype=float)
    spec = grid or GridSpec(field.shape[1:])
    if field.shape != (NUM_JOINTS,) + spec.shape:
        raise ValueError(f"field shape {field.shape} does not match grid {spec.shape}")
    if not np.all(np.isfinite(field)):
        raise NonFiniteObjective("target field contains non-finite values")
    pts = spec.centers_normalized()
    terms = _FieldObjective(pts, field.reshape(NUM_JOINTS, -1))
    count = NUM_JOINTS * spec.num_voxels
    h = spec.half_extent

    def objective(theta):
        chain = _chain(skel, theta)
        joints = chain.joints.reshape(NUM_JOINTS, 3) / h
        val, gj = terms.value_and_grad(joints)
        J = _jacobian_from_chain(chain) / h
        grad = np.einsum("ji,jik->k", gj, J) / count + 2.0 * reg_weight * theta
        return val / count, grad

    theta = skel.limits.clamp(_angles(init) if init is not None else np.zeros(NUM_ANGLES))
    m = np.zeros(NUM_ANGLES)
    v = np.zeros(NUM_ANGLES)
    history = []
    b1, b2 = betas
    best = (np.inf, theta, np.inf)
    for step in range(1, steps + 1):
        res, grad = objective(theta)
        if not (np.isfinite(res) and np.all(np.isfinite(grad))):
            raise NonFiniteObjective(f"objective became non-finite at step {step}")
        history.append(res)
        total = res + reg_weight * float(theta @ theta)
        if total < best[0]:
            best = (total, theta, res)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        theta = skel.limits.clamp(theta - lr * mhat / (np.sqrt(vhat) + eps))
    res, _ = objective(theta)
    if not np.isfinite(res):
        raise NonFiniteObjective("final objective is non-finite")
    if res + reg_weight * float(theta @ theta) < best[0]:
        best = (None, theta, res)
    return PoseFit(HandPose(best[1]), float(max(best[2], 0.0)), history)
