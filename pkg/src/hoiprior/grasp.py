"""Prior-guided grasp synthesis, contact refinement, metrics and ranking.

A grasp is the object-to-hand transform ``T`` together with the articulation
``theta``.  Synthesis runs Adam on SDS gradients of the assembled interaction
grid; refinement runs L-BFGS-B on contact and penetration terms against the
object's signed distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .codec import Codec
from .diffusion import Denoiser, rank_score, sds_gradient
from .errors import DivergedOptimization
from .geometry.grid import GridSpec, SdfGrid
from .geometry.mesh import TriMesh, mesh_to_sdf
from .geometry.sampling import sample_trilinear
from .geometry.transforms import RigidTransform, quat_to_rotvec, so3_exp, so3_log, so3_right_jacobian
from .hand import (NUM_ANGLES, NUM_FINGERS, Capsules, HandPose, HandSkeleton, _chain,
                   capsule_surface_samples, capsules_union_sdf, contact_points, hand_capsules,
                   rigid_point_jacobian)
from .interaction import InteractionAssembler

CONTACT_THRESHOLD = 0.0025  # m
MEAN_FLEXION = 0.4


@dataclass
class GraspParams:
    transform: RigidTransform
    pose: HandPose

    def to_dict(self) -> dict:
        return {"transform": self.transform.to_dict(), "theta": [float(a) for a in self.pose.angles]}

    @classmethod
    def from_dict(cls, d: dict) -> "GraspParams":
        return cls(RigidTransform.from_dict(d["transform"]), HandPose(d["theta"]))

    def copy(self) -> "GraspParams":
        return GraspParams(RigidTransform(self.transform.rotvec.copy(), self.transform.translation.copy(),
                                          self.transform.scale), HandPose(self.pose.angles.copy()))


@dataclass
class SynthesisConfig:
    iters: int = 500
    lr: float = 1e-2
    noise_range: tuple = (0.02, 0.98)
    n_samples: int = 1
    freeze_transform: bool = False
    mean_flexion: float = MEAN_FLEXION
    init_radius: float = 0.10


def mean_pose(flexion: float = MEAN_FLEXION) -> np.ndarray:
    return np.tile([0.0, flexion, flexion, flexion], NUM_FINGERS)


def init_grasp(seed, skeleton: HandSkeleton | None = None, mean_flexion: float = MEAN_FLEXION,
               radius: float = 0.10) -> GraspParams:
    """Mean articulation, uniform random rotation, translation uniform in a ball around the palm."""
    skel = skeleton or HandSkeleton()
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    t = skel.palm_center() + radius * rng.uniform() ** (1.0 / 3.0) * direction
    return GraspParams(RigidTransform(quat_to_rotvec(q), t), HandPose(mean_pose(mean_flexion)))


# --------------------------------------------------------------------------
# SDS synthesis
# --------------------------------------------------------------------------

@dataclass
class SynthesisResult:
    grasp: GraspParams
    trace: list                 # per-iteration Monte-Carlo SDS loss
    initial_loss: float         # deterministic stratified SDS loss (= -rank_score)
    final_loss: float
    initial: GraspParams = None


def sds_loss(assembler: InteractionAssembler, grasp: GraspParams, denoiser: Denoiser, condition,
             seed: int = 0) -> float:
    x = assembler(grasp.transform, grasp.pose.angles).grid.values
    return -rank_score(x, denoiser, condition, seed=seed)


def synthesize_grasp(obj: SdfGrid, denoiser: Denoiser, condition, seed: int = 0,
                     config: SynthesisConfig | None = None, skeleton: HandSkeleton | None = None,
                     codec: Codec | None = None, init: GraspParams | None = None,
                     eval_seed: int = 0) -> SynthesisResult:
    """Adam on SDS gradients w.r.t. (rotation tangent, translation, theta).

    Translation is optimized in normalized grid units so one learning rate
    suits all parameters; rotation steps are composed on the right.
    """
    cfg = config or SynthesisConfig()
    skel = skeleton or HandSkeleton()
    assembler = InteractionAssembler(obj, skel, codec, tangent=True)
    grasp = (init or init_grasp(seed, skel, cfg.mean_flexion, cfg.init_radius)).copy()
    start = grasp.copy()
    h = obj.spec.half_extent
    rotvec = grasp.transform.rotvec.copy()
    t = grasp.transform.translation.copy()
    theta = skel.limits.clamp(grasp.pose.angles)
    lo, hi = skel.limits.bounds()
    n = 6 + NUM_ANGLES
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2, eps = 0.9, 0.999, 1e-8
    rng = np.random.default_rng([int(seed), 1])
    trace = []
    initial_loss = sds_loss(assembler, GraspParams(RigidTransform(rotvec, t), HandPose(theta)),
                            denoiser, condition, eval_seed)
    for step in range(1, cfg.iters + 1):
        tf = RigidTransform(rotvec, t)
        state = assembler(tf, theta)
        g_x, loss = sds_gradient(state.grid.values, denoiser, condition, cfg.noise_range,
                                 cfg.n_samples, seed=rng, return_loss=True)
        trace.append(loss)
        g_t, g_theta = assembler.vjp(state, g_x)
        grad = np.concatenate([g_t[:3], g_t[3:6] * h, g_theta])
        if cfg.freeze_transform:
            grad[:6] = 0.0
        if not np.all(np.isfinite(grad)):
            raise DivergedOptimization(f"non-finite gradient at iteration {step}")
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        upd = cfg.lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        # recompose only on a real step so exp/log round-off cannot move a fixed point
        if np.any(upd[:3]):
            rotvec = so3_log(so3_exp(rotvec) @ so3_exp(-upd[:3]))
        t = t - upd[3:6] * h
        theta = np.clip(theta - upd[6:], lo, hi)
        if not (np.all(np.isfinite(rotvec)) and np.all(np.isfinite(t)) and np.all(np.isfinite(theta))):
            raise DivergedOptimization(f"parameters became non-finite at iteration {step}")
    final = GraspParams(RigidTransform(rotvec, t), HandPose(theta))
    final_loss = sds_loss(assembler, final, denoiser, condition, eval_seed)
    return SynthesisResult(final, trace, initial_loss, final_loss, start)


# --------------------------------------------------------------------------
# object SDF queries in the hand frame
# --------------------------------------------------------------------------

def object_sdf_in_hand(obj: SdfGrid, transform: RigidTransform, points: np.ndarray):
    """Metric object SDF at hand-frame points, with gradients.

    Returns ``(values (P,), d/dpoints (P, 3), d/dtangent (P, 3), d/dtranslation (P, 3))``
    where the tangent is a right perturbation of the rotation.
    """
    h = obj.spec.half_extent
    s = transform.scale
    R = transform.rotation
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    qn = transform.apply_inverse(pts) / h
    f, df = sample_trilinear(obj.values, qn)
    val = s * h * f
    d_p = df @ R.T
    d_rot = s * h * np.cross(df, qn)
    return val, d_p, d_rot, -d_p


def _as_sdf(obj, spec: GridSpec | None = None) -> SdfGrid:
    if isinstance(obj, TriMesh):
        return mesh_to_sdf(obj, spec or GridSpec())
    return obj


# --------------------------------------------------------------------------
# refinement
# --------------------------------------------------------------------------

@dataclass
class RefineConfig:
    iters: int = 200
    contact_weight: float = 1.0
    penetration_weight: float = 10.0
    reg_weight: float = 0.1
    huber_delta: float = 1.0     # cm
    sample_density: float = 1.0  # points per cm^2


def huber(d: np.ndarray, delta: float):
    """d^2 below delta, linear (C1) above; returns value and derivative."""
    a = np.abs(d)
    quad = a < delta
    val = np.where(quad, a * a, 2.0 * delta * a - delta * delta)
    der = np.where(quad, 2.0 * a, 2.0 * delta) * np.sign(d)
    return val, der


@dataclass
class _BoneSamples:
    local: np.ndarray     # points in their bone frame (palm points in hand frame)
    finger: np.ndarray
    bone: np.ndarray


def _bone_frames(skel: HandSkeleton, theta):
    ch = _chain(skel, theta)
    origins = np.concatenate([skel.anchors[:, None, :], ch.joints[:, :2]], axis=1)
    return ch, origins


def _attach_samples(skel: HandSkeleton, theta, density) -> _BoneSamples:
    caps = hand_capsules(skel, theta)
    smp = capsule_surface_samples(caps, density)
    finger = caps.finger[smp.capsule]
    bone = caps.bone[smp.capsule]
    ch, origins = _bone_frames(skel, theta)
    local = smp.points.copy()
    on_finger = finger >= 0
    f, b = finger[on_finger], bone[on_finger]
    local[on_finger] = np.einsum("pji,pj->pi", ch.frames[f, b], smp.points[on_finger] - origins[f, b])
    return _BoneSamples(local, finger, bone)


def _place_samples(skel: HandSkeleton, theta, smp: _BoneSamples) -> np.ndarray:
    ch, origins = _bone_frames(skel, theta)
    pts = smp.local.copy()
    on_finger = smp.finger >= 0
    f, b = smp.finger[on_finger], smp.bone[on_finger]
    pts[on_finger] = origins[f, b] + np.einsum("pij,pj->pi", ch.frames[f, b], smp.local[on_finger])
    return pts


def refine_objective(obj: SdfGrid, skel: HandSkeleton, R0: np.ndarray, theta0: np.ndarray,
                     smp: _BoneSamples, cfg: RefineConfig, scale: float = 1.0):
    """Objective over z = [rotation tangent (3), translation cm (3), theta (20)], lengths in cm."""
    cm = 100.0

    def fun(z):
        delta, t, theta = z[:3], z[3:6] / cm, z[6:]
        tf = RigidTransform(so3_log(R0 @ so3_exp(delta)), t, scale)
        Jr = so3_right_jacobian(delta)
        grad = np.zeros_like(z)
        # contact points
        cp, owner = contact_points(skel, theta)
        bone = np.where(owner >= 0, 2, -1)
        val, d_p, d_rot, d_t = object_sdf_in_hand(obj, tf, cp)
        rho, drho = huber(val * cm, cfg.huber_delta)
        loss = cfg.contact_weight * rho.sum()
        w = cfg.contact_weight * drho * cm
        Jp = rigid_point_jacobian(skel, theta, cp, owner, bone)
        grad[:3] += (w @ d_rot) @ Jr
        grad[3:6] += (w @ d_t) / cm
        grad[6:] += np.einsum("p,pi,pik->k", w, d_p, Jp)
        # penetration of surface samples
        pts = _place_samples(skel, theta, smp)
        val, d_p, d_rot, d_t = object_sdf_in_hand(obj, tf, pts)
        pen = np.maximum(-val * cm, 0.0)
        loss += cfg.penetration_weight * float(pen @ pen)
        active = pen > 0
        if active.any():
            w = -2.0 * cfg.penetration_weight * pen[active] * cm
            Jp = rigid_point_jacobian(skel, theta, pts[active], smp.finger[active], smp.bone[active])
            grad[:3] += (w @ d_rot[active]) @ Jr
            grad[3:6] += (w @ d_t[active]) / cm
            grad[6:] += np.einsum("p,pi,pik->k", w, d_p[active], Jp)
        dth = theta - theta0
        loss += cfg.reg_weight * float(dth @ dth)
        grad[6:] += 2.0 * cfg.reg_weight * dth
        return float(loss), grad

    return fun


def refine_grasp(grasp: GraspParams, obj, config: RefineConfig | None = None,
                 skeleton: HandSkeleton | None = None, return_history: bool = False):
    """Contact/penetration refinement with L-BFGS-B under joint-limit bounds."""
    cfg = config or RefineConfig()
    skel = skeleton or HandSkeleton()
    sdf = _as_sdf(obj)
    R0 = grasp.transform.rotation
    theta0 = skel.limits.clamp(grasp.pose.angles)
    smp = _attach_samples(skel, theta0, cfg.sample_density)
    fun = refine_objective(sdf, skel, R0, theta0, smp, cfg, grasp.transform.scale)
    lo, hi = skel.limits.bounds()
    bounds = [(None, None)] * 6 + list(zip(lo, hi))
    z0 = np.concatenate([np.zeros(3), grasp.transform.translation * 100.0, theta0])
    history = []

    def record(zk):
        history.append(zk.copy())

    res = minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": cfg.iters}, callback=record if return_history else None)
    z = res.x
    out = GraspParams(RigidTransform(so3_log(R0 @ so3_exp(z[:3])), z[3:6] / 100.0, grasp.transform.scale),
                      HandPose(np.clip(z[6:], lo, hi)))
    if return_history:
        return out, [z0] + history
    return out


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass
class GraspMetrics:
    max_depth: float        # m
    mean_depth: float       # m
    volume: float           # cm^3
    contact: float          # 0/1 per grasp
    contact_area: float     # cm^2

    def as_row(self) -> dict:
        return {"max_depth_m": self.max_depth, "mean_depth_m": self.mean_depth,
                "volume_cm3": self.volume, "contact": self.contact, "contact_area_cm2": self.contact_area}


def capsule_metrics(caps: Capsules, object_sdf, spec: GridSpec | None = None,
                    density: float = 4.0, threshold: float = CONTACT_THRESHOLD) -> GraspMetrics:
    """Metrics for capsules against ``object_sdf`` (callable on (P, 3) hand-frame points, meters)."""
    spec = spec or GridSpec()
    smp = capsule_surface_samples(caps, density)
    d = object_sdf(smp.points)
    depth = np.maximum(-d, 0.0)
    pen = depth > 0
    max_depth = float(depth.max()) if pen.any() else 0.0
    mean_depth = float(depth[pen].mean()) if pen.any() else 0.0
    area = float(smp.weights[np.abs(d) < threshold].sum()) * 1e4
    centers = spec.centers()
    inside = capsules_union_sdf(centers, caps) < 0
    if inside.any():
        inside[inside] &= object_sdf(centers[inside]) < 0
    volume = float(inside.sum()) * spec.voxel_size**3 * 1e6
    return GraspMetrics(max_depth, mean_depth, volume, 1.0 if area > 0 else 0.0, area)


def grasp_metrics(grasp: GraspParams, obj, skeleton: HandSkeleton | None = None,
                  spec: GridSpec | None = None, density: float = 4.0) -> GraspMetrics:
    skel = skeleton or HandSkeleton()
    sdf = _as_sdf(obj)
    caps = hand_capsules(skel, grasp.pose)

    def object_sdf(p):
        return object_sdf_in_hand(sdf, grasp.transform, p)[0]

    return capsule_metrics(caps, object_sdf, spec or sdf.spec, density)


# --------------------------------------------------------------------------
# ranking
# --------------------------------------------------------------------------

@dataclass
class RankedGrasp:
    index: int
    score: float
    grasp: GraspParams = field(repr=False)


def rank_grasps(grasps: list, obj: SdfGrid, denoiser: Denoiser, condition, seed: int = 0,
                skeleton: HandSkeleton | None = None, codec: Codec | None = None) -> list[RankedGrasp]:
    """Descending by rank score; ties keep input order."""
    if not grasps:
        raise ValueError("rank_grasps needs at least one grasp")
    assembler = InteractionAssembler(_as_sdf(obj), skeleton, codec)
    scored = []
    for k, g in enumerate(grasps):
        x = assembler(g.transform, g.pose.angles).grid.values
        scored.append(RankedGrasp(k, rank_score(x, denoiser, condition, seed=seed), g))
    return sorted(scored, key=lambda r: (-r.score, r.index))
