"""Procedural wrap grasps on analytic objects, and dataset manifests.

An object is set on the palm, then each finger closes joint by joint until
its distal part touches the surface (bisection on the flexion angle).
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import BlockStatsCodec
from .errors import GenerationFailed, InvalidShape, IoFailure
from .geometry.grid import GridSpec, SdfGrid, save_sdf
from .geometry.shapes import analytic_sdf, bounding_radius, shape_sdf
from .geometry.transforms import RigidTransform
from .hand import (NUM_FINGERS, HandPose, HandSkeleton, capsule_surface_samples, contact_points,
                   hand_capsules)
from .interaction import InteractionGrid, assemble_interaction_grid

FAMILIES = ("sphere-like", "cylinder-like", "handle-like")
MAX_GRASP_RADIUS = 0.09   # m, beyond this the object cannot sit in the palm
MAX_RETRIES = 20
CONTACT_TOL = 0.003
MAX_PENETRATION = 0.003


@dataclass
class GraspRecipe:
    approach: float = 0.0     # rad, object yaw about the palm normal
    tightness: float = 0.5    # [0, 1], how far fingers squeeze past first contact (<= 1 mm)
    spread: float = 0.0       # [-1, 1], finger abduction scale
    reach: float = 0.5        # [0, 1], object position from palm center toward the knuckles

    def validate(self):
        if not (0 <= self.tightness <= 1 and -1 <= self.spread <= 1 and 0 <= self.reach <= 1):
            raise InvalidShape(f"recipe out of range: {self}")


@dataclass
class SyntheticGraspSpec:
    label: str
    shape: dict
    recipe: GraspRecipe = field(default_factory=GraspRecipe)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"label": self.label, "shape": self.shape, "recipe": asdict(self.recipe), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticGraspSpec":
        return cls(d["label"], d["shape"], GraspRecipe(**d.get("recipe", {})), int(d.get("seed", 0)))


def family_shape(family: str, rng: np.random.Generator) -> dict:
    """Random shape descriptor from one of the built-in families."""
    if family == "sphere-like":
        return {"type": "sphere", "radius": float(rng.uniform(0.03, 0.045))}
    if family == "cylinder-like":
        # axis along x so it lies across the palm
        return {"type": "cylinder", "radius": float(rng.uniform(0.02, 0.032)),
                "height": float(rng.uniform(0.08, 0.13)),
                "transform": {"rotvec": [0.0, np.pi / 2, 0.0]}}
    if family == "handle-like":
        # a grip bar with a block head, centered on the composite extent
        r = float(rng.uniform(0.014, 0.02))
        length = float(rng.uniform(0.07, 0.09))
        head = float(rng.uniform(0.025, 0.035))
        shift = -head / 2
        return {"type": "union", "children": [
            {"type": "capsule", "radius": r, "a": [-length / 2 + shift, 0, 0], "b": [length / 2 + shift, 0, 0]},
            {"type": "box", "size": [head, head, head],
             "transform": {"translation": [length / 2 + head / 2 + shift, 0, 0]}},
        ]}
    raise InvalidShape(f"unknown shape family '{family}'")


def random_spec(family: str, seed: int) -> SyntheticGraspSpec:
    rng = np.random.default_rng([int(seed), 7])
    recipe = GraspRecipe(approach=float(rng.uniform(-0.4, 0.4)), tightness=float(rng.uniform(0.2, 0.8)),
                         spread=float(rng.uniform(-0.5, 0.5)), reach=float(rng.uniform(0.4, 0.8)))
    return SyntheticGraspSpec(family, family_shape(family, rng), recipe, int(seed))


@dataclass
class GraspSample:
    object_grid: SdfGrid
    pose: HandPose
    transform: RigidTransform
    interaction: InteractionGrid
    attempts: int


def _bisect(fn, lo: float, hi: float, iters: int = 40) -> float:
    """Largest x in [lo, hi] with fn(x) >= 0 assuming fn decreasing; hi if never crosses."""
    if fn(hi) >= 0:
        return hi
    if fn(lo) < 0:
        return lo
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if fn(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return lo


def _finger_clearance(skel, theta, desc, transform, finger, bones, density=2.0):
    caps = hand_capsules(skel, theta)
    sel = (caps.finger == finger) & np.isin(caps.bone, bones)
    pts = capsule_surface_samples(_subset(caps, sel), density).points
    return float(shape_sdf(desc, transform.apply_inverse(pts)).min())


def _subset(caps, sel):
    from .hand import Capsules
    return Capsules(caps.a[sel], caps.b[sel], caps.radius[sel], caps.finger[sel], caps.bone[sel])


def _wrap(skel: HandSkeleton, desc: dict, recipe: GraspRecipe, jitter: np.ndarray):
    lo, hi = skel.limits.bounds()
    theta = np.zeros(2 * 10)
    order = np.arange(NUM_FINGERS) - 2.0
    theta[0::4] = np.clip(recipe.spread * 0.15 * order + jitter[:NUM_FINGERS] * 0.05, lo[0], hi[0])
    yaw = RigidTransform([0.0, 0.0, recipe.approach + jitter[5] * 0.1])
    # place the object on the palm between the palm center and the knuckles
    base = skel.palm_center() + recipe.reach * (skel.anchors[1:].mean(axis=0) - skel.palm_center())
    palm_caps = hand_capsules(skel, theta)
    palm_pts = capsule_surface_samples(_subset(palm_caps, palm_caps.finger < 0), 2.0).points

    def placed(height):
        return RigidTransform(yaw.rotvec, base + np.array([0.0, 0.0, height]))

    def palm_gap(height):
        return float(shape_sdf(desc, placed(height).apply_inverse(palm_pts)).min())

    # lowest height at which the object still clears the palm
    lo_z, hi_z = 0.0, 0.2
    for _ in range(40):
        mid = 0.5 * (lo_z + hi_z)
        lo_z, hi_z = (lo_z, mid) if palm_gap(mid) >= 0 else (mid, hi_z)
    height = hi_z
    transform = placed(height)
    squeeze = -1e-3 * recipe.tightness

    def close_finger(th, f):
        th = th.copy()
        for joint in range(3):
            k = 4 * f + 1 + joint

            def gap(angle, k=k, joint=joint):
                trial = th.copy()
                trial[k] = angle
                return _finger_clearance(skel, trial, desc, transform, f, list(range(joint, 3))) - squeeze

            th[k] = _bisect(gap, 0.0, hi[k], iters=30)
        return th

    def tip_gap(th, f):
        tips, _ = contact_points(skel, th)
        return abs(float(shape_sdf(desc, transform.apply_inverse(tips[f:f + 1]))[0]))

    for f in range(1, NUM_FINGERS):
        theta = close_finger(theta, f)
    # the thumb opposes the fingers only for some abduction; pick the one whose tip lands closest
    best = None
    for abd in np.linspace(lo[0], hi[0], 11):
        trial = theta.copy()
        trial[0] = abd
        trial = close_finger(trial, 0)
        gap0 = tip_gap(trial, 0)
        if best is None or gap0 < best[0]:
            best = (gap0, trial)
    theta = best[1]
    return HandPose(theta), transform


def check_grasp(skel: HandSkeleton, pose: HandPose, desc: dict, transform: RigidTransform):
    """(contact area cm^2, max penetration m, fingertip distances m)."""
    caps = hand_capsules(skel, pose)
    smp = capsule_surface_samples(caps, 4.0)
    d = shape_sdf(desc, transform.apply_inverse(smp.points))
    area = float(smp.weights[np.abs(d) < 0.0025].sum()) * 1e4
    pen = float(np.maximum(-d, 0).max())
    tips, _ = contact_points(skel, pose)
    tip_d = np.abs(shape_sdf(desc, transform.apply_inverse(tips[:NUM_FINGERS])))
    return area, pen, tip_d


def generate_grasp_sample(spec: SyntheticGraspSpec, skeleton: HandSkeleton | None = None,
                          grid: GridSpec | None = None, latent_grid: GridSpec | None = None) -> GraspSample:
    skel = skeleton or HandSkeleton()
    spec_grid = grid or GridSpec()
    spec.recipe.validate()
    radius = bounding_radius(spec.shape)
    if radius <= 0 or radius > MAX_GRASP_RADIUS:
        raise GenerationFailed(f"object bounding radius {radius:.3f} m exceeds graspable {MAX_GRASP_RADIUS} m")
    rng = np.random.default_rng([int(spec.seed), 11])
    codec = BlockStatsCodec()
    for attempt in range(1, MAX_RETRIES + 1):
        jitter = np.zeros(6) if attempt == 1 else rng.uniform(-1, 1, 6)
        pose, transform = _wrap(skel, spec.shape, spec.recipe, jitter)
        center = transform.translation
        if np.any(np.abs(center) + radius > spec_grid.half_extent):
            continue
        area, pen, _ = check_grasp(skel, pose, spec.shape, transform)
        if area > 0 and pen < MAX_PENETRATION:
            desc = {"type": "union", "children": [spec.shape], "transform": transform.to_dict()}
            obj = analytic_sdf(desc, spec_grid)
            inter = assemble_interaction_grid(codec.encode(obj), pose, skel)
            return GraspSample(obj, pose, transform, inter, attempt)
    raise GenerationFailed(f"no valid grasp for '{spec.label}' after {MAX_RETRIES} attempts")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _generate(args):
    spec, skeleton = args
    return generate_grasp_sample(spec, skeleton)


def build_dataset(specs: list, out_dir, skeleton: HandSkeleton | None = None, threads: int = 1) -> dict:
    """Generate, write and checksum one sample per grasp description; the output does not depend on ``threads``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    entries = []
    jobs = [(spec, skeleton) for spec in specs]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(_generate, jobs))
    else:
        samples = [_generate(j) for j in jobs]
    for n, (spec, sample) in enumerate(zip(specs, samples)):
        stem = f"sample_{n:04d}"
        save_sdf(out / f"{stem}_object.hopg", sample.object_grid)
        sample.interaction.save(out / f"{stem}_interaction.hopg")
        params = {"theta": [float(a) for a in sample.pose.angles], "transform": sample.transform.to_dict(),
                  "spec": spec.to_dict()}
        (out / f"{stem}_params.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
        files = {k: f"{stem}_{k}.{ext}" for k, ext in
                 (("object", "hopg"), ("interaction", "hopg"), ("params", "json"))}
        entries.append({"label": spec.label, "seed": spec.seed, "files": files,
                        "sha256": {k: sha256_file(out / v) for k, v in files.items()},
                        "provenance": {"generator": "wrap", "attempts": sample.attempts}})
    manifest = {"format": "hoiprior-dataset", "version": 1, "entries": entries}
    write_json(out / "manifest.json", manifest)
    return manifest


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def validate_manifest(path) -> list[str]:
    """Problems found in a manifest: missing files or checksum mismatches."""
    p = Path(path)
    manifest = read_json(p)
    problems = []
    for e in manifest.get("entries", []):
        for key, name in e.get("files", {}).items():
            f = p.parent / name
            if not f.exists():
                problems.append(f"missing {name}")
            elif e.get("sha256", {}).get(key) not in (None, sha256_file(f)):
                problems.append(f"checksum mismatch {name}")
    return problems
