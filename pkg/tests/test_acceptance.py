"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line (repeated in the pytest summary) with the
measured quantities, then asserts the criterion at its stated tolerance.
"""

import json
import hashlib
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chisquare

from fdcheck import fd_match
from hoiprior.diffusion import (MixtureDenoiser, NoiseSchedule, TemplateBank, adaptive_noise_bound,
                                ancestral_sample, fit_empirical_bank, sds_gradient)
from hoiprior.geometry import (GridSpec, RigidTransform, SdfGrid, analytic_sdf, eikonal_residual, icosphere,
                               marching_cubes, mesh_to_sdf, resample_under_transform, sample_trilinear)
from hoiprior.geometry.transforms import so3_exp, so3_log
from hoiprior.grasp import GraspParams, grasp_metrics, rank_grasps, refine_grasp, synthesize_grasp
from hoiprior.hand import HandSkeleton, fk_jacobian, forward_kinematics, pose_from_field, skeletal_field
from hoiprior.interaction import InteractionAssembler
from hoiprior.recon import (OrthoCamera, ReconConfig, SceneParams, SyntheticClipConfig, initial_scene,
                            recon_metrics, reconstruct_clip, render_silhouette, silhouette_ious, silhouette_vjp,
                            synthetic_clip)
from hoiprior.synth import generate_grasp_sample, random_spec

pytestmark = pytest.mark.slow

SKEL = HandSkeleton()
SCH = NoiseSchedule()
SPHERE = {"type": "sphere", "radius": 0.04}
CONDITION = "sphere-like"
GRASP_SEEDS = 40


@pytest.fixture(scope="module")
def sphere_bank():
    samples = [generate_grasp_sample(random_spec(CONDITION, s)) for s in range(12)]
    return fit_empirical_bank([s.interaction.values for s in samples], [CONDITION] * 12, 4, seed=0)


@pytest.fixture(scope="module")
def sphere_object():
    return analytic_sdf(SPHERE, GridSpec.cube(64))


@pytest.fixture(scope="module")
def grasp_runs(sphere_bank, sphere_object):
    den = MixtureDenoiser(sphere_bank)
    runs = []
    for seed in range(GRASP_SEEDS):
        t0 = time.perf_counter()
        res = synthesize_grasp(sphere_object, den, CONDITION, seed=seed)
        refined = refine_grasp(res.grasp, sphere_object)
        runs.append({"result": res, "refined": refined, "seconds": time.perf_counter() - t0,
                     "metrics": grasp_metrics(refined, sphere_object)})
    return runs


# --------------------------------------------------------------------------
# 1. pose roundtrip
# --------------------------------------------------------------------------

def test_c01_pose_roundtrip(report):
    spec = GridSpec.cube(64)
    rng = np.random.default_rng(0)
    poses = [SKEL.limits.sample(rng) for _ in range(50)]
    t0 = time.perf_counter()
    errors = []
    for theta in poses:
        fit = pose_from_field(skeletal_field(SKEL, theta, spec), reg_weight=1e-5, steps=1000, lr=1e-2,
                              skeleton=SKEL, grid=spec)
        err = np.linalg.norm(forward_kinematics(SKEL, fit.pose) - forward_kinematics(SKEL, theta), axis=1)
        errors.append(err.max())
    seconds = time.perf_counter() - t0
    frac = float(np.mean(np.array(errors) < 1e-3))
    ok = report(1, "pose roundtrip", frac >= 0.95 and seconds < 60,
                f"{frac:.0%} of 50 poses within 1 mm (worst {max(errors) * 1e3:.3f} mm), {seconds:.1f} s")
    assert ok


# --------------------------------------------------------------------------
# 2. denoiser against a Monte-Carlo posterior mean
# --------------------------------------------------------------------------

def monte_carlo_posterior_mean(bank: TemplateBank, x: np.ndarray, i: int, rng, draws: int = 10**6):
    """Self-normalized importance estimate of E[x0 | x_i = x] from prior draws.

    Components are drawn in proportion to their weights and each Gaussian draw
    is paired with its mirror image; both only reduce variance.
    """
    ab = SCH.alpha_bar[i]
    mus = np.stack([np.ravel(t) for t in bank.templates])
    w = bank.weights / bank.weights.sum()
    half = draws // 2
    counts = np.floor(w * half).astype(int)
    counts[0] += half - counts.sum()
    comp = np.repeat(np.arange(len(w)), counts)
    z = rng.standard_normal((half, mus.shape[1]))
    x0 = mus[np.concatenate([comp, comp])] + bank.sigma0 * np.concatenate([z, -z])
    logl = -np.sum((x.ravel() - math.sqrt(ab) * x0) ** 2, axis=1) / (2.0 * (1.0 - ab))
    a = np.exp(logl - logl.max())
    return (a @ x0 / a.sum()).reshape(x.shape)


def test_c02_denoiser_matches_monte_carlo(report):
    errors = []
    for case in range(10):
        rng = np.random.default_rng(case)
        k = 1 + case % 3
        templates = [rng.uniform(-1, 1, (2, 2, 2)) for _ in range(k)]
        bank = TemplateBank(templates, rng.uniform(0.5, 1.5, k), [0] * k, float(rng.uniform(0.05, 0.2)))
        i = int(rng.integers(100, 901))
        ab = SCH.alpha_bar[i]
        x0 = templates[rng.integers(k)] + bank.sigma0 * rng.standard_normal((2, 2, 2))
        x = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * rng.standard_normal((2, 2, 2))
        oracle = monte_carlo_posterior_mean(bank, x, i, rng)
        errors.append(float(np.abs(MixtureDenoiser(bank, SCH)(x, i) - oracle).max()))
    ok = report(2, "denoiser exactness", max(errors) < 1e-3,
                f"max |denoiser - MC| over 10 cases = {max(errors):.2e} (tol 1e-3)")
    assert ok


# --------------------------------------------------------------------------
# 3. SDS gradient
# --------------------------------------------------------------------------

def test_c03_sds_gradient(report):
    rng = np.random.default_rng(0)
    mu = rng.uniform(-1, 1, (2, 2, 2))
    single = MixtureDenoiser(TemplateBank([mu], np.ones(1), [0], 0.0))
    exact_dev = 0.0
    for n in range(20):
        x = rng.uniform(-1, 1, mu.shape)
        exact_dev = max(exact_dev, float(np.abs(sds_gradient(x, single, seed=n) - (x - mu)).max()))

    mus = [rng.uniform(-1, 1, (2, 2, 2)) for _ in range(2)]
    bank = TemplateBank(mus, np.ones(2), [0, 0], 0.1)
    den = MixtureDenoiser(bank)
    i = 300
    ab = SCH.alpha_bar[i]
    # the noised-and-rescaled state sees the mixture smoothed to this per-entry variance
    s2 = bank.sigma0**2 + (1 - ab) / ab
    cosines = []
    for n in range(20):
        x = rng.uniform(-1, 1, (2, 2, 2))
        g = sds_gradient(x, den, noise_range=(i / SCH.T, i / SCH.T), n_samples=2000, seed=n)
        d2 = np.array([np.sum((x - m) ** 2) for m in mus])
        r = np.exp(-(d2 - d2.min()) / (2 * s2))
        r /= r.sum()
        score = (x - sum(rk * m for rk, m in zip(r, mus))) / s2
        cosines.append(float(np.sum(g * score) / (np.linalg.norm(g) * np.linalg.norm(score))))
    ok = report(3, "SDS correctness", exact_dev < 1e-12 and min(cosines) > 0.9,
                f"K=1 max deviation {exact_dev:.1e}; K=2 cosine min {min(cosines):.4f} "
                f"mean {np.mean(cosines):.4f} over 20 states")
    assert ok


# --------------------------------------------------------------------------
# 4. ancestral sampling statistics
# --------------------------------------------------------------------------

def test_c04_sampling_balance(report):
    mu = np.random.default_rng(0).uniform(-1, 1, (2, 2, 2))
    den = MixtureDenoiser(TemplateBank([mu, -mu], np.ones(2), [0, 0], 0.05))
    t0 = time.perf_counter()
    counts = np.zeros(2)
    for seed in range(500):
        x = ancestral_sample(den, seed=seed)
        counts[int(np.sum((x - mu) ** 2) > np.sum((x + mu) ** 2))] += 1
    seconds = time.perf_counter() - t0
    p = float(chisquare(counts).pvalue)
    ok = report(4, "sampling statistics", p > 0.01 and seconds < 300,
                f"assignments {int(counts[0])}/{int(counts[1])}, chi2 p = {p:.3f}, {seconds:.0f} s")
    assert ok


# --------------------------------------------------------------------------
# 5. adaptive noise bound
# --------------------------------------------------------------------------

def test_c05_adaptive_bound(report):
    got = {}
    for smin in (-0.2, -0.01):
        g = np.full((4, 4, 4), 0.5)
        g[2, 1, 3] = smin
        got[smin] = adaptive_noise_bound(g)
    ok = report(5, "adaptive noise bound", got[-0.2] == 0.75 and got[-0.01] == 0.25,
                f"min SDF -0.2 -> {got[-0.2]}, -0.01 -> {got[-0.01]}")
    assert ok


# --------------------------------------------------------------------------
# 6. grasp synthesis
# --------------------------------------------------------------------------

def test_c06_grasp_synthesis(report, grasp_runs):
    n = len(grasp_runs)
    lowered = np.mean([r["result"].final_loss < r["result"].initial_loss for r in grasp_runs])
    good = np.mean([r["metrics"].contact == 1.0 and r["metrics"].max_depth < 5e-3 for r in grasp_runs])
    contact = np.mean([r["metrics"].contact for r in grasp_runs])
    slowest = max(r["seconds"] for r in grasp_runs)
    iters = {len(r["result"].trace) for r in grasp_runs}
    ok = report(6, "grasp synthesis", lowered >= 0.95 and good >= 0.9 and slowest < 120 and iters == {500},
                f"{n} seeds: loss lowered {lowered:.0%}, contact+penetration<5mm {good:.0%} "
                f"(contact ratio {contact:.2f}), slowest {slowest:.0f} s")
    assert ok


# --------------------------------------------------------------------------
# 7. ranking sanity
# --------------------------------------------------------------------------

def test_c07_ranking(report, grasp_runs, sphere_bank, sphere_object):
    den = MixtureDenoiser(sphere_bank)
    below = 0
    for r in grasp_runs:
        g = r["refined"]
        # move the object center onto the palm so the hand sits inside the sphere
        inside = GraspParams(RigidTransform(g.transform.rotvec, SKEL.palm_center()), g.pose)
        ranked = rank_grasps([g, inside], sphere_object, den, CONDITION)
        below += ranked[-1].index == 1 and ranked[0].score > ranked[1].score
    ranked = rank_grasps([r["refined"] for r in grasp_runs], sphere_object, den, CONDITION)
    depth = [grasp_runs[r.index]["metrics"].max_depth for r in ranked]
    decile = max(1, len(depth) // 10)
    top, bottom = float(np.mean(depth[:decile])), float(np.mean(depth[-decile:]))
    frac = below / len(grasp_runs)
    ok = report(7, "ranking sanity", frac >= 0.95 and top <= bottom,
                f"inside grasp ranked lower in {frac:.0%} of {len(grasp_runs)} trials; "
                f"mean max penetration top decile {top * 1e3:.2f} mm vs bottom {bottom * 1e3:.2f} mm")
    assert ok


# --------------------------------------------------------------------------
# 8. reconstruction demo
# --------------------------------------------------------------------------

def test_c08_reconstruction(report, sphere_bank):
    cfg = SyntheticClipConfig()
    t0 = time.perf_counter()
    obs, gt = synthetic_clip(cfg)
    init = initial_scene(gt, cfg)
    res = reconstruct_clip(obs, init, MixtureDenoiser(sphere_bank), CONDITION, ReconConfig())
    seconds = time.perf_counter() - t0
    ious = silhouette_ious(res.scene, obs)
    m0, m1 = recon_metrics(init, gt), recon_metrics(res.scene, gt)
    reduction = 1 - m1.raw_chamfer_mm / m0.raw_chamfer_mm
    ok = report(8, "reconstruction demo", ious.min() > 0.9 and reduction >= 0.5 and seconds < 1800,
                f"{obs.num_frames} frames x {len(obs.cameras)} views, IoU min {ious.min():.3f}; Chamfer "
                f"{m0.raw_chamfer_mm:.2f} -> {m1.raw_chamfer_mm:.2f} mm ({reduction:.0%} lower), hand-frame "
                f"{m0.cd_h_mm:.2f} -> {m1.cd_h_mm:.2f} mm; {res.iterations} iterations, {seconds:.0f} s")
    assert ok


# --------------------------------------------------------------------------
# 9. finite-difference suite
# --------------------------------------------------------------------------

CASES = 100


def _fk_cases(rng):
    passed = 0
    h = 1e-6
    for _ in range(CASES):
        theta = SKEL.limits.sample(rng)
        J = fk_jacobian(SKEL, theta)
        fd = np.stack([(forward_kinematics(SKEL, theta + h * e) - forward_kinematics(SKEL, theta - h * e)) / (2 * h)
                       for e in np.eye(theta.size)], axis=-1)
        passed += np.allclose(J, fd, rtol=1e-5, atol=1e-8)
    return passed


def _trilinear_cases(rng):
    values = rng.normal(size=(8, 8, 8))
    passed = 0
    h = 1e-6
    for _ in range(CASES):
        p = rng.uniform(-0.95, 0.95, (1, 3))
        v0, g = sample_trilinear(values, p)
        ok = True
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fp = sample_trilinear(values, p + e, need_grad=False)[0]
            fm = sample_trilinear(values, p - e, need_grad=False)[0]
            ok &= bool(fd_match(g[0, k], fp[0], fm[0], v0[0], h).all())
        passed += ok
    return passed


def _resample_cases(rng):
    obj = analytic_sdf({"type": "box", "size": [0.08, 0.06, 0.1]}, GridSpec.cube(16))
    passed = 0
    h = 1e-7
    for _ in range(CASES):
        p0 = np.concatenate([rng.normal(size=3) * 0.5, rng.uniform(-0.02, 0.02, 3), rng.uniform(0.8, 1.2, 1)])
        d = rng.normal(size=7)
        cot = rng.normal(size=obj.spec.shape)
        out, grads = resample_under_transform(obj, RigidTransform.from_params(p0), with_grad=True)

        def f(p):
            return float(np.sum(cot * resample_under_transform(obj, RigidTransform.from_params(p)).values))

        analytic = float(d @ np.tensordot(grads, cot, axes=3))
        passed += bool(fd_match(analytic, f(p0 + h * d), f(p0 - h * d), float(np.sum(cot * out.values)), h,
                                rtol=1e-4).all())
    return passed


def _sds_parameter_cases(rng, bank):
    den = MixtureDenoiser(bank)
    obj = analytic_sdf({"type": "box", "size": [0.06, 0.05, 0.08], "transform": {"rotvec": [0.2, -0.1, 0.3]}},
                       GridSpec.cube(64))
    asm = InteractionAssembler(obj, SKEL, tangent=True)
    passed = 0
    h = 1e-7
    for case in range(CASES):
        tf = RigidTransform(rng.normal(size=3) * 0.5, rng.uniform(-0.03, 0.03, 3) + [0.0, 0.05, 0.03])
        theta = SKEL.limits.clamp(rng.uniform(-0.2, 1.0, 20))
        state = asm(tf, theta)
        cot = sds_gradient(state.grid.values, den, CONDITION, seed=case)
        g_t, g_theta = asm.vjp(state, cot)
        d = rng.normal(size=26)
        d[3:6] *= 0.01

        def f(s):
            moved = RigidTransform(so3_log(tf.rotation @ so3_exp(s * d[:3])), tf.translation + s * d[3:6])
            return float(np.sum(cot * asm(moved, theta + s * d[6:]).grid.values))

        analytic = float(g_t[:6] @ d[:6] + g_theta @ d[6:])
        passed += bool(fd_match(analytic, f(h), f(-h), float(np.sum(cot * state.grid.values)), h, rtol=1e-3).all())
    return passed


def _silhouette_cases(rng):
    obj = analytic_sdf({"type": "sphere", "radius": 0.05}, GridSpec.cube(32))
    passed = 0
    h = 1e-6
    for _ in range(CASES):
        T = RigidTransform(rng.normal(size=3) * 0.5, rng.uniform(-0.02, 0.02, 3))
        theta = SKEL.limits.clamp(rng.uniform(-0.2, 1.0, 20))
        cam = OrthoCamera(rng.normal(size=3), resolution=24)
        co, ch = rng.normal(size=(24, 24)), rng.normal(size=(24, 24))
        d_t, d_theta = rng.normal(size=6), rng.normal(size=20)
        d_t[3:] *= 0.01
        d_obj = rng.normal(size=obj.spec.shape) * 0.01

        def f(s):
            tf = RigidTransform(so3_log(T.rotation @ so3_exp(s * d_t[:3])), T.translation + s * d_t[3:])
            th = theta + s * d_theta
            scene = SceneParams(SdfGrid(obj.spec, obj.values + s * d_obj), np.stack([th, th]), [tf, tf])
            sil = render_silhouette(scene, 0, cam)
            return float((sil.object * co).sum() + (sil.hand * ch).sum())

        g = silhouette_vjp(SceneParams(obj, np.stack([theta, theta]), [T, T]), 0, cam, co, ch)
        analytic = float(g.transform @ d_t + g.theta @ d_theta + np.sum(g.object * d_obj))
        passed += bool(fd_match(analytic, f(h), f(-h), f(0.0), h, rtol=1e-3, atol=1e-5).all())
    return passed


def test_c09_finite_difference_suite(report, sphere_bank):
    rng = np.random.default_rng(2024)
    counts = {
        "FK Jacobian": _fk_cases(rng),
        "trilinear": _trilinear_cases(rng),
        "resampling": _resample_cases(rng),
        "SDS parameters": _sds_parameter_cases(rng, sphere_bank),
        "silhouette": _silhouette_cases(rng),
    }
    ok = report(9, "finite-difference suite", all(c == CASES for c in counts.values()),
                ", ".join(f"{k} {v}/{CASES}" for k, v in counts.items()))
    assert ok


# --------------------------------------------------------------------------
# 10. geometry oracles
# --------------------------------------------------------------------------

def test_c10_geometry_oracles(report):
    spec = GridSpec.cube(64)
    vox = spec.voxel_size
    r = 0.05
    sphere = analytic_sdf({"type": "sphere", "radius": r}, spec)
    radial = float(np.abs(np.linalg.norm(marching_cubes(sphere).vertices, axis=1) - r).max())

    from_mesh = mesh_to_sdf(icosphere(4, r), spec)
    rng = np.random.default_rng(0)
    band = np.flatnonzero(np.abs(sphere.values.ravel()) < 1)
    probes = rng.choice(band, 200, replace=False)
    probe_err = float(np.abs(from_mesh.values.ravel()[probes] - sphere.values.ravel()[probes]).max()
                      * spec.half_extent)

    core = (np.linalg.norm(spec.centers(), axis=1) < 2 * vox).reshape(spec.shape)
    eik = eikonal_residual(sphere, exclude=core).mean
    ok = report(10, "geometry oracles", radial < 0.5 * vox and probe_err < 0.25 * vox and eik < 0.02,
                f"marching-cubes radial error {radial / vox:.3f} voxel; mesh_to_sdf probe error "
                f"{probe_err / vox:.3f} voxel; Eikonal mean residual {eik:.4f}")
    assert ok


# --------------------------------------------------------------------------
# 11. CLI reproducibility
# --------------------------------------------------------------------------

def _cli_session(root: Path) -> dict:
    """Run every command once under ``root``; return relative path -> sha256 of every output plus stdout."""
    root.mkdir(parents=True)
    (root / "sphere.json").write_text(json.dumps(SPHERE))
    env = {**os.environ, "PYTHONHASHSEED": "0"}
    steps = [
        ["gen-data", "--out", "data", "--count", "3", "--families", CONDITION],
        ["gen-data", "--clip", "--frames", "2", "--image-resolution", "16", "--out", "clip"],
        ["fit-prior", "--data", "data", "--k", "2", "--out", "bank"],
        ["sample", "--bank", "bank", "--condition", CONDITION, "--seeds", "2", "--pose-steps", "30",
         "--out", "samples"],
        ["synth-grasp", "--object", "sphere.json", "--bank", "bank", "--condition", CONDITION, "--seeds", "2",
         "--iters", "10", "--refine-iters", "5", "--out", "grasps"],
        ["rank", "--object", "sphere.json", "--bank", "bank", "--condition", CONDITION, "--grasps", "grasps",
         "--out", "ranked"],
        ["recon-demo", "--clip", "clip", "--bank", "bank", "--condition", CONDITION, "--iters", "6",
         "--min-iters", "3", "--out", "recon"],
        ["metrics", "--pred", "recon/scene.json", "--gt", "clip/gt_scene.json", "--out", "m_recon"],
        ["metrics", "--grasp", "grasps/grasp_000000.json", "--object", "sphere.json", "--out", "m_grasp"],
        ["export-mesh", "--grasp", "grasps/grasp_000000.json", "--object", "sphere.json",
         "--grid", "data/sample_0000_interaction.hopg", "--out", "meshes"],
        ["validate", "--manifest", "data/manifest.json"],
    ]
    digests = {}
    for n, argv in enumerate(steps):
        proc = subprocess.run([sys.executable, "-m", "hoiprior.cli", *argv, "--seed", "0", "--threads", "1"],
                              cwd=root, env=env, capture_output=True, text=True)
        assert proc.returncode == 0, f"{argv[0]} failed: {proc.stderr}"
        digests[f"stdout:{n}:{argv[0]}"] = hashlib.sha256(proc.stdout.encode()).hexdigest()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digests[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digests


def test_c11_cli_reproducibility(report, tmp_path):
    a = _cli_session(tmp_path / "a")
    b = _cli_session(tmp_path / "b")
    commands = {k.split(":")[2] for k in a if k.startswith("stdout:")}
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = report(11, "CLI reproducibility", not differing and len(commands) == 9,
                f"{len(a)} outputs from {len(commands)} commands compared; "
                f"{len(differing)} differ{': ' + ', '.join(differing[:5]) if differing else ''}")
    assert ok
