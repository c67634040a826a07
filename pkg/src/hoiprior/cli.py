"""Command-line entry point: ``hoiprior <command> [options]``.

Every command takes ``--config`` (a JSON document whose keys match the
long option names), ``--print-config`` (dump the effective configuration
and exit), ``--seed`` and ``--threads``.  Failures print one JSON line
``{"error": <code>, "message": ...}`` on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import ConfigError, HoiError, IoFailure

COMMANDS = {}


def command(name, help_text, defaults):
    def wrap(fn):
        COMMANDS[name] = (fn, help_text, defaults)
        return fn
    return wrap


# --------------------------------------------------------------------------
# shared helpers
# --------------------------------------------------------------------------

def _out_dir(cfg) -> Path:
    if not cfg.get("out"):
        raise ConfigError("--out is required")
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out}: {exc}") from exc
    return out


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _write_json(path, obj) -> None:
    from .synth import write_json
    write_json(path, obj)


def _write_csv(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    try:
        Path(path).write_text(buf.getvalue())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _map(fn, items, threads: int):
    """Ordered map; worker processes when ``threads > 1``.  Results do not depend on ``threads``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def load_object(path):
    """Object SDF grid from an OBJ mesh, an HOPG grid or a JSON shape descriptor."""
    from .geometry.grid import load_sdf
    from .geometry.mesh import mesh_to_sdf, read_obj
    from .geometry.shapes import analytic_sdf
    from .synth import read_json

    p = Path(path)
    suffix = p.suffix.lower()
    if suffix == ".obj":
        return mesh_to_sdf(read_obj(p))
    if suffix == ".hopg":
        return load_sdf(p)
    if suffix == ".json":
        return analytic_sdf(read_json(p))
    raise ConfigError(f"unsupported object file '{p.name}' (expected .obj, .hopg or .json)")


def _denoiser(bank_path):
    from .diffusion import MixtureDenoiser, TemplateBank
    return MixtureDenoiser(TemplateBank.load(bank_path))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

@command("gen-data", "procedural wrap-grasp dataset, or a synthetic reconstruction clip with --clip",
         {"out": None, "count": 12, "families": ["sphere-like", "cylinder-like", "handle-like"],
          "clip": False, "frames": 8, "image_resolution": 64})
def cmd_gen_data(cfg):
    out = _out_dir(cfg)
    if cfg["clip"]:
        from .recon import SyntheticClipConfig, initial_scene, save_scene, synthetic_clip
        ccfg = SyntheticClipConfig(frames=int(cfg["frames"]), resolution=int(cfg["image_resolution"]),
                                   seed=int(cfg["seed"]))
        obs, gt = synthetic_clip(ccfg)
        manifest = obs.save(out)
        save_scene(out / "gt_scene.json", gt, {"generator": ccfg.to_dict()})
        save_scene(out / "init_scene.json", initial_scene(gt, ccfg))
        return {"clip": manifest.name, "frames": obs.num_frames}
    from .synth import FAMILIES, build_dataset, random_spec
    families = list(cfg["families"])
    unknown = [f for f in families if f not in FAMILIES]
    if unknown or not families:
        raise ConfigError(f"unknown families {unknown}; choose from {list(FAMILIES)}")
    count = int(cfg["count"])
    specs = [random_spec(families[n % len(families)], int(cfg["seed"]) * 100003 + n) for n in range(count)]
    manifest = build_dataset(specs, out, threads=int(cfg["threads"]))
    return {"manifest": "manifest.json", "entries": len(manifest["entries"])}


@command("fit-prior", "fit a template bank (k-means per label) to a dataset's interaction grids",
         {"data": None, "k": 4, "out": None})
def cmd_fit_prior(cfg):
    from .diffusion import fit_empirical_bank
    from .interaction import InteractionGrid
    from .synth import read_json, validate_manifest
    _require(cfg, "data")
    out = _out_dir(cfg)
    mpath = Path(cfg["data"])
    if mpath.is_dir():
        mpath = mpath / "manifest.json"
    problems = validate_manifest(mpath)
    if problems:
        raise IoFailure(f"dataset invalid: {problems[0]}")
    manifest = read_json(mpath)
    grids, labels, half = [], [], 0.15
    for e in manifest["entries"]:
        g = InteractionGrid.load(mpath.parent / e["files"]["interaction"])
        g.check()
        grids.append(g.values)
        labels.append(e["label"])
        half = g.spec.half_extent
    k = cfg["k"]
    if isinstance(k, dict):
        k = {lab: int(v) for lab, v in k.items()}
    else:
        # a label with fewer samples than k gets one template per sample
        k = {lab: min(int(k), labels.count(lab)) for lab in set(labels)}
    bank = fit_empirical_bank(grids, labels, k, seed=int(cfg["seed"]), half_extent=half)
    path = bank.save(out)
    return {"bank": path.name, "templates": len(bank.templates), "sigma0": bank.sigma0}


@command("sample", "ancestral samples from a bank: interaction grids, object meshes and hand poses",
         {"bank": None, "condition": None, "seeds": 4, "out": None, "pose_steps": 1000})
def cmd_sample(cfg):
    _require(cfg, "bank", "condition")
    out = _out_dir(cfg)
    jobs = [(cfg["bank"], cfg["condition"], int(cfg["seed"]) + n, str(out), int(cfg["pose_steps"]))
            for n in range(int(cfg["seeds"]))]
    rows = _map(_sample_one, jobs, int(cfg["threads"]))
    _write_json(out / "samples.json", {"samples": rows})
    return {"samples": len(rows)}


def _sample_one(job):
    from .codec import BlockStatsCodec, LatentGrid
    from .diffusion import ancestral_sample
    from .geometry.grid import GridSpec
    from .geometry.mesh import marching_cubes, write_obj
    from .hand import pose_from_field
    from .interaction import InteractionGrid, band_to_hand

    bank, condition, seed, out, steps = job
    den = _denoiser(bank)
    x = ancestral_sample(den, condition, seed=seed)
    half = den.bank.half_extent
    spec = GridSpec(x.shape[1:], half)
    stem = f"sample_{seed:06d}"
    grid = InteractionGrid(spec, x)
    grid.save(Path(out) / f"{stem}_interaction.hopg")
    codec = BlockStatsCodec()
    obj = codec.decode(LatentGrid(spec, np.clip(grid.object_channels, -1.0, 1.0)))
    mesh = marching_cubes(obj)
    write_obj(Path(out) / f"{stem}_object.obj", mesh)
    fit = pose_from_field(np.clip(band_to_hand(grid.hand_channels), 0.0, 4.0), steps=steps, grid=spec)
    pose = {"theta": [float(a) for a in fit.pose.angles], "residual": float(fit.residual)}
    _write_json(Path(out) / f"{stem}_pose.json", pose)
    return {"seed": seed, "interaction": f"{stem}_interaction.hopg", "object_mesh": f"{stem}_object.obj",
            "pose": f"{stem}_pose.json", "mesh_faces": int(len(mesh.faces))}


@command("synth-grasp", "SDS grasp synthesis plus contact refinement for several seeds, then ranking",
         {"object": None, "bank": None, "condition": None, "seeds": 4, "out": None, "iters": 500,
          "lr": 1e-2, "refine_iters": 200, "rank_seed": 0})
def cmd_synth_grasp(cfg):
    from .grasp import GraspParams, rank_grasps
    from .geometry.mesh import write_obj
    _require(cfg, "object", "bank", "condition")
    out = _out_dir(cfg)
    jobs = [(cfg["object"], cfg["bank"], cfg["condition"], int(cfg["seed"]) + n, int(cfg["iters"]),
             float(cfg["lr"]), int(cfg["refine_iters"])) for n in range(int(cfg["seeds"]))]
    results = _map(_synth_one, jobs, int(cfg["threads"]))
    rows, grasps, files = [], [], []
    for seed, params, row, trace in results:
        name = f"grasp_{seed:06d}.json"
        _write_json(out / name, {"seed": seed, **params, "sds_trace": trace})
        g = GraspParams.from_dict(params)
        grasps.append(g)
        files.append(name)
        rows.append({"seed": seed, **row})
        write_obj(out / f"grasp_{seed:06d}_hand.obj", _hand_mesh(g))
    obj = load_object(cfg["object"])
    write_obj(out / "object.obj", _object_mesh(obj))
    ranked = rank_grasps(grasps, obj, _denoiser(cfg["bank"]), cfg["condition"], seed=int(cfg["rank_seed"]))
    for r in ranked:
        rows[r.index]["rank_score"] = r.score
    _write_csv(out / "metrics.csv", rows)
    _write_json(out / "ranked.json", _ranked_doc(ranked, files, cfg))
    return {"grasps": len(grasps), "best": files[ranked[0].index]}


def _synth_one(job):
    from .grasp import RefineConfig, SynthesisConfig, grasp_metrics, refine_grasp, synthesize_grasp
    obj_path, bank, condition, seed, iters, lr, refine_iters = job
    obj = load_object(obj_path)
    res = synthesize_grasp(obj, _denoiser(bank), condition, seed=seed, config=SynthesisConfig(iters=iters, lr=lr))
    refined = refine_grasp(res.grasp, obj, RefineConfig(iters=refine_iters))
    m = grasp_metrics(refined, obj)
    row = {"initial_sds": res.initial_loss, "final_sds": res.final_loss, **m.as_row()}
    return seed, refined.to_dict(), row, [float(v) for v in res.trace]


def _ranked_doc(ranked, files, cfg) -> dict:
    return {"condition": cfg["condition"], "rank_seed": int(cfg["rank_seed"]),
            "ranking": [{"file": files[r.index], "index": r.index, "score": r.score} for r in ranked]}


def _hand_mesh(grasp, skeleton=None):
    from .geometry.mesh import capsule_mesh, concatenate
    from .hand import HandSkeleton, hand_capsules
    caps = hand_capsules(skeleton or HandSkeleton(), grasp.pose)
    return concatenate([capsule_mesh(a, b, r) for a, b, r in zip(caps.a, caps.b, caps.radius)])


def _object_mesh(obj, transform=None):
    from .geometry.mesh import marching_cubes
    mesh = marching_cubes(obj)
    return mesh.transformed(transform) if transform is not None and not mesh.is_empty else mesh


@command("rank", "rank grasp documents by the prior's stratified SDS score",
         {"object": None, "bank": None, "condition": None, "grasps": None, "out": None, "rank_seed": 0})
def cmd_rank(cfg):
    from .grasp import GraspParams, rank_grasps
    from .synth import read_json
    _require(cfg, "object", "bank", "condition", "grasps")
    out = _out_dir(cfg)
    src = Path(cfg["grasps"])
    paths = sorted(src.glob("grasp_*.json")) if src.is_dir() else [Path(p) for p in str(cfg["grasps"]).split(",")]
    if not paths:
        raise ConfigError(f"no grasp documents found in {src}")
    grasps = [GraspParams.from_dict(read_json(p)) for p in paths]
    ranked = rank_grasps(grasps, load_object(cfg["object"]), _denoiser(cfg["bank"]), cfg["condition"],
                         seed=int(cfg["rank_seed"]))
    _write_json(out / "ranked.json", _ranked_doc(ranked, [p.name for p in paths], cfg))
    return {"best": paths[ranked[0].index].name}


@command("recon-demo", "reconstruct object, per-frame poses and transforms from a mask clip",
         {"clip": None, "init": None, "gt": None, "bank": None, "condition": None, "out": None,
          "iters": 15000, "w_sds": 1e-3, "plateau_tol": 1e-3, "min_iters": 300})
def cmd_recon_demo(cfg):
    from .geometry.mesh import write_obj
    from .recon import (ClipObservation, ReconConfig, load_scene, recon_metrics, reconstruct_clip, save_scene,
                        silhouette_ious)
    _require(cfg, "clip")
    out = _out_dir(cfg)
    clip = Path(cfg["clip"])
    root = clip if clip.is_dir() else clip.parent
    obs = ClipObservation.load(clip)
    init = load_scene(cfg.get("init") or root / "init_scene.json")
    gt_path = Path(cfg["gt"]) if cfg.get("gt") else root / "gt_scene.json"
    gt = load_scene(gt_path) if gt_path.exists() else None
    if cfg.get("bank") and cfg.get("condition") is None:
        raise ConfigError("--condition is required with --bank")
    den = _denoiser(cfg["bank"]) if cfg.get("bank") else None
    rcfg = ReconConfig(iters=int(cfg["iters"]), w_sds=float(cfg["w_sds"]), seed=int(cfg["seed"]),
                       plateau_tol=float(cfg["plateau_tol"]), min_iters=int(cfg["min_iters"]))
    res = reconstruct_clip(obs, init, den, cfg.get("condition"), rcfg)
    save_scene(out / "scene.json", res.scene, {"iterations": res.iterations})
    write_obj(out / "object.obj", _object_mesh(res.scene.object))
    _write_json(out / "trace.json", {"loss": res.trace, "reprojection": res.reproj_trace, "sds": res.sds_trace,
                                     "noise_bounds": res.noise_bounds})
    ious = silhouette_ious(res.scene, obs)
    rows = [{"frame": t, "iou": float(v)} for t, v in enumerate(ious)]
    summary = {"iterations": res.iterations, "min_iou": float(ious.min())}
    if gt is not None:
        m0 = recon_metrics(init, gt)
        m = recon_metrics(res.scene, gt)
        for t, row in enumerate(rows):
            row["mpjpe_mm"] = m.mpjpe_mm[t]
        _write_json(out / "summary.json", {**summary, "initial": m0.as_row(), "final": m.as_row()})
        summary["cd_h_mm"] = m.cd_h_mm
        summary["initial_cd_h_mm"] = m0.cd_h_mm
    _write_csv(out / "metrics.csv", rows)
    return summary


@command("metrics", "compare two reconstructions (--pred/--gt scene documents) or score one grasp "
                    "(--grasp with --object)",
         {"pred": None, "gt": None, "grasp": None, "object": None, "out": None})
def cmd_metrics(cfg):
    from .grasp import GraspParams, grasp_metrics
    from .recon import recon_metrics
    from .synth import read_json
    out = _out_dir(cfg)
    if cfg.get("grasp"):
        _require(cfg, "object")
        m = grasp_metrics(GraspParams.from_dict(read_json(cfg["grasp"])), load_object(cfg["object"]))
        row = m.as_row()
    else:
        from .recon import load_scene
        _require(cfg, "pred", "gt")
        m = recon_metrics(load_scene(cfg["pred"]), load_scene(cfg["gt"]))
        row = m.as_row()
    _write_csv(out / "metrics.csv", [row])
    return row


@command("export-mesh", "OBJ export of an object grid, an interaction grid's object part, or a grasp",
         {"grid": None, "grasp": None, "object": None, "out": None})
def cmd_export_mesh(cfg):
    from .codec import BlockStatsCodec, LatentGrid
    from .geometry.grid import GridSpec, read_hopg
    from .geometry.mesh import concatenate, write_obj
    from .grasp import GraspParams
    from .geometry.grid import SdfGrid
    from .synth import read_json
    out = _out_dir(cfg)
    written = []
    if cfg.get("grid"):
        data, half = read_hopg(cfg["grid"])
        if data.ndim == 4:
            spec = GridSpec(data.shape[1:], half)
            obj = BlockStatsCodec().decode(LatentGrid(spec, np.clip(data[:3], -1.0, 1.0)))
        else:
            obj = SdfGrid(GridSpec(data.shape, half), data)
        write_obj(out / "object.obj", _object_mesh(obj))
        written.append("object.obj")
    if cfg.get("grasp"):
        g = GraspParams.from_dict(read_json(cfg["grasp"]))
        meshes = [_hand_mesh(g)]
        if cfg.get("object"):
            obj_mesh = _object_mesh(load_object(cfg["object"]), g.transform)
            write_obj(out / "object_in_hand.obj", obj_mesh)
            written.append("object_in_hand.obj")
            meshes.append(obj_mesh)
        write_obj(out / "hand.obj", meshes[0])
        write_obj(out / "scene.obj", concatenate(meshes))
        written += ["hand.obj", "scene.obj"]
    if not written:
        raise ConfigError("give --grid and/or --grasp")
    return {"written": written}


@command("validate", "check a dataset manifest for missing or corrupt files", {"manifest": None})
def cmd_validate(cfg):
    from .synth import validate_manifest
    _require(cfg, "manifest")
    problems = validate_manifest(cfg["manifest"])
    if problems:
        raise IoFailure(f"{len(problems)} problem(s): " + "; ".join(problems))
    return {"ok": True}


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

COMMON = {"seed": 0, "threads": None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoiprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text, defaults) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON document with option values")
        p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
        p.add_argument("--seed", type=int, help="controls all randomness (default 0)")
        p.add_argument("--threads", type=int, help="worker processes (default: all cores); results do not depend on it")
        for key, val in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(val, bool):
                p.add_argument(flag, action="store_true", default=None)
            elif isinstance(val, list):
                p.add_argument(flag, nargs="+")
            elif isinstance(val, (int, float)):
                p.add_argument(flag, type=type(val))
            else:
                p.add_argument(flag)
    return parser


def resolve_config(args) -> dict:
    _, _, defaults = COMMANDS[args.command]
    cfg = {**COMMON, **defaults}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
        cfg.update(doc)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if cfg["threads"] is None:
        cfg["threads"] = os.cpu_count() or 1
    if int(cfg["threads"]) < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        result = COMMANDS[args.command][0](cfg)
    except HoiError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except (KeyError, ValueError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
