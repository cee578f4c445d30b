"""Command-line entry point: ``geosplat <subcommand> [options]``.

Exit codes: 0 success, 1 user error (bad flags, missing or invalid inputs),
2 internal error. Every run writes line-delimited JSON logs to stderr and,
when it has an output directory, a ``manifest.json`` listing the resolved
config, seed and produced files with their SHA-256.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


class JsonLog:
    def __init__(self, stream=None, path=None):
        self.stream = stream or sys.stderr
        self.file = open(path, "a") if path else None

    def __call__(self, event, **fields):
        rec = {"t": round(time.time(), 3), "event": event}
        rec.update(fields)
        line = json.dumps(rec, default=_jsonable, sort_keys=True)
        print(line, file=self.stream, flush=True)
        if self.file:
            self.file.write(line + "\n")
            self.file.flush()

    def attach(self, path):
        self.file = open(path, "a")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, Path):
        return str(x)
    return str(x)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command, config, seed, files, extra=None):
    doc = {"tool": "geosplat", "version": __version__, "command": command, "seed": seed, "config": config,
           "outputs": [{"path": str(Path(f).relative_to(out)), "sha256": _sha256(f)} for f in sorted(files)]}
    if extra:
        doc.update(extra)
    with open(out / "manifest.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True, default=_jsonable)


# ---------------------------------------------------------------------------
# shared helpers

def _set_threads(n):
    if n is None:
        env = os.environ.get("GEOSPLAT_THREADS")
        n = int(env) if env else None
    if n is None:
        return None
    if n < 1:
        raise UserError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _config(args, base=None):
    from .scene_io import RunConfig, load_config

    cfg = base or RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    d = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        d["rng_seed"] = args.seed
    mode = getattr(args, "mode", None)
    if mode:
        d["lighting_mode"] = {"splitsum": "split_sum", "mc": "monte_carlo"}[mode]
    if getattr(args, "shading", None):
        d["shading_mode"] = args.shading
    if getattr(args, "spp", None):
        d["mc_samples_render"] = args.spp
    if getattr(args, "mc_samples", None):
        d["mc_samples_fit"] = args.mc_samples
        d["mc_samples"] = args.mc_samples
    if getattr(args, "iterations", None) is not None:
        d["iterations"] = args.iterations
    return RunConfig.from_dict(d)


def _outdir(args):
    if not args.out:
        raise UserError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_material(scene, gs):
    """Per-Gaussian attributes from the scene's ``material`` block."""
    from .material_field import MaterialField

    mat = scene.material or {}
    if "field" in mat:
        p = Path(mat["field"])
        if not p.is_absolute() and scene.source:
            p = Path(scene.source).parent / p
        out = MaterialField.load(p).query(gs.positions)
        return out[:, :3], out[:, 3], out[:, 4]
    P = len(gs)
    a = np.tile(np.asarray(mat.get("albedo", [0.8, 0.8, 0.8]), dtype=np.float64), (P, 1))
    r = np.full(P, float(mat.get("roughness", 0.5)))
    m = np.full(P, float(mat.get("metalness", 0.0)))
    if np.any(a < 0) or np.any(a > 1) or not (0 <= r[0] <= 1 and 0 <= m[0] <= 1):
        raise UserError("material values must lie in [0, 1]")
    return a, r, m


def _load_scene(path):
    from .scene_io import load_scene

    if not path:
        raise UserError("--scene is required")
    if not Path(path).exists():
        raise UserError(f"scene file not found: {path}")
    try:
        return load_scene(path)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        raise UserError(f"invalid scene {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands

def cmd_render(args, log):
    from .adapter import adapt
    from .fit import render_view
    from .lighting import IndirectLight, precompute_splitsum
    from .scene_io import write_image
    from .transport import build_bvh

    scene = _load_scene(args.scene)
    cfg = _config(args, scene.config)
    out = _outdir(args)
    log("config", config=cfg.to_dict(), seed=cfg.rng_seed)
    if not scene.views:
        raise UserError("scene has no cameras")
    gs = adapt(scene.mesh, "face", cfg.adapter_constants())
    gs = gs.with_attributes(*_scene_material(scene, gs))
    env = scene.env
    if cfg.lighting_mode == "split_sum":
        precompute_splitsum(env, cfg.mips, cfg.lut_size)
    bvh = build_bvh(scene.mesh) if cfg.occlusion else None
    ind = IndirectLight.constant(0.0, cfg.sh_degree)
    files = []
    for i, v in enumerate(scene.views):
        img, alpha = render_view(gs, v, env, ind, bvh, cfg.lighting_mode, cfg.shading_mode,
                                 cfg.mc_samples_render, cfg.rng_seed, cfg.occlusion, cfg.blur)
        name = v.name or f"view{i:03d}"
        for suffix, buf in ((".png", img), ("_alpha.png", alpha)):
            p = out / f"{name}{suffix}"
            write_image(buf, p, "png_srgb" if suffix == ".png" else "png_srgb")
            files.append(p)
        p = out / f"{name}.exr"
        write_image(img, p)
        files.append(p)
        log("rendered", view=name)
    write_manifest(out, "render", cfg.to_dict(), cfg.rng_seed, files)
    return 0


def cmd_fit(args, log):
    from .fit import FitState, Objective, fitted_gaussians, render_modes, run
    from .lighting import IndirectLight
    from .scene_io import write_image

    scene = _load_scene(args.scene)
    cfg = _config(args, scene.config)
    out = _outdir(args)
    log("config", config=cfg.to_dict(), seed=cfg.rng_seed)
    views = [v for v in scene.views if v.target_image is not None]
    if len(views) < 2:
        raise UserError("fit needs at least two cameras with target images")
    if not cfg.learn_env and scene.env is None:
        raise UserError("learn_env is off but the scene has no environment")
    from .adapter import adapt

    gs = adapt(scene.mesh, "face", cfg.adapter_constants())
    obj = Objective(gs, scene.mesh, views, cfg, scene.env, IndirectLight.constant(0.0, cfg.sh_degree))
    ckpt = out / "checkpoint.bin"
    if args.resume:
        state = FitState.load(args.resume)
        log("resumed", iteration=state.iteration)
    else:
        state = obj.initial_state()

    def progress(st, rep):
        if st.iteration % 10 == 0 or st.iteration == cfg.iterations:
            log("step", iteration=st.iteration, stage=st.stage, loss=rep.total)

    run(obj, state, progress, ckpt, args.checkpoint_every)
    state.save(ckpt)
    files = [ckpt]
    with open(out / "loss.csv", "w", newline="") as f:
        w = csv.writer(f)
        keys = ["iteration", "stage", "total", "l1", "ssim_term", "mask", "entropy", "smoothness", "light_reg"]
        w.writerow(keys)
        for h in state.history:
            w.writerow([h[k] if not isinstance(h[k], float) else repr(h[k]) for k in keys])
    files.append(out / "loss.csv")
    state.field.save(out / "material_field.bin")
    files.append(out / "material_field.bin")
    fitted_gaussians(state, gs).save(out / "gaussians.bin")
    files.append(out / "gaussians.bin")
    for i, v in enumerate(views[: args.render_views]):
        maps = render_modes(state, obj, v, seed=cfg.rng_seed)
        name = v.name or f"view{i:03d}"
        for key in ("nvs", "albedo", "roughness", "metalness"):
            p = out / f"{name}_{key}.png"
            write_image(maps[key], p)
            files.append(p)
        p = out / f"{name}_normal.png"
        write_image(0.5 * (maps["normal"] + 1.0) * (maps["alpha"] > 0), p, "png_srgb")
        files.append(p)
    write_manifest(out, "fit", cfg.to_dict(), cfg.rng_seed, files,
                   {"final_loss": state.history[-1]["total"] if state.history else None})
    return 0


def cmd_precompute_env(args, log):
    from .scene_io import load_envmap

    from .lighting import precompute_splitsum

    if not args.env or not Path(args.env).exists():
        raise UserError(f"environment map not found: {args.env}")
    out = _outdir(args)
    try:
        env = load_envmap(args.env)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    precompute_splitsum(env, args.mips, args.lut_size, cache_dir=out)
    files = sorted(out.glob("splitsum_*.bin"))
    log("precomputed", mips=args.mips, hash=env.content_hash())
    write_manifest(out, "precompute-env", {"mips": args.mips, "lut_size": args.lut_size}, None, files)
    return 0


def cmd_adapter(args, log):
    from .adapter import AdapterConstants, adapt
    from .scene_io import load_mesh

    if not args.mesh or not Path(args.mesh).exists():
        raise UserError(f"mesh not found: {args.mesh}")
    if not args.out:
        raise UserError("--out is required")
    try:
        mesh = load_mesh(args.mesh)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    cfg = _config(args)
    gs = adapt(mesh, args.adapter_mode, cfg.adapter_constants(), cfg.vertex_k)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    gs.save(out)
    log("adapted", faces=mesh.n_faces, gaussians=len(gs), mode=args.adapter_mode)
    write_manifest(out.parent, "adapter", cfg.to_dict(), cfg.rng_seed, [out], {"gaussians": len(gs)})
    return 0


def cmd_check_consistency(args, log):
    from .acceptance import consistency_views
    from .adapter import adapt
    from .losses_metrics import shape_consistency
    from .scene_io import load_mesh
    from .transport import build_bvh

    if not args.mesh or not Path(args.mesh).exists():
        raise UserError(f"mesh not found: {args.mesh}")
    mesh = load_mesh(args.mesh)
    cfg = _config(args)
    res = shape_consistency(build_bvh(mesh), adapt(mesh, "face", cfg.adapter_constants()),
                            _fit_views(mesh, consistency_views(args.size)), cfg.blur)
    report = {"reflection_mae_deg": res.reflection_mae_deg, "distance_l1": res.distance_l1,
              "coverage": res.coverage, "valid": res.valid, "pixels": res.pixels}
    print(json.dumps(report, sort_keys=True))
    if args.out:
        out = _outdir(args)
        with open(out / "consistency.json", "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        write_manifest(out, "check-consistency", cfg.to_dict(), cfg.rng_seed, [out / "consistency.json"])
    return 0


def _fit_views(mesh, views):
    """Re-aim unit-sphere-sized views at an arbitrary mesh's bounding sphere."""
    from .scene_io import View

    lo, hi = mesh.bounds()
    c = 0.5 * (lo + hi)
    r = 0.5 * np.linalg.norm(hi - lo)
    out = []
    for v in views:
        eye = c + v.position * r
        out.append(View.look_at(eye, c, width=v.width, height=v.height))
    return out


def cmd_trace_occlusion(args, log):
    from .brdf import sample_cosine
    from .lighting import hammersley
    from .scene_io import load_mesh
    from .transport import any_hit, brute_force_hits, build_bvh, occlusion

    if not args.mesh or not Path(args.mesh).exists():
        raise UserError(f"mesh not found: {args.mesh}")
    mesh = load_mesh(args.mesh)
    bvh = build_bvh(mesh)
    cfg = _config(args)
    gen = np.random.default_rng(cfg.rng_seed)
    f = gen.integers(0, mesh.n_faces, args.points)
    b = gen.dirichlet([1, 1, 1], args.points)
    x = np.einsum("pk,pkd->pd", b, mesh.triangles[f])
    n = mesh.face_normals[f]
    u1, u2 = hammersley(args.rays)
    wi, _ = sample_cosine(np.repeat(n[:, None], args.rays, 1), u1[None], u2[None])
    t0 = time.perf_counter()
    occ = occlusion(bvh, x[:, None], wi, normal=n[:, None])
    dt = time.perf_counter() - t0
    report = {"points": args.points, "rays_per_point": args.rays, "mean_occlusion": float(occ.mean()),
              "seconds": dt, "rays_per_second": occ.size / max(dt, 1e-9)}
    if args.verify:
        diag = mesh.bbox_diagonal()
        o = (x[:, None] + 1e-4 * diag * wi + 1e-5 * diag * n[:, None]).reshape(-1, 3)
        d = wi.reshape(-1, 3)
        k = min(len(o), 20000)
        _, _, ab = brute_force_hits(mesh, o[:k], d[:k], 0.0, 4 * diag)
        report["verify_mismatches"] = int(np.sum(any_hit(bvh, o[:k], d[:k], 0.0, 4 * diag) != ab))
    print(json.dumps(report, sort_keys=True))
    if args.out:
        out = _outdir(args)
        np.save(out / "occlusion.npy", occ)
        with open(out / "occlusion.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        write_manifest(out, "trace-occlusion", cfg.to_dict(), cfg.rng_seed,
                       [out / "occlusion.npy", out / "occlusion.json"])
    return 1 if report.get("verify_mismatches") else 0


def cmd_metrics(args, log):
    from .losses_metrics import albedo_scale, normal_mae, psnr, ssim
    from .scene_io import read_image

    if not (args.pred and args.gt):
        raise UserError("--pred and --gt are required")
    for p in (args.pred, args.gt, args.mask):
        if p and not Path(p).exists():
            raise UserError(f"image not found: {p}")
    a, b = read_image(args.pred), read_image(args.gt)
    if a.shape != b.shape:
        raise UserError(f"image sizes differ: {a.shape} vs {b.shape}")
    mask = read_image(args.mask, linear_png=True)[..., :1] if args.mask else None
    rep = {"psnr": psnr(a, b, mask), "ssim": ssim(a, b)}
    if args.albedo_scaling:
        s = albedo_scale(a, b, mask)
        rep["albedo_scale"] = s.tolist()
        rep["psnr_scaled"] = psnr(np.clip(a * s, 0, None), b, mask)
    if args.normals:
        na, nb = 2 * a - 1, 2 * b - 1
        na /= np.maximum(np.linalg.norm(na, axis=-1, keepdims=True), 1e-12)
        nb /= np.maximum(np.linalg.norm(nb, axis=-1, keepdims=True), 1e-12)
        rep["normal_mae_deg"] = normal_mae(na, nb, mask)
    text = json.dumps(rep, sort_keys=True, default=_jsonable)
    print(text.replace("Infinity", '"inf"'))
    if args.out:
        out = _outdir(args)
        with open(out / "metrics.json", "w") as f:
            f.write(text.replace("Infinity", '"inf"'))
        write_manifest(out, "metrics", {}, None, [out / "metrics.json"])
    return 0


def cmd_selftest(args, log):
    from .acceptance import CRITERIA, run_all

    numbers = sorted(CRITERIA)
    if args.only:
        try:
            numbers = [int(x) for x in args.only.split(",")]
        except ValueError as exc:
            raise UserError("--only takes a comma-separated list of criterion numbers") from exc
        bad = [n for n in numbers if n not in CRITERIA]
        if bad:
            raise UserError(f"unknown criteria: {bad}")
    results = run_all(numbers, printer=print)
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} criteria passed")
    for r in results:
        log("criterion", number=r.number, passed=r.passed, seconds=r.seconds, metrics=r.metrics)
    if args.out:
        out = _outdir(args)
        with open(out / "selftest.json", "w") as f:
            json.dump([{"number": r.number, "name": r.name, "passed": r.passed, "seconds": r.seconds,
                        "metrics": r.metrics} for r in results], f, indent=2, default=_jsonable)
    return 0 if passed == len(results) else 1


# ---------------------------------------------------------------------------
# parser

COMMANDS = {
    "render": (cmd_render, "render a scene's cameras (errors: missing scene/cameras -> 1)"),
    "fit": (cmd_fit, "fit materials/lighting to a scene's target images (errors: <2 targets -> 1)"),
    "precompute-env": (cmd_precompute_env, "build split-sum tables for an environment map (errors: bad map -> 1)"),
    "adapter": (cmd_adapter, "convert a mesh to a Gaussian table, 6 per face (errors: bad OBJ -> 1)"),
    "check-consistency": (cmd_check_consistency, "splat vs ray-cast depth/normal consistency report"),
    "trace-occlusion": (cmd_trace_occlusion, "BVH occlusion rays from random surface points"),
    "metrics": (cmd_metrics, "PSNR/SSIM (and normal MAE) of an image pair (errors: size mismatch -> 1)"),
    "selftest": (cmd_selftest, "run the acceptance checks and print a pass/fail table (failures -> 1)"),
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", help="output directory (or file for adapter)")
    common.add_argument("--seed", type=int, help="override rng_seed")
    common.add_argument("--threads", type=int, help="worker threads (fallback: GEOSPLAT_THREADS)")
    common.add_argument("--mode", choices=("splitsum", "mc"), help="lighting model")
    common.add_argument("--shading", choices=("forward", "deferred"))
    common.add_argument("--spp", type=int, help="MC samples per point for final renders")
    common.add_argument("--mc-samples", type=int, help="MC samples per Gaussian during fitting")
    p = _Parser(prog="geosplat", description="Mesh-adapted Gaussian splatting with physically based shading.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sp = {name: sub.add_parser(name, parents=[common], help=h, description=h) for name, (_, h) in COMMANDS.items()}
    sp["render"].add_argument("--scene")
    sp["fit"].add_argument("--scene")
    sp["fit"].add_argument("--iterations", type=int)
    sp["fit"].add_argument("--resume", help="checkpoint to continue from")
    sp["fit"].add_argument("--checkpoint-every", type=int, default=50)
    sp["fit"].add_argument("--render-views", type=int, default=2)
    sp["precompute-env"].add_argument("--env")
    sp["precompute-env"].add_argument("--mips", type=int, default=6)
    sp["precompute-env"].add_argument("--lut-size", type=int, default=64)
    sp["adapter"].add_argument("--mesh")
    sp["adapter"].add_argument("--adapter-mode", choices=("face", "vertex"), default="face")
    sp["check-consistency"].add_argument("--mesh")
    sp["check-consistency"].add_argument("--size", type=int, default=256)
    sp["trace-occlusion"].add_argument("--mesh")
    sp["trace-occlusion"].add_argument("--points", type=int, default=1000)
    sp["trace-occlusion"].add_argument("--rays", type=int, default=64)
    sp["trace-occlusion"].add_argument("--verify", action="store_true")
    sp["metrics"].add_argument("--pred")
    sp["metrics"].add_argument("--gt")
    sp["metrics"].add_argument("--mask")
    sp["metrics"].add_argument("--albedo-scaling", action="store_true")
    sp["metrics"].add_argument("--normals", action="store_true")
    sp["selftest"].add_argument("--only", help="comma-separated criterion numbers")
    return p


def main(argv=None):
    log = JsonLog()
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UserError("a subcommand is required: " + ", ".join(COMMANDS))
        threads = _set_threads(args.threads)
        log("start", command=args.command, argv=list(argv if argv is not None else sys.argv[1:]),
            seed=args.seed, threads=threads)
        if args.out and args.command not in ("adapter",):
            Path(args.out).mkdir(parents=True, exist_ok=True)
            log.attach(Path(args.out) / "log.jsonl")
        code = COMMANDS[args.command][0](args, log)
        log("done", command=args.command, exit_code=code)
        return code
    except UserError as exc:
        log("error", kind="user", message=str(exc))
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log("error", kind="internal", message=str(exc), traceback=traceback.format_exc())
        return 2


if __name__ == "__main__":
    sys.exit(main())
