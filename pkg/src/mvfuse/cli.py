"""Command-line entry point: ``mvfuse <subcommand> [options]``.

Every subcommand takes ``--seed`` and ``--config`` (a JSON run file; see
``RunConfig``) and writes its results into ``--out``.  JSON is written with
sorted keys and no timestamps, so reruns with one seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import ABLATIONS, generate_scene, run_ablation
from .config import RunConfig
from .errors import MVFuseError, SpecInvalid
from .fusion import AttentionMap, FusionWeights, attention_entropy, build_weights, fuse_velocities, weight_histogram
from .geometry import MeshSurface, PointCloud, SimilarityTransform, voxel_surface_mesh
from .io import (read_cameras, read_json, read_ply, read_voxel_grid, write_cameras, write_json, write_ply,
                 write_voxel_grid)
from .metrics import evaluate
from .refine import SceneGraph, SceneObject, refine
from .scenes import SCENES, synth_scene
from .visibility import KERNEL, dda_visibility


# --------------------------------------------------------------------------
# scene files


def _scene_spec(arg: str) -> dict:
    """A scene name, a spec JSON file, or a scene.json written by synth-scene."""
    if arg in SCENES:
        return {"name": arg}
    path = Path(arg)
    if not path.exists():
        raise SpecInvalid(f"{arg!r} is neither a known scene ({sorted(SCENES)}) nor a file")
    data = read_json(path)
    if isinstance(data, dict) and "spec" in data:
        return dict(data["spec"], _seed=data.get("seed"))
    return data


def _split_seed(spec: dict, default: int) -> tuple[dict, int]:
    spec = dict(spec)
    seed = spec.pop("_seed", None)
    return spec, default if seed is None else int(seed)


def write_refine_scene(path: Path, entries: list, pairs=None) -> None:
    """Scene file consumed by ``refine`` and ``metrics``; paths are relative to it."""
    write_json(path, {"objects": entries, "pairs": pairs})


def read_refine_scene(path) -> tuple[list, SceneGraph]:
    path = Path(path)
    data = read_json(path)
    if not isinstance(data, dict) or not data.get("objects"):
        raise SpecInvalid(f"{path} holds no objects")
    base = path.parent
    objs = []
    for i, o in enumerate(data["objects"]):
        if "geometry" not in o or "pose" not in o:
            raise SpecInvalid(f"object {i} needs 'geometry' and 'pose'")
        gpath = base / o["geometry"]
        if gpath.suffix == ".ply":
            geom = read_ply(gpath)
            if not isinstance(geom, MeshSurface):
                raise SpecInvalid(f"{gpath} is a point cloud; geometry must be a mesh or a voxel grid")
        else:
            geom = read_voxel_grid(gpath)
        ref = None
        if o.get("reference"):
            ref = read_ply(base / o["reference"])
            if isinstance(ref, MeshSurface):
                ref = PointCloud(ref.vertices)
        objs.append(SceneObject(geom, SimilarityTransform.from_dict(o["pose"]), ref, o.get("name", f"object_{i}")))
    pairs = data.get("pairs")
    pairs = None if pairs is None else [tuple(int(v) for v in p) for p in pairs]
    return data["objects"], SceneGraph(objs, pairs)


def _occupancy_pairs(path) -> dict:
    """name -> (VoxelGrid, pose) from a scene file whose geometry is voxel grids."""
    _, graph = read_refine_scene(path)
    out = {}
    for o in graph.objects:
        if isinstance(o.geometry, MeshSurface):
            raise SpecInvalid(f"metrics needs voxel-grid geometry; {o.name} is a mesh")
        out[o.name] = (o.geometry, o.pose)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_scene(args, run: RunConfig) -> int:
    spec, seed = _split_seed(_scene_spec(args.scene), args.seed)
    scene = synth_scene(spec, seed)
    out = Path(args.out)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    write_json(out / "scene.json", {"spec": scene.spec, "seed": seed, "summary": scene.summary()})
    write_cameras(out / "cameras.json", scene.cameras)
    entries = []
    for o in scene.objects:
        write_voxel_grid(out / "gt" / f"{o.name}.json", o.grid)
        write_ply(out / "gt" / f"{o.name}_reference.ply", o.reference)
        np.save(out / "gt" / f"{o.name}_disputed.npy", o.disputed)
        entries.append({"name": o.name, "geometry": f"gt/{o.name}.json", "pose": o.pose.to_dict(),
                        "reference": f"gt/{o.name}_reference.ply"})
    write_refine_scene(out / "gt_scene.json", entries)
    print(f"wrote {scene.name} (seed {seed}, {len(scene.objects)} objects, {len(scene.cameras)} views) to {out}")
    return 0


def cmd_generate(args, run: RunConfig) -> int:
    spec, scene_seed = _split_seed(_scene_spec(args.scene), args.seed)
    overrides = {k: v for k, v in (("strategy", args.strategy), ("alpha", args.alpha), ("beta", args.beta),
                                   ("gamma", args.gamma), ("n_steps", args.n_steps)) if v is not None}
    run = RunConfig.from_dict({**run.to_dict(), **overrides})
    scene = synth_scene(spec, scene_seed)
    generated = generate_scene(scene, run, physics=args.physics, seed=args.seed)
    out = Path(args.out)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    entries, transforms = [], {}
    for o, g in zip(scene.objects, generated):
        write_voxel_grid(out / "objects" / f"{o.name}.json", g.grid)
        write_ply(out / "objects" / f"{o.name}.ply", voxel_surface_mesh(g.grid).transformed(g.pose))
        write_ply(out / "objects" / f"{o.name}_reference.ply", o.reference)
        transforms[o.name] = g.pose.to_dict()
        entries.append({"name": o.name, "geometry": f"objects/{o.name}.json", "pose": g.pose.to_dict(),
                        "reference": f"objects/{o.name}_reference.ply"})
    write_json(out / "transforms.json", transforms)
    write_refine_scene(out / "refine_scene.json", entries)
    write_json(out / "manifest.json", {
        "version": __version__, "scene": scene.spec, "scene_seed": scene_seed, "seed": args.seed,
        "physics": bool(args.physics), "config": run.to_dict(),
        "objects": {o.name: {"occupied_voxels": int(g.grid.binary().sum()),
                             "stage1_strategy": g.stage1.strategy,
                             "stage2_strategy": None if g.stage2 is None else g.stage2.strategy}
                    for o, g in zip(scene.objects, generated)},
    })
    print(f"generated {len(generated)} objects into {out}")
    return 0


def cmd_visibility(args, run: RunConfig) -> int:
    grid = read_voxel_grid(args.grid)
    cams = read_cameras(args.cameras)
    vis = dda_visibility(grid, cams)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "visibility.bits").write_bytes(vis.packed())
    write_json(out / "visibility.json", {
        "n_views": vis.n_views, "n_points": vis.n_points, "bitmask": "visibility.bits",
        "bit_order": "row-major (view, point), most significant bit first",
        "visible_per_view": [int(r.sum()) for r in vis.bits],
        "point_indices": vis.point_indices.tolist(),
    })
    print(f"{vis.n_views} views x {vis.n_points} points ({KERNEL} kernel)")
    return 0


def cmd_refine(args, run: RunConfig) -> int:
    overrides = {k: v for k, v in (("iters", args.iters), ("lr", args.lr)) if v is not None}
    run = RunConfig.from_dict({**run.to_dict(), **overrides})
    entries, graph = read_refine_scene(args.scene)
    result = refine(graph, run.refine(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [o.name for o in graph.objects]
    write_json(out / "transforms.json", {n: t.to_dict() for n, t in zip(names, result.transforms)})
    with (out / "trace.csv").open("w", newline="") as f:
        cols = list(result.trace[0])
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for row in result.trace:
            w.writerow([repr(row[c]) for c in cols])
    write_json(out / "report.json", result.report)
    # geometry paths stay relative to the input scene file
    src = Path(args.scene).resolve().parent
    refined = []
    for e, t in zip(entries, result.transforms):
        e = dict(e, pose=t.to_dict())
        for key in ("geometry", "reference"):
            if e.get(key):
                e[key] = _relpath(src / e[key], out.resolve())
        refined.append(e)
    write_refine_scene(out / "refined_scene.json", refined, [list(p) for p in graph.pairs] if graph.pairs else None)
    print(f"refined {len(names)} objects; collision rate {result.report.get('collision_rate', 0.0)}")
    return 0


def _relpath(target: Path, start: Path) -> str:
    import os
    return Path(os.path.relpath(target, start)).as_posix()


def cmd_metrics(args, run: RunConfig) -> int:
    pred, gt = _occupancy_pairs(args.pred), _occupancy_pairs(args.gt)
    report = evaluate(pred, gt, acc_threshold=args.acc_threshold, rel_percent=args.rel_percent)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    write_json(out / "metrics.json", d)
    scalars = [k for k in sorted(d) if k != "flags"]
    with (out / "metrics.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(scalars)
        w.writerow(["" if d[k] is None else repr(d[k]) for k in scalars])
    print(" ".join(f"{k}={d[k]:.4g}" for k in ("iou", "chamfer", "acc", "rel_acc", "coverage", "collision_rate")))
    return 0


def cmd_ablate(args, run: RunConfig) -> int:
    res = run_ablation(args.study, args.out, n_seeds=args.n_seeds, seed=args.seed, run=run)
    for name, c in res.checks.items():
        print(f"{'PASS' if c['passed'] else 'FAIL'} {name}: {c['detail']}")
    return 0 if res.passed or not args.strict else 1


def _demo_inputs(seed: int, n_views: int = 3, n_points: int = 64, n_patches: int = 16, dim: int = 3):
    rng = np.random.default_rng(seed)
    sharp = rng.uniform(0.5, 8.0, size=(n_views, 1, 1))
    att = np.exp(sharp * rng.normal(size=(n_views, n_points, n_patches)))
    att /= att.sum(axis=2, keepdims=True)
    vis = (rng.random((n_views, n_points)) < 0.6).astype(np.uint8)
    vel = rng.normal(size=(n_views, n_points, dim))
    return att, vis, vel


def _load_visibility(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    h = read_json(path)
    n, k = int(h["n_views"]), int(h["n_points"])
    data = (path.parent / h["bitmask"]).read_bytes()
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n * k).reshape(n, k)


def cmd_fuse_demo(args, run: RunConfig) -> int:
    given = [args.attention, args.visibility, args.velocities]
    if any(given) and not all(given):
        raise SpecInvalid("--attention, --visibility and --velocities go together")
    if all(given):
        att, vis, vel = np.load(args.attention), _load_visibility(args.visibility), np.load(args.velocities)
    else:
        att, vis, vel = _demo_inputs(args.seed)
    att = np.asarray(att, dtype=np.float64)
    if att.ndim != 3:
        raise SpecInvalid("attention must be an (N, K, P) array")
    H = np.stack([attention_entropy(AttentionMap(a, i)) for i, a in enumerate(att)])
    cfg = run.fusion(**({"strategy": args.strategy} if args.strategy else {}))
    w: FusionWeights = build_weights(cfg.strategy, cfg, entropies=H, visibility=vis,
                                     n_views=att.shape[0], n_points=att.shape[1])
    fused = fuse_velocities(vel, w)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "fusion.json", {
        "config": cfg.to_dict(), "n_views": w.n_views, "n_points": w.n_points,
        "entropy": H.tolist(), "weights": w.weights.tolist(), "view_level_weights": w.view_level().tolist(),
        "fused_velocity": fused.tolist(), "histogram": weight_histogram(w),
    })
    print(f"fused {w.n_views} views over {w.n_points} points ({cfg.strategy})")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for all randomness")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run file overriding the defaults")

    p = argparse.ArgumentParser(prog="mvfuse", parents=[common], description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-scene", parents=[common], help="build a synthetic scene with ground truth")
    s.add_argument("scene", help=f"scene name ({', '.join(sorted(SCENES))}) or spec JSON")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_scene)

    s = sub.add_parser("generate", parents=[common], help="multi-view generation of every object in a scene")
    s.add_argument("scene", help="scene name, spec JSON or scene.json from synth-scene")
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=("uniform", "entropy", "visibility", "combined"))
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--n-steps", type=int)
    s.add_argument("--physics", action=argparse.BooleanOptionalAction, default=False)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("visibility", parents=[common], help="DDA visibility of a voxel grid's occupied voxels")
    s.add_argument("grid", help="voxel grid header (.json)")
    s.add_argument("cameras", help="camera list JSON, cameras in the grid frame")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_visibility)

    s = sub.add_parser("refine", parents=[common], help="physics-aware pose refinement")
    s.add_argument("scene", help="scene file with geometry paths, poses, references and pairs")
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("metrics", parents=[common], help="compare a predicted scene against ground truth")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--out", required=True)
    s.add_argument("--acc-threshold", type=float)
    s.add_argument("--rel-percent", type=float, default=5.0)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("ablate", parents=[common], help="run an ablation study")
    s.add_argument("study", choices=ABLATIONS)
    s.add_argument("--out", required=True)
    s.add_argument("--n-seeds", type=int, default=20)
    s.add_argument("--strict", action="store_true", help="exit 1 when an ordering check fails")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("fuse-demo", parents=[common], help="fusion weights and fused velocity for given inputs")
    s.add_argument("--attention", help=".npy of shape (N, K, P)")
    s.add_argument("--visibility", help=".npy (N, K) or visibility.json")
    s.add_argument("--velocities", help=".npy of shape (N, K[, d])")
    s.add_argument("--strategy", choices=("uniform", "entropy", "visibility", "combined"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse_demo)
    return p


GLOBAL_DEFAULTS = {"seed": 0, "config": None}


def parse_args(argv=None) -> argparse.Namespace:
    # the global options may appear before or after the subcommand; their actions are
    # shared with every subparser, so defaults are filled in only after parsing
    args = build_parser().parse_args(argv)
    for k, v in GLOBAL_DEFAULTS.items():
        if not hasattr(args, k):
            setattr(args, k, v)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        run = RunConfig.load(args.config)
        return args.func(args, run)
    except (MVFuseError, ValueError, OSError, KeyError) as e:
        print(f"mvfuse {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
