"""End-to-end pipeline on synthetic scenes and the three ablation studies.

Each study runs a grid of configurations over a block of seeds, reduces the
per-seed metrics to mean and standard deviation, and checks the expected
orderings.  Orderings compare means; the headline contrast of each study is
also tested with a one-sided sign test over seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from .config import RunConfig
from .flow import GeneratedObject, generate_object
from .geometry import SimilarityTransform
from .metrics import evaluate, occupied_bounds, shape_metrics
from .physics import Neighbor, PhysicsContext
from .refine import RefineResult, SceneGraph, SceneObject, refine
from .scenes import SyntheticScene, synth_scene

ABLATIONS = ("weighting", "views", "physics")
SIGN_TEST_ALPHA = 0.05


# --------------------------------------------------------------------------
# pipeline


def estimated_pose(views) -> SimilarityTransform:
    """Mean of the per-view pose estimates in parameter space."""
    return SimilarityTransform.from_params(np.mean([v.pose_estimate.params() for v in views], axis=0))


def _boxes_touch(a, b, tau: float) -> bool:
    return bool(np.all(a[0] - tau <= b[1] + tau) and np.all(b[0] - tau <= a[1] + tau))


def physics_context(obj, k: int, done: Sequence[tuple], run: RunConfig) -> Optional[PhysicsContext]:
    """Frozen earlier objects as neighbours; contact only with tau-close ones."""
    if not done:
        return None
    template = obj.views[0].target
    mine = occupied_bounds(template, estimated_pose(obj.views))
    neighbors, pairs = [], set()
    for j, (grid, pose) in enumerate(done):
        neighbors.append(Neighbor(grid, pose, j))
        theirs = occupied_bounds(grid, pose)
        if mine is not None and theirs is not None and _boxes_touch(mine, theirs, run.tau):
            pairs.add(j)
    return PhysicsContext(template, neighbors, run.lambda_contact, run.contact_band, pairs, object_id=k)


def generate_scene(scene: SyntheticScene, run: RunConfig, physics: bool = False, seed: int = 0,
                   fusion=None, stage2: bool = True) -> list:
    """Generate every object in order; with ``physics`` each one is guided
    away from the objects generated before it."""
    fusion = fusion if fusion is not None else run.fusion()
    sched = run.schedule()
    done, out = [], []
    for k, obj in enumerate(scene.objects):
        ctx = physics_context(obj, k, done, run) if physics else None
        g = generate_object(obj.views, fusion, sched, ctx, seed=seed, sigma=run.sigma, stage2=stage2)
        done.append((g.grid, g.pose))
        out.append(g)
    return out


def refine_scene(scene: SyntheticScene, generated: Sequence[GeneratedObject], run: RunConfig,
                 seed: int = 0) -> RefineResult:
    graph = SceneGraph([SceneObject(g.grid, g.pose, o.reference, o.name)
                        for g, o in zip(generated, scene.objects)])
    return refine(graph, run.refine(seed))


# --------------------------------------------------------------------------
# results


@dataclass
class AblationResult:
    name: str
    seeds: list
    rows: list
    per_seed: dict                       # row -> metric -> list over seeds
    checks: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {}
        for row in self.rows:
            out[row] = {}
            for metric, vals in self.per_seed[row].items():
                v = np.asarray(vals, dtype=np.float64)
                out[row][metric] = {"mean": float(np.mean(v)), "std": float(np.std(v))}
        return out

    def mean(self, row: str, metric: str) -> float:
        return float(np.mean(self.per_seed[row][metric]))

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def to_dict(self) -> dict:
        return {"name": self.name, "seeds": list(self.seeds), "rows": list(self.rows), "summary": self.summary(),
                "per_seed": self.per_seed, "checks": self.checks, "passed": self.passed, "config": self.config}

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / f"{self.name}.json", out / f"{self.name}.csv"
        jpath.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        summary = self.summary()
        metrics = sorted({m for r in self.rows for m in summary[r]})
        with cpath.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["row"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")] + ["n_seeds"])
            for r in self.rows:
                w.writerow([r] + [repr(summary[r][m][s]) for m in metrics for s in ("mean", "std")]
                           + [len(self.seeds)])
        return jpath, cpath


def _check(passed: bool, detail: str) -> dict:
    return {"passed": bool(passed), "detail": detail}


def sign_test(better: Sequence[float], worse: Sequence[float], higher_is_better: bool = True) -> dict:
    """One-sided sign test that ``better`` beats ``worse`` seed by seed (ties dropped)."""
    d = np.asarray(better, dtype=np.float64) - np.asarray(worse, dtype=np.float64)
    if not higher_is_better:
        d = -d
    wins, losses = int(np.sum(d > 0)), int(np.sum(d < 0))
    n = wins + losses
    p = 1.0 if n == 0 else float(binomtest(wins, n, 0.5, alternative="greater").pvalue)
    return {"wins": wins, "losses": losses, "p_value": p}


def _mean_metrics(ms: Sequence[dict]) -> dict:
    keys = ms[0].keys()
    out = {}
    for k in keys:
        vals = [m[k] for m in ms if m[k] is not None]
        out[k] = float(np.mean(vals)) if vals else float("nan")
    return out


def _collect(per_seed: dict, row: str, metrics: dict):
    for k, v in metrics.items():
        per_seed.setdefault(row, {}).setdefault(k, []).append(v)


# --------------------------------------------------------------------------
# studies


WEIGHTING_ROWS = (
    ("uniform/uniform", dict(strategy="uniform")),
    ("entropy/uniform", dict(strategy="entropy", stage2=False)),
    ("entropy/entropy", dict(strategy="entropy")),
    ("entropy/combined", dict(strategy="combined")),
)
VIEW_COUNTS = (1, 2, 3, 5)
PHYSICS_CELLS = (("none", False, False), ("injection", True, False), ("refinement", False, True),
                 ("injection+refinement", True, True))


def weighting_study(seeds: Sequence[int], run: RunConfig) -> AblationResult:
    """Stage-1 / Stage-2 weighting strategies on the skewed six-view suite."""
    per_seed = {}
    for seed in seeds:
        scene = synth_scene("skewed_6view", seed)
        for row, kw in WEIGHTING_ROWS:
            fusion = run.fusion(**kw)
            ms = []
            for obj in scene.objects:
                g = generate_object(obj.views, fusion, run.schedule(), seed=seed, sigma=run.sigma)
                ms.append(shape_metrics(g.grid, obj.grid, obj.disputed))
            _collect(per_seed, row, _mean_metrics(ms))
    rows = [r for r, _ in WEIGHTING_ROWS]
    res = AblationResult("weighting", list(seeds), rows, per_seed, config=run.to_dict())
    iou = [res.mean(r, "iou") for r in rows]
    cd = [res.mean(r, "chamfer") for r in rows]
    res.checks["iou_ordering"] = _check(all(a <= b for a, b in zip(iou, iou[1:])),
                                        "mean IoU " + " <= ".join(f"{v:.4f}" for v in iou))
    res.checks["chamfer_ordering"] = _check(all(a >= b for a, b in zip(cd, cd[1:])),
                                            "mean CD " + " >= ".join(f"{v:.5f}" for v in cd))
    gap = res.mean(rows[-1], "disputed_iou") - res.mean(rows[0], "disputed_iou")
    res.checks["disputed_gap"] = _check(gap >= 0.2, f"disputed-region IoU gap {gap:.4f} (needs >= 0.2)")
    st = sign_test(per_seed[rows[-1]]["iou"], per_seed[rows[0]]["iou"])
    res.checks["sign_test"] = _check(st["p_value"] < SIGN_TEST_ALPHA,
                                     f"combined beats uniform IoU on {st['wins']}/{st['wins'] + st['losses']} "
                                     f"seeds, p = {st['p_value']:.3g}")
    return res


def views_study(seeds: Sequence[int], run: RunConfig) -> AblationResult:
    """Front, rear, left, right and top views added in that order."""
    per_seed = {}
    for seed in seeds:
        for n in VIEW_COUNTS:
            scene = synth_scene({"name": "views", "n_views": n}, seed)
            obj = scene.objects[0]
            g = generate_object(obj.views, run.fusion(), run.schedule(), seed=seed, sigma=run.sigma)
            m = shape_metrics(g.grid, obj.grid)
            _collect(per_seed, f"{n} views", {"iou": m["iou"], "chamfer": m["chamfer"]})
    rows = [f"{n} views" for n in VIEW_COUNTS]
    res = AblationResult("views", list(seeds), rows, per_seed, config=run.to_dict())
    for metric, sign in (("iou", 1.0), ("chamfer", -1.0)):
        q = [sign * res.mean(r, metric) for r in rows]
        inc = np.diff(q)
        res.checks[f"{metric}_first_increment_largest"] = _check(
            inc[0] > 0 and inc[0] > inc[1:].max(),
            f"{metric} increments " + ", ".join(f"{sign * d:+.5f}" for d in inc))
        res.checks[f"{metric}_non_decreasing"] = _check(bool(np.all(inc[1:] >= 0)),
                                                        f"{metric} means " + ", ".join(f"{sign * v:.5f}" for v in q))
    st = sign_test(per_seed[rows[1]]["iou"], per_seed[rows[0]]["iou"])
    res.checks["sign_test"] = _check(st["p_value"] < SIGN_TEST_ALPHA,
                                     f"two views beat one on {st['wins']}/{st['wins'] + st['losses']} seeds, "
                                     f"p = {st['p_value']:.3g}")
    return res


def physics_study(seeds: Sequence[int], run: RunConfig) -> AblationResult:
    """Layout injection x post refinement on the interpenetrating-pair suite."""
    per_seed = {}
    for seed in seeds:
        scene = synth_scene("collision_pairs", seed)
        gt = [(o.grid, o.pose) for o in scene.objects]
        for inj in (False, True):
            gen = generate_scene(scene, run, physics=inj, seed=seed, stage2=False)
            for row, i, ref in PHYSICS_CELLS:
                if i != inj:
                    continue
                objs = [(g.grid, g.pose) for g in gen]
                if ref:
                    result = refine_scene(scene, gen, run, seed)
                    objs = [(g.grid, t) for g, t in zip(gen, result.transforms)]
                m = evaluate(objs, gt)
                _collect(per_seed, row, {"collision_rate": m.collision_rate, "acc": m.acc, "rel_acc": m.rel_acc,
                                         "coverage": m.coverage, "chamfer": m.chamfer})
    rows = [r for r, _, _ in PHYSICS_CELLS]
    res = AblationResult("physics", list(seeds), rows, per_seed, config=run.to_dict())
    none, inj = res.mean("none", "collision_rate"), res.mean("injection", "collision_rate")
    res.checks["injection_reduces_collisions"] = _check(none > 0 and none >= 5.0 * inj,
                                                        f"collision rate {none:.2f} -> {inj:.2f} (needs >= 5x)")
    zero = all(v == 0.0 for r in ("refinement", "injection+refinement") for v in per_seed[r]["collision_rate"])
    res.checks["refinement_zero_collisions"] = _check(
        zero, "post-refinement collision rates " + ", ".join(
            f"{r}: {res.mean(r, 'collision_rate'):.2f}" for r in ("refinement", "injection+refinement")))
    best = []
    for metric in ("acc", "rel_acc", "coverage"):
        top = res.mean("injection+refinement", metric)
        others = max(res.mean(r, metric) for r in rows if r != "injection+refinement")
        best.append(top > others)
        res.checks[f"best_{metric}"] = _check(top > others, f"{metric}: injection+refinement {top:.3f} vs "
                                                             f"best other {others:.3f}")
    st = sign_test(per_seed["injection"]["collision_rate"], per_seed["none"]["collision_rate"], higher_is_better=False)
    res.checks["sign_test"] = _check(st["p_value"] < SIGN_TEST_ALPHA,
                                     f"injection lowers the collision rate on {st['wins']}/"
                                     f"{st['wins'] + st['losses']} seeds, p = {st['p_value']:.3g}")
    return res


STUDIES = {"weighting": weighting_study, "views": views_study, "physics": physics_study}


def run_ablation(name: str, out_dir=None, n_seeds: int = 20, seed: int = 0,
                 run: Optional[RunConfig] = None) -> AblationResult:
    """Run one study over seeds ``seed .. seed + n_seeds - 1`` and optionally write JSON and CSV."""
    if name not in STUDIES:
        raise ValueError(f"unknown ablation {name!r}; expected one of {list(STUDIES)}")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    run = run if run is not None else RunConfig()
    res = STUDIES[name](list(range(seed, seed + n_seeds)), run)
    if out_dir is not None:
        res.write(out_dir)
    return res
