"""Post-generation pose refinement of every object's similarity transform.

    L_total = sum_k L_align^k + lam_col sum_{j != k} L_col^{jk}
            + lam_con sum_{j != k} L_con^{jk} + lam_reg L_reg

* ``L_align``: chamfer distance between the object's transformed surface
  samples and its reference cloud.
* ``L_col^{jk}``: mean over k's samples of the squared penetration depth into
  j, read from j's signed distance field (cubic B-spline, so C2 smooth).
* ``L_con^{jk}``: squared hinge ``max(0, g)^2`` on the smallest signed
  distance ``g`` from k's samples to j, active while ``g < tau``; only for
  interacting pairs.
* ``L_reg``: squared deviation of (log s, rotvec, t) from the initial pose.

Geometry stays fixed; Adam runs over the 7 pose parameters per object.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyReference, NonFinite
from .geometry import (MeshSurface, PointCloud, SignedDistanceField, SimilarityTransform, VoxelGrid,
                       rotvec_derivatives, rotvec_to_matrix, voxel_surface_points, voxelize_mesh)

PARAMS_PER_OBJECT = 7


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 100
    lr: float = 0.01
    lambda_col: float = 200.0
    lambda_con: float = 50.0
    lambda_reg: float = 1.0
    tau: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_samples: int = 4096
    sdf_resolution: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr", "lambda_col", "lambda_con", "lambda_reg", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SceneObject:
    geometry: Union[MeshSurface, VoxelGrid]     # object-local frame
    pose: SimilarityTransform                   # initial estimate
    reference: Optional[PointCloud] = None      # world-frame observation
    name: str = ""


@dataclass
class SceneGraph:
    objects: list
    pairs: Optional[list] = None               # interacting (j, k) pairs; None = inflated-AABB test
    bounds: Optional[tuple] = None

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ValueError("a scene needs at least one object")


# --------------------------------------------------------------------------
# per-object precomputation


def occupancy_of(geometry, resolution: int = 32) -> VoxelGrid:
    if isinstance(geometry, VoxelGrid):
        return geometry
    lo, hi = geometry.vertices.min(axis=0), geometry.vertices.max(axis=0)
    c, half = 0.5 * (lo + hi), 0.5 * float(np.max(hi - lo))
    pad = half * (1.0 + 4.0 / resolution) + 1e-6
    return voxelize_mesh(geometry, resolution, (c - pad, c + pad))


def surface_samples(geometry, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(geometry, MeshSurface):
        return geometry.sample(n, rng)[0]
    faces = len(voxel_surface_points(geometry, per_axis=1))
    if faces == 0:
        return np.zeros((0, 3))
    per_axis = max(1, int(np.ceil(np.sqrt(n / faces))))
    pts = voxel_surface_points(geometry, per_axis=per_axis)
    if len(pts) > n:
        pts = pts[np.sort(rng.choice(len(pts), size=n, replace=False))]
    return pts


@dataclass
class _Prepared:
    samples: np.ndarray          # (M, 3) local
    occupancy: VoxelGrid
    sdf: SignedDistanceField
    sample_tree: cKDTree
    ref: Optional[np.ndarray]
    ref_tree: Optional[cKDTree]
    init: np.ndarray             # (7,)


def prepare(scene: SceneGraph, cfg: RefineConfig) -> list:
    out = []
    for k, obj in enumerate(scene.objects):
        rng = np.random.default_rng([cfg.seed, k])
        occ = occupancy_of(obj.geometry, cfg.sdf_resolution)
        samples = surface_samples(obj.geometry, cfg.n_samples, rng)
        ref = ref_tree = None
        if obj.reference is None:
            warnings.warn(f"object {k} has no reference cloud; its alignment term is skipped", RuntimeWarning)
        else:
            if len(obj.reference) == 0:
                raise EmptyReference(f"object {k} has an empty reference cloud")
            ref = obj.reference.points
            ref_tree = cKDTree(ref)
        out.append(_Prepared(samples, occ, SignedDistanceField(occ), cKDTree(samples), ref, ref_tree,
                             obj.pose.params()))
    return out


def interaction_pairs(scene: SceneGraph, prepared: list, tau: float) -> list:
    """Unordered pairs whose world AABBs, inflated by tau, overlap at the initial poses."""
    if scene.pairs is not None:
        return sorted({tuple(sorted(map(int, p))) for p in scene.pairs})
    boxes = []
    for obj, prep in zip(scene.objects, prepared):
        w = obj.pose.apply(prep.samples)
        boxes.append((w.min(axis=0) - tau, w.max(axis=0) + tau))
    pairs = []
    for j in range(len(boxes)):
        for k in range(j + 1, len(boxes)):
            if np.all(boxes[j][0] <= boxes[k][1]) and np.all(boxes[k][0] <= boxes[j][1]):
                pairs.append((j, k))
    return pairs


# --------------------------------------------------------------------------
# loss terms


def _pose_parts(p: np.ndarray):
    s = float(np.exp(p[0]))
    return s, rotvec_to_matrix(p[1:4]), rotvec_derivatives(p[1:4]), p[4:7]


def _chain_points(p: np.ndarray, local: np.ndarray, G: np.ndarray) -> np.ndarray:
    """d L / d params from d L / d x for x = exp(ls) R c + t."""
    s, R, dR, _ = _pose_parts(p)
    g = np.zeros(PARAMS_PER_OBJECT)
    if len(G) == 0:
        return g
    g[0] = float(np.sum(G * (s * local @ R.T)))
    for m in range(3):
        g[1 + m] = float(np.sum(G * (s * local @ dR[m].T)))
    g[4:7] = G.sum(axis=0)
    return g


def alignment_term(p: np.ndarray, prep: _Prepared):
    """Chamfer distance and its gradient w.r.t. the pose parameters."""
    s, R, _, t = _pose_parts(p)
    local = prep.samples
    world = s * local @ R.T + t
    M, Nr = len(world), len(prep.ref)
    G = np.zeros_like(world)

    d_a, i_a = prep.ref_tree.query(world)
    if not np.all(np.isfinite(d_a)):
        # overflowed distances; the tree reports missing neighbours as index Nr
        return np.inf, np.full(PARAMS_PER_OBJECT, np.nan)
    diff = world - prep.ref[i_a]
    with np.errstate(invalid="ignore", divide="ignore"):
        G += 0.5 / M * np.where(d_a[:, None] > 1e-12, diff / d_a[:, None], 0.0)

    ref_local = (prep.ref - t) @ R / s
    _, i_b = prep.sample_tree.query(ref_local)
    diff_b = world[i_b] - prep.ref
    d_b = np.linalg.norm(diff_b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        contrib = 0.5 / Nr * np.where(d_b[:, None] > 1e-12, diff_b / d_b[:, None], 0.0)
    for a in range(3):
        G[:, a] += np.bincount(i_b, weights=contrib[:, a], minlength=M)

    value = 0.5 * float(d_a.mean()) + 0.5 * float(d_b.mean())
    return value, _chain_points(p, local, G)


def _candidates(p_j: np.ndarray, prep_j: _Prepared, world: np.ndarray, tau: float) -> np.ndarray:
    """Indices of world points that can be within tau of object j (box test)."""
    s, R, _, t = _pose_parts(p_j)
    local = (world - t) @ R / s
    lo, hi = prep_j.occupancy.bounds
    margin = tau / s + 2.0 * prep_j.occupancy.voxel_size
    ok = np.all((local >= lo - margin) & (local <= hi + margin), axis=1)
    return np.flatnonzero(ok)


def signed_distance_to(p_j: np.ndarray, prep_j: _Prepared, world: np.ndarray):
    """World signed distance to object j, with gradients w.r.t. the points and j's pose."""
    s, R, dR, t = _pose_parts(p_j)
    rel = world - t
    u = rel @ R / s
    phi, gphi = prep_j.sdf(u, grad=True)
    val = s * phi
    gx = gphi @ R.T
    gp = np.zeros((len(world), PARAMS_PER_OBJECT))
    gp[:, 0] = s * (phi - np.sum(gphi * u, axis=1))
    for m in range(3):
        gp[:, 1 + m] = np.sum(gphi * (rel @ dR[m]), axis=1)
    gp[:, 4:7] = -gx
    return val, gx, gp


def pair_terms(p_k, prep_k, p_j, prep_j, tau: float, contact: bool):
    """Collision and contact of k's samples against j, with gradients for both poses."""
    s, R, _, t = _pose_parts(p_k)
    local = prep_k.samples
    world = s * local @ R.T + t
    M = len(world)
    g_k_col, g_j_col = np.zeros(7), np.zeros(7)
    g_k_con, g_j_con = np.zeros(7), np.zeros(7)
    col = con = 0.0
    gap = np.inf
    cand = _candidates(p_j, prep_j, world, tau)
    if len(cand):
        val, gx, gp = signed_distance_to(p_j, prep_j, world[cand])
        pen = np.maximum(0.0, -val)
        col = float(np.sum(pen * pen)) / M
        w = -2.0 * pen / M
        G = np.zeros_like(world)
        G[cand] = w[:, None] * gx
        g_k_col = _chain_points(p_k, local, G)
        g_j_col = (w[:, None] * gp).sum(axis=0)
        i = int(np.argmin(val))
        gap = float(val[i])
        if contact and 0.0 < gap < tau:
            con = gap * gap
            Gc = np.zeros_like(world)
            Gc[cand[i]] = 2.0 * gap * gx[i]
            g_k_con = _chain_points(p_k, local, Gc)
            g_j_con = 2.0 * gap * gp[i]
    return col, con, gap, (g_k_col, g_j_col), (g_k_con, g_j_con)


@dataclass
class LossBreakdown:
    total: float
    align: float
    collision: float
    contact: float
    reg: float
    gradient: np.ndarray
    per_object_align: list = field(default_factory=list)
    gaps: dict = field(default_factory=dict)

    def row(self) -> dict:
        return dict(total=self.total, align=self.align, collision=self.collision, contact=self.contact,
                    reg=self.reg)


def _evaluate(params: np.ndarray, prepared: list, pairs: list, cfg: RefineConfig) -> LossBreakdown:
    n = len(prepared)
    P = params.reshape(n, PARAMS_PER_OBJECT)
    grad = np.zeros_like(P)
    align_vals = []
    for k, prep in enumerate(prepared):
        if prep.ref is None:
            align_vals.append(0.0)
            continue
        v, g = alignment_term(P[k], prep)
        align_vals.append(v)
        grad[k] += g
    col = con = 0.0
    gaps = {}
    pair_set = {tuple(p) for p in pairs}
    for k in range(n):
        for j in range(n):
            if j == k:
                continue
            active = tuple(sorted((j, k))) in pair_set
            if cfg.lambda_col == 0.0 and not (active and cfg.lambda_con > 0.0):
                continue
            c1, c2, gap, gcol, gcon = pair_terms(P[k], prepared[k], P[j], prepared[j], cfg.tau, active)
            col += c1
            con += c2
            if active:
                gaps[(j, k)] = gap
            grad[k] += cfg.lambda_col * gcol[0] + cfg.lambda_con * gcon[0]
            grad[j] += cfg.lambda_col * gcol[1] + cfg.lambda_con * gcon[1]
    init = np.stack([p.init for p in prepared])
    dev = P - init
    reg = float(np.sum(dev * dev))
    grad += cfg.lambda_reg * 2.0 * dev
    align = float(sum(align_vals))
    total = align + cfg.lambda_col * col + cfg.lambda_con * con + cfg.lambda_reg * reg
    return LossBreakdown(total, align, col, con, reg, grad.reshape(-1), align_vals, gaps)


def total_loss(scene: SceneGraph, cfg: RefineConfig = RefineConfig(), params: Optional[np.ndarray] = None,
               prepared: Optional[list] = None) -> LossBreakdown:
    """Loss, per-term breakdown and gradient w.r.t. all pose parameters.

    ``params`` defaults to the initial poses (7 per object, concatenated).
    """
    prepared = prepare(scene, cfg) if prepared is None else prepared
    pairs = interaction_pairs(scene, prepared, cfg.tau)
    if params is None:
        params = np.concatenate([o.pose.params() for o in scene.objects])
    return _evaluate(np.asarray(params, dtype=np.float64), prepared, pairs, cfg)


# --------------------------------------------------------------------------
# collision rate on a world lattice


def scene_bounds(objects: Sequence[tuple]) -> tuple[np.ndarray, np.ndarray]:
    """Union of world AABBs of ``(occupancy grid, pose)`` pairs."""
    los, his = [], []
    for grid, pose in objects:
        lo, hi = grid.bounds
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        w = pose.apply(corners)
        los.append(w.min(axis=0))
        his.append(w.max(axis=0))
    return np.min(los, axis=0), np.max(his, axis=0)


def world_lattice(bounds, resolution: int = 64):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    cell = (hi - lo) / resolution
    axes = [lo[a] + (np.arange(resolution) + 0.5) * cell[a] for a in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    return pts, float(np.prod(cell))


def membership(grid: VoxelGrid, pose: SimilarityTransform, world: np.ndarray) -> np.ndarray:
    return grid.lookup(pose.apply_inverse(world))


def penetration_volumes(objects: Sequence[tuple], bounds=None, resolution: int = 64) -> dict:
    """Overlap volume of every unordered pair on a ``resolution``^3 world lattice."""
    bounds = scene_bounds(objects) if bounds is None else bounds
    pts, cell_vol = world_lattice(bounds, resolution)
    inside = [membership(g, p, pts) for g, p in objects]
    out = {}
    for j in range(len(objects)):
        for k in range(j + 1, len(objects)):
            out[(j, k)] = float(np.count_nonzero(inside[j] & inside[k])) * cell_vol
    return out


def collision_rate(scene, eps: Optional[float] = None, resolution: int = 64, transforms=None) -> float:
    """Percentage of object pairs whose overlap volume exceeds ``eps``.

    ``eps`` defaults to 1e-6 of the scene bounding-box volume.  ``scene`` is a
    SceneGraph (poses from ``transforms`` or the objects) or a list of
    ``(occupancy grid, pose)`` pairs.
    """
    if isinstance(scene, SceneGraph):
        poses = transforms if transforms is not None else [o.pose for o in scene.objects]
        objects = [(occupancy_of(o.geometry), p) for o, p in zip(scene.objects, poses)]
        bounds = scene.bounds
    else:
        objects, bounds = list(scene), None
    if len(objects) < 2:
        raise ValueError("collision rate needs at least two objects")
    bounds = scene_bounds(objects) if bounds is None else bounds
    if eps is None:
        eps = 1e-6 * float(np.prod(np.asarray(bounds[1]) - np.asarray(bounds[0])))
    vols = penetration_volumes(objects, bounds, resolution)
    return 100.0 * sum(v > eps for v in vols.values()) / len(vols)


def collision_rate_bruteforce(objects: Sequence[tuple], eps: Optional[float] = None, resolution: int = 64,
                              bounds=None) -> float:
    """Point-by-point reference for :func:`collision_rate` (slow, for tests)."""
    bounds = scene_bounds(objects) if bounds is None else bounds
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    cell = (hi - lo) / resolution
    if eps is None:
        eps = 1e-6 * float(np.prod(hi - lo))
    boxes = [scene_bounds([o]) for o in objects]
    hits = total = 0
    for j in range(len(objects)):
        for k in range(j + 1, len(objects)):
            total += 1
            blo = np.maximum(boxes[j][0], boxes[k][0])
            bhi = np.minimum(boxes[j][1], boxes[k][1])
            if np.any(blo > bhi):
                continue
            i0 = np.clip(np.floor((blo - lo) / cell - 0.5).astype(int), 0, resolution - 1)
            i1 = np.clip(np.ceil((bhi - lo) / cell - 0.5).astype(int), 0, resolution - 1)
            count = 0
            for a in range(i0[0], i1[0] + 1):
                for b in range(i0[1], i1[1] + 1):
                    for c in range(i0[2], i1[2] + 1):
                        x = lo + (np.array([a, b, c]) + 0.5) * cell
                        ins = True
                        for grid, pose in (objects[j], objects[k]):
                            u = np.floor((pose.apply_inverse(x) - grid.origin) / grid.voxel_size).astype(int)
                            if np.any(u < 0) or np.any(u >= grid.resolution) or not grid.occupancy[tuple(u)] > 0.5:
                                ins = False
                                break
                        count += ins
            hits += count * float(np.prod(cell)) > eps
    return 100.0 * hits / total


# --------------------------------------------------------------------------
# optimizer


@dataclass
class RefineResult:
    transforms: list
    trace: list
    report: dict
    params: np.ndarray


def refine(scene: SceneGraph, cfg: RefineConfig = RefineConfig()) -> RefineResult:
    """Adam over all objects' pose parameters jointly."""
    prepared = prepare(scene, cfg)
    pairs = interaction_pairs(scene, prepared, cfg.tau)
    x = np.concatenate([o.pose.params() for o in scene.objects])
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    for it in range(cfg.iterations + 1):
        lb = _evaluate(x, prepared, pairs, cfg)
        if not (np.isfinite(lb.total) and np.all(np.isfinite(lb.gradient))):
            raise NonFinite(f"loss became non-finite at iteration {it}", it)
        trace.append(dict(iteration=it, **lb.row()))
        if it == cfg.iterations:
            break
        g = lb.gradient
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** (it + 1))
        vhat = v / (1 - cfg.beta2 ** (it + 1))
        x = x - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    n = len(scene.objects)
    transforms = [SimilarityTransform.from_params(p) for p in x.reshape(n, PARAMS_PER_OBJECT)]
    report = physics_report(scene, transforms, prepared, pairs, cfg, lb)
    return RefineResult(transforms, trace, report, x)


def physics_report(scene: SceneGraph, transforms, prepared, pairs, cfg: RefineConfig, lb: LossBreakdown) -> dict:
    report = {"interaction_pairs": [list(p) for p in pairs]}
    if len(scene.objects) >= 2:
        objects = [(p.occupancy, t) for p, t in zip(prepared, transforms)]
        vols = penetration_volumes(objects, scene.bounds)
        report["penetration_volume"] = {f"{j}-{k}": v for (j, k), v in sorted(vols.items())}
        report["residual_penetration_volume"] = float(sum(vols.values()))
        report["collision_rate"] = collision_rate(objects if scene.bounds is None else scene, transforms=transforms)
    finite = [g for g in lb.gaps.values() if np.isfinite(g)]
    report["max_contact_gap"] = float(max(finite)) if finite else None
    report["final_loss"] = lb.row()
    return report
