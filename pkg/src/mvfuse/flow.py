"""Flow-matching generation with per-view oracle velocity fields.

The trained velocity network is stood in for by conditional-OT fields
``v = (x* - x_t) / (1 - t)`` toward each view's *believed target*: ground
truth where the view has line of sight, a deterministic hallucination
elsewhere.  Uniform Euler steps along such a field telescope onto ``x*``
exactly, so every fusion effect is measurable against ground truth.

Stage 1 evolves dense occupancy logits plus seven layout channels
``(log s, rotvec, translation)``; Stage 2 evolves a colour per Stage-1
occupied voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .errors import BehindCamera, NoViews, ShapeMismatch, TimeAtOne
from .fusion import (AttentionMap, FusionConfig, FusionWeights, attention_entropy, build_weights,
                     fuse_velocities)
from .geometry import Camera, SimilarityTransform, VoxelGrid
from .visibility import VisibilityMatrix, cameras_in_grid_frame, dda_visibility

LOGIT_SCALE = 4.0          # believed targets sit at +-LOGIT_SCALE in logit space
PATCH_GRID = 16            # 16 x 16 = 256 attention patches per view
LAYOUT_DIM = 7


# --------------------------------------------------------------------------
# state and schedule


@dataclass(frozen=True)
class LatentState:
    t: float
    shape: np.ndarray
    layout: Optional[np.ndarray] = None

    def __post_init__(self):
        if not -1e-12 <= self.t <= 1.0 + 1e-9:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        s = np.asarray(self.shape, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise ValueError("latent shape channels must be finite")
        object.__setattr__(self, "shape", s)
        if self.layout is not None:
            lay = np.asarray(self.layout, dtype=np.float64).reshape(LAYOUT_DIM)
            if not np.all(np.isfinite(lay)):
                raise ValueError("latent layout channels must be finite")
            object.__setattr__(self, "layout", lay)

    def layout_transform(self) -> Optional[SimilarityTransform]:
        return None if self.layout is None else SimilarityTransform.from_params(self.layout)


@dataclass(frozen=True)
class Velocity:
    shape: np.ndarray
    layout: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FlowSchedule:
    n_steps: int = 25
    guidance_start: int = 15
    guidance_interval: int = 3
    eta: float = 0.1
    normalize_guidance: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 <= self.guidance_start <= self.n_steps:
            raise ValueError("guidance_start must lie in [0, n_steps]")
        if self.guidance_interval < 1:
            raise ValueError("guidance_interval must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    def guided(self, step_index: int) -> bool:
        return step_index >= self.guidance_start and (step_index - self.guidance_start) % self.guidance_interval == 0

    def to_dict(self) -> dict:
        return dict(n_steps=self.n_steps, guidance_start=self.guidance_start,
                    guidance_interval=self.guidance_interval, eta=self.eta,
                    normalize_guidance=self.normalize_guidance)


@dataclass(frozen=True)
class ViewCondition:
    """One view's oracle condition.

    ``camera`` is expressed in the object's local (grid) frame and is what the
    attention synthesizer projects with.  ``world_camera`` is the calibrated
    camera used to place the view relative to an estimated pose.
    ``observed[i, j, k]`` records true line of sight to voxel (i, j, k).
    """
    view_id: int
    camera: Camera
    target: VoxelGrid
    pose_estimate: SimilarityTransform = field(default_factory=SimilarityTransform)
    world_camera: Optional[Camera] = None
    observed: Optional[np.ndarray] = None
    mirror_confusion: bool = False
    mask: Optional[str] = None
    pointmap: Optional[str] = None


def euler_step(x: LatentState, v, dt: float) -> LatentState:
    """x' = x + v dt, t' = t + dt."""
    if not isinstance(v, Velocity):
        v = Velocity(np.asarray(v, dtype=np.float64))
    vs = np.asarray(v.shape, dtype=np.float64)
    if vs.shape != x.shape.shape:
        raise ShapeMismatch(f"velocity {vs.shape} vs state {x.shape.shape}")
    if v.layout is not None and (x.layout is None or np.shape(v.layout) != x.layout.shape):
        raise ShapeMismatch("layout velocity does not match the state's layout channels")
    if x.t + dt > 1.0 + 1e-9:
        raise ValueError("step would move t beyond 1")
    layout = x.layout
    if x.layout is not None and v.layout is not None:
        layout = x.layout + np.asarray(v.layout, dtype=np.float64) * dt
    return LatentState(min(x.t + dt, 1.0), x.shape + vs * dt, layout)


# --------------------------------------------------------------------------
# oracle velocity fields


def believed_logits(target: VoxelGrid) -> np.ndarray:
    return LOGIT_SCALE * (2.0 * (target.occupancy > 0.5) - 1.0)


def view_shape_target(view: ViewCondition, indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Stage-1 logit target (indices None) or Stage-2 colours at ``indices``."""
    if indices is None:
        return believed_logits(view.target)
    f = view.target.features
    idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    return f[idx[:, 0], idx[:, 1], idx[:, 2]]


def oracle_velocity(view: ViewCondition, x: LatentState, indices: Optional[np.ndarray] = None) -> Velocity:
    """Conditional-OT velocity toward the view's believed target and pose."""
    if x.t >= 1.0 - 1e-9:
        raise TimeAtOne("the conditional-OT field is undefined at t = 1")
    target = view_shape_target(view, indices)
    if target.shape != x.shape.shape:
        raise ShapeMismatch(f"target {target.shape} vs state {x.shape.shape}")
    inv = 1.0 / (1.0 - x.t)
    layout = None
    if x.layout is not None:
        layout = (view.pose_estimate.params() - x.layout) * inv
    return Velocity((target - x.shape) * inv, layout)


# --------------------------------------------------------------------------
# believed targets (hallucination model)


def mirror_points(points: np.ndarray, camera: Camera, center) -> np.ndarray:
    """Reflect points across the plane through ``center`` facing the camera."""
    center = np.asarray(center, dtype=np.float64)
    d = center - camera.center
    d /= np.linalg.norm(d)
    rel = np.asarray(points, dtype=np.float64) - center
    return points - 2.0 * (rel @ d)[:, None] * d


def believed_target(gt: VoxelGrid, observed: np.ndarray, camera: Camera, color_shift=(0.0, 0.0, 0.0),
                    prior_color=(0.5, 0.5, 0.5)) -> VoxelGrid:
    """A single view's reconstruction of ``gt``.

    Observed voxels copy the ground truth.  A hidden voxel copies the
    ground truth at its mirror image across the view-facing plane through
    the grid centre when that mirror voxel is observed; a hidden voxel whose
    mirror is also hidden is filled, and one whose mirror leaves the grid is
    empty.  Colours that are not directly observed carry the view's colour
    shift.
    """
    D = gt.resolution
    observed = np.asarray(observed, dtype=bool).reshape(D, D, D)
    occ_gt = gt.binary()
    colors_gt = gt.features if gt.features is not None else np.zeros((D, D, D, 3))
    shift = np.asarray(color_shift, dtype=np.float64)
    prior = np.asarray(prior_color, dtype=np.float64)

    idx = np.stack(np.meshgrid(*[np.arange(D)] * 3, indexing="ij"), -1).reshape(-1, 3)
    centers = gt.centers(idx)
    lo, hi = gt.bounds
    m = np.floor(gt.to_index_space(mirror_points(centers, camera, 0.5 * (lo + hi)))).astype(np.int64)
    inside = np.all((m >= 0) & (m < D), axis=1)
    mc = np.clip(m, 0, D - 1)
    m_obs = inside & observed[mc[:, 0], mc[:, 1], mc[:, 2]]
    m_occ = occ_gt[mc[:, 0], mc[:, 1], mc[:, 2]]

    obs = observed.reshape(-1)
    occ_flat = occ_gt.reshape(-1)
    occ = np.where(obs, occ_flat, np.where(m_obs, m_occ, inside))
    col = np.broadcast_to(np.clip(prior + shift, 0, 1), (len(idx), 3)).copy()
    own = obs & occ_flat
    col[own] = colors_gt.reshape(-1, 3)[own]
    mir = ~obs & m_obs & m_occ
    col[mir] = np.clip(colors_gt[mc[mir, 0], mc[mir, 1], mc[mir, 2]] + shift, 0, 1)
    return VoxelGrid(D, gt.origin, gt.voxel_size, occ.reshape(D, D, D).astype(np.float64),
                     col.reshape(D, D, D, 3), dense_features=True)


# --------------------------------------------------------------------------
# attention synthesizer


def patch_centers(cam: Camera, n: int = PATCH_GRID) -> np.ndarray:
    pu = (np.arange(n) + 0.5) * cam.width / n
    pv = (np.arange(n) + 0.5) * cam.height / n
    uu, vv = np.meshgrid(pu, pv, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], 1)


def _gaussian_rows(cam: Camera, points: np.ndarray, sigma: float) -> np.ndarray:
    u, v, _ = cam.project(points)
    pc = patch_centers(cam)
    pw = np.array([cam.width, cam.height], dtype=np.float64) / PATCH_GRID
    du = (u[:, None] - pc[None, :, 0]) / pw[0]
    dv = (v[:, None] - pc[None, :, 1]) / pw[1]
    return softmax(-(du * du + dv * dv) / (sigma * sigma), axis=1)


def synthesize_attention(view: ViewCondition, grid: VoxelGrid, visibility: VisibilityMatrix,
                         sigma: float = 0.5, row: int = 0, seed: int = 0, appearance: bool = True) -> AttentionMap:
    """Attention of the latent points in ``visibility`` for one view.

    Visible points attend to a Gaussian (width ``sigma`` patch widths) around
    their projection; occluded points spread over all patches with a seeded
    +-1% perturbation.  With ``view.mirror_confusion`` an occluded point whose
    mirror image is observed attends to the mirror's projection instead,
    the failure mode of visually symmetric objects.  The confusion comes
    from look-alike textures, so it applies only to appearance attention
    (``appearance=True``) and not to the structure stage.
    """
    cam = view.camera
    pts = np.asarray(visibility.positions, dtype=np.float64).reshape(-1, 3)
    K, P = len(pts), PATCH_GRID * PATCH_GRID
    vis = np.asarray(visibility.bits[row], dtype=bool).copy()
    depth = cam.to_camera_frame(pts)[:, 2] if K else np.zeros(0)
    vis &= depth > 0                      # behind the camera counts as occluded
    out = np.empty((K, P))
    if vis.any():
        out[vis] = _gaussian_rows(cam, pts[vis], sigma)

    hidden = ~vis
    if view.mirror_confusion and appearance and hidden.any() and view.observed is not None:
        lo, hi = grid.bounds
        mp = mirror_points(pts[hidden], cam, 0.5 * (lo + hi))
        mi = np.floor(grid.to_index_space(mp)).astype(np.int64)
        D = grid.resolution
        ok = np.all((mi >= 0) & (mi < D), axis=1)
        mc = np.clip(mi, 0, D - 1)
        ok &= np.asarray(view.observed, dtype=bool)[mc[:, 0], mc[:, 1], mc[:, 2]]
        ok &= cam.to_camera_frame(mp)[:, 2] > 0
        rows = np.flatnonzero(hidden)[ok]
        if len(rows):
            out[rows] = _gaussian_rows(cam, mp[ok], sigma)
            hidden[rows] = False

    if hidden.any():
        rng = np.random.default_rng([seed, view.view_id, K])
        noise = 1.0 + 0.01 * rng.uniform(-1.0, 1.0, size=(K, P))
        rows = noise[hidden]
        out[hidden] = rows / rows.sum(axis=1, keepdims=True)
    return AttentionMap(out, view.view_id)


# --------------------------------------------------------------------------
# generation


@dataclass
class StageResult:
    grid: VoxelGrid
    pose: SimilarityTransform
    weights: FusionWeights
    strategy: str
    entropies: Optional[np.ndarray] = None
    visibility: Optional[VisibilityMatrix] = None
    state: Optional[LatentState] = None
    guided_steps: list = field(default_factory=list)


def _all_indices(D: int) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(D)] * 3, indexing="ij"), -1).reshape(-1, 3)


def _observed_matrix(views: Sequence[ViewCondition], grid: VoxelGrid, indices: np.ndarray) -> VisibilityMatrix:
    """True line of sight of every view to the given voxels (attention input)."""
    rows = []
    for v in views:
        if v.observed is None:
            rows.append(np.ones(len(indices), dtype=np.uint8))
        else:
            obs = np.asarray(v.observed, dtype=bool)
            rows.append(obs[indices[:, 0], indices[:, 1], indices[:, 2]].astype(np.uint8))
    return VisibilityMatrix(np.stack(rows), indices, grid.centers(indices))


def stage_cameras(views: Sequence[ViewCondition], structure: VoxelGrid,
                  pose: Optional[SimilarityTransform]) -> list[Camera]:
    """Cameras in the grid frame implied by an estimated object pose."""
    cams = []
    for v in views:
        if v.world_camera is not None and pose is not None:
            cams.extend(cameras_in_grid_frame(structure, pose, [v.world_camera]))
        else:
            cams.append(v.camera)
    return cams


def generate_stage(views: Sequence[ViewCondition], cfg: FusionConfig, sched: FlowSchedule,
                   physics=None, seed: int = 0, stage: int = 1, structure: Optional[VoxelGrid] = None,
                   structure_pose: Optional[SimilarityTransform] = None, sigma: float = 0.5) -> StageResult:
    """Run one generation stage over ``sched.n_steps`` fused Euler steps.

    Attention maps and the visibility matrix do not change along the
    trajectory (the synthesized attention depends only on geometry), so they
    are evaluated once and reused at every step.
    """
    from .physics import guided_step

    views = list(views)
    if not views:
        raise NoViews("generation needs at least one view")
    N = len(views)
    template = views[0].target
    D = template.resolution
    rng = np.random.default_rng([seed, stage])
    strategy = cfg.stage_strategy(stage)

    if stage == 1:
        indices = None
        points = _all_indices(D)
        x = LatentState(0.0, rng.standard_normal((D, D, D)), rng.standard_normal(LAYOUT_DIM))
    else:
        if structure is None:
            raise ValueError("stage 2 needs the stage-1 structure")
        indices = structure.occupied_indices()
        points = indices
        x = LatentState(0.0, rng.standard_normal((len(indices), 3)))
    K = len(points)

    H = None
    if strategy in ("entropy", "combined"):
        obs = _observed_matrix(views, template, points)
        H = np.stack([attention_entropy(synthesize_attention(v, template, obs, sigma, row=i, seed=seed,
                                                        appearance=(stage == 2)))
                      for i, v in enumerate(views)])
    V = None
    if strategy in ("visibility", "combined"):
        V = dda_visibility(structure, stage_cameras(views, structure, structure_pose))
    weights = build_weights(strategy, cfg, entropies=H, visibility=V, n_views=N, n_points=K)
    view_w = weights.view_level()

    guided = []
    for k in range(sched.n_steps):
        vels = [oracle_velocity(v, x, indices) for v in views]
        fused_shape = fuse_velocities(np.stack([v.shape.reshape(K, -1) for v in vels]), weights)
        fused_layout = None
        if x.layout is not None:
            fused_layout = (view_w[:, None] * np.stack([v.layout for v in vels])).sum(axis=0)
        fused = Velocity(fused_shape.reshape(x.shape.shape), fused_layout)
        if physics is not None and stage == 1 and sched.guided(k):
            x = guided_step(x, fused, sched, physics, k)
            guided.append(k)
        else:
            x = euler_step(x, fused, sched.dt)
        # keep t on the exact grid k / n so the last step lands on t = 1
        x = replace(x, t=(k + 1) / sched.n_steps)

    if stage == 1:
        occ = (x.shape > 0.0).astype(np.float64)
        grid = VoxelGrid(D, template.origin, template.voxel_size, occ)
        pose = x.layout_transform()
    else:
        feats = np.zeros((D, D, D, 3))
        feats[indices[:, 0], indices[:, 1], indices[:, 2]] = x.shape
        grid = structure.with_features(feats)
        pose = structure_pose if structure_pose is not None else SimilarityTransform()
    return StageResult(grid, pose, weights, strategy, H, V, x, guided)


@dataclass
class GeneratedObject:
    grid: VoxelGrid                  # stage-1 occupancy with stage-2 colours
    pose: SimilarityTransform
    stage1: StageResult
    stage2: Optional[StageResult] = None


def generate_object(views: Sequence[ViewCondition], cfg: FusionConfig, sched: FlowSchedule,
                    physics=None, seed: int = 0, sigma: float = 0.5, stage2: bool = True) -> GeneratedObject:
    """Both stages: structure and layout, then colours on the structure."""
    s1 = generate_stage(views, cfg, sched, physics, seed, stage=1, sigma=sigma)
    if not stage2 or not s1.grid.binary().any():
        return GeneratedObject(s1.grid, s1.pose, s1)
    s2 = generate_stage(views, cfg, sched, None, seed, stage=2, structure=s1.grid, structure_pose=s1.pose,
                        sigma=sigma)
    return GeneratedObject(s2.grid, s1.pose, s1, s2)
