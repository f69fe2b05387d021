"""Procedural objects, camera rigs and synthetic scenes.

Objects are unions of boxes and ellipsoids in a local frame spanning
[-1, 1]^3, voxelised by a center-inside test on a D^3 grid with a colour per
voxel.  ``+x`` is an object's front.  Every scene is a pure function of its
spec and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import SpecInvalid
from .flow import ViewCondition, believed_target
from .geometry import Camera, PointCloud, SimilarityTransform, VoxelGrid, voxel_surface_points
from .visibility import dda_visibility, visibility_of_voxels, world_to_grid_pose

INTRINSICS = dict(fx=300.0, fy=300.0, cx=128.0, cy=128.0, width=256, height=256)
PRIOR_COLOR = (0.92, 0.92, 0.92)


# --------------------------------------------------------------------------
# procedural solids


@dataclass(frozen=True)
class Primitive:
    kind: str                 # "box" or "ellipsoid"
    a: tuple                  # box lo / ellipsoid center
    b: tuple                  # box hi / ellipsoid radii
    color: tuple = (0.8, 0.8, 0.8)
    marker: bool = False
    paint_only: bool = False  # recolours existing voxels without adding volume

    def contains(self, p: np.ndarray) -> np.ndarray:
        a, b = np.asarray(self.a), np.asarray(self.b)
        if self.kind == "box":
            return np.all((p >= a) & (p <= b), axis=-1)
        return np.sum(((p - a) / b) ** 2, axis=-1) <= 1.0


@dataclass
class Solid:
    name: str
    parts: list

    def voxelize(self, D: int = 16):
        grid = VoxelGrid.cube_bounds(D)
        p = grid.centers().reshape(D, D, D, 3)
        occ = np.zeros((D, D, D), dtype=bool)
        col = np.zeros((D, D, D, 3))
        marker = np.zeros((D, D, D), dtype=bool)
        for prim in self.parts:
            inside = prim.contains(p)
            if prim.paint_only:
                inside &= occ
            else:
                occ |= inside
            col[inside] = prim.color
            marker[inside] = prim.marker if prim.marker else marker[inside]
        marker &= occ
        return VoxelGrid(D, grid.origin, grid.voxel_size, occ.astype(float), col), marker


def plush_solid() -> Solid:
    """Body, ears and a front nose; a tail and a black label at the back."""
    tan, brown, pink, black = (0.86, 0.74, 0.58), (0.45, 0.3, 0.18), (0.92, 0.55, 0.6), (0.05, 0.05, 0.05)
    return Solid("plush", [
        Primitive("ellipsoid", (0.0, 0.0, -0.15), (0.5, 0.45, 0.55), tan),
        Primitive("box", (-0.12, 0.14, 0.3), (0.12, 0.34, 0.62), brown),
        Primitive("box", (-0.12, -0.34, 0.3), (0.12, -0.14, 0.62), brown),
        Primitive("box", (0.4, -0.13, -0.1), (0.68, 0.13, 0.15), pink),
        Primitive("box", (-0.82, -0.1, -0.48), (-0.4, 0.1, -0.26), brown, marker=True),
        Primitive("box", (-0.6, -0.3, -0.15), (-0.3, 0.3, 0.2), black, marker=True, paint_only=True),
    ])


def medicine_box_solid() -> Solid:
    """Thin box whose front and back carry different banners of equal size."""
    white, green, blue = (0.95, 0.95, 0.95), (0.1, 0.65, 0.25), (0.15, 0.3, 0.85)
    return Solid("medicine_box", [
        Primitive("box", (-0.32, -0.62, -0.7), (0.32, 0.62, 0.7), white),
        Primitive("box", (0.25, -0.62, 0.25), (0.32, 0.0, 0.7), green, paint_only=True),
        Primitive("box", (-0.32, -0.62, 0.0), (-0.25, 0.62, 0.35), blue, marker=True, paint_only=True),
    ])


def box_solid(half, color=(0.7, 0.7, 0.75), name: str = "box") -> Solid:
    h = np.asarray(half, dtype=float)
    return Solid(name, [Primitive("box", tuple(-h), tuple(h), tuple(color))])


# --------------------------------------------------------------------------
# cameras


def orbit_camera(center, azimuth_deg: float, elevation_deg: float, distance: float) -> Camera:
    az, el = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera.look_at(np.asarray(center, float) + distance * d, center, up=(0.0, 0.0, 1.0), **INTRINSICS)


# --------------------------------------------------------------------------
# scenes


@dataclass
class SyntheticObject:
    name: str
    grid: VoxelGrid                 # ground truth, local frame, colours as features
    pose: SimilarityTransform       # ground-truth local -> world
    marker: np.ndarray              # (D, D, D) marker region
    views: list                     # ViewCondition per camera
    reference: PointCloud           # observed surface (world)
    disputed: np.ndarray            # voxels seen only by the minority views
    visibility: Optional[np.ndarray] = None   # (N, K) ground-truth visibility of occupied voxels


@dataclass
class SyntheticScene:
    name: str
    seed: int
    objects: list
    cameras: list
    minority_views: list = field(default_factory=list)
    spec: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "spec": self.spec,
            "n_views": len(self.cameras),
            "minority_views": list(self.minority_views),
            "cameras": [c.to_dict() for c in self.cameras],
            "objects": [{
                "name": o.name,
                "resolution": o.grid.resolution,
                "occupied_voxels": int(o.grid.binary().sum()),
                "marker_voxels": int(o.marker.sum()),
                "disputed_voxels": int(o.disputed.sum()),
                "pose": o.pose.to_dict(),
                "pose_estimates": [v.pose_estimate.to_dict() for v in o.views],
                "reference_points": len(o.reference),
            } for o in self.objects],
        }


def _perturb_pose(pose: SimilarityTransform, rng, rot_deg=5.0, scale_frac=0.05, trans=0.05,
                  bias=np.zeros(3)) -> SimilarityTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    dr = axis * np.deg2rad(rng.uniform(-rot_deg, rot_deg))
    R = SimilarityTransform(1.0, dr).rotation @ pose.rotation
    s = pose.scale * (1.0 + rng.uniform(-scale_frac, scale_frac))
    t = pose.translation + rng.uniform(-trans, trans, size=3) + bias
    return SimilarityTransform.from_matrix(s, R, t)


def build_object(name: str, solid: Solid, pose: SimilarityTransform, cameras: Sequence[Camera], rng,
                 D: int = 16, minority: Sequence[int] = (), mirror_confusion: bool = False,
                 pose_bias: Optional[Sequence[np.ndarray]] = None, noise: float = 0.004,
                 color_shift: float = 0.15) -> SyntheticObject:
    grid, marker = solid.voxelize(D)
    idx_all = np.stack(np.meshgrid(*[np.arange(D)] * 3, indexing="ij"), -1).reshape(-1, 3)
    local_cams = [world_to_grid_pose(grid, pose, c) for c in cameras]
    observed = visibility_of_voxels(grid, local_cams, idx_all).bits.astype(bool).reshape(len(cameras), D, D, D)

    views = []
    for i, (wc, lc) in enumerate(zip(cameras, local_cams)):
        shift = rng.uniform(-color_shift, color_shift, size=3)
        target = believed_target(grid, observed[i], lc, shift, PRIOR_COLOR)
        bias = np.zeros(3) if pose_bias is None else np.asarray(pose_bias[i], dtype=float)
        est = _perturb_pose(pose, rng, bias=bias)
        views.append(ViewCondition(i, lc, target, est, wc, observed[i], mirror_confusion))

    V = dda_visibility(grid, local_cams)
    occ_idx = V.point_indices
    disputed = np.zeros((D, D, D), dtype=bool)
    if len(minority):
        mino = np.zeros(len(cameras), dtype=bool)
        mino[list(minority)] = True
        seen_min = V.bits[mino].any(axis=0)
        seen_maj = V.bits[~mino].any(axis=0) if (~mino).any() else np.zeros(V.n_points, dtype=bool)
        sel = seen_min & ~seen_maj
        disputed[tuple(occ_idx[sel].T)] = True

    surf, vox = voxel_surface_points(grid, per_axis=2, with_voxels=True)
    seen = observed.any(axis=0)[vox[:, 0], vox[:, 1], vox[:, 2]]
    pts = pose.apply(surf[seen])
    pts = pts + rng.normal(scale=noise, size=pts.shape)
    cols = grid.features[vox[seen, 0], vox[seen, 1], vox[seen, 2]]
    return SyntheticObject(name, grid, pose, marker, views, PointCloud(pts, cols), disputed, V.bits)


def _yaw_pose(scale: float, yaw_deg: float, t) -> SimilarityTransform:
    return SimilarityTransform(scale, [0.0, 0.0, np.deg2rad(yaw_deg)], t)


def _skewed_cameras(rng, center, frontal_spread: float, distance: float, yaw: float) -> list:
    az = np.linspace(-frontal_spread, frontal_spread, 5) + yaw
    cams = [orbit_camera(center, a + rng.uniform(-3, 3), rng.uniform(10, 20), distance) for a in az]
    cams.append(orbit_camera(center, 180.0 + yaw + rng.uniform(-3, 3), rng.uniform(10, 20), distance))
    return cams


def scene_skewed(spec: dict, seed: int, objects=("plush", "medicine_box")) -> SyntheticScene:
    """Five frontal views plus one rear view per object (one object at a time)."""
    rng = np.random.default_rng([seed, 11])
    D = int(spec.get("resolution", 16))
    spread = float(spec.get("frontal_spread", 30.0))
    dist = float(spec.get("camera_distance", 3.0))
    objs, cams_all = [], []
    for oi, kind in enumerate(objects):
        solid = plush_solid() if kind == "plush" else medicine_box_solid()
        yaw = rng.uniform(-10, 10)
        pose = _yaw_pose(0.5, yaw, [3.0 * oi, 0.0, 0.5])
        cams = _skewed_cameras(rng, pose.translation, spread, dist, yaw)
        objs.append(build_object(kind, solid, pose, cams, rng, D, minority=[5],
                                 mirror_confusion=(kind == "medicine_box")))
        cams_all = cams if oi == 0 else cams_all
    return SyntheticScene(spec.get("name", "skewed_6view"), seed, objs, cams_all, [5], spec)


VIEW_ORDER = (("front", 0.0, 15.0), ("rear", 180.0, 15.0), ("left", 90.0, 15.0), ("right", -90.0, 15.0),
              ("top", 0.0, 75.0))


def scene_views(spec: dict, seed: int) -> SyntheticScene:
    """A plush seen from the first ``n_views`` of front, rear, left, right, top."""
    rng = np.random.default_rng([seed, 13])
    n = int(spec.get("n_views", 5))
    if not 1 <= n <= len(VIEW_ORDER):
        raise SpecInvalid(f"n_views must lie in [1, {len(VIEW_ORDER)}]")
    D = int(spec.get("resolution", 16))
    yaw = rng.uniform(-10, 10)
    pose = _yaw_pose(0.5, yaw, [0.0, 0.0, 0.5])
    jitter = rng.uniform(-3, 3, size=(len(VIEW_ORDER), 2))
    cams = [orbit_camera(pose.translation, az + yaw + j[0], el + j[1], float(spec.get("camera_distance", 3.0)))
            for (_, az, el), j in zip(VIEW_ORDER, jitter)][:n]
    obj = build_object("plush", plush_solid(), pose, cams, rng, D)
    return SyntheticScene(spec.get("name", "views"), seed, [obj], cams, [], spec)


def scene_two_cubes(spec: dict, seed: int) -> SyntheticScene:
    """Two axis-aligned cubes of side 1 whose centres are 0.5 apart along x."""
    rng = np.random.default_rng([seed, 17])
    D = int(spec.get("resolution", 16))
    offset = float(spec.get("offset", 0.5))
    cube = box_solid([0.5, 0.5, 0.5], name="cube")
    cams = [orbit_camera([offset / 2, 0, 0], az, 20.0, 4.0) for az in (45.0, 135.0, 225.0, 315.0)]
    objs = [build_object(f"cube{i}", cube, SimilarityTransform(1.0, np.zeros(3), [i * offset, 0.0, 0.0]), cams,
                         rng, D) for i in range(2)]
    return SyntheticScene(spec.get("name", "two_cubes_overlap"), seed, objs, cams, [], spec)


def scene_collision(spec: dict, seed: int) -> SyntheticScene:
    """Boxes side by side on the floor with small clearances.

    Every view's pose estimate of box i > 0 is biased toward box i - 1, so
    naive generation makes touching objects interpenetrate.
    """
    rng = np.random.default_rng([seed, 19])
    D = int(spec.get("resolution", 16))
    n_obj = int(spec.get("n_objects", 2))
    scale = float(spec.get("scale", 0.8))
    bias_range = spec.get("bias", [0.12, 0.16])
    if n_obj < 2:
        raise SpecInvalid("the collision scene needs at least two objects")
    # half extents on whole voxels so the voxelised boxes are exact
    vs = 2.0 / D
    halves = vs * rng.integers(int(np.ceil(0.6 / vs)), int(np.floor(0.9 / vs)) + 1, size=(n_obj, 3))
    clear = rng.uniform(0.01, 0.03, size=n_obj - 1)
    xs = [0.0]
    for i in range(1, n_obj):
        xs.append(xs[-1] + scale * (halves[i - 1, 0] + halves[i, 0]) + clear[i - 1])
    xs = np.array(xs) - np.mean(xs)
    center = np.zeros(3)
    cams = [orbit_camera(center, az + rng.uniform(-5, 5), rng.uniform(2, 10), 6.0)
            for az in (60.0, 120.0, 240.0, 300.0)]
    objs = []
    for i in range(n_obj):
        pose = SimilarityTransform(scale, [0.0, 0.0, 0.0], [xs[i], 0.0, scale * halves[i, 2]])
        b = rng.uniform(*bias_range) if i > 0 else 0.0
        bias = [np.array([-b, 0.0, 0.0])] * len(cams)
        color = tuple(rng.uniform(0.3, 0.9, size=3))
        objs.append(build_object(f"box{i}", box_solid(halves[i], color), pose, cams, rng, D, pose_bias=bias))
    return SyntheticScene(spec.get("name", "collision_pairs"), seed, objs, cams, [], spec)


def scene_single_align(spec: dict, seed: int) -> SyntheticScene:
    """One plush with a dense reference cloud, for pose recovery."""
    rng = np.random.default_rng([seed, 23])
    D = int(spec.get("resolution", 16))
    pose = SimilarityTransform(1.0, np.zeros(3), np.zeros(3))
    cams = [orbit_camera([0, 0, 0], az, 20.0, 4.0) for az in (0.0, 90.0, 180.0, 270.0)]
    obj = build_object("plush", plush_solid(), pose, cams, rng, D, noise=float(spec.get("noise", 0.0)))
    return SyntheticScene(spec.get("name", "single_align"), seed, [obj], cams, [], spec)


SCENES = {
    "plush_6view": lambda spec, seed: scene_skewed(spec, seed, objects=("plush",)),
    "medicine_box_6view": lambda spec, seed: scene_skewed(spec, seed, objects=("medicine_box",)),
    "skewed_6view": scene_skewed,
    "views": scene_views,
    "two_cubes_overlap": scene_two_cubes,
    "collision_pairs": scene_collision,
    "single_align": scene_single_align,
}


def synth_scene(spec, seed: int = 0) -> SyntheticScene:
    """Build a scene from a spec (a name or a dict with ``name`` and overrides)."""
    if isinstance(spec, str):
        spec = {"name": spec}
    if not isinstance(spec, dict) or "name" not in spec:
        raise SpecInvalid("scene spec must be a name or an object with a 'name' field")
    name = spec["name"]
    if name not in SCENES:
        raise SpecInvalid(f"unknown scene {name!r}; expected one of {sorted(SCENES)}")
    D = spec.get("resolution", 16)
    if not isinstance(D, int) or D < 4:
        raise SpecInvalid("resolution must be an integer >= 4")
    return SCENES[name](dict(spec), int(seed))
