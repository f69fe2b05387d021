"""Reconstruction and scene metrics.

Surfaces are compared through deterministic samples on exposed voxel faces
placed in the world by each object's pose.  Acc@d is the share of predicted
samples within ``d`` (inclusive) of the ground-truth surface, Coverage the
share of ground-truth samples within ``d`` of the prediction, and RelAcc@p
is Acc with ``d`` set to p% of the ground-truth scene bounding-box diagonal
(box axes fixed to the first object, so every metric is rigid-invariant).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import CorrespondenceMissing
from .geometry import SimilarityTransform, VoxelGrid, chamfer_distance, voxel_surface_points
from .physics import boundary_mask
from .refine import collision_rate, scene_bounds


@dataclass
class MetricsReport:
    chamfer: float
    iou: float
    acc: float
    rel_acc: float
    coverage: float
    collision_rate: float
    acc_threshold: float
    rel_percent: float
    disputed_iou: Optional[float] = None
    color_psnr: Optional[float] = None
    flags: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("acc", "rel_acc", "coverage", "collision_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} = {v} is not a percentage")
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError("IoU must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def surface_samples(grid: VoxelGrid, pose: Optional[SimilarityTransform] = None, per_axis: int = 2) -> np.ndarray:
    pts = voxel_surface_points(grid, per_axis=per_axis)
    return pts if pose is None else pose.apply(pts)


def voxel_iou(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def region_iou(pred, gt, region) -> float:
    """IoU restricted to ``region``; 1 when the region holds no voxel of either."""
    r = np.asarray(region, dtype=bool)
    return voxel_iou(np.asarray(pred, dtype=bool) & r, np.asarray(gt, dtype=bool) & r)


def within(src: np.ndarray, dst: np.ndarray, d: float) -> float:
    """Percentage of ``src`` points within distance ``d`` (inclusive) of ``dst``."""
    if len(src) == 0:
        return 0.0
    if len(dst) == 0:
        return 0.0
    dist, _ = cKDTree(dst).query(src)
    return 100.0 * float(np.mean(dist <= d))


def color_psnr(pred: VoxelGrid, gt: VoxelGrid) -> Optional[float]:
    """PSNR of voxel colours over ground-truth surface voxels the prediction occupies."""
    if pred.features is None or gt.features is None:
        return None
    sel = boundary_mask(gt.binary()) & pred.binary()
    if not sel.any():
        return None
    mse = float(np.mean((pred.features[sel] - gt.features[sel]) ** 2))
    return float("inf") if mse == 0 else float(10.0 * np.log10(1.0 / mse))


def _pairs(pred, gt) -> list:
    if isinstance(pred, Mapping) or isinstance(gt, Mapping):
        if not (isinstance(pred, Mapping) and isinstance(gt, Mapping)) or set(pred) != set(gt):
            raise CorrespondenceMissing("predicted and ground-truth objects do not correspond by name")
        return [(pred[k], gt[k]) for k in sorted(gt)]
    pred, gt = list(pred), list(gt)
    if len(pred) != len(gt) or not gt:
        raise CorrespondenceMissing(f"{len(pred)} predicted objects vs {len(gt)} ground-truth objects")
    return list(zip(pred, gt))


def _local_box(grid: VoxelGrid):
    idx = grid.occupied_indices()
    if len(idx) == 0:
        return None
    return grid.origin + idx.min(axis=0) * grid.voxel_size, grid.origin + (idx.max(axis=0) + 1) * grid.voxel_size


def _corners(lo, hi) -> np.ndarray:
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def occupied_bounds(grid: VoxelGrid, pose: SimilarityTransform):
    """World-axis box around an object's occupied voxels."""
    b = _local_box(grid)
    if b is None:
        return None
    w = pose.apply(_corners(*b))
    return w.min(axis=0), w.max(axis=0)


def scene_diagonal(objects: Sequence[tuple]) -> float:
    """Diagonal of the box around all occupied voxels, with axes fixed to the
    first non-empty object so the value moves rigidly with the scene."""
    boxes = [(b, p) for b, p in ((_local_box(g), p) for g, p in objects) if b is not None]
    if not boxes:
        return 0.0
    R0 = boxes[0][1].rotation
    pts = np.concatenate([p.apply(_corners(*b)) for b, p in boxes]) @ R0
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def object_diagonal(grid: VoxelGrid, pose: SimilarityTransform) -> Optional[float]:
    b = _local_box(grid)
    return None if b is None else float(pose.scale * np.linalg.norm(b[1] - b[0]))


def evaluate(pred, gt, acc_threshold: Optional[float] = None, rel_percent: float = 5.0,
             disputed: Optional[Sequence] = None, collision_eps: Optional[float] = None,
             per_axis: int = 2) -> MetricsReport:
    """Compare predicted and ground-truth objects given as ``(grid, pose)`` pairs.

    ``pred`` and ``gt`` are equal-length sequences (matched by position) or
    mappings keyed by object name.  ``acc_threshold`` defaults to 5% of the
    mean ground-truth object diagonal.  ``disputed`` optionally holds one
    voxel mask per object for the region IoU.
    """
    pairs = _pairs(pred, gt)
    flags = []
    diags = [d for d in (object_diagonal(g, p) for _, (g, p) in pairs) if d is not None]
    if not diags:
        raise CorrespondenceMissing("ground truth holds no occupied voxel")
    diag = scene_diagonal([gt_obj for _, gt_obj in pairs])
    if acc_threshold is None:
        acc_threshold = 0.05 * float(np.mean(diags))

    P = np.concatenate([surface_samples(g, p, per_axis) for (g, p), _ in pairs] + [np.zeros((0, 3))])
    G = np.concatenate([surface_samples(g, p, per_axis) for _, (g, p) in pairs])
    if len(P) == 0:
        flags.append("empty_prediction: acc undefined, reported as 0")
        chamfer = float("inf")
    else:
        chamfer = chamfer_distance(P, G)
    acc = within(P, G, acc_threshold)
    rel = within(P, G, rel_percent / 100.0 * diag)
    cov = within(G, P, acc_threshold)
    ious = [voxel_iou(pg.binary(), gg.binary()) for (pg, _), (gg, _) in pairs]

    d_iou = None
    if disputed is not None:
        d_iou = float(np.mean([region_iou(pg.binary(), gg.binary(), m)
                               for ((pg, _), (gg, _)), m in zip(pairs, disputed)]))
    psnrs = [color_psnr(pg, gg) for (pg, _), (gg, _) in pairs]
    psnrs = [v for v in psnrs if v is not None and np.isfinite(v)]
    rate = 0.0
    nonempty = [(g, p) for (g, p), _ in pairs if g.binary().any()]
    if len(nonempty) >= 2:
        rate = collision_rate(nonempty, eps=collision_eps)
    return MetricsReport(chamfer=chamfer, iou=float(np.mean(ious)), acc=acc, rel_acc=rel, coverage=cov,
                         collision_rate=rate, acc_threshold=float(acc_threshold), rel_percent=float(rel_percent),
                         disputed_iou=d_iou, color_psnr=float(np.mean(psnrs)) if psnrs else None, flags=flags)


def shape_metrics(pred: VoxelGrid, gt: VoxelGrid, disputed=None) -> dict:
    """Pose-free object quality in the shared local frame: IoU, CD, region IoU and colour PSNR."""
    P, G = surface_samples(pred), surface_samples(gt)
    out = {
        "iou": voxel_iou(pred.binary(), gt.binary()),
        "chamfer": chamfer_distance(P, G) if len(P) else float("inf"),
        "color_psnr": color_psnr(pred, gt),
    }
    if disputed is not None:
        out["disputed_iou"] = region_iou(pred.binary(), gt.binary(), disputed)
    return out
