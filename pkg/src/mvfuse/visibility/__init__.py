"""Binary per-view visibility of latent voxels by integer DDA traversal.

The traversal kernel is compiled with Cython when the extension is built;
otherwise (or with ``MVFUSE_PURE_PYTHON=1``) the numpy implementation in
``_dda_numpy`` is used.  Both produce identical bits.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import CameraInsideGrid
from ..geometry import Camera, SimilarityTransform, VoxelGrid
from . import _dda_numpy

traverse_numpy = _dda_numpy.traverse
traverse_compiled = None
if not os.environ.get("MVFUSE_PURE_PYTHON"):
    try:
        from ._dda import traverse as traverse_compiled
    except ImportError:  # extension not built
        traverse_compiled = None

KERNEL = "cython" if traverse_compiled is not None else "numpy"


def traverse(occ: np.ndarray, origins: np.ndarray, targets: np.ndarray) -> np.ndarray:
    occ = np.ascontiguousarray(occ, dtype=np.uint8)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.int64).reshape(-1, 3)
    if traverse_compiled is not None:
        return np.asarray(traverse_compiled(occ, origins, targets))
    return traverse_numpy(occ, origins, targets)


@dataclass(frozen=True)
class VisibilityMatrix:
    bits: np.ndarray            # (N, K) uint8
    point_indices: np.ndarray   # (K, 3) voxel index of latent point l
    positions: np.ndarray       # (K, 3) voxel centers in the grid frame

    @property
    def n_views(self) -> int:
        return self.bits.shape[0]

    @property
    def n_points(self) -> int:
        return self.bits.shape[1]

    def row(self, view: int) -> np.ndarray:
        return self.bits[view]

    def packed(self) -> bytes:
        """Row-major bitmask, most significant bit first (numpy packbits)."""
        return np.packbits(self.bits.astype(bool), axis=None).tobytes()

    @classmethod
    def from_packed(cls, data: bytes, n_views: int, point_indices, positions) -> "VisibilityMatrix":
        K = len(point_indices)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n_views * K).reshape(n_views, K)
        return cls(bits, np.asarray(point_indices), np.asarray(positions, dtype=np.float64))


def visibility_of_voxels(grid: VoxelGrid, cams: Sequence[Camera], indices,
                         occupancy_threshold: float = 0.5) -> VisibilityMatrix:
    """Visibility of arbitrary voxel centers; cameras in the grid frame."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
    blocked = (grid.occupancy > occupancy_threshold).astype(np.uint8)
    origins = np.stack([grid.to_index_space(c.center) for c in cams]) if len(cams) else np.zeros((0, 3))
    bits = traverse(blocked, origins, indices) if len(cams) else np.zeros((0, len(indices)), np.uint8)
    return VisibilityMatrix(bits, indices, grid.centers(indices))


def dda_visibility(grid: VoxelGrid, cams: Sequence[Camera], occupancy_threshold: float = 0.5) -> VisibilityMatrix:
    """V[i, l] = 1 iff no voxel with occupancy > threshold strictly precedes
    occupied voxel l on the segment from camera i's center to l's center."""
    occ = grid.occupancy > occupancy_threshold
    if not occ.any():
        raise ValueError("grid has no occupied voxel")
    for i, cam in enumerate(cams):
        if grid.lookup(cam.center[None], occupancy_threshold)[0]:
            raise CameraInsideGrid(f"camera {i} sits inside an occupied voxel")
    return visibility_of_voxels(grid, cams, np.argwhere(occ), occupancy_threshold)


def world_to_grid_pose(grid: VoxelGrid, object_pose: SimilarityTransform, cam: Camera) -> Camera:
    """Express a world camera in the object's grid frame.

    With ``p_world = s R p + t`` the camera-frame coordinates of a local point
    are ``s * (R_c R p + (R_c t + t_c) / s)``; dropping the common factor ``s``
    leaves projections (and therefore visibility) unchanged.
    """
    R = cam.rotation @ object_pose.rotation
    t = (cam.rotation @ object_pose.translation + cam.translation) / object_pose.scale
    return Camera(R, t, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)


def cameras_in_grid_frame(grid: VoxelGrid, object_pose: Optional[SimilarityTransform],
                          cams: Sequence[Camera]) -> list[Camera]:
    if object_pose is None:
        return list(cams)
    return [world_to_grid_pose(grid, object_pose, c) for c in cams]


__all__ = [
    "KERNEL", "VisibilityMatrix", "dda_visibility", "visibility_of_voxels", "world_to_grid_pose",
    "cameras_in_grid_frame", "traverse", "traverse_numpy", "traverse_compiled",
]
