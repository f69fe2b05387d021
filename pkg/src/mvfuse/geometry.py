"""Geometric primitives shared by every stage of the pipeline.

Conventions
-----------
* Similarity transforms map object-local points to world: ``p_w = s * R @ p + t``.
  Rotations are stored as rotation vectors (axis * angle).
* Cameras store the world->camera rigid transform ``p_c = R @ p_w + t`` with an
  OpenCV-style pinhole (x right, y down, z forward).
* ``VoxelGrid.occupancy[i, j, k]`` is the voxel whose center sits at
  ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``.
* Chamfer distance is the symmetric mean of *unsquared* nearest-neighbour
  distances, ``0.5 * mean_a min_b |a-b| + 0.5 * mean_b min_a |a-b|``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, EmptyCloud, NonWatertight

TWO_PI = 2.0 * np.pi


# --------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(r) -> np.ndarray:
    """Rodrigues' formula, with a Taylor branch near the identity."""
    r = np.asarray(r, dtype=np.float64)
    theta = float(np.linalg.norm(r))
    K = skew(r)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_rotvec()


def canonical_rotvec(r) -> np.ndarray:
    """Wrap the rotation angle into [0, 2*pi) keeping the axis."""
    r = np.asarray(r, dtype=np.float64).copy()
    theta = float(np.linalg.norm(r))
    if theta >= TWO_PI:
        r *= np.mod(theta, TWO_PI) / theta
    return r


def rotvec_derivatives(r) -> np.ndarray:
    """Return dR/dr_i stacked as an array of shape (3, 3, 3).

    Uses the closed form of Gallego & Yezzi (2015); falls back to the
    generators [e_i]_x at the identity.
    """
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    eye = np.eye(3)
    if theta2 < 1e-16:
        return np.stack([skew(eye[i]) for i in range(3)])
    R = rotvec_to_matrix(r)
    K = skew(r)
    out = np.empty((3, 3, 3))
    for i in range(3):
        w = np.cross(r, (eye - R)[:, i])
        out[i] = (r[i] * K + skew(w)) @ R / theta2
    return out


# --------------------------------------------------------------------------
# similarity transform


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float = 1.0
    rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotvec", canonical_rotvec(self.rotvec))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def rotation(self) -> np.ndarray:
        return rotvec_to_matrix(self.rotvec)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_matrix(cls, scale: float, R: np.ndarray, t) -> "SimilarityTransform":
        return cls(scale, matrix_to_rotvec(R), t)

    @classmethod
    def from_params(cls, params) -> "SimilarityTransform":
        """Inverse of :meth:`params`: (log scale, rotvec[3], translation[3])."""
        p = np.asarray(params, dtype=np.float64)
        return cls(float(np.exp(p[0])), p[1:4], p[4:7])

    def params(self) -> np.ndarray:
        return np.concatenate([[np.log(self.scale)], self.rotvec, self.translation])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, -self.rotvec, -(Rt @ self.translation) / self.scale)

    def apply_inverse(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation / self.scale

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self.compose(other)(p) == self(other(p))``."""
        R = self.rotation @ other.rotation
        t = self.scale * self.rotation @ other.translation + self.translation
        return SimilarityTransform.from_matrix(self.scale * other.scale, R, t)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotvec": [float(v) for v in self.rotvec],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["scale"], d["rotvec"], d["translation"])


def apply_transform(xf: SimilarityTransform, p) -> np.ndarray:
    return xf.apply(p)


# --------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float = 256.0
    fy: float = 256.0
    cx: float = 128.0
    cy: float = 128.0
    width: int = 256
    height: int = 256

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("camera rotation must be a proper orthonormal matrix")
        if self.fx <= 0 or self.fy <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("invalid camera intrinsics")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(R, -R @ eye, **intrinsics)

    def to_camera_frame(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised projection: returns (u, v, depth); no depth check."""
        pc = self.to_camera_frame(np.atleast_2d(points))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        return u, v, z

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        keys = ("fx", "fy", "cx", "cy", "width", "height")
        return cls(d["rotation"], d["translation"], **{k: d[k] for k in keys if k in d})


def project_point(cam: Camera, p) -> tuple[float, float, float]:
    u, v, z = cam.project(np.asarray(p, dtype=np.float64).reshape(1, 3))
    if not z[0] > 0:
        raise BehindCamera(f"point {p} has camera depth {z[0]:.6g}")
    return float(u[0]), float(v[0]), float(z[0])


# --------------------------------------------------------------------------
# point clouds and meshes


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(pts):
                raise ValueError("colors must match points")
            object.__setattr__(self, "colors", np.clip(c, 0.0, 1.0))

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, xf: SimilarityTransform) -> "PointCloud":
        return PointCloud(xf.apply(self.points), self.colors)


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from each point of ``src`` to its nearest neighbour in ``dst``."""
    d, _ = cKDTree(_as_points(dst)).query(_as_points(src))
    return d


def chamfer_distance(a, b) -> float:
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    return 0.5 * float(nearest_distances(pa, pb).mean()) + 0.5 * float(nearest_distances(pb, pa).mean())


@dataclass(frozen=True)
class MeshSurface:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if len(f):
            area = _triangle_areas(v, f)
            f = f[area > 1e-12]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def areas(self) -> np.ndarray:
        return _triangle_areas(self.vertices, self.faces)

    def transformed(self, xf: SimilarityTransform) -> "MeshSurface":
        return MeshSurface(xf.apply(self.vertices), self.faces)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted uniform samples; returns (points, triangle ids)."""
        if len(self.faces) == 0:
            return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        area = self.areas
        tri = rng.choice(len(area), size=n, p=area / area.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        a, b, c = (self.vertices[self.faces[tri, i]] for i in range(3))
        pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
        return pts, tri


def _triangle_areas(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def box_mesh(lo, hi) -> MeshSurface:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array([[(hi if (i >> a) & 1 else lo)[a] for a in range(3)] for i in range(8)])
    # outward-facing triangles, two per face
    faces = [
        (0, 2, 1), (1, 2, 3),  # z = lo
        (4, 5, 6), (5, 7, 6),  # z = hi
        (0, 1, 4), (1, 5, 4),  # y = lo
        (2, 6, 3), (3, 6, 7),  # y = hi
        (0, 4, 2), (2, 4, 6),  # x = lo
        (1, 3, 5), (3, 7, 5),  # x = hi
    ]
    return MeshSurface(corners, np.array(faces))


def uv_sphere_mesh(center=(0.0, 0.0, 0.0), radius: float = 1.0, n_lat: int = 24, n_lon: int = 48) -> MeshSurface:
    center = np.asarray(center, dtype=np.float64)
    verts = [center + [0.0, 0.0, radius]]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = TWO_PI * j / n_lon
            verts.append(center + radius * np.array([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)]))
    verts.append(center + [0.0, 0.0, -radius])
    south = len(verts) - 1
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        faces.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    return MeshSurface(np.array(verts), np.array(faces))


def merge_meshes(meshes: Sequence[MeshSurface]) -> MeshSurface:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    if not verts:
        return MeshSurface(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return MeshSurface(np.concatenate(verts), np.concatenate(faces))


# --------------------------------------------------------------------------
# voxel grid


@dataclass(frozen=True)
class VoxelGrid:
    resolution: int
    origin: np.ndarray
    voxel_size: float
    occupancy: np.ndarray
    features: Optional[np.ndarray] = None
    dense_features: bool = False
    occupancy_threshold: float = 0.5

    def __post_init__(self):
        D = int(self.resolution)
        if D < 2:
            raise ValueError("resolution must be >= 2")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        occ = np.asarray(self.occupancy, dtype=np.float64).reshape(D, D, D)
        if occ.size and (occ.min() < 0.0 or occ.max() > 1.0):
            raise ValueError("occupancy must lie in [0, 1]")
        object.__setattr__(self, "resolution", D)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "occupancy", occ)
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            f = f.reshape(D, D, D, -1)
            if not self.dense_features:
                f = np.where((occ > self.occupancy_threshold)[..., None], f, 0.0)
            object.__setattr__(self, "features", f)

    @classmethod
    def empty(cls, resolution: int, origin, voxel_size: float) -> "VoxelGrid":
        return cls(resolution, origin, voxel_size, np.zeros((resolution,) * 3))

    @classmethod
    def cube_bounds(cls, resolution: int, half_extent: float = 1.0, occupancy=None) -> "VoxelGrid":
        occ = np.zeros((resolution,) * 3) if occupancy is None else occupancy
        return cls(resolution, -half_extent * np.ones(3), 2.0 * half_extent / resolution, occ)

    @property
    def n_features(self) -> int:
        return 0 if self.features is None else self.features.shape[-1]

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + self.resolution * self.voxel_size

    def binary(self, threshold: Optional[float] = None) -> np.ndarray:
        thr = self.occupancy_threshold if threshold is None else threshold
        return self.occupancy > thr

    def occupied_indices(self, threshold: Optional[float] = None) -> np.ndarray:
        """Sparse (K, 3) index cache of occupied voxels in C order."""
        return np.argwhere(self.binary(threshold))

    def centers(self, indices=None) -> np.ndarray:
        if indices is None:
            D = self.resolution
            indices = np.stack(np.meshgrid(*[np.arange(D)] * 3, indexing="ij"), -1).reshape(-1, 3)
        return self.origin + (np.asarray(indices, dtype=np.float64) + 0.5) * self.voxel_size

    def to_index_space(self, points) -> np.ndarray:
        """Continuous coordinates where voxel ``i`` spans [i, i+1)."""
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size

    def lookup(self, points, threshold: Optional[float] = None) -> np.ndarray:
        """Binary occupancy of the voxels containing ``points`` (False outside)."""
        idx = np.floor(self.to_index_space(points)).astype(np.int64)
        D = self.resolution
        inside = np.all((idx >= 0) & (idx < D), axis=-1)
        out = np.zeros(idx.shape[:-1], dtype=bool)
        occ = self.binary(threshold)
        ii = idx[inside]
        out[inside] = occ[ii[:, 0], ii[:, 1], ii[:, 2]]
        return out

    def with_occupancy(self, occupancy) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.origin, self.voxel_size, occupancy,
                         self.features, self.dense_features, self.occupancy_threshold)

    def with_features(self, features, dense: bool = False) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.origin, self.voxel_size, self.occupancy,
                         features, dense, self.occupancy_threshold)


def grid_lattice_like(grid: VoxelGrid, resolution: int) -> VoxelGrid:
    """Empty grid spanning the same bounds at another resolution."""
    extent = grid.resolution * grid.voxel_size
    return VoxelGrid.empty(resolution, grid.origin, extent / resolution)


# --------------------------------------------------------------------------
# voxelization

# Sub-ulp irrational offsets keep parity rays off mesh edges and vertices.
_RAY_JITTER = np.array([[1.3107e-7, 2.7183e-7], [3.1416e-7, 1.4142e-7], [2.2361e-7, 1.7321e-7]])


def _axis_parity(mesh: MeshSurface, centers_1d: np.ndarray, axis: int) -> np.ndarray:
    """Parity of crossings of +axis rays from every voxel center."""
    D = len(centers_1d)
    b, c = [a for a in range(3) if a != axis]
    V, F = mesh.vertices, mesh.faces
    A, B, C = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    cb, cc = np.meshgrid(centers_1d + _RAY_JITTER[axis, 0], centers_1d + _RAY_JITTER[axis, 1], indexing="ij")
    qb, qc = cb.ravel(), cc.ravel()
    parity = np.zeros((D * D, D), dtype=bool)

    # 2d barycentrics of every column point against every projected triangle
    det = (B[:, b] - A[:, b]) * (C[:, c] - A[:, c]) - (C[:, b] - A[:, b]) * (B[:, c] - A[:, c])
    keep = np.abs(det) > 1e-15
    A, B, C, det = A[keep], B[keep], C[keep], det[keep]
    chunk = max(1, 2_000_000 // max(len(det), 1))
    for s in range(0, len(qb), chunk):
        pb = qb[s:s + chunk, None]
        pc = qc[s:s + chunk, None]
        l1 = ((pb - A[:, b]) * (C[:, c] - A[:, c]) - (C[:, b] - A[:, b]) * (pc - A[:, c])) / det
        l2 = ((B[:, b] - A[:, b]) * (pc - A[:, c]) - (pb - A[:, b]) * (B[:, c] - A[:, c])) / det
        l0 = 1.0 - l1 - l2
        hit = (l0 > 0) & (l1 > 0) & (l2 > 0)
        h = l0 * A[:, axis] + l1 * B[:, axis] + l2 * C[:, axis]
        for row in range(hit.shape[0]):
            zs = np.sort(h[row][hit[row]])
            above = len(zs) - np.searchsorted(zs, centers_1d, side="right")
            parity[s + row] = (above % 2) == 1
    return parity.reshape(D, D, D)


def voxelize_mesh(mesh: MeshSurface, D: int, bounds) -> VoxelGrid:
    """Center-inside voxelization by majority vote of three axis parity rays.

    ``bounds`` is ``(lo, hi)``; the grid uses the largest extent so voxels
    stay cubic.  Raises :class:`NonWatertight` when the three rays disagree
    on more than 0.1% of voxels.
    """
    lo, hi = (np.asarray(x, dtype=np.float64) for x in bounds)
    vs = float(np.max(hi - lo)) / D
    grid = VoxelGrid.empty(D, lo, vs)
    if len(mesh.faces) == 0:
        return grid
    if np.any(mesh.vertices <= lo) or np.any(mesh.vertices >= lo + D * vs):
        raise ValueError("bounds must strictly contain the mesh")
    shifted = MeshSurface(mesh.vertices - lo, mesh.faces)
    centers_1d = (np.arange(D) + 0.5) * vs
    # parity arrays come back as (column b, column c, position along axis)
    votes = np.stack([np.moveaxis(_axis_parity(shifted, centers_1d, axis), 2, axis) for axis in range(3)])
    count = votes.sum(axis=0)
    ambiguous = (count != 0) & (count != 3)
    if ambiguous.mean() > 1e-3:
        raise NonWatertight(f"parity rays disagree on {ambiguous.mean():.2%} of voxels")
    return grid.with_occupancy((count >= 2).astype(np.float64))


# --------------------------------------------------------------------------
# voxel surfaces

_FACE_DIRS = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]])


def exposed_faces(occ: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(voxel indices, face direction ids) of faces between occupied and empty."""
    padded = np.pad(occ.astype(bool), 1)
    idx_all, dir_all = [], []
    for d, off in enumerate(_FACE_DIRS):
        nb = np.roll(padded, shift=tuple(-off), axis=(0, 1, 2))[1:-1, 1:-1, 1:-1]
        mask = occ.astype(bool) & ~nb
        idx = np.argwhere(mask)
        idx_all.append(idx)
        dir_all.append(np.full(len(idx), d))
    return np.concatenate(idx_all), np.concatenate(dir_all)


def voxel_surface_points(grid: VoxelGrid, per_axis: int = 2, threshold: Optional[float] = None,
                         with_voxels: bool = False):
    """Deterministic stratified samples on exposed voxel faces (local frame)."""
    idx, dirs = exposed_faces(grid.binary(threshold))
    if len(idx) == 0:
        empty = np.zeros((0, 3))
        return (empty, np.zeros((0, 3), dtype=np.int64)) if with_voxels else empty
    offs = (np.arange(per_axis) + 0.5) / per_axis - 0.5
    uu, vv = np.meshgrid(offs, offs, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    pts = []
    normal = _FACE_DIRS[dirs].astype(np.float64)
    axis = np.argmax(np.abs(normal), axis=1)
    tang1 = np.eye(3)[(axis + 1) % 3]
    tang2 = np.eye(3)[(axis + 2) % 3]
    centers = idx + 0.5 + 0.5 * normal
    for u, v in zip(uu, vv):
        pts.append(centers + u * tang1 + v * tang2)
    pts = np.stack(pts, axis=1).reshape(-1, 3)
    world = grid.origin + pts * grid.voxel_size
    if with_voxels:
        return world, np.repeat(idx, len(uu), axis=0)
    return world


def voxel_surface_mesh(grid: VoxelGrid, threshold: Optional[float] = None) -> MeshSurface:
    idx, dirs = exposed_faces(grid.binary(threshold))
    verts, faces = [], []
    for n, (i, d) in enumerate(zip(idx, dirs)):
        normal = _FACE_DIRS[d]
        axis = int(np.argmax(np.abs(normal)))
        t1 = np.eye(3)[(axis + 1) % 3]
        t2 = np.eye(3)[(axis + 2) % 3]
        c = i + 0.5 + 0.5 * normal
        quad = [c - 0.5 * t1 - 0.5 * t2, c + 0.5 * t1 - 0.5 * t2, c + 0.5 * t1 + 0.5 * t2, c - 0.5 * t1 + 0.5 * t2]
        verts.extend(quad)
        b = 4 * n
        if normal[axis] > 0:
            faces.extend([(b, b + 1, b + 2), (b, b + 2, b + 3)])
        else:
            faces.extend([(b, b + 2, b + 1), (b, b + 3, b + 2)])
    if not verts:
        return MeshSurface(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return MeshSurface(grid.origin + np.array(verts) * grid.voxel_size, np.array(faces))


# --------------------------------------------------------------------------
# differentiable samplers (index-space coordinates; voxel center i at i)


def trilinear(volume: np.ndarray, u: np.ndarray, grad: bool = False):
    """Zero-padded trilinear interpolation at continuous center coordinates.

    ``u[..., a]`` equals ``i`` exactly at the center of voxel ``i``.  Returns
    values, and optionally d value / d u with shape ``u.shape``.
    """
    u = np.asarray(u, dtype=np.float64)
    D = np.array(volume.shape[:3])
    flat = u.reshape(-1, 3)
    i0 = np.floor(flat).astype(np.int64)
    f = flat - i0
    # snap round-off next to a center so aligned lattices interpolate exactly
    up = f > 1.0 - 1e-10
    i0[up] += 1
    f[up | (f < 1e-10)] = 0.0
    val = np.zeros(len(flat))
    g = np.zeros((len(flat), 3)) if grad else None
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                idx = i0 + (dx, dy, dz)
                ok = np.all((idx >= 0) & (idx < D), axis=1)
                c = np.zeros(len(flat))
                ii = idx[ok]
                c[ok] = volume[ii[:, 0], ii[:, 1], ii[:, 2]]
                val += wx * wy * wz * c
                if grad:
                    sx = 1.0 if dx else -1.0
                    sy = 1.0 if dy else -1.0
                    sz = 1.0 if dz else -1.0
                    g[:, 0] += sx * wy * wz * c
                    g[:, 1] += wx * sy * wz * c
                    g[:, 2] += wx * wy * sz * c
    val = val.reshape(u.shape[:-1])
    if grad:
        return val, g.reshape(u.shape)
    return val


def _bspline_weights(f: np.ndarray):
    f2, f3 = f * f, f * f * f
    w = np.stack([(1 - f) ** 3 / 6.0, (3 * f3 - 6 * f2 + 4) / 6.0, (-3 * f3 + 3 * f2 + 3 * f + 1) / 6.0, f3 / 6.0])
    dw = np.stack([-0.5 * (1 - f) ** 2, (9 * f2 - 12 * f) / 6.0, (-9 * f2 + 6 * f + 3) / 6.0, 0.5 * f2])
    return w, dw


def bspline3(volume: np.ndarray, u: np.ndarray, grad: bool = False):
    """Cubic B-spline evaluation of coefficients with edge replication (C2 smooth).

    Raw samples give an approximation that reproduces affine fields;
    coefficients from ``ndimage.spline_filter(mode="nearest")`` interpolate.
    """
    u = np.asarray(u, dtype=np.float64)
    D = np.array(volume.shape[:3])
    flat = u.reshape(-1, 3)
    i0 = np.floor(flat).astype(np.int64)
    f = flat - i0
    W, dW = zip(*(_bspline_weights(f[:, a]) for a in range(3)))
    W, dW = [np.stack(w, axis=1) for w in W], [np.stack(w, axis=1) for w in dW]   # (n, 4) per axis
    taps = np.arange(-1, 3)
    ix, iy, iz = (np.clip(i0[:, a, None] + taps, 0, D[a] - 1) for a in range(3))
    vv = volume[ix[:, :, None, None], iy[:, None, :, None], iz[:, None, None, :]]   # (n, 4, 4, 4)
    # contract z, then y, then x
    z = np.einsum("nabc,nc->nab", vv, W[2])
    y = np.einsum("nab,nb->na", z, W[1])
    val = np.einsum("na,na->n", y, W[0])
    g = None
    if grad:
        gz = np.einsum("nab,nb->na", np.einsum("nabc,nc->nab", vv, dW[2]), W[1])
        g = np.stack([np.einsum("na,na->n", y, dW[0]),
                      np.einsum("na,na->n", np.einsum("nab,nb->na", z, dW[1]), W[0]),
                      np.einsum("na,na->n", gz, W[0])], axis=1)
    val = val.reshape(u.shape[:-1])
    if grad:
        return val, g.reshape(u.shape)
    return val


class SignedDistanceField:
    """Signed distance of a voxel occupancy grid, negative inside (local units).

    Built from Euclidean distance transforms of the binary grid; the surface
    sits halfway between occupied and empty voxel centers.  The samples are
    prefiltered into interpolating cubic B-spline coefficients, so queries
    reproduce the distance exactly at voxel centers with C2 gradients in
    between.  Queries outside the grid add the distance to the grid box.
    """

    def __init__(self, grid: VoxelGrid, threshold: Optional[float] = None):
        occ = grid.binary(threshold)
        self.grid = grid
        D = grid.resolution
        if not occ.any():
            sdf = np.full(occ.shape, 2.0 * D)
        elif occ.all():
            sdf = np.full(occ.shape, -2.0 * D)
        else:
            outside = ndimage.distance_transform_edt(~occ)
            inside = ndimage.distance_transform_edt(occ)
            sdf = np.where(occ, -(inside - 0.5), outside - 0.5)
        self.values = sdf * grid.voxel_size
        self.coeffs = ndimage.spline_filter(self.values, order=3, mode="nearest")

    def __call__(self, local_points, grad: bool = False):
        """SDF at local-frame points; gradient is w.r.t. the local points."""
        g = self.grid
        u = g.to_index_space(local_points) - 0.5
        hi = g.resolution - 1
        uc = np.clip(u, 0.0, hi)
        excess = u - uc
        ext = np.linalg.norm(excess, axis=-1)
        if grad:
            v, dv = bspline3(self.coeffs, uc, grad=True)
            inside = (excess == 0.0)
            dv = dv * inside / g.voxel_size
            with np.errstate(invalid="ignore", divide="ignore"):
                dext = np.where(ext[..., None] > 0, excess / np.maximum(ext, 1e-300)[..., None], 0.0)
            return v + ext * g.voxel_size, dv + dext
        return bspline3(self.coeffs, uc) + ext * g.voxel_size
