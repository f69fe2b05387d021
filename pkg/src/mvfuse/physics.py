"""Collision and contact losses on soft occupancies, and the guided flow step.

Object k's soft occupancy lives on its own voxel lattice, carried into the
world by the current layout pose.  Neighbour occupancies are resampled onto
that lattice by trilinear interpolation (exact on aligned lattices), so

    L_collision = vol * sum_v soft_v * sum_j occ_j(x_v)

with ``vol = (s * voxel_size)^3``.  The contact term is a squared hinge on
the gap between k's boundary voxels and each interacting neighbour's
signed distance field, switched off beyond the contact band.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import LatticeMismatch
from .geometry import SignedDistanceField, SimilarityTransform, VoxelGrid, rotvec_derivatives, trilinear

LOGIT_CLAMP = 20.0


@dataclass
class Neighbor:
    grid: VoxelGrid
    pose: SimilarityTransform
    object_id: int = -1
    _sdf: Optional[SignedDistanceField] = field(default=None, repr=False)

    @property
    def sdf(self) -> SignedDistanceField:
        if self._sdf is None:
            self._sdf = SignedDistanceField(self.grid)
        return self._sdf

    def index_coords(self, world: np.ndarray) -> np.ndarray:
        """Trilinear coordinates (voxel center i at i) of world points."""
        return self.grid.to_index_space(self.pose.apply_inverse(world)) - 0.5

    def occupancy(self, world: np.ndarray, grad: bool = False):
        occ = self.grid.binary().astype(np.float64)
        u = self.index_coords(world)
        if not grad:
            return trilinear(occ, u)
        val, du = trilinear(occ, u, grad=True)
        # du/dx = R^T / (s * voxel_size)
        return val, du @ self.pose.rotation.T / (self.pose.scale * self.grid.voxel_size)

    def signed_distance(self, world: np.ndarray, grad: bool = False):
        local = self.pose.apply_inverse(world)
        if not grad:
            return self.pose.scale * self.sdf(local)
        val, g = self.sdf(local, grad=True)
        return self.pose.scale * val, g @ self.pose.rotation.T


@dataclass
class PhysicsContext:
    lattice: VoxelGrid                     # local lattice of the object being generated
    neighbors: list = field(default_factory=list)
    lambda_contact: float = 0.5
    band: Optional[float] = None           # world units; None = one voxel at the current scale
    pairs: Optional[set] = None            # neighbour ids sharing an interaction; None = all
    object_id: int = -1

    def __post_init__(self):
        if self.lambda_contact < 0:
            raise ValueError("lambda_contact must be non-negative")

    def interacting(self) -> list:
        if self.pairs is None:
            return list(self.neighbors)
        return [n for n in self.neighbors if n.object_id in self.pairs]


@dataclass(frozen=True)
class PhysicsLossTerms:
    collision: float
    contact: float
    lambda_contact: float = 0.5

    @property
    def total(self) -> float:
        return self.collision + self.lambda_contact * self.contact

    def to_dict(self) -> dict:
        return dict(collision=self.collision, contact=self.contact, total=self.total)


@dataclass(frozen=True)
class SoftOccupancy:
    """Soft occupancy of object k on its lattice, placed by ``pose``."""
    lattice: VoxelGrid
    values: np.ndarray          # (D, D, D) in [0, 1]
    pose: SimilarityTransform
    dvalues: Optional[np.ndarray] = None   # d values / d logits, when decoded

    def __post_init__(self):
        D = self.lattice.resolution
        if np.shape(self.values) != (D, D, D):
            raise LatticeMismatch(f"soft occupancy {np.shape(self.values)} vs lattice {(D, D, D)}")

    @property
    def local_points(self) -> np.ndarray:
        D = self.lattice.resolution
        idx = np.stack(np.meshgrid(*[np.arange(D)] * 3, indexing="ij"), -1).reshape(-1, 3)
        return self.lattice.centers(idx)

    @property
    def world_points(self) -> np.ndarray:
        return self.pose.apply(self.local_points)

    @property
    def voxel_volume(self) -> float:
        return (self.pose.scale * self.lattice.voxel_size) ** 3


@dataclass
class LossGradient:
    """A loss value with its gradients w.r.t. soft values, world points and log-scale."""
    value: float
    d_values: np.ndarray
    d_points: np.ndarray
    d_logscale: float = 0.0


def decode_soft_occupancy(logits, pose: SimilarityTransform, lattice: VoxelGrid) -> SoftOccupancy:
    """sigmoid of the clamped logits, placed in the world by ``pose``."""
    z = np.asarray(logits, dtype=np.float64)
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    s = 1.0 / (1.0 + np.exp(-zc))
    ds = s * (1.0 - s) * (np.abs(z) < LOGIT_CLAMP)
    return SoftOccupancy(lattice, s, pose, ds)


def _check(soft: SoftOccupancy, ctx: PhysicsContext):
    a, b = soft.lattice, ctx.lattice
    if a.resolution != b.resolution or a.voxel_size != b.voxel_size or not np.array_equal(a.origin, b.origin):
        raise LatticeMismatch("soft occupancy and physics context use different lattices")


def collision_loss(soft: SoftOccupancy, ctx: PhysicsContext) -> LossGradient:
    """Overlap volume sum_j sum_v soft_v occ_j(x_v) vol with its gradients."""
    _check(soft, ctx)
    shape = soft.values.shape
    x = soft.world_points
    vol = soft.voxel_volume
    occ_sum = np.zeros(len(x))
    docc = np.zeros_like(x)
    for nb in ctx.neighbors:
        val, g = nb.occupancy(x, grad=True)
        occ_sum += val
        docc += g
    sv = soft.values.reshape(-1)
    value = float(vol * np.dot(sv, occ_sum))
    return LossGradient(value, (vol * occ_sum).reshape(shape), vol * sv[:, None] * docc, 3.0 * value)


def boundary_mask(occ: np.ndarray) -> np.ndarray:
    """Occupied voxels with an empty (or out-of-grid) 6-neighbour."""
    p = np.pad(occ, 1)
    inner = p[1:-1, 1:-1, 1:-1]
    full = (p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1] & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
            & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:])
    return inner & ~full


def contact_gaps(soft: SoftOccupancy, ctx: PhysicsContext, grad: bool = False):
    """Surface gap to each interacting neighbour: min SDF_j over k's boundary
    voxel centres minus half of k's voxel.  Returns a list of
    ``(neighbor, gap, argmin flat index, d gap / d x at argmin)``."""
    occ = soft.values > 0.5
    bnd = np.flatnonzero(boundary_mask(occ).reshape(-1))
    if len(bnd) == 0:
        return []
    x = soft.world_points[bnd]
    half = 0.5 * soft.lattice.voxel_size * soft.pose.scale
    out = []
    for nb in ctx.interacting():
        if grad:
            d, g = nb.signed_distance(x, grad=True)
        else:
            d, g = nb.signed_distance(x), None
        i = int(np.argmin(d))
        out.append((nb, float(d[i]) - half, int(bnd[i]), None if g is None else g[i]))
    return out


def contact_loss(soft: SoftOccupancy, ctx: PhysicsContext) -> LossGradient:
    """sum_j max(0, g_j)^2 over neighbours whose gap is within the band."""
    _check(soft, ctx)
    band = ctx.band if ctx.band is not None else soft.lattice.voxel_size * soft.pose.scale
    half = 0.5 * soft.lattice.voxel_size * soft.pose.scale
    value, dls = 0.0, 0.0
    dpts = np.zeros((soft.values.size, 3))
    for nb, gap, i, g in contact_gaps(soft, ctx, grad=True):
        if gap <= 0.0 or gap > band:
            continue
        value += gap * gap
        dpts[i] += 2.0 * gap * g
        dls += 2.0 * gap * (-half)
    return LossGradient(value, np.zeros_like(soft.values), dpts, dls)


def physics_loss(soft: SoftOccupancy, ctx: PhysicsContext) -> tuple[PhysicsLossTerms, LossGradient]:
    col = collision_loss(soft, ctx)
    con = contact_loss(soft, ctx)
    lam = ctx.lambda_contact
    terms = PhysicsLossTerms(col.value, con.value, lam)
    total = LossGradient(terms.total, col.d_values + lam * con.d_values, col.d_points + lam * con.d_points,
                         col.d_logscale + lam * con.d_logscale)
    return terms, total


def layout_gradient(soft: SoftOccupancy, layout: np.ndarray, lg: LossGradient) -> np.ndarray:
    """Chain d L / d x_v through x_v = exp(ls) R(r) c_v + t to the 7 layout channels."""
    layout = np.asarray(layout, dtype=np.float64)
    s = float(np.exp(layout[0]))
    R = soft.pose.rotation
    c = soft.local_points
    dR = rotvec_derivatives(layout[1:4])
    gp = lg.d_points
    out = np.zeros(7)
    out[0] = float(np.sum(gp * (s * c @ R.T))) + lg.d_logscale
    for m in range(3):
        out[1 + m] = float(np.sum(gp * (s * c @ dR[m].T)))
    out[4:7] = gp.sum(axis=0)
    return out


def physics_gradient(logits, layout, ctx: PhysicsContext):
    """L_phys at a Stage-1 latent and its gradient w.r.t. logits and layout."""
    pose = SimilarityTransform.from_params(layout)
    soft = decode_soft_occupancy(logits, pose, ctx.lattice)
    terms, lg = physics_loss(soft, ctx)
    g_logits = lg.d_values * soft.dvalues
    return terms, g_logits, layout_gradient(soft, layout, lg)


def guided_step(x, fused_v, sched, ctx: PhysicsContext, step_index: int):
    """Euler step plus, on the guidance schedule, a physics-gradient correction.

    The latent is decoded at its one-step clean estimate
    ``x1 = x_t + (1 - t) v`` and the gradient there is applied to ``x_t``
    (straight-through), so the correction acts on the configuration the
    trajectory is heading to.
    """
    from .flow import LatentState, euler_step

    if not 0 <= step_index < sched.n_steps:
        raise ValueError("step_index out of range")
    nxt = euler_step(x, fused_v, sched.dt)
    if sched.eta == 0.0 or not sched.guided(step_index) or x.layout is None:
        return nxt
    rem = 1.0 - x.t
    logits1 = x.shape + rem * np.asarray(fused_v.shape)
    layout1 = x.layout + rem * np.asarray(fused_v.layout)
    _, g_logits, g_layout = physics_gradient(logits1, layout1, ctx)
    if sched.normalize_guidance:
        norm = np.sqrt(np.sum(g_logits ** 2) + np.sum(g_layout ** 2))
        if norm > 0:
            g_logits, g_layout = g_logits / norm, g_layout / norm
    return LatentState(nxt.t, nxt.shape - sched.eta * g_logits, nxt.layout - sched.eta * g_layout)


def neighbors_from(objects: Sequence[tuple], skip: Optional[int] = None) -> list:
    """Build frozen neighbours from ``(object_id, grid, pose)`` triples."""
    return [Neighbor(g, p, oid) for oid, g, p in objects if oid != skip]
