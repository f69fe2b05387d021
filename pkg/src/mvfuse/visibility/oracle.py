"""Brute-force fine-step ray marching used to validate the DDA traversal.

Samples every segment at ``step`` voxel units (1/20 of a voxel by default)
and looks up the voxel under each sample.  A sample step can clip a voxel
corner without landing inside it; whenever two consecutive samples differ in
more than one axis the skipped voxels are recovered from the order in which
the segment crosses the separating planes (ties go to the lower axis).
"""

import numpy as np


def _entry_param(o: np.ndarray, d: np.ndarray, D: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (0.0 - o) / d
        t2 = (D - o) / d
    lo = np.where(d != 0, np.minimum(t1, t2), -np.inf)
    return np.clip(lo.max(axis=1), 0.0, 1.0)


def march_visibility(occ: np.ndarray, origin: np.ndarray, targets: np.ndarray,
                     step: float = 0.05, repair: bool = True, budget: int = 400_000) -> np.ndarray:
    """Visibility (K,) of target voxel centers from one index-space origin."""
    occ = np.asarray(occ, dtype=bool)
    D = np.array(occ.shape, dtype=np.int64)
    pad = np.pad(occ, 1).ravel()
    strides = np.array([(D[1] + 2) * (D[2] + 2), D[2] + 2, 1], dtype=np.int64)
    origin = np.asarray(origin, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    K = len(targets)
    out = np.ones(K, dtype=bool)
    if K == 0:
        return out

    d_all = targets + 0.5 - origin
    dt_all = step / np.maximum(np.linalg.norm(d_all, axis=1), 1e-12)
    t0_all = np.maximum(_entry_param(np.broadcast_to(origin, d_all.shape), d_all, D.astype(float)) - dt_all, 0.0)
    n_all = np.ceil((1.0 - t0_all) / dt_all).astype(np.int64) + 1
    order = np.argsort(n_all, kind="stable")

    s = 0
    while s < K:
        S = int(n_all[order[min(K - 1, s)]])
        e = s + 1
        # grow the chunk while the padded sample block fits the budget
        while e < K and int(n_all[order[e]]) * (e + 1 - s) <= budget:
            e += 1
        sel = order[s:e]
        S = int(n_all[order[e - 1]])
        tg, d, dt, t0 = targets[sel], d_all[sel], dt_all[sel], t0_all[sel]
        t = np.minimum(t0[:, None] + np.arange(S)[None, :] * dt[:, None], 1.0)
        idx = np.floor(origin + t[..., None] * d[:, None, :]).astype(np.int64)
        idx[:, -1] = tg
        np.clip(idx, -1, D, out=idx)
        tflat = (tg + 1) @ strides
        flat = (idx + 1) @ strides
        blocked = (pad[flat] & (flat != tflat[:, None])).any(axis=1)

        if repair:
            diff = idx[:, 1:] - idx[:, :-1]
            moved = diff != 0
            nmove = moved.sum(axis=2)
            ci, cj = np.nonzero(nmove >= 2)
            if len(ci):
                ia, ib, dd = idx[ci, cj], idx[ci, cj + 1], diff[ci, cj]
                plane = np.maximum(ia, ib).astype(np.float64)
                with np.errstate(divide="ignore", invalid="ignore"):
                    tc = (plane - origin) / d[ci]
                tc[dd == 0] = np.inf
                first_axis = np.argsort(tc, axis=1, kind="stable")
                rows = np.arange(len(ci))
                v1 = ia.copy()
                v1[rows, first_axis[:, 0]] += dd[rows, first_axis[:, 0]]
                v2 = v1.copy()
                v2[rows, first_axis[:, 1]] += dd[rows, first_axis[:, 1]]
                three = nmove[ci, cj] == 3
                f1 = (v1 + 1) @ strides
                f2 = (v2 + 1) @ strides
                hit = (pad[f1] & (f1 != tflat[ci])) | (three & pad[f2] & (f2 != tflat[ci]))
                blocked[np.unique(ci[hit])] = True
        out[sel] = ~blocked
        s = e
    return out


def march_visibility_matrix(occ, origins, targets, **kw) -> np.ndarray:
    return np.stack([march_visibility(occ, o, targets, **kw) for o in np.atleast_2d(origins)]).astype(np.uint8)
