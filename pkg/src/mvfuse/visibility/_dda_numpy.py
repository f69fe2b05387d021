"""Pure numpy DDA traversal; the import-time fallback for the compiled kernel.

Every ray advances one voxel per loop iteration, so the loop runs for the
longest Manhattan distance in the batch.
"""

import numpy as np


def traverse(occ: np.ndarray, origins: np.ndarray, targets: np.ndarray) -> np.ndarray:
    occ = np.ascontiguousarray(occ, dtype=np.uint8)
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    N, K = len(origins), len(targets)
    D = np.array(occ.shape, dtype=np.int64)

    o = np.repeat(origins, K, axis=0)
    tgt = np.tile(targets, (N, 1))
    d = (tgt.astype(np.float64) + 0.5) - o
    c = np.floor(o).astype(np.int64)

    same = c == tgt
    step = np.where(d > 0, 1, -1).astype(np.int64)
    step[same] = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = np.where(d > 0, c + 1, c).astype(np.float64)
        tmax = (boundary - o) / d
        tdelta = np.where(d > 0, 1.0 / d, 1.0 / (-d))
    tmax[same] = np.inf
    tdelta[same] = np.inf
    n = ((tgt - c) * step).sum(axis=1)

    def blocked(idx):
        ok = np.all((idx >= 0) & (idx < D), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        ii = idx[ok]
        out[ok] = occ[ii[:, 0], ii[:, 1], ii[:, 2]] != 0
        return out

    visible = np.ones(N * K, dtype=bool)
    visible[(n > 0) & blocked(c)] = False
    rows = np.arange(N * K)
    for s in range(int(n.max(initial=0)) - 1):
        active = visible & (s < n - 1)
        if not active.any():
            break
        r = rows[active]
        a = np.argmin(tmax[r], axis=1)
        c[r, a] += step[r, a]
        done = c[r, a] == tgt[r, a]
        tmax[r[done], a[done]] = np.inf
        nd = ~done
        tmax[r[nd], a[nd]] += tdelta[r[nd], a[nd]]
        hit = blocked(c[r])
        visible[r[hit]] = False
    return visible.reshape(N, K).astype(np.uint8)
