# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled integer DDA traversal (Amanatides-Woo).

Arithmetic mirrors ``_dda_numpy.traverse`` operation for operation so both
paths produce identical bits.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()


cdef inline bint _blocked(const unsigned char[:, :, ::1] occ, long x, long y, long z,
                          long D0, long D1, long D2) nogil:
    if x < 0 or y < 0 or z < 0 or x >= D0 or y >= D1 or z >= D2:
        return False
    return occ[x, y, z] != 0


def traverse(const unsigned char[:, :, ::1] occ, const double[:, ::1] origins,
             const long[:, ::1] targets):
    """Visibility of voxel centers ``targets`` from index-space ``origins``.

    Returns a (N, K) uint8 array: 1 when no blocked voxel precedes the
    target voxel along the segment origin -> target center.
    """
    cdef Py_ssize_t N = origins.shape[0]
    cdef Py_ssize_t K = targets.shape[0]
    cdef long D0 = occ.shape[0], D1 = occ.shape[1], D2 = occ.shape[2]
    out_arr = np.ones((N, K), dtype=np.uint8)
    cdef unsigned char[:, ::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef long c[3]
    cdef long tgt[3]
    cdef long step[3]
    cdef double o[3]
    cdef double d[3]
    cdef double tmax[3]
    cdef double tdelta[3]
    cdef long n, s
    cdef int a
    with nogil:
        for i in range(N):
            for k in range(K):
                n = 0
                for a in range(3):
                    o[a] = origins[i, a]
                    tgt[a] = targets[k, a]
                    d[a] = (<double>tgt[a] + 0.5) - o[a]
                    c[a] = <long>floor(o[a])
                    if c[a] == tgt[a]:
                        step[a] = 0
                        tmax[a] = INFINITY
                        tdelta[a] = INFINITY
                    else:
                        if d[a] > 0:
                            step[a] = 1
                            tmax[a] = (<double>(c[a] + 1) - o[a]) / d[a]
                            tdelta[a] = 1.0 / d[a]
                        else:
                            step[a] = -1
                            tmax[a] = (<double>c[a] - o[a]) / d[a]
                            tdelta[a] = 1.0 / (-d[a])
                        n += (tgt[a] - c[a]) * step[a]
                if n > 0 and _blocked(occ, c[0], c[1], c[2], D0, D1, D2):
                    out[i, k] = 0
                    continue
                for s in range(n - 1):
                    if tmax[0] <= tmax[1] and tmax[0] <= tmax[2]:
                        a = 0
                    elif tmax[1] <= tmax[2]:
                        a = 1
                    else:
                        a = 2
                    c[a] += step[a]
                    if c[a] == tgt[a]:
                        tmax[a] = INFINITY
                    else:
                        tmax[a] += tdelta[a]
                    if _blocked(occ, c[0], c[1], c[2], D0, D1, D2):
                        out[i, k] = 0
                        break
    return out_arr
