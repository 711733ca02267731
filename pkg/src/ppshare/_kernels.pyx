# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled min-distance scan between patch grids and prototypes."""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()


def min_sqdist(const double[:, :, ::1] patches, const double[:, ::1] protos, int threads=1):
    """Per (image, prototype): minimum squared distance over patches and its argmin.

    Ties go to the lowest patch index.
    """
    cdef Py_ssize_t n = patches.shape[0], npatch = patches.shape[1], d = patches.shape[2]
    cdef Py_ssize_t m = protos.shape[0]
    if protos.shape[1] != d:
        raise ValueError("prototype dimension does not match patch dimension")
    dmin_arr = np.empty((n, m), dtype=np.float64)
    amin_arr = np.empty((n, m), dtype=np.int64)
    cdef double[:, ::1] dmin = dmin_arr
    cdef cnp.int64_t[:, ::1] amin = amin_arr
    cdef Py_ssize_t i, j, t, f
    cdef double best, acc, diff
    cdef cnp.int64_t arg
    if threads < 1:
        threads = 1
    for i in prange(n, nogil=True, num_threads=threads, schedule="static"):
        for j in range(m):
            best = 1e308
            arg = 0
            for t in range(npatch):
                acc = 0.0
                for f in range(d):
                    diff = patches[i, t, f] - protos[j, f]
                    acc = acc + diff * diff
                if acc < best:
                    best = acc
                    arg = t
            dmin[i, j] = best
            amin[i, j] = arg
    return dmin_arr, amin_arr


def all_sqdist(const double[:, ::1] points, const double[:, ::1] protos):
    """Full (points, prototypes) squared-distance matrix by explicit differences."""
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], m = protos.shape[0]
    if protos.shape[1] != d:
        raise ValueError("prototype dimension does not match patch dimension")
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, f
    cdef double acc, diff
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for f in range(d):
                    diff = points[i, f] - protos[j, f]
                    acc = acc + diff * diff
                out[i, j] = acc
    return out_arr
