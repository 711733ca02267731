"""Distance kernels with a compiled fast path.

The compiled module ``ppshare._kernels`` is used when it was built; otherwise
the numpy implementation below is selected at import. Both compute squared
distances from explicit coordinate differences (no ``|a|^2 - 2ab + |b|^2``
expansion), so an exact patch match yields a distance of exactly 0.0 and the
two backends agree bit-for-bit on the summation order per entry.

Set ``PPSHARE_KERNEL=numpy`` to force the fallback.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

try:
    from . import _kernels as _ext
except ImportError:  # pragma: no cover - depends on the build
    _ext = None

if os.environ.get("PPSHARE_KERNEL", "").lower() == "numpy":
    _ext = None

BACKEND = "cython" if _ext is not None else "numpy"

# images per numpy chunk; bounds the (chunk, patches, protos, D) temporary
_CHUNK_ELEMS = 1 << 22


def default_threads():
    env = os.environ.get("PPSHARE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _sqdist_block(a, b):
    # a: (..., n, D), b: (m, D) -> (..., n, m)
    diff = a[..., :, None, :] - b[None, :, :]
    out = np.zeros(diff.shape[:-1])
    for f in range(diff.shape[-1]):
        out += diff[..., f] * diff[..., f]
    return out


def min_sqdist_numpy(patches, protos, threads=1):
    n, npatch, d = patches.shape
    m = protos.shape[0]
    if protos.shape[1] != d:
        raise ValueError("prototype dimension does not match patch dimension")
    dmin = np.empty((n, m))
    amin = np.empty((n, m), dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // max(1, npatch * m * d))

    def work(lo):
        hi = min(n, lo + step)
        dist = _sqdist_block(patches[lo:hi], protos)
        amin[lo:hi] = np.argmin(dist, axis=1)
        dmin[lo:hi] = np.take_along_axis(dist, amin[lo:hi, None, :], axis=1)[:, 0, :]

    starts = range(0, n, step)
    if threads > 1 and n > step:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, starts))
    else:
        for lo in starts:
            work(lo)
    return dmin, amin


def all_sqdist_numpy(points, protos):
    if protos.shape[1] != points.shape[1]:
        raise ValueError("prototype dimension does not match patch dimension")
    return _sqdist_block(points, protos)


def min_sqdist(patches, protos, threads=None):
    """Minimum squared distance from each prototype to each image's patches.

    Parameters
    ----------
    patches : array of shape (N, P, D)
    protos : array of shape (M, D)
    threads : int, optional
        Worker count; defaults to ``PPSHARE_THREADS`` or the core count.

    Returns
    -------
    dmin : float64 array of shape (N, M)
    amin : int64 array of shape (N, M)
        Patch index achieving the minimum (lowest index on ties).
    """
    patches = np.ascontiguousarray(patches, dtype=np.float64)
    protos = np.ascontiguousarray(protos, dtype=np.float64)
    if patches.ndim != 3 or protos.ndim != 2:
        raise ValueError("expected patches (N, P, D) and prototypes (M, D)")
    threads = default_threads() if threads is None else int(threads)
    if patches.shape[0] == 0 or protos.shape[0] == 0 or patches.shape[1] == 0:
        if patches.shape[1] == 0 and patches.shape[0] and protos.shape[0]:
            raise ValueError("images have no patches")
        return (np.empty((patches.shape[0], protos.shape[0])),
                np.zeros((patches.shape[0], protos.shape[0]), dtype=np.int64))
    if _ext is not None:
        return _ext.min_sqdist(patches, protos, threads)
    return min_sqdist_numpy(patches, protos, threads)


def all_sqdist(points, protos):
    """Squared distances between every row of ``points`` (n, D) and ``protos`` (m, D)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    protos = np.ascontiguousarray(protos, dtype=np.float64)
    if _ext is not None:
        return _ext.all_sqdist(points, protos)
    return all_sqdist_numpy(points, protos)
