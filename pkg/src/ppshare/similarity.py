"""Prototype-prototype similarities and pair rankings.

Three strategies are supported:

``dd``
    data-dependent: prototypes are compared through their activation
    profiles over the training images, ``1 / sum_x (g(x, p) - g(x, q))^2``.
    Ranking uses the denominator (ascending), so identical profiles sort
    first without any infinity arithmetic.
``di``
    data-independent: inverse Euclidean distance between prototype vectors.
``random``
    seeded uniform shuffle of all pairs.

Further strategies can be plugged in with :func:`register_strategy`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ValidationError


@dataclass(eq=False)
class ResponseProfile:
    """G[x, i] = g(Z_x, p_i) over images x and alive prototypes i."""

    G: np.ndarray
    image_ids: np.ndarray
    proto_ids: np.ndarray
    dataset_fingerprint: str = ""
    subsampled: bool = False

    @property
    def shape(self):
        return self.G.shape


def response_profile(m, data, subsample=None, seed=0):
    """Activation profile of every alive prototype over the training images.

    ``subsample`` (an image count) evaluates a seeded random subset instead of
    the full set; that approximates the data-dependent similarity.
    """
    idx = np.arange(data.N)
    if subsample is not None and subsample < data.N:
        idx = np.sort(np.random.default_rng(seed).choice(data.N, size=subsample, replace=False))
    X = data.features64()[idx]
    G = m.similarities(X)
    return ResponseProfile(G, idx, m.ids.copy(), data.fingerprint(), subsample is not None)


def dd_denominators(profile):
    """(M, M) matrix of summed squared profile differences; diagonal is exactly 0."""
    Gt = np.ascontiguousarray(profile.G.T)
    return kernels.all_sqdist(Gt, Gt)


def dd_similarity(profile, i, j):
    """(denominator, similarity) for alive positions ``i``, ``j``; zero denominator -> inf."""
    M = profile.G.shape[1]
    if not (0 <= i < M and 0 <= j < M):
        raise ValidationError(f"prototype index out of range for M={M}")
    diff = profile.G[:, i] - profile.G[:, j]
    den = float(np.sum(diff * diff))
    return den, (np.inf if den == 0.0 else 1.0 / den)


def di_similarity(p, q):
    """Inverse Euclidean distance; identical vectors give inf."""
    d = float(np.sqrt(np.sum((np.asarray(p, float) - np.asarray(q, float)) ** 2)))
    return np.inf if d == 0.0 else 1.0 / d


def di_distances(m):
    P = np.ascontiguousarray(m.prototypes)
    return np.sqrt(kernels.all_sqdist(P, P))


@dataclass(eq=False)
class PairRanking:
    """Unordered prototype-id pairs (i < j) sorted most-similar first.

    ``keys`` are ascending: the dd denominator, the di distance, or the
    shuffle position for ``random``.
    """

    pairs: np.ndarray  # (n, 2) prototype ids
    keys: np.ndarray
    strategy: str
    seed: int | None = None
    pool_fingerprint: str = ""
    similarity: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.keys)

    def __iter__(self):
        for (i, j), k in zip(self.pairs.tolist(), self.keys.tolist()):
            yield i, j, k

    def to_rows(self):
        sims = self.similarity if self.similarity is not None else np.full(len(self), np.nan)
        return [
            {"pair_i": int(i), "pair_j": int(j), "denominator": float(k), "similarity": float(s)}
            for (i, j), k, s in zip(self.pairs.tolist(), self.keys.tolist(), sims.tolist())
        ]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["pair_i", "pair_j", "denominator", "similarity"])
            w.writeheader()
            w.writerows(self.to_rows())

    def write_json(self, path):
        obj = {"strategy": self.strategy, "seed": self.seed,
               "pool_fingerprint": self.pool_fingerprint, "pairs": self.to_rows()}
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1, default=_json_float)


def _json_float(x):
    return float(x)


def _dd_keys(m, data, profile, iu, ju, opts):
    if profile is None:
        if data is None:
            raise ValidationError("dd ranking needs a dataset or a response profile")
        profile = response_profile(m, data, opts.get("subsample"), opts.get("seed") or 0)
    if not np.array_equal(profile.proto_ids, m.ids):
        raise ValidationError("response profile does not match the model's prototypes")
    den = dd_denominators(profile)[iu, ju]
    with np.errstate(divide="ignore"):
        sim = np.where(den == 0.0, np.inf, 1.0 / np.where(den == 0.0, 1.0, den))
    return den, sim


def _di_keys(m, data, profile, iu, ju, opts):
    dist = di_distances(m)[iu, ju]
    with np.errstate(divide="ignore"):
        sim = np.where(dist == 0.0, np.inf, 1.0 / np.where(dist == 0.0, 1.0, dist))
    return dist, sim


def _random_keys(m, data, profile, iu, ju, opts):
    rng = np.random.default_rng(opts.get("seed"))
    pos = np.empty(len(iu))
    pos[rng.permutation(len(iu))] = np.arange(len(iu))
    return pos, np.full(len(iu), np.nan)


def _protopnet_keys(m, data, profile, iu, ju, opts):
    # extension point for background pruning (nearest-patch class purity); not provided
    raise NotImplementedError("ProtoPNet kappa/tau pruning is not implemented")


STRATEGIES = {"dd": _dd_keys, "di": _di_keys, "random": _random_keys, "protopnet": _protopnet_keys}


def register_strategy(name, fn):
    """Add a ranking strategy ``fn(model, data, profile, iu, ju, opts) -> (keys, sims)``."""
    STRATEGIES[name] = fn


def candidate_pairs(m, inter_class_only=False):
    iu, ju = np.triu_indices(m.M, k=1)
    if inter_class_only:
        keep = np.array([not (m.assigned[a] & m.assigned[b]) for a, b in zip(iu, ju)], dtype=bool)
        iu, ju = iu[keep], ju[keep]
    return iu, ju


def rank_pairs(m, data=None, strategy="dd", seed=None, profile=None,
               inter_class_only=False, subsample=None):
    """Rank all alive unordered prototype pairs by the chosen strategy."""
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r}; expected one of {sorted(STRATEGIES)}")
    if m.M < 2:
        raise ValidationError("ranking needs at least two alive prototypes")
    iu, ju = candidate_pairs(m, inter_class_only)
    opts = {"seed": seed, "subsample": subsample}
    keys, sims = STRATEGIES[strategy](m, data, profile, iu, ju, opts)
    ids_i, ids_j = m.ids[iu], m.ids[ju]
    lo, hi = np.minimum(ids_i, ids_j), np.maximum(ids_i, ids_j)
    order = np.lexsort((hi, lo, keys))
    return PairRanking(
        pairs=np.stack([lo[order], hi[order]], axis=1) if len(order) else np.empty((0, 2), np.int64),
        keys=np.asarray(keys, dtype=np.float64)[order],
        strategy=strategy,
        seed=seed,
        pool_fingerprint=m.fingerprint(),
        similarity=np.asarray(sims, dtype=np.float64)[order],
    )


def normalized_distance_histogram(values, bins=20):
    """Standardise (population std) and bin over [min, max] with equal widths.

    Returns ``(counts, edges, standardized)``.
    """
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise ValidationError("histogram needs at least two finite values")
    sd = v.std()
    if sd == 0.0:
        raise ValidationError("histogram of constant values is undefined")
    z = (v - v.mean()) / sd
    counts, edges = np.histogram(z, bins=int(bins), range=(z.min(), z.max()))
    return counts, edges, z


def write_histogram_csv(counts, edges, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
