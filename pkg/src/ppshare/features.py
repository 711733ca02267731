"""Patch-feature datasets: the stand-in for backbone outputs f(x).

A dataset holds N images, each an H x W grid of D-dimensional patch vectors
with a class label. Storage is float32; every reduction downstream is done
in float64.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

MAGIC = b"PPSF"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """Labeled patch grids.

    ``patches`` has shape (N, H*W, D), row-major over the grid; ``labels`` has
    shape (N,).
    """

    patches: np.ndarray
    labels: np.ndarray
    num_classes: int
    H: int
    W: int

    def __post_init__(self):
        patches = np.asarray(self.patches, dtype="<f4")
        labels = np.asarray(self.labels, dtype=np.int64)
        patches.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "patches", patches)
        object.__setattr__(self, "labels", labels)
        self.validate()

    @property
    def N(self):
        return self.patches.shape[0]

    @property
    def D(self):
        return self.patches.shape[2]

    @property
    def K(self):
        return self.num_classes

    def __len__(self):
        return self.N

    def validate(self, require_all_classes=False):
        p, y = self.patches, self.labels
        if p.ndim != 3 or y.ndim != 1 or p.shape[0] != y.shape[0]:
            raise ValidationError("patches must be (N, H*W, D) with N labels")
        if self.H < 1 or self.W < 1 or p.shape[1] != self.H * self.W:
            raise ValidationError(f"grid {self.H}x{self.W} does not match {p.shape[1]} patches")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(p)):
            raise ValidationError("non-finite feature value")
        if require_all_classes:
            missing = set(range(self.num_classes)) - set(np.unique(y).tolist())
            if missing:
                raise ValidationError(f"classes without images: {sorted(missing)}")
        return self

    def features64(self):
        """Patch array promoted to float64."""
        return self.patches.astype(np.float64)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(self.patches[idx], self.labels[idx], self.num_classes, self.H, self.W)

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        h.update(_HEADER.pack(MAGIC, VERSION, self.N, self.K, self.H, self.W, self.D))
        h.update(self.labels.astype("<u4").tobytes())
        h.update(np.ascontiguousarray(self.patches).tobytes())
        return h.hexdigest()[:16]


def save_dataset(d: FeatureDataset, path) -> None:
    """Write ``d`` in the PFM binary layout (little-endian, float32 payload)."""
    _, npatch, dim = d.patches.shape
    header = _HEADER.pack(MAGIC, VERSION, d.N, d.K, d.H, d.W, dim)
    payload = np.ascontiguousarray(d.patches, dtype="<f4").reshape(d.N, npatch * dim)
    labels = d.labels.astype("<u4")
    with open(path, "wb") as fh:
        fh.write(header)
        for i in range(d.N):
            fh.write(labels[i:i + 1].tobytes())
            fh.write(payload[i].tobytes())


def load_dataset(path) -> FeatureDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the PFM header")
    magic, version, n, k, h, w, dim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rec = 4 + 4 * h * w * dim
    expected = _HEADER.size + n * rec
    if len(raw) != expected:
        raise CorruptionError(f"{path}: header declares {expected} bytes, file has {len(raw)}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    labels = body[:, :4].copy().view("<u4").ravel().astype(np.int64)
    patches = body[:, 4:].copy().view("<f4").reshape(n, h * w, dim)
    if n and labels.max() >= k:
        raise ValidationError(f"{path}: label {labels.max()} >= K={k}")
    return FeatureDataset(patches, labels, k, h, w)


@dataclass(frozen=True)
class SynthSpec:
    """Planted-cluster generator settings.

    Each class owns ``clusters_per_class`` private Gaussian clusters; in
    addition ``shared_clusters`` clusters are each planted into a group of
    at least two classes, giving merge-pruning true cross-class redundancy.
    """

    K: int
    D: int
    H: int
    W: int
    images_per_class: int
    clusters_per_class: int
    shared_clusters: int
    cluster_sigma: float
    val_images_per_class: int | None = None

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValidationError(f"unknown SynthSpec keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if self.K < 2:
            raise ValidationError("synthesize needs K >= 2")
        if self.D < 1:
            raise ValidationError("synthesize needs D >= 1")
        if min(self.H, self.W, self.images_per_class, self.clusters_per_class) < 1:
            raise ValidationError("H, W, images_per_class and clusters_per_class must be >= 1")
        if self.shared_clusters < 0 or self.cluster_sigma < 0:
            raise ValidationError("shared_clusters and cluster_sigma must be non-negative")
        if self.val_images_per_class is not None and self.val_images_per_class < 1:
            raise ValidationError("val_images_per_class must be >= 1")
        return self


def _share_groups(K, S, rng):
    """Class groups for the shared clusters; every group has >= 2 distinct classes."""
    if S == 0:
        return []
    size = max(2, -(-K // S))
    size = min(size, K)
    order = rng.permutation(K).tolist()
    slots = (order * (S * size // K + 2))[: S * size]
    groups = []
    for s in range(S):
        g = []
        for c in slots[s * size:(s + 1) * size]:
            if c not in g:
                g.append(c)
        while len(g) < size:
            c = int(rng.integers(K))
            if c not in g:
                g.append(c)
        groups.append(sorted(int(c) for c in g))
    return groups


def synthesize(spec: SynthSpec, seed: int):
    """Generate (train, val, plan) from planted Gaussian clusters.

    ``plan`` records the cluster means, which classes own which private
    cluster, and which classes share each shared cluster.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    K, D, C, S = spec.K, spec.D, spec.clusters_per_class, spec.shared_clusters
    means = rng.uniform(0.0, 1.0, size=(K * C + S, D))
    private = {k: list(range(k * C, (k + 1) * C)) for k in range(K)}
    groups = _share_groups(K, S, rng)
    members = {k: list(private[k]) for k in range(K)}
    for s, g in enumerate(groups):
        for k in g:
            members[k].append(K * C + s)

    def draw(n_per_class):
        npatch = spec.H * spec.W
        patches = np.empty((K * n_per_class, npatch, D), dtype=np.float32)
        labels = np.repeat(np.arange(K), n_per_class)
        for i, k in enumerate(labels):
            owned = np.asarray(members[k])
            which = owned[rng.integers(len(owned), size=npatch)]
            patches[i] = means[which] + spec.cluster_sigma * rng.standard_normal((npatch, D))
        return FeatureDataset(patches, labels, K, spec.H, spec.W)

    n_val = spec.val_images_per_class or max(1, spec.images_per_class // 2)
    train = draw(spec.images_per_class)
    val = draw(n_val)
    plan = {
        "seed": int(seed),
        "spec": spec.to_dict(),
        "means": means.tolist(),
        "private": {str(k): v for k, v in private.items()},
        "shared": [{"cluster": K * C + s, "classes": g} for s, g in enumerate(groups)],
    }
    return train, val, plan
