"""Prototype-layer classifier: add-on projection, prototype pool, bias-free head.

The similarity between an image and a prototype is the best log-ratio
activation over the image's patches::

    g(Z, p) = max_z log((|z - p|^2 + 1) / (|z - p|^2 + eps))

Since the log-ratio is strictly decreasing in the squared distance, the max
is taken through the minimum squared distance (see :mod:`ppshare.kernels`).

Only alive prototypes are stored as rows of ``prototypes``; the head has one
column per alive prototype. ``ids`` keeps each row's original pool id and
``merge_parent`` maps dead ids to the id they were merged into.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import FormatError, InvariantViolation, ValidationError

CHECKPOINT_VERSION = 1
DEFAULT_EPSILON = 1e-4


def log_similarity(sqdist, epsilon=DEFAULT_EPSILON):
    """Log-ratio activation of a squared distance (elementwise)."""
    sqdist = np.asarray(sqdist, dtype=np.float64)
    return np.log1p((1.0 - epsilon) / (sqdist + epsilon))


def log_similarity_grad(sqdist, epsilon=DEFAULT_EPSILON):
    """d/d(sqdist) of :func:`log_similarity`."""
    return 1.0 / (sqdist + 1.0) - 1.0 / (sqdist + epsilon)


def max_similarity(epsilon=DEFAULT_EPSILON):
    """Upper end of the activation range, ln(1/eps), reached at distance 0."""
    return float(log_similarity(0.0, epsilon))


def _check_epsilon(epsilon):
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")


def patch_similarity(Z, p, epsilon=DEFAULT_EPSILON):
    """Max over patches ``Z`` (n, D) of the log-ratio similarity to ``p`` (D,)."""
    _check_epsilon(epsilon)
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    p = np.asarray(p, dtype=np.float64).reshape(1, -1)
    if Z.shape[1] != p.shape[1]:
        raise ValidationError(f"patch dim {Z.shape[1]} != prototype dim {p.shape[1]}")
    d = kernels.all_sqdist(Z, p)[:, 0]
    return float(log_similarity(d.min(), epsilon))


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


@dataclass(eq=False)
class AddOn:
    """Two per-patch affine maps, ReLU after the first and sigmoid after the second.

    ``W1`` is (D_mid, D_in), ``W2`` is (D, D_mid). Disabled means identity.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    enabled: bool = True

    @classmethod
    def identity(cls, D):
        z = np.zeros((0, D))
        return cls(z, np.zeros(0), z.T.copy(), np.zeros(0), enabled=False)

    @classmethod
    def random(cls, D_in, D_mid, D, rng):
        W1 = rng.normal(0.0, np.sqrt(2.0 / D_in), size=(D_mid, D_in))
        W2 = rng.normal(0.0, np.sqrt(1.0 / D_mid), size=(D, D_mid))
        return cls(W1, np.zeros(D_mid), W2, np.zeros(D), enabled=True)

    def out_dim(self, D_in):
        return self.W2.shape[0] if self.enabled else D_in

    def __call__(self, X):
        return self.forward(X)[0]

    def forward(self, X):
        """Apply to ``X`` (..., D_in); returns the output and a backprop cache."""
        X = np.asarray(X, dtype=np.float64)
        if not self.enabled:
            return X, None
        if X.shape[-1] != self.W1.shape[1]:
            raise ValidationError(f"add-on expects D_in={self.W1.shape[1]}, got {X.shape[-1]}")
        u1 = X @ self.W1.T + self.b1
        h = np.maximum(u1, 0.0)
        out = _sigmoid(h @ self.W2.T + self.b2)
        return out, (X, u1, h, out)

    def backward(self, cache, dout):
        """Parameter gradients given dL/d(output)."""
        X, u1, h, out = cache
        du2 = dout * out * (1.0 - out)
        du2f = du2.reshape(-1, du2.shape[-1])
        hf = h.reshape(-1, h.shape[-1])
        dW2 = du2f.T @ hf
        db2 = du2f.sum(axis=0)
        dh = du2 @ self.W2
        du1 = dh * (u1 > 0.0)
        du1f = du1.reshape(-1, du1.shape[-1])
        dW1 = du1f.T @ X.reshape(-1, X.shape[-1])
        db1 = du1f.sum(axis=0)
        return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}

    def copy(self):
        return AddOn(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(), self.enabled)

    def to_dict(self):
        return {
            "enabled": bool(self.enabled),
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.tolist(),
            "b2": self.b2.tolist(),
        }

    @classmethod
    def from_dict(cls, obj, D):
        if not obj.get("enabled", False):
            return cls.identity(D)
        return cls(
            np.asarray(obj["W1"], dtype=np.float64).reshape(len(obj["W1"]), -1),
            np.asarray(obj["b1"], dtype=np.float64),
            np.asarray(obj["W2"], dtype=np.float64).reshape(len(obj["W2"]), -1),
            np.asarray(obj["b2"], dtype=np.float64),
            True,
        )


@dataclass(eq=False)
class Model:
    prototypes: np.ndarray
    assigned: list
    head: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    add_on: AddOn | None = None
    ids: np.ndarray | None = None
    merge_parent: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prototypes = np.array(self.prototypes, dtype=np.float64, ndmin=2)
        self.head = np.array(self.head, dtype=np.float64, ndmin=2)
        self.assigned = [frozenset(int(c) for c in a) for a in self.assigned]
        if self.add_on is None:
            self.add_on = AddOn.identity(self.prototypes.shape[1])
        if self.ids is None:
            self.ids = np.arange(self.prototypes.shape[0])
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.merge_parent = {int(k): int(v) for k, v in self.merge_parent.items()}
        self.validate()

    # -- shape helpers -------------------------------------------------
    @property
    def M(self):
        return self.prototypes.shape[0]

    @property
    def D(self):
        return self.prototypes.shape[1]

    @property
    def K(self):
        return self.head.shape[0]

    def validate(self):
        _check_epsilon(self.epsilon)
        M, K = self.M, self.K
        if self.head.shape != (K, M):
            raise ValidationError(f"head shape {self.head.shape} != (K={K}, M={M})")
        if len(self.assigned) != M or len(self.ids) != M:
            raise ValidationError("assigned/ids length must equal the number of prototypes")
        if len(set(self.ids.tolist())) != M:
            raise ValidationError("duplicate prototype ids")
        if not (np.all(np.isfinite(self.prototypes)) and np.all(np.isfinite(self.head))):
            raise ValidationError("non-finite model parameter")
        if self.add_on.enabled and self.add_on.W2.shape[0] != self.D:
            raise ValidationError("add-on output dim does not match prototype dim")
        for i, a in enumerate(self.assigned):
            if not a:
                raise InvariantViolation(f"prototype {self.ids[i]} has no assigned class")
            if min(a) < 0 or max(a) >= K:
                raise ValidationError(f"prototype {self.ids[i]} assigned to invalid class")
        covered = set().union(*self.assigned) if M else set()
        lost = set(range(K)) - covered
        if lost:
            raise InvariantViolation(f"classes without an alive prototype: {sorted(lost)}")
        alive = set(self.ids.tolist())
        for dead in self.merge_parent:
            if dead in alive:
                raise ValidationError(f"prototype {dead} is alive but has a merge parent")
            self.find(dead)
        return self

    def copy(self):
        return replace(
            self,
            prototypes=self.prototypes.copy(),
            head=self.head.copy(),
            assigned=list(self.assigned),
            add_on=self.add_on.copy(),
            ids=self.ids.copy(),
            merge_parent=dict(self.merge_parent),
        )

    def find(self, pid):
        """Follow merge_parent links from prototype id ``pid`` to an alive id."""
        alive = set(self.ids.tolist())
        seen = 0
        pid = int(pid)
        while pid not in alive:
            if pid not in self.merge_parent or seen > len(self.merge_parent):
                raise ValidationError(f"prototype id {pid} does not resolve to an alive prototype")
            pid = self.merge_parent[pid]
            seen += 1
        return pid

    def index_of(self, pid):
        hits = np.flatnonzero(self.ids == int(pid))
        if hits.size == 0:
            raise ValidationError(f"prototype id {pid} is not alive")
        return int(hits[0])

    def assignment_matrix(self):
        """Boolean (K, M) matrix: True where prototype i is assigned to class k."""
        A = np.zeros((self.K, self.M), dtype=bool)
        for i, a in enumerate(self.assigned):
            A[sorted(a), i] = True
        return A

    def fingerprint(self):
        import hashlib

        h = hashlib.sha256()
        h.update(self.ids.tobytes())
        h.update(self.prototypes.tobytes())
        h.update(repr([sorted(a) for a in self.assigned]).encode())
        return h.hexdigest()[:16]

    # -- evaluation ----------------------------------------------------
    def embed(self, patches):
        return self.add_on(patches)

    def distances(self, patches, threads=None):
        """Min squared distance and argmin patch for images ``patches`` (N, P, D_in)."""
        Z = self.embed(np.asarray(patches, dtype=np.float64))
        return kernels.min_sqdist(Z, self.prototypes, threads)

    def similarities(self, patches, threads=None):
        """(N, M) matrix of image-prototype similarities."""
        dmin, _ = self.distances(patches, threads)
        return log_similarity(dmin, self.epsilon)

    def logits_batch(self, patches, threads=None):
        return self.similarities(patches, threads) @ self.head.T

    def predict_batch(self, patches, threads=None):
        return np.argmax(self.logits_batch(patches, threads), axis=1)


def _grid(x):
    x = getattr(x, "patches", x)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("a single image must be a (H*W, D) patch array")
    return x


def similarity_vector(m: Model, x):
    return m.similarities(_grid(x)[None])[0]


def logits(m: Model, x):
    return similarity_vector(m, x) @ m.head.T


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(m: Model, x):
    """Argmax class; ties resolve to the lowest class index."""
    return int(np.argmax(logits(m, x)))


def nearest_patches(m: Model, data):
    """Global nearest training patch for every alive prototype.

    Returns ``(image_index, patch_index, distance)`` arrays of length M;
    ties resolve in (image, patch) order.
    """
    if data.N == 0:
        raise ValidationError("nearest patch over an empty dataset")
    Z = m.embed(data.features64())
    npatch = Z.shape[1]
    dmin, amin = kernels.min_sqdist(Z.reshape(1, -1, Z.shape[2]), m.prototypes)
    img, patch = np.divmod(amin[0], npatch)
    return img, patch, np.sqrt(dmin[0])


def nearest_patch(m: Model, data, p):
    img, patch, dist = nearest_patches(m, data)
    if not 0 <= p < m.M:
        raise ValidationError(f"prototype index {p} out of range")
    return int(img[p]), int(patch[p]), float(dist[p])


def top_activations(m: Model, x, n):
    """The ``n`` strongest (patch, prototype, score) triples, one per patch."""
    Z = m.embed(_grid(x))
    n = max(0, min(int(n), Z.shape[0]))
    d = kernels.all_sqdist(Z, m.prototypes)
    best = np.argmin(d, axis=1)
    score = log_similarity(d[np.arange(Z.shape[0]), best], m.epsilon)
    order = np.lexsort((best, np.arange(Z.shape[0]), -score))[:n]
    return [(int(t), int(best[t]), float(score[t])) for t in order]


def init_head(K, assigned, positive=1.0, negative=-0.5):
    """+1 for (class, prototype) assignment pairs, -0.5 elsewhere."""
    head = np.full((K, len(assigned)), negative)
    for i, a in enumerate(assigned):
        head[sorted(a), i] = positive
    return head


def save_model(m: Model, path, meta=None):
    obj = {
        "version": CHECKPOINT_VERSION,
        "epsilon": m.epsilon,
        "add_on": m.add_on.to_dict(),
        "prototypes": m.prototypes.tolist(),
        "assigned": [sorted(a) for a in m.assigned],
        "head": m.head.tolist(),
        "ids": m.ids.tolist(),
        "merge_parent": {str(k): v for k, v in sorted(m.merge_parent.items())},
    }
    if meta is not None:
        obj["meta"] = meta
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def model_from_dict(obj):
    if "version" not in obj:
        raise FormatError("checkpoint has no version field")
    if obj["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {obj['version']}")
    protos = np.asarray(obj["prototypes"], dtype=np.float64)
    K = len(obj["head"])
    head = np.asarray(obj["head"], dtype=np.float64).reshape(K, protos.shape[0])
    return Model(
        prototypes=protos,
        assigned=obj["assigned"],
        head=head,
        epsilon=float(obj["epsilon"]),
        add_on=AddOn.from_dict(obj.get("add_on", {}), protos.shape[1]),
        ids=obj.get("ids"),
        merge_parent={int(k): v for k, v in obj.get("merge_parent", {}).items()},
    )


def load_model(path):
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return model_from_dict(obj)
