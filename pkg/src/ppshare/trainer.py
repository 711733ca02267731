"""Phase-1 training, head finetuning and prototype projection.

The objective is::

    CE + lambda_clst * Clst + lambda_sep * Sep + lambda_l1 * L1

with Clst the mean over images of the smallest squared patch distance to any
prototype of the image's own class, Sep the negated same quantity over the
other classes' prototypes, and L1 the absolute head weight mass on
(class, prototype) pairs outside the assignment. Gradients are written by
hand; at a min/max the (tie-broken) achieving index takes the full gradient.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels
from .errors import InvariantViolation, ValidationError
from .model import (
    AddOn,
    Model,
    init_head,
    log_similarity,
    log_similarity_grad,
    nearest_patches,
)

log = logging.getLogger(__name__)

PARAM_GROUPS = {"addon": ("W1", "b1", "W2", "b2"), "protos": ("prototypes",), "head": ("head",)}
FINETUNE_STRATEGIES = {"h": ("head",), "ph": ("protos", "head"), "all": ("addon", "protos", "head")}


@dataclass
class TrainConfig:
    lambda_clst: float = 0.8
    lambda_sep: float = 0.08
    lambda_l1: float = 1e-4
    lr_addon: float = 3e-3
    lr_protos: float = 3e-3
    lr_head: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int | None = None
    epochs: int = 30
    lr_decay: float = 0.1
    lr_decay_every: int = 5
    finetune_iters: int = 25
    seed: int = 0
    protos_per_class: int = 10
    add_on: bool = False
    addon_mid: int = 0
    proto_dim: int = 0
    epsilon: float = 1e-4

    def validate(self):
        for name in ("lambda_clst", "lambda_sep", "lambda_l1"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        for name in ("lr_addon", "lr_protos", "lr_head"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("Adam betas must lie in [0, 1)")
        if self.finetune_iters < 1:
            raise ValidationError("finetune_iters must be >= 1")
        if self.epochs < 0 or self.protos_per_class < 1 or self.lr_decay_every < 1:
            raise ValidationError("epochs >= 0, protos_per_class >= 1, lr_decay_every >= 1 required")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if not 0 < self.epsilon < 1:
            raise ValidationError("epsilon must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**obj).validate()

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


# -- parameters ---------------------------------------------------------

def get_params(m: Model, groups=("addon", "protos", "head")):
    out = {}
    if "addon" in groups and m.add_on.enabled:
        for k in PARAM_GROUPS["addon"]:
            out[k] = getattr(m.add_on, k)
    if "protos" in groups:
        out["prototypes"] = m.prototypes
    if "head" in groups:
        out["head"] = m.head
    return out


def set_params(m: Model, params):
    """Copy of ``m`` with the named parameter arrays replaced."""
    m = m.copy()
    for k, v in params.items():
        if k in PARAM_GROUPS["addon"]:
            setattr(m.add_on, k, np.array(v, dtype=np.float64))
        else:
            setattr(m, k, np.array(v, dtype=np.float64))
    return m


# -- objective ----------------------------------------------------------

def _split(batch):
    if hasattr(batch, "patches"):
        return batch.features64(), batch.labels
    patches = np.stack([np.asarray(x.patches, dtype=np.float64) for x in batch])
    labels = np.asarray([x.label for x in batch], dtype=np.int64)
    return patches, labels


def _objective(m: Model, patches, labels, cfg: TrainConfig, want_grad, groups=None):
    N = patches.shape[0]
    if N == 0:
        raise ValidationError("loss over an empty batch")
    if labels.min() < 0 or labels.max() >= m.K:
        raise ValidationError("batch label out of range")
    Z, cache = m.add_on.forward(patches)
    dmin, amin = kernels.min_sqdist(Z, m.prototypes)
    g = log_similarity(dmin, m.epsilon)
    z = g @ m.head.T
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(N)
    ce = float(np.mean(lse - z[rows, labels]))

    A = m.assignment_matrix()
    own = A[labels]
    if not own.any(axis=1).all():
        raise InvariantViolation("an image's class has no alive assigned prototype")
    jc = np.argmin(np.where(own, dmin, np.inf), axis=1)
    clst = float(np.mean(dmin[rows, jc]))
    other = ~own
    has_other = other.any(axis=1)
    js = np.argmin(np.where(other, dmin, np.inf), axis=1)
    sep = -float(np.sum(np.where(has_other, dmin[rows, js], 0.0)) / N)
    off = ~A
    l1 = float(np.abs(m.head[off]).sum())
    total = ce + cfg.lambda_clst * clst + cfg.lambda_sep * sep + cfg.lambda_l1 * l1
    parts = {"ce": ce, "clst": clst, "sep": sep, "l1": l1}
    if not want_grad:
        return total, parts, None

    groups = groups or ("addon", "protos", "head")
    p = np.exp(z - lse[:, None])
    p[rows, labels] -= 1.0
    dz = p / N
    grads = {}
    if "head" in groups:
        grads["head"] = dz.T @ g + cfg.lambda_l1 * np.sign(m.head) * off
    dd = (dz @ m.head) * log_similarity_grad(dmin, m.epsilon)
    dd[rows, jc] += cfg.lambda_clst / N
    dd[rows[has_other], js[has_other]] -= cfg.lambda_sep / N
    Zsel = Z[rows[:, None], amin]  # (N, M, D)
    if "protos" in groups:
        grads["prototypes"] = 2.0 * (dd.sum(axis=0)[:, None] * m.prototypes
                                     - np.einsum("nm,nmd->md", dd, Zsel))
    if "addon" in groups and m.add_on.enabled:
        dZ = np.zeros_like(Z)
        contrib = 2.0 * dd[:, :, None] * (Zsel - m.prototypes[None])
        np.add.at(dZ, (np.repeat(rows, m.M), amin.ravel()), contrib.reshape(-1, Z.shape[2]))
        grads.update(m.add_on.backward(cache, dZ))
    return total, parts, grads


def loss(m: Model, batch, cfg: TrainConfig | None = None):
    """Total objective and its components ``{ce, clst, sep, l1}``."""
    cfg = cfg or TrainConfig()
    patches, labels = _split(batch)
    total, parts, _ = _objective(m, patches, labels, cfg, want_grad=False)
    return total, parts


def loss_gradients(m: Model, batch, cfg: TrainConfig | None = None, groups=None):
    """Gradients keyed like :func:`get_params` (W1, b1, W2, b2, prototypes, head)."""
    cfg = cfg or TrainConfig()
    patches, labels = _split(batch)
    return _objective(m, patches, labels, cfg, want_grad=True, groups=groups)[2]


# -- optimisation -------------------------------------------------------

class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads, lrs):
        self.t += 1
        out = {}
        for k, w in params.items():
            gk = grads[k]
            mk = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * gk
            vk = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * gk * gk
            self.m[k], self.v[k] = mk, vk
            mhat = mk / (1 - self.beta1 ** self.t)
            vhat = vk / (1 - self.beta2 ** self.t)
            out[k] = w - lrs[k] * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _lrs(cfg, epoch, decay=True):
    f = cfg.lr_decay ** (epoch // cfg.lr_decay_every) if decay else 1.0
    lr = {"prototypes": cfg.lr_protos * f, "head": cfg.lr_head}
    for k in PARAM_GROUPS["addon"]:
        lr[k] = cfg.lr_addon * f
    return lr


def _kmeanspp(points, n, rng):
    """k-means++ seeding: ``n`` rows of ``points`` chosen by D^2 sampling."""
    chosen = [int(rng.integers(len(points)))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, n):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(points)))
        else:
            idx = int(rng.choice(len(points), p=d2 / total))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen]


def init_model(data, cfg: TrainConfig):
    """Exclusive prototypes, ``protos_per_class`` per class, ProtoPNet-style head."""
    data.validate(require_all_classes=True)
    rng = np.random.default_rng(cfg.seed)
    D_in = data.D
    if cfg.add_on:
        D = cfg.proto_dim or D_in
        add_on = AddOn.random(D_in, cfg.addon_mid or D, D, rng)
    else:
        if cfg.proto_dim and cfg.proto_dim != D_in:
            raise ValidationError("proto_dim must equal the feature dim when the add-on is disabled")
        D = D_in
        add_on = AddOn.identity(D)
    K, mk = data.K, cfg.protos_per_class
    protos = np.empty((K * mk, D))
    assigned = []
    X = data.features64()
    for k in range(K):
        if cfg.add_on:
            protos[k * mk:(k + 1) * mk] = rng.uniform(0.0, 1.0, size=(mk, D))
        else:
            pts = X[data.labels == k].reshape(-1, D)
            protos[k * mk:(k + 1) * mk] = _kmeanspp(pts, mk, rng)
        assigned += [{k}] * mk
    return Model(protos, assigned, init_head(K, assigned), cfg.epsilon, add_on)


def accuracy(m: Model, data):
    if data.N == 0:
        return float("nan")
    return float(np.mean(m.predict_batch(data.features64()) == data.labels))


def train_phase1(data, cfg: TrainConfig, val=None, model=None):
    """Joint training of add-on, prototypes and head from exclusive prototypes.

    Returns the trained model and a list of per-epoch history rows.
    """
    cfg.validate()
    m = model.copy() if model is not None else init_model(data, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    X, y = data.features64(), data.labels
    bs = cfg.batch_size or len(y)
    opt = Adam(cfg.beta1, cfg.beta2)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y)) if bs < len(y) else np.arange(len(y))
        lrs = _lrs(cfg, epoch)
        for lo in range(0, len(y), bs):
            idx = order[lo:lo + bs]
            _, _, grads = _objective(m, X[idx], y[idx], cfg, want_grad=True)
            params = get_params(m)
            m = set_params(m, opt.step(params, grads, lrs))
        total, parts, _ = _objective(m, X, y, cfg, want_grad=False)
        row = {"epoch": epoch + 1, **parts, "train_acc": accuracy(m, data),
               "val_acc": accuracy(m, val) if val is not None else float("nan")}
        history.append(row)
        log.debug("epoch %d loss %.5f acc %.4f", epoch + 1, total, row["train_acc"])
    return m, history


def finetune(m: Model, data, iters, cfg: TrainConfig, strategy="h"):
    """Full-batch Adam steps after a pruning step.

    ``strategy`` picks the trainable groups: ``h`` (head only, CE + L1),
    ``ph`` (prototypes and head) or ``all`` (add-on too); the latter two
    optimise the full phase-1 objective.
    """
    if strategy not in FINETUNE_STRATEGIES:
        raise ValidationError(f"unknown finetune strategy {strategy!r}")
    if iters < 0:
        raise ValidationError("iters must be >= 0")
    if iters == 0:
        return m.copy()
    groups = FINETUNE_STRATEGIES[strategy]
    if strategy == "h":
        cfg = TrainConfig(**{**cfg.to_dict(), "lambda_clst": 0.0, "lambda_sep": 0.0})
    X, y = data.features64(), data.labels
    opt = Adam(cfg.beta1, cfg.beta2)
    lrs = _lrs(cfg, 0, decay=False)
    for _ in range(iters):
        _, _, grads = _objective(m, X, y, cfg, want_grad=True, groups=groups)
        params = get_params(m, groups)
        m = set_params(m, opt.step(params, grads, lrs))
    return m


def finetune_head(m: Model, data, iters, cfg: TrainConfig):
    """Head-only finetuning; add-on and prototypes stay bitwise unchanged."""
    return finetune(m, data, iters, cfg, strategy="h")


def project_prototypes(m: Model, data):
    """Snap every alive prototype onto its nearest embedded training patch."""
    img, patch, _ = nearest_patches(m, data)
    Z = m.embed(data.features64()[img, patch])
    out = m.copy()
    out.prototypes = np.ascontiguousarray(Z)
    return out
