"""Shared helpers for the central-difference gradient oracle."""
import numpy as np

from ppshare.features import FeatureDataset
from ppshare.model import AddOn, Model
from ppshare.trainer import TrainConfig, get_params, loss, loss_gradients, set_params


def tiny_model(seed, K=2, M=4, D_in=3, D_mid=4, D=3, N=5, P=4):
    """Random add-on model and batch; prototypes drawn like the add-on initialiser."""
    rng = np.random.default_rng(seed)
    assigned = [{i % K} for i in range(M)]
    m = Model(rng.uniform(size=(M, D)), assigned, rng.normal(size=(K, M)),
              add_on=AddOn.random(D_in, D_mid, D, rng))
    data = FeatureDataset(rng.normal(size=(N, P, D_in)).astype(np.float32), np.arange(N) % K, K, 2, 2)
    return m, data


def central_differences(m, data, cfg, h):
    out = {}
    for k, w in get_params(m).items():
        fd = np.empty_like(w)
        for idx in np.ndindex(w.shape):
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd[idx] = (loss(set_params(m, {k: wp}), data, cfg)[0]
                       - loss(set_params(m, {k: wm}), data, cfg)[0]) / (2 * h)
        out[k] = fd
    return out


def worst_relative_error(seed, h=1e-4, cfg=None):
    cfg = cfg or TrainConfig()
    m, data = tiny_model(seed)
    g = loss_gradients(m, data, cfg)
    fd = central_differences(m, data, cfg, h)
    return max(float(np.max(np.abs(g[k] - fd[k]) / (np.abs(g[k]) + 1e-8))) for k in fd)
