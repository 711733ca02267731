import math

import numpy as np
import pytest

from ppshare.errors import InvariantViolation, ValidationError
from ppshare.features import FeatureDataset, SynthSpec, synthesize
from ppshare.model import Model, init_head, nearest_patch
from ppshare.trainer import (TrainConfig, accuracy, finetune, finetune_head, get_params, loss,
                             loss_gradients, project_prototypes, train_phase1)

from gradcheck import central_differences, tiny_model


def oracle_loss(m, data, cfg):
    """Straight-line loop implementation of every term of the phase-1 objective."""
    X = data.features64()
    Z = np.array([[m.add_on(img)[t] for t in range(img.shape[0])] for img in X]) if m.add_on.enabled else X
    K, M = m.head.shape
    ce = clst = sep = 0.0
    for n in range(len(X)):
        d = [min(float(np.sum((z - p) ** 2)) for z in Z[n]) for p in m.prototypes]
        g = [math.log((di + 1) / (di + m.epsilon)) for di in d]
        z = [sum(m.head[k, j] * g[j] for j in range(M)) for k in range(K)]
        y = int(data.labels[n])
        ce += math.log(sum(math.exp(v) for v in z)) - z[y]
        clst += min(d[j] for j in range(M) if y in m.assigned[j])
        others = [d[j] for j in range(M) if y not in m.assigned[j]]
        if others:
            sep -= min(others)
    N = len(X)
    l1 = sum(abs(m.head[k, j]) for k in range(K) for j in range(M) if k not in m.assigned[j])
    parts = {"ce": ce / N, "clst": clst / N, "sep": sep / N, "l1": l1}
    total = parts["ce"] + cfg.lambda_clst * parts["clst"] + cfg.lambda_sep * parts["sep"] + cfg.lambda_l1 * l1
    return total, parts


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_oracle(seed):
    m, data = tiny_model(seed)
    cfg = TrainConfig()
    total, parts = loss(m, data, cfg)
    o_total, o_parts = oracle_loss(m, data, cfg)
    assert total == pytest.approx(o_total, rel=1e-10, abs=1e-10)
    for k in parts:
        assert parts[k] == pytest.approx(o_parts[k], rel=1e-10, abs=1e-10)


def test_cross_entropy_uniform_logits():
    m = Model([[0.0], [1.0]], [{0}, {1}], np.zeros((2, 2)))
    data = FeatureDataset(np.array([[[0.5]]], np.float32), [0], 2, 1, 1)
    _, parts = loss(m, data)
    assert parts["ce"] == pytest.approx(math.log(2), rel=1e-15)


def test_cluster_term_zero_at_interpolation():
    protos = np.array([[0.0, 0.0], [5.0, 5.0]])
    patches = np.array([[[0.0, 0.0], [1.0, 1.0]], [[5.0, 5.0], [4.0, 3.0]]], np.float32)
    data = FeatureDataset(patches, [0, 1], 2, 1, 2)
    m = Model(protos, [{0}, {1}], init_head(2, [{0}, {1}], 1.0, 0.0))
    _, parts = loss(m, data)
    assert parts["clst"] == 0.0 and parts["l1"] == 0.0
    g = loss_gradients(m, data, TrainConfig(lambda_sep=0.0, lambda_l1=0.0), groups=("protos",))
    # at an exact interpolation the cluster term contributes nothing; only CE pulls
    g_ce = loss_gradients(m, data, TrainConfig(lambda_clst=0.0, lambda_sep=0.0, lambda_l1=0.0),
                          groups=("protos",))
    np.testing.assert_allclose(g["prototypes"], g_ce["prototypes"], rtol=0, atol=1e-14)


def test_l1_gradient_on_off_assignment_weight():
    m = Model([[0.0], [1.0]], [{0}, {1}], [[1.0, 0.3], [0.2, 1.0]])
    data = FeatureDataset(np.array([[[0.5]]], np.float32), [0], 2, 1, 1)
    cfg = TrainConfig(lambda_l1=1e-4)
    with_l1 = loss_gradients(m, data, cfg, groups=("head",))["head"]
    without = loss_gradients(m, data, TrainConfig(lambda_l1=0.0), groups=("head",))["head"]
    diff = with_l1 - without
    assert diff[0, 1] == pytest.approx(1e-4, rel=1e-9)
    assert diff[1, 0] == pytest.approx(1e-4, rel=1e-9)
    assert diff[0, 0] == 0.0 and diff[1, 1] == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_error_shrinks_quadratically(seed):
    # central differences converge as h^2; the analytic gradient is the limit
    m, data = tiny_model(seed)
    cfg = TrainConfig()
    g = loss_gradients(m, data, cfg)
    e3 = central_differences(m, data, cfg, 1e-3)
    e5 = central_differences(m, data, cfg, 1e-5)
    for k in g:
        err3 = np.abs(g[k] - e3[k]).max()
        err5 = np.abs(g[k] - e5[k]).max()
        assert err5 < 1e-8 * max(1.0, np.abs(g[k]).max())
        assert err5 < err3


def test_gradients_without_addon(rng):
    data = FeatureDataset(rng.normal(size=(4, 3, 2)).astype(np.float32), [0, 1, 0, 1], 2, 1, 3)
    m = Model(rng.normal(size=(4, 2)), [{0}, {1}, {0}, {1}], rng.normal(size=(2, 4)))
    cfg = TrainConfig()
    g = loss_gradients(m, data, cfg)
    assert set(g) == {"prototypes", "head"}
    fd = central_differences(m, data, cfg, 1e-5)
    for k in g:
        np.testing.assert_allclose(g[k], fd[k], rtol=1e-6, atol=1e-9)


def test_missing_class_prototype_is_invariant_violation():
    m = Model([[0.0], [1.0]], [{0}, {1}], np.eye(2))
    m.assigned = [frozenset({0}), frozenset({0})]
    data = FeatureDataset(np.array([[[0.5]]], np.float32), [1], 2, 1, 1)
    with pytest.raises(InvariantViolation):
        loss(m, data)


TWO = SynthSpec(K=2, D=4, H=2, W=2, images_per_class=10, clusters_per_class=1,
                shared_clusters=0, cluster_sigma=0.1)


def test_two_class_reaches_full_train_accuracy():
    train, _, _ = synthesize(TWO, 0)
    cfg = TrainConfig(epochs=50, protos_per_class=2, seed=0)
    m, hist = train_phase1(train, cfg)
    assert len(hist) == 50
    assert accuracy(m, train) == 1.0
    assert min(r["epoch"] for r in hist if r["train_acc"] == 1.0) <= 50


def test_zero_epochs_returns_initialisation():
    train, _, _ = synthesize(TWO, 0)
    from ppshare.trainer import init_model
    cfg = TrainConfig(epochs=0, protos_per_class=2, seed=3)
    m, hist = train_phase1(train, cfg)
    m0 = init_model(train, cfg)
    assert hist == []
    assert m.prototypes.tobytes() == m0.prototypes.tobytes()
    assert m.head.tobytes() == m0.head.tobytes()


def test_training_is_deterministic():
    train, val, _ = synthesize(TWO, 1)
    cfg = TrainConfig(epochs=5, protos_per_class=2, seed=4, add_on=True, batch_size=7)
    a, ha = train_phase1(train, cfg, val)
    b, hb = train_phase1(train, cfg, val)
    assert ha == hb
    assert a.prototypes.tobytes() == b.prototypes.tobytes()


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"epochs": 1, "nope": 2})
    with pytest.raises(ValidationError):
        TrainConfig(epochs=-1).validate()


def test_finetune_head_only_touches_head():
    train, _, _ = synthesize(TWO, 2)
    cfg = TrainConfig(epochs=3, protos_per_class=2, seed=0, add_on=True)
    m, _ = train_phase1(train, cfg)
    f = finetune_head(m, train, 10, cfg)
    assert f.prototypes.tobytes() == m.prototypes.tobytes()
    for k in ("W1", "b1", "W2", "b2"):
        assert getattr(f.add_on, k).tobytes() == getattr(m.add_on, k).tobytes()
    assert f.head.tobytes() != m.head.tobytes()
    z = finetune_head(m, train, 0, cfg)
    assert z.head.tobytes() == m.head.tobytes()
    with pytest.raises(ValidationError):
        finetune(m, train, 1, cfg, strategy="xyz")


def test_finetune_after_merge_recovers():
    from ppshare.prune import merge_pair
    spec = SynthSpec(K=4, D=6, H=2, W=2, images_per_class=15, clusters_per_class=2,
                     shared_clusters=1, cluster_sigma=0.2)
    train, _, _ = synthesize(spec, 0)
    cfg = TrainConfig(epochs=30, protos_per_class=3, seed=0, lr_head=1e-2, lr_protos=1e-2)
    m, _ = train_phase1(train, cfg)
    merged = merge_pair(merge_pair(m, 1, 4), 7, 10)
    before = accuracy(merged, train)
    after = accuracy(finetune_head(merged, train, 25, TrainConfig(lr_head=1e-3)), train)
    assert after >= before


def test_projection_snaps_to_patches(rng):
    data = FeatureDataset(rng.normal(size=(3, 4, 2)).astype(np.float32), [0, 1, 0], 2, 2, 2)
    m = Model(rng.normal(size=(3, 2)), [{0}, {1}, {1}], np.eye(2, 3))
    pm = project_prototypes(m, data)
    X = data.features64().reshape(-1, 2)
    for p in range(3):
        assert nearest_patch(pm, data, p)[2] == 0.0
        j = np.argmin(((X - m.prototypes[p]) ** 2).sum(1))
        np.testing.assert_array_equal(pm.prototypes[p], X[j])
    again = project_prototypes(pm, data)
    assert again.prototypes.tobytes() == pm.prototypes.tobytes()
    assert get_params(pm, ("head",))["head"].tobytes() == m.head.tobytes()
