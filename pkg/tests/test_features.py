import struct

import numpy as np
import pytest

from ppshare.errors import CorruptionError, FormatError, ValidationError
from ppshare.features import FeatureDataset, SynthSpec, load_dataset, save_dataset, synthesize

from conftest import random_dataset


def write_raw(path, n, k, h, w, d, records, magic=b"PPSF", version=1):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4s6I", magic, version, n, k, h, w, d))
        for label, values in records:
            fh.write(struct.pack("<I", label))
            fh.write(struct.pack(f"<{len(values)}f", *values))


def test_smallest_legal_file(tmp_path):
    p = tmp_path / "tiny.pfm"
    write_raw(p, 2, 2, 1, 1, 2, [(0, [1.0, 2.0]), (1, [3.0, 4.0])])
    d = load_dataset(p)
    assert d.N == 2 and d.H == d.W == 1 and d.D == 2 and d.K == 2
    np.testing.assert_array_equal(d.labels, [0, 1])
    np.testing.assert_array_equal(d.patches[1, 0], [3.0, 4.0])


def test_truncated_payload(tmp_path):
    p = tmp_path / "short.pfm"
    write_raw(p, 3, 2, 1, 1, 2, [(0, [1.0, 2.0]), (1, [3.0, 4.0])])
    with pytest.raises(CorruptionError):
        load_dataset(p)


def test_bad_magic_and_version(tmp_path):
    p = tmp_path / "bad.pfm"
    write_raw(p, 1, 1, 1, 1, 1, [(0, [1.0])], magic=b"XXXX")
    with pytest.raises(FormatError):
        load_dataset(p)
    write_raw(p, 1, 1, 1, 1, 1, [(0, [1.0])], version=2)
    with pytest.raises(FormatError):
        load_dataset(p)


def test_label_out_of_range(tmp_path):
    p = tmp_path / "lbl.pfm"
    write_raw(p, 1, 2, 1, 1, 1, [(2, [1.0])])
    with pytest.raises(ValidationError):
        load_dataset(p)


def test_round_trip_bitwise(tmp_path, rng):
    d = random_dataset(rng, N=5, H=2, W=3, D=4, K=3)
    p = tmp_path / "d.pfm"
    save_dataset(d, p)
    e = load_dataset(p)
    assert e.patches.tobytes() == d.patches.tobytes()
    np.testing.assert_array_equal(e.labels, d.labels)
    assert (e.K, e.H, e.W) == (d.K, d.H, d.W)
    save_dataset(e, tmp_path / "e.pfm")
    assert (tmp_path / "e.pfm").read_bytes() == p.read_bytes()


def test_layout_is_label_then_row_major_features(tmp_path):
    patches = np.arange(2 * 2 * 3, dtype=np.float32).reshape(1, 4, 3)[:, :, :]
    d = FeatureDataset(patches.reshape(1, 4, 3), [1], 2, 2, 2)
    p = tmp_path / "l.pfm"
    save_dataset(d, p)
    raw = p.read_bytes()
    assert raw[:4] == b"PPSF"
    assert struct.unpack_from("<6I", raw, 4) == (1, 1, 2, 2, 2, 3)
    assert struct.unpack_from("<I", raw, 28) == (1,)
    assert struct.unpack_from("<12f", raw, 32) == tuple(float(v) for v in range(12))


def test_empty_dataset_header_only(tmp_path):
    d = FeatureDataset(np.zeros((0, 4, 3), np.float32), np.zeros(0, int), 2, 2, 2)
    p = tmp_path / "empty.pfm"
    save_dataset(d, p)
    assert p.stat().st_size == 28
    e = load_dataset(p)
    assert e.N == 0 and e.D == 3


def test_full_sized_grid_round_trip(tmp_path, rng):
    patches = rng.normal(size=(2, 49, 256)).astype(np.float32)
    d = FeatureDataset(patches, [0, 1], 2, 7, 7)
    save_dataset(d, tmp_path / "big.pfm")
    e = load_dataset(tmp_path / "big.pfm")
    assert e.patches.tobytes() == d.patches.tobytes()
    assert (e.H, e.W, e.D) == (7, 7, 256)


def test_ragged_and_nonfinite_rejected():
    with pytest.raises(ValidationError):
        FeatureDataset(np.zeros((1, 5, 2)), [0], 1, 2, 2)
    bad = np.zeros((1, 4, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        FeatureDataset(bad, [0], 1, 2, 2)


SPEC = SynthSpec(K=2, D=3, H=2, W=2, images_per_class=5, clusters_per_class=1,
                 shared_clusters=1, cluster_sigma=0.01)


def test_synth_shared_cluster_reaches_both_classes():
    train, val, plan = synthesize(SPEC, 0)
    assert plan["shared"][0]["classes"] == [0, 1]
    shared_mean = np.asarray(plan["means"][plan["shared"][0]["cluster"]])
    X = train.features64()
    for k in (0, 1):
        d = np.linalg.norm(X[train.labels == k] - shared_mean, axis=-1)
        assert (d < 0.1).any()


def test_synth_deterministic_and_splits():
    a = synthesize(SPEC, 3)
    b = synthesize(SPEC, 3)
    assert a[0].patches.tobytes() == b[0].patches.tobytes()
    assert a[1].patches.tobytes() == b[1].patches.tobytes()
    assert a[2] == b[2]
    c = synthesize(SPEC, 4)
    assert c[0].patches.tobytes() != a[0].patches.tobytes()
    for split in a[:2]:
        split.validate(require_all_classes=True)


def test_synth_rejects_bad_spec():
    with pytest.raises(ValidationError):
        synthesize(SynthSpec(1, 3, 1, 1, 2, 1, 0, 0.1), 0)
    with pytest.raises(ValidationError):
        synthesize(SynthSpec(2, 0, 1, 1, 2, 1, 0, 0.1), 0)
    with pytest.raises(ValidationError):
        SynthSpec.from_dict({"K": 2, "bogus": 1})


def planted_oracle(data, plan):
    """Vote each patch for the classes owning its nearest planted cluster mean."""
    means = np.asarray(plan["means"])
    owners = {}
    for k, cl in plan["private"].items():
        for c in cl:
            owners.setdefault(c, []).append(int(k))
    for s in plan["shared"]:
        owners.setdefault(s["cluster"], []).extend(s["classes"])
    preds = []
    for img in data.features64():
        votes = np.zeros(data.K)
        nearest = np.argmin(((img[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
        for c in nearest:
            votes[owners[int(c)]] += 1
        preds.append(int(np.argmax(votes)))
    return np.asarray(preds)


def test_planted_cluster_oracle_accuracy():
    spec = SynthSpec(K=10, D=16, H=3, W=3, images_per_class=40, clusters_per_class=4,
                     shared_clusters=3, cluster_sigma=0.2)
    train, val, plan = synthesize(spec, 0)
    acc = np.mean(planted_oracle(train, plan) == train.labels)
    assert acc > 0.95
