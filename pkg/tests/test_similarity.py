import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppshare.errors import ValidationError
from ppshare.features import FeatureDataset
from ppshare.model import Model, init_head, patch_similarity
from ppshare.similarity import (ResponseProfile, dd_denominators, dd_similarity, di_distances,
                                di_similarity, normalized_distance_histogram, rank_pairs,
                                response_profile, write_histogram_csv)

from constructions import mirrored_instance


def random_instance(seed, M=None, N=None):
    rng = np.random.default_rng(seed)
    M = M or int(rng.integers(2, 9))
    N = N or int(rng.integers(1, 17))
    K = 2
    data = FeatureDataset(rng.normal(size=(N, 4, 3)).astype(np.float32), np.arange(N) % K, K, 2, 2)
    assigned = [{i % K} for i in range(M)]
    return Model(rng.normal(size=(M, 3)), assigned, init_head(K, assigned)), data


def brute_profile(m, data):
    X = data.features64()
    return np.array([[patch_similarity(X[x], m.prototypes[i]) for i in range(m.M)] for x in range(data.N)])


@pytest.mark.parametrize("seed", range(10))
def test_profile_and_rankings_match_brute_force(seed):
    m, data = random_instance(seed)
    prof = response_profile(m, data)
    G = brute_profile(m, data)
    np.testing.assert_allclose(prof.G, G, rtol=1e-12, atol=1e-12)
    pairs = [(i, j) for i in range(m.M) for j in range(i + 1, m.M)]
    den = {(i, j): sum((G[x, i] - G[x, j]) ** 2 for x in range(data.N)) for i, j in pairs}
    dist = {(i, j): float(np.sqrt(sum((m.prototypes[i, d] - m.prototypes[j, d]) ** 2 for d in range(3))))
            for i, j in pairs}
    for strat, key in (("dd", den), ("di", dist)):
        r = rank_pairs(m, data, strat)
        assert [tuple(p) for p in r.pairs.tolist()] == sorted(pairs, key=lambda q: (key[q], q))
        np.testing.assert_allclose(r.keys, [key[tuple(p)] for p in r.pairs.tolist()], rtol=1e-12, atol=1e-12)


def test_profile_bounds_and_duplicates(rng):
    m, data = random_instance(3, M=4, N=6)
    m.prototypes[3] = m.prototypes[1]
    G = response_profile(m, data).G
    np.testing.assert_array_equal(G[:, 1], G[:, 3])
    assert np.all(G <= np.log(1 / 1e-4) + 1e-12) and np.all(G > 0)


def test_dd_identical_columns_rank_first():
    m, data = random_instance(5, M=5, N=8)
    m.prototypes[4] = m.prototypes[2]
    prof = response_profile(m, data)
    assert dd_similarity(prof, 2, 4) == (0.0, np.inf)
    r = rank_pairs(m, data, "dd", profile=prof)
    assert tuple(r.pairs[0]) == (2, 4) and r.keys[0] == 0.0 and r.similarity[0] == np.inf


def test_dd_direct_substitution():
    prof = ResponseProfile(np.array([[1.0, 0.5], [0.0, 0.5]]), np.arange(2), np.arange(2))
    den, sim = dd_similarity(prof, 0, 1)
    assert den == 0.5 and sim == 2.0
    np.testing.assert_array_equal(dd_denominators(prof), [[0.0, 0.5], [0.5, 0.0]])


def test_mirrored_pair_dd_first_di_low():
    m, data, (a, b) = mirrored_instance()
    prof = response_profile(m, data)
    np.testing.assert_array_equal(prof.G[:, a], prof.G[:, b])
    assert dd_similarity(prof, a, b)[1] == np.inf
    assert di_similarity(m.prototypes[a], m.prototypes[b]) == pytest.approx(1 / 6.0)
    dd = rank_pairs(m, data, "dd", profile=prof)
    di = rank_pairs(m, data, "di")
    assert tuple(dd.pairs[0]) == (a, b)
    pos = [tuple(p) for p in di.pairs.tolist()].index((a, b))
    assert pos > len(di) / 2


def test_di_examples(rng):
    assert di_similarity([1.0, 2.0], [1.0, 2.0]) == np.inf
    assert di_similarity([0.0], [2.0]) == 0.5
    p, q = rng.normal(size=5), rng.normal(size=5)
    naive = 0.0
    for a, b in zip(p, q):
        naive += (a - b) ** 2
    assert di_similarity(p, q) == pytest.approx(1 / naive ** 0.5, rel=1e-14)


def test_rank_pairs_counts_and_errors():
    m, data = random_instance(1, M=3, N=4)
    assert len(rank_pairs(m, data, "di")) == 3
    with pytest.raises(ValidationError):
        rank_pairs(m, data, "bogus")
    single = Model([[0.0, 0.0, 0.0]], [{0}], [[1.0]])
    with pytest.raises(ValidationError):
        rank_pairs(single, data, "di")
    with pytest.raises(ValidationError):
        rank_pairs(m, None, "dd")


def test_random_ranking_reproducible():
    m, data = random_instance(2, M=7, N=4)
    a = rank_pairs(m, data, "random", seed=11)
    b = rank_pairs(m, data, "random", seed=11)
    c = rank_pairs(m, data, "random", seed=12)
    np.testing.assert_array_equal(a.pairs, b.pairs)
    assert not np.array_equal(a.pairs, c.pairs)
    assert sorted(map(tuple, a.pairs.tolist())) == sorted(map(tuple, c.pairs.tolist()))


def test_inter_class_only_filters_shared_pairs():
    m, data = random_instance(4, M=6, N=4)
    r = rank_pairs(m, data, "di", inter_class_only=True)
    for i, j in r.pairs.tolist():
        assert not (m.assigned[m.index_of(i)] & m.assigned[m.index_of(j)])
    assert len(r) == 9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_similarities_symmetric_and_isometry_invariant(seed):
    m, data = random_instance(seed % 1000, M=4, N=5)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    shift = rng.normal(size=3)
    prof = response_profile(m, data)
    D1 = dd_denominators(prof)
    np.testing.assert_array_equal(D1, D1.T)
    rot = Model(m.prototypes @ Q.T + shift, m.assigned, m.head)
    rdata = FeatureDataset((data.features64() @ Q.T + shift), data.labels, 2, 2, 2)
    # float32 storage of rotated patches perturbs at ~1e-7
    np.testing.assert_allclose(dd_denominators(response_profile(rot, rdata)), D1, rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(di_distances(rot), di_distances(m), rtol=1e-9, atol=1e-9)


def test_histogram_examples(tmp_path, rng):
    counts, edges, z = normalized_distance_histogram([0.0, 2.0], bins=2)
    np.testing.assert_array_equal(z, [-1.0, 1.0])
    assert counts.tolist() == [1, 1]
    with pytest.raises(ValidationError):
        normalized_distance_histogram([3.0, 3.0, 3.0])
    with pytest.raises(ValidationError):
        normalized_distance_histogram([1.0])
    v = rng.exponential(size=200)
    counts, edges, z = normalized_distance_histogram(v, bins=7)
    mu = sum(v) / len(v)
    sd = (sum((x - mu) ** 2 for x in v) / len(v)) ** 0.5
    zz = [(x - mu) / sd for x in v]
    lo, hi = min(zz), max(zz)
    width = (hi - lo) / 7
    naive = [0] * 7
    for x in zz:
        naive[min(int((x - lo) / width), 6)] += 1
    assert counts.tolist() == naive
    np.testing.assert_allclose(z, zz, rtol=1e-12, atol=1e-12)
    write_histogram_csv(counts, edges, tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert sum(int(r["count"]) for r in rows) == 200


def test_ranking_export(tmp_path):
    m, data = random_instance(6, M=4, N=3)
    r = rank_pairs(m, data, "dd")
    r.write_csv(tmp_path / "r.csv")
    r.write_json(tmp_path / "r.json")
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 6 and float(rows[0]["denominator"]) == r.keys[0]
