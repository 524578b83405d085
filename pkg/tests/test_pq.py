import logging

import numpy as np
import pytest

from blockann import pq
from blockann.dataset import Metric, VectorDataset
from blockann.pq import (
    PQCodebook,
    approx_distance,
    approx_distances,
    choose_m,
    encode_all,
    load_pq,
    save_pq,
    subspace_dims,
    train_for_dataset,
    train_pq,
)


@pytest.fixture(scope="module")
def gaussian():
    return np.random.default_rng(0).normal(size=(10_000, 64)).astype(np.float32)


def test_choose_m_rule():
    assert choose_m(10**6, 128, 16 * 10**6) == 16
    assert choose_m(1000, 128, 10**12) == 128
    assert choose_m(33_000_000, 128, int(0.5 * 2**30)) == 16
    assert choose_m(10, 8, 10) == 1
    with pytest.raises(ValueError):
        choose_m(100, 8, 99)


def test_uneven_subspace_split():
    assert subspace_dims(10, 4).tolist() == [3, 3, 2, 2]
    assert subspace_dims(128, 16).tolist() == [8] * 16
    assert subspace_dims(7, 7).tolist() == [1] * 7
    with pytest.raises(ValueError):
        subspace_dims(4, 5)


def test_distinct_training_set_is_quantized_exactly():
    x = np.random.default_rng(1).normal(size=(256, 8)).astype(np.float32)
    cb = train_pq(x, 2, seed=3)
    assert np.allclose(cb.decode(cb.encode(x)), x, atol=1e-6)


def test_identical_training_vectors_warn_and_share_one_code(caplog):
    x = np.ones((300, 8), dtype=np.float32)
    with caplog.at_level(logging.WARNING, logger="blockann.pq"):
        cb = train_pq(x, 4)
    assert "identical" in caplog.text
    codes = cb.encode(x)
    assert (codes == codes[0]).all()


def test_small_training_set_is_padded_with_warning(caplog):
    x = np.random.default_rng(2).normal(size=(40, 8)).astype(np.float32)
    with caplog.at_level(logging.WARNING, logger="blockann.pq"):
        cb = train_pq(x, 2)
    assert "padding" in caplog.text
    assert all(c.shape == (256, 4) for c in cb.centroids)


def test_reconstruction_error_falls_as_m_grows(gaussian):
    errs = []
    for m in (16, 32):
        cb = train_pq(gaussian, m, seed=0)
        errs.append(float(((cb.decode(cb.encode(gaussian)) - gaussian) ** 2).sum(axis=1).mean()))
    assert errs[1] < errs[0]


def test_training_is_deterministic(gaussian):
    a = train_pq(gaussian[:2000], 8, seed=5)
    b = train_pq(gaussian[:2000], 8, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.centroids, b.centroids))


def test_centroid_vectors_encode_to_their_own_index():
    x = np.random.default_rng(3).normal(size=(1000, 12)).astype(np.float32)
    cb = train_pq(x, 3)
    c = 77
    v = np.concatenate([cb.centroids[s][c] for s in range(3)])
    assert cb.encode(v).tolist() == [[c, c, c]]


def test_ties_go_to_the_lowest_centroid():
    cents = [np.zeros((256, 2), dtype=np.float32)]
    cb = PQCodebook(np.array([2]), cents)
    assert cb.encode(np.array([1.0, 1.0])).tolist() == [[0]]


def test_single_subspace_zero_distance():
    x = np.random.default_rng(4).normal(size=(500, 4)).astype(np.float32)
    cb = train_pq(x, 1)
    q = cb.centroids[0][9].astype(np.float64)
    assert approx_distance(cb.distance_table(q), [9]) == pytest.approx(0.0, abs=1e-9)


def test_table_distance_equals_distance_to_decoded_vector(gaussian):
    cb = train_pq(gaussian[:3000], 16)
    codes = cb.encode(gaussian[:3000])
    rng = np.random.default_rng(6)
    for _ in range(20):
        q = rng.normal(size=64)
        table = cb.distance_table(q)
        sel = rng.integers(0, 3000, size=50)
        exact = ((cb.decode(codes[sel]).astype(np.float64) - q) ** 2).sum(axis=1)
        assert np.allclose(approx_distances(table, codes[sel]), exact, rtol=1e-4)
        assert approx_distance(table, codes[sel[0]]) == pytest.approx(exact[0], rel=1e-4)


def test_inner_product_table_is_negated_dot():
    x = np.random.default_rng(7).normal(size=(600, 16)).astype(np.float32)
    cb = train_pq(x, 4, metric=Metric.IP)
    codes = cb.encode(x[:20])
    q = np.random.default_rng(8).normal(size=16)
    got = approx_distances(cb.distance_table(q), codes)
    assert np.allclose(got, -(cb.decode(codes).astype(np.float64) @ q), rtol=1e-6, atol=1e-9)


def test_own_code_is_usually_nearest():
    x = np.random.default_rng(9).normal(size=(1000, 64)).astype(np.float32)
    cb = train_pq(x, 16)
    codes = cb.encode(x)
    wins = 0
    for i in range(0, 1000, 10):
        d = approx_distances(cb.distance_table(x[i]), codes)
        others = np.delete(d, i)
        wins += d[i] <= others.min()
    assert wins / 100 >= 0.95


def test_dimension_mismatch_is_rejected(gaussian):
    cb = train_pq(gaussian[:1000], 8)
    with pytest.raises(ValueError):
        cb.encode(np.zeros((2, 63)))
    with pytest.raises(ValueError):
        cb.distance_table(np.zeros(65))


def test_training_sample_is_capped(monkeypatch):
    seen = {}
    real = pq.train_pq

    def spy(training, m, iterations=12, seed=0, metric=Metric.L2):
        seen["n"] = training.n
        return real(training, m, 1, seed, metric)

    monkeypatch.setattr(pq, "TRAIN_CAP", 500)
    monkeypatch.setattr(pq, "train_pq", spy)
    ds = VectorDataset(np.random.default_rng(0).integers(0, 255, size=(2000, 16)).astype(np.uint8))
    train_for_dataset(ds, 4)
    assert seen["n"] == 500


def test_pq_file_round_trip(tmp_path):
    ds = VectorDataset(np.random.default_rng(1).integers(0, 255, size=(700, 20)).astype(np.uint8))
    cb = train_for_dataset(ds, 6)
    codes = encode_all(ds, cb)
    save_pq(tmp_path / "x.pq", cb, codes)
    cb2, codes2 = load_pq(tmp_path / "x.pq")
    assert np.array_equal(codes, codes2)
    assert cb2.dims.tolist() == cb.dims.tolist() == [4, 4, 3, 3, 3, 3]
    assert all(np.array_equal(a, b) for a, b in zip(cb.centroids, cb2.centroids))
    assert cb2.metric is cb.metric
    (tmp_path / "y.pq").write_bytes(b"junkjunkjunkjunkjunkjunkjunk")
    with pytest.raises(ValueError):
        load_pq(tmp_path / "y.pq")
