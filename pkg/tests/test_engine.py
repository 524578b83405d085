from dataclasses import replace

import numpy as np
import pytest

from blockann.bench import eval_ap, eval_recall, run_queries
from blockann.dataset import Metric, VectorDataset, brute_force_knn, brute_force_range, distances_to
from blockann.diskindex import DiskIndex, write_index
from blockann.engine import CandidateList, SearchEngine, SearchParams
from blockann.graph import BuildParams, build_navigation, build_vamana
from blockann.layout import ShuffleParams, layout_geometry, shuffle
from blockann.pq import encode_all, train_for_dataset


class ReadLog:
    """Wraps an index so every block read is recorded."""

    def __init__(self, index):
        self.index = index
        self.blocks = []
        self._real = index.read_block
        index.read_block = self._read

    def _read(self, block_id):
        self.blocks.append(block_id)
        return self._real(block_id)

    def restore(self):
        self.index.read_block = self._real


def test_params_validation():
    SearchParams(sigma=0.0)
    SearchParams(sigma=1.0)
    for bad in (dict(sigma=1.5), dict(sigma=-0.1), dict(gamma=5, k=10), dict(phi=0.0), dict(phi=1.5),
                dict(entry_mode="x"), dict(beam_width=0)):
        with pytest.raises(ValueError):
            SearchParams(**bad)


def test_pruned_counts():
    assert SearchParams(sigma=0.3).pruned_count(16) == 5
    assert SearchParams(sigma=0.3).pruned_count(12) == 4
    assert SearchParams(sigma=1.0).pruned_count(12) == 11
    assert SearchParams(sigma=0.0).pruned_count(12) == 0
    assert SearchParams(sigma=0.5).pruned_count(11) == 5


def test_candidate_list_keeps_sorted_unique_bounded():
    c = CandidateList(3)
    assert c.push(5.0, 1) == (True, None)
    assert c.push(1.0, 2) == (True, None)
    assert c.push(3.0, 3) == (True, None)
    assert c.push(2.0, 4) == (True, (5.0, 1))
    assert c.push(9.0, 5) == (False, None)
    assert [v for _, v in c.items] == [2, 4, 3]
    assert 1 not in c and 4 in c and len(c) == 3
    visited = np.zeros(10, dtype=bool)
    visited[2] = True
    assert c.top_unvisited(visited, 2) == [4, 3]
    assert c.top_unvisited(visited, 2, exclude={4}) == [3]


def test_stored_vector_comes_back_first_at_distance_zero(small):
    eng = small.engine("bnf")
    for v in (0, 17, 500, 999):
        ids, dists, _ = eng.search(small.dataset.values[v], SearchParams(gamma=128))
        assert ids[0] == v and dists[0] == 0.0


def test_returned_distances_are_exact_and_sorted(small):
    eng = small.engine("bnf")
    for q in small.queries[:20]:
        ids, dists, _ = eng.search(q, SearchParams(gamma=64, k=10))
        assert np.allclose(dists, distances_to(small.dataset.values[ids], q), rtol=1e-12)
        assert np.all(np.diff(dists) >= 0) and np.unique(ids).size == ids.size


def test_small_index_recall(small):
    run, _ = run_queries(small.engine("bnf"), small.queries, SearchParams(gamma=128))
    recall, _ = eval_recall(run.ids, small.truth, 10)
    assert recall >= 0.95


def test_no_block_is_read_twice_and_counters_agree(small):
    eng = small.engine("bnf")
    log = ReadLog(eng.index)
    try:
        for q in small.queries[:30]:
            for params in (SearchParams(gamma=64), SearchParams(gamma=64, entry_mode="medoid", sigma=0.0),
                           SearchParams(gamma=64, seed_from_disk=True), SearchParams(gamma=32, beam_width=3)):
                log.blocks.clear()
                _, _, st = eng.search(q, params)
                assert len(log.blocks) == len(set(log.blocks)) == st.io_count
                assert st.hops <= st.io_count <= small.geometry.blocks
                assert st.t_total == pytest.approx(st.t_io + st.t_comp + st.t_other, abs=1e-6)
                assert 0 < st.xi <= 1
    finally:
        log.restore()


def test_in_memory_entries_cost_no_extra_reads(small):
    eng = small.engine("bnf")
    for q in small.queries[:20]:
        _, _, mem = eng.search(q, SearchParams(gamma=64))
        assert mem.io_count == mem.hops
        _, _, disk = eng.search(q, SearchParams(gamma=64, seed_from_disk=True))
        entries = eng.entry_points(q, SearchParams())
        assert disk.io_count >= len(set(eng.index.block_of[entries].tolist()))


def test_target_only_search_uses_one_slot_per_block(small):
    eng = small.engine("seq")
    for q in small.queries[:20]:
        _, _, st = eng.search(q, SearchParams(gamma=32, sigma=0.0, entry_mode="medoid"))
        assert set(st.processed) == {1}
        assert st.xi == 1 / 12


def test_full_pruning_ratio_processes_the_whole_first_block(small):
    eng = small.engine("bnf")
    entry_block = eng.index.block_of[eng.index.entry]
    occupied = int((eng.index.members[entry_block] >= 0).sum())
    _, _, st = eng.search(small.queries[0], SearchParams(gamma=32, sigma=1.0, entry_mode="medoid"))
    assert st.processed[0] == occupied
    assert all(p <= 12 for p in st.processed)


def test_block_search_raises_utilization(small):
    eng = small.engine("bnf")
    xi0 = np.mean([eng.search(q, SearchParams(gamma=32, sigma=0.0))[2].xi for q in small.queries[:20]])
    xi3 = np.mean([eng.search(q, SearchParams(gamma=32, sigma=0.3))[2].xi for q in small.queries[:20]])
    assert xi3 > xi0


def test_recall_grows_with_capacity_on_the_small_index(small):
    recalls = []
    for g in (16, 32, 64, 128):
        run, _ = run_queries(small.engine("bnf"), small.queries, SearchParams(gamma=g))
        recalls.append(eval_recall(run.ids, small.truth, 10)[0])
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))


def test_pipeline_and_beam_do_not_change_results(small):
    eng = small.engine("bnf")
    for q in small.queries[:25]:
        for sigma in (0.3, 1.0):
            for beam in (1, 2):
                p = SearchParams(gamma=48, sigma=sigma, beam_width=beam)
                a = eng.search(q, p)
                b = eng.search(q, replace(p, pipeline=True))
                assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                assert a[2].io_count == b[2].io_count


def test_threaded_runs_match_serial_runs(small):
    eng = small.engine("bnf")
    p = SearchParams(gamma=48)
    a, _ = run_queries(eng, small.queries[:40], p, threads=1)
    b, _ = run_queries(eng, small.queries[:40], p, threads=4, seed=9)
    for x, y in zip(a.ids, b.ids):
        assert np.array_equal(x, y)


def test_range_below_the_nearest_distance_is_empty(small):
    eng = small.engine("bnf")
    q = small.queries[0]
    nearest = distances_to(small.dataset.values, q).min()
    ids, dists, st = eng.search_range(q, nearest * 0.5, SearchParams())
    assert ids.size == 0 and st.doublings == 0


def test_range_over_the_whole_set_keeps_doubling(small):
    eng = small.engine("bnf")
    ds = small.dataset
    q = small.queries[1]
    radius = float(distances_to(ds.values, q).max())
    params = SearchParams(phi=0.5, gamma0=100, max_doublings=10)
    ids, dists, st = eng.search_range(q, radius, params)
    truth = brute_force_range(ds, q, radius)[0]
    assert 1 <= st.doublings <= params.max_doublings
    assert st.final_capacity == 100 * 2**st.doublings
    assert eval_ap([ids], [truth], [dists], radius).value >= 0.9


def test_range_results_are_sound(small):
    eng = small.engine("bnf")
    ds = small.dataset
    probe = np.sort(distances_to(ds.values, small.queries[-1]))
    radius = float(probe[30])
    truths, found, dists = [], [], []
    for q in small.queries[:30]:
        ids, d, st = eng.search_range(q, radius, SearchParams(gamma0=50))
        assert np.all(d <= radius)
        assert np.all(distances_to(ds.values[ids], q) <= radius)
        assert st.doublings <= 10
        truths.append(brute_force_range(ds, q, radius)[0])
        found.append(ids)
        dists.append(d)
    assert eval_ap(found, truths, dists, radius).value >= 0.8


def test_range_radius_comes_from_params_when_omitted(small):
    eng = small.engine("bnf")
    q = small.queries[0]
    r = float(np.sort(distances_to(small.dataset.values, q))[5])
    a = eng.search_range(q, r)[0]
    b = eng.search_range(q, params=SearchParams(radius=r))[0]
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        eng.search_range(q)
    with pytest.raises(ValueError):
        eng.search_range(q, -1.0)


def test_bad_inputs_are_rejected(small):
    eng = small.engine("bnf")
    with pytest.raises(ValueError):
        eng.search(np.zeros(64), SearchParams())
    with pytest.raises(ValueError):
        eng.search(small.queries[0], SearchParams(k=2000, gamma=2000))
    with pytest.raises(ValueError):
        SearchEngine(eng.index, small.codebook, small.codes[:10], small.nav)


def test_medoid_entry_without_navigation_graph(small):
    eng = SearchEngine(small.engine("bnf").index, small.codebook, small.codes, None)
    assert eng.entry_points(small.queries[0], SearchParams()).tolist() == [eng.index.entry]
    ids, _, _ = eng.search(small.dataset.values[3], SearchParams())
    assert ids[0] == 3


def test_inner_product_index(tmp_path):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(600, 16)).astype(np.float32)
    ds = VectorDataset(x, Metric.IP)
    g = build_vamana(ds, BuildParams(max_degree=16, list_size=64))
    geo = layout_geometry(16, 4, 16, 4096, 600)
    layout, _ = shuffle(g, geo, ShuffleParams())
    write_index(ds, g, layout, tmp_path / "ip")
    cb = train_for_dataset(ds, 4)
    nav = build_navigation(ds, 0.2, BuildParams(max_degree=8, list_size=32))
    with DiskIndex(tmp_path / "ip") as index:
        eng = SearchEngine(index, cb, encode_all(ds, cb), nav)
        recalls = []
        for q in rng.normal(size=(30, 16)):
            ids, dists, _ = eng.search(q, SearchParams(gamma=64))
            want, _ = brute_force_knn(ds, q, 10)
            recalls.append(len(set(ids.tolist()) & set(want.tolist())) / 10)
            assert np.allclose(dists, -(x[ids].astype(np.float64) @ q))
        assert np.mean(recalls) >= 0.9
