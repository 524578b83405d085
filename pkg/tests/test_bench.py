import json
import os

import numpy as np
import pytest

from blockann.bench import (
    EvalReport,
    IndexCostReport,
    SweepPoint,
    eval_ap,
    eval_recall,
    report_index_costs,
    run_benchmark,
    sweep_gamma,
    value_at_recall,
)
from blockann.diskindex import DiskIndex
from blockann.engine import SearchParams


def _overlap(got, want, k):
    # independent recount with sorted merges
    a, b = sorted(got[:k]), sorted(want[:k])
    i = j = hits = 0
    while i < len(a) and j < len(b):
        if a[i] == b[j]:
            hits, i, j = hits + 1, i + 1, j + 1
        elif a[i] < b[j]:
            i += 1
        else:
            j += 1
    return hits / k


def test_recall_of_exact_and_nine_of_ten_results():
    truth = [list(range(10)), list(range(10, 20))]
    assert eval_recall(truth, truth, 10)[0] == 1.0
    one_off = [list(range(9)) + [99], list(range(10, 20))]
    mean, per = eval_recall(one_off, truth, 10)
    assert per.tolist() == [0.9, 1.0] and mean == pytest.approx(0.95)


def test_recall_matches_an_independent_count():
    rng = np.random.default_rng(0)
    truth = [rng.choice(200, 10, replace=False) for _ in range(50)]
    got = [np.concatenate([t[: rng.integers(0, 11)], rng.choice(np.arange(200, 300), 10, replace=False)])[:10]
           for t in truth]
    mean, per = eval_recall(got, truth, 10)
    want = [_overlap(g.tolist(), t.tolist(), 10) for g, t in zip(got, truth)]
    assert np.allclose(per, want) and mean == pytest.approx(np.mean(want))


def test_recall_ignores_order_and_rejects_short_truth():
    assert eval_recall([[3, 1, 2]], [[1, 2, 3]], 3)[0] == 1.0
    with pytest.raises(ValueError):
        eval_recall([[1, 2]], [[1]], 2)
    with pytest.raises(ValueError):
        eval_recall([[1]], [[1], [2]], 1)


def test_average_precision_arithmetic():
    truth = [list(range(100))]
    got = [list(range(90))]
    assert eval_ap(got, truth).value == pytest.approx(0.9)
    res = eval_ap([[], [1], [5]], [[], [], [5, 6]])
    assert res.excluded == 1
    assert res.per_query.tolist() == [1.0, 0.5]
    assert res.value == pytest.approx(0.75)


def test_average_precision_rejects_out_of_radius_distances():
    with pytest.raises(ValueError, match="exceeds radius"):
        eval_ap([[1, 2]], [[1, 2]], [[0.5, 2.5]], 2.0)
    assert eval_ap([[1, 2]], [[1, 2]], [[0.5, 2.0]], 2.0).value == 1.0


def test_metrics_are_invariant_to_query_permutation():
    rng = np.random.default_rng(3)
    truth = [rng.choice(50, 10, replace=False) for _ in range(30)]
    got = [np.concatenate([t[:5], rng.choice(np.arange(50, 60), 5, replace=False)]) for t in truth]
    got[0] = truth[0]
    perm = rng.permutation(30)
    a = eval_recall(got, truth, 10)[0]
    b = eval_recall([got[i] for i in perm], [truth[i] for i in perm], 10)[0]
    assert a == pytest.approx(b)
    assert eval_ap(got, truth).value == pytest.approx(eval_ap([got[i] for i in perm], [truth[i] for i in perm]).value)


def test_value_at_recall_interpolates_between_bracketing_points():
    pts = [SweepPoint(16, 0.80, 10.0, 8, 0.2, 1.0), SweepPoint(32, 0.90, 20.0, 15, 0.2, 2.0),
           SweepPoint(64, 0.96, 50.0, 30, 0.2, 4.0)]
    assert value_at_recall(pts, 0.85) == pytest.approx(15.0)
    assert value_at_recall(pts, 0.90) == pytest.approx(20.0)
    assert value_at_recall(pts, 0.94) == pytest.approx(40.0)
    assert value_at_recall(pts, 0.94, "mean_latency_ms") == pytest.approx(2 + 2 * 2 / 3)
    assert value_at_recall(pts, 0.99) is None
    assert value_at_recall(pts, 0.5) is None
    assert value_at_recall(list(reversed(pts)), 0.85) == pytest.approx(15.0)


def test_benchmark_report_is_consistent_and_round_trips(small):
    report, run = run_benchmark(small.engine("bnf"), small.queries, SearchParams(gamma=64), small.truth, repetitions=3)
    assert report.queries == 100 and len(report.repetitions) == 3
    assert report.qps * report.wall_seconds == pytest.approx(100)
    assert report.accuracy == pytest.approx(eval_recall(run.ids, small.truth, 10)[0])
    assert report.mean_ios == pytest.approx(np.mean([s.io_count for s in run.stats]))
    assert 0 <= report.t_io_frac + report.t_comp_frac <= 1 + 1e-9
    text = report.to_json()
    back = EvalReport.from_dict(json.loads(text))
    assert back.to_json() == text


def test_range_benchmark_reports_ap(small):
    from blockann.dataset import brute_force_range, distances_to

    r = float(np.sort(distances_to(small.dataset.values, small.queries[0]))[20])
    truth = [brute_force_range(small.dataset, q, r)[0] for q in small.queries[:20]]
    report, run = run_benchmark(small.engine("bnf"), small.queries[:20], SearchParams(), truth, repetitions=1, radius=r)
    assert report.mode == "range" and report.params["radius"] == r
    assert report.accuracy == pytest.approx(eval_ap(run.ids, truth).value)
    with pytest.raises(ValueError):
        run_benchmark(small.engine("bnf"), small.queries[:2], SearchParams(), repetitions=0)


def test_sweep_points_follow_the_grid(small):
    pts = sweep_gamma(small.engine("bnf"), small.queries[:30], small.truth[:30], [16, 64])
    assert [p.gamma for p in pts] == [16, 64]
    assert pts[1].mean_ios >= pts[0].mean_ios


def test_index_costs_add_up(small):
    with DiskIndex(small.prefix_bnf) as index:
        rep = report_index_costs(small.timers, index, small.nav, small.codebook, small.codes)
        assert rep.disk_bytes == (small.geometry.blocks + 1) * 4096 == os.path.getsize(small.prefix_bnf + ".idx")
        assert rep.mem_map_bytes == 8 * 1000
        assert rep.mem_pq_bytes == small.codes.nbytes + sum(c.nbytes for c in small.codebook.centroids)
    assert rep.total_seconds == pytest.approx(rep.t_disk_graph + rep.t_shuffling + rep.t_memory_graph + rep.t_pq)
    assert rep.total_memory_bytes == rep.mem_nav_bytes + rep.mem_map_bytes + rep.mem_pq_bytes
    d = rep.to_dict()
    assert d["total_seconds"] == rep.total_seconds
    skipped = report_index_costs({"disk_graph": 2.0})
    assert skipped.t_shuffling == 0.0 and skipped.shuffle_fraction == 0.0
    assert IndexCostReport(4.0, 1.0, 0, 0, 0, 0, 0, 0).shuffle_fraction == 0.25
