"""Accuracy metrics, the query harness and index cost accounting."""

from __future__ import annotations

import json
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .engine import SearchEngine, SearchParams, SearchStats


def _rows(x) -> list:
    if hasattr(x, "ids"):
        return list(x.ids)
    return list(x)


def eval_recall(results, truth, k: int) -> tuple[float, np.ndarray]:
    """Mean and per-query |found & true| / k, comparing the first k ids of each side as sets."""
    results, truth = _rows(results), _rows(truth)
    if len(results) != len(truth):
        raise ValueError(f"{len(results)} result rows vs {len(truth)} ground-truth rows")
    per = np.empty(len(truth))
    for i, (got, want) in enumerate(zip(results, truth)):
        want = np.asarray(want)[:k]
        if want.size < k:
            raise ValueError(f"ground truth row {i} has {want.size} ids, need {k}")
        per[i] = len(set(np.asarray(got)[:k].tolist()) & set(want.tolist())) / k
    return (float(per.mean()) if per.size else 0.0), per


@dataclass
class APResult:
    value: float
    per_query: np.ndarray
    excluded: int


def eval_ap(results, truth, distances=None, radius: float | None = None) -> APResult:
    """Average precision of range results: |found & true| / |true| per query.

    When ``distances`` and ``radius`` are given every returned distance must be
    within the radius.  A query with an empty true set scores 1.0 if its result
    is empty too; otherwise it is left out and counted in ``excluded``.
    """
    results, truth = _rows(results), _rows(truth)
    if len(results) != len(truth):
        raise ValueError(f"{len(results)} result rows vs {len(truth)} ground-truth rows")
    if distances is not None and radius is not None:
        for i, d in enumerate(distances):
            d = np.asarray(d)
            if d.size and d.max() > radius:
                raise ValueError(f"query {i}: returned distance {d.max()} exceeds radius {radius}")
    scores, excluded = [], 0
    for got, want in zip(results, truth):
        got, want = set(np.asarray(got).tolist()), set(np.asarray(want).tolist())
        if not want:
            if got:
                excluded += 1
            else:
                scores.append(1.0)
            continue
        scores.append(len(got & want) / len(want))
    per = np.array(scores)
    return APResult(float(per.mean()) if per.size else 0.0, per, excluded)


@dataclass
class EvalReport:
    mode: str
    accuracy: float | None
    qps: float
    wall_seconds: float
    queries: int
    mean_latency_ms: float
    mean_ios: float
    mean_hops: float
    mean_xi: float
    t_io_frac: float
    t_comp_frac: float
    qps_mean: float
    repetitions: list = field(default_factory=list)
    per_query: list = field(default_factory=list)
    excluded: int = 0
    direct_io: bool = True
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


@dataclass
class QueryRun:
    ids: list
    distances: list
    stats: list


def run_queries(engine: SearchEngine, queries: np.ndarray, params: SearchParams, threads: int = 1,
                seed: int = 0, radius: float | None = None) -> tuple[QueryRun, float]:
    """Run every query once in a seeded random order; returns results (in query order) and wall seconds."""
    nq = len(queries)
    order = np.random.default_rng(seed).permutation(nq)
    ids, dists, stats = [None] * nq, [None] * nq, [None] * nq

    def one(i: int) -> None:
        if radius is None:
            r = engine.search(queries[i], params)
        else:
            r = engine.search_range(queries[i], radius, params)
        ids[i], dists[i], stats[i] = r

    start = time.perf_counter()
    if threads <= 1:
        for i in order:
            one(int(i))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, order.tolist()))
    wall = time.perf_counter() - start
    return QueryRun(ids, dists, stats), wall


def summarize(stats: list[SearchStats]) -> dict:
    total = sum(s.t_total for s in stats) or 1.0
    return {
        "mean_latency_ms": 1000.0 * float(np.mean([s.t_total for s in stats])),
        "mean_ios": float(np.mean([s.io_count for s in stats])),
        "mean_hops": float(np.mean([s.hops for s in stats])),
        "mean_xi": float(np.mean([s.xi for s in stats])),
        "t_io_frac": sum(s.t_io for s in stats) / total,
        "t_comp_frac": sum(s.t_comp for s in stats) / total,
    }


def run_benchmark(engine: SearchEngine, queries: np.ndarray, params: SearchParams, truth=None, threads: int = 1,
                  repetitions: int = 3, seed: int = 0, radius: float | None = None) -> tuple[EvalReport, QueryRun]:
    """Repeat the query batch; QPS is taken from the median-wall repetition (the mean is reported too)."""
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    runs = [run_queries(engine, queries, params, threads, seed + rep, radius) for rep in range(repetitions)]
    walls = [w for _, w in runs]
    median_wall = statistics.median_low(walls)
    run = runs[walls.index(median_wall)][0]
    nq = len(queries)
    accuracy, per, excluded = None, [], 0
    mode = "knn" if radius is None else "range"
    if truth is not None:
        if radius is None:
            accuracy, per = eval_recall(run.ids, truth, params.k)
        else:
            ap = eval_ap(run.ids, truth, run.distances, radius)
            accuracy, per, excluded = ap.value, ap.per_query, ap.excluded
    p = asdict(params)
    if radius is not None:
        p["radius"] = radius
    report = EvalReport(
        mode=mode,
        accuracy=accuracy,
        qps=nq / median_wall,
        wall_seconds=median_wall,
        queries=nq,
        qps_mean=float(np.mean([nq / w for w in walls])),
        repetitions=[nq / w for w in walls],
        per_query=[float(x) for x in per],
        excluded=excluded,
        direct_io=engine.index.direct_io,
        params=p,
        **summarize(run.stats),
    )
    return report, run


# ---------------------------------------------------------------------------
# matched-accuracy comparisons
# ---------------------------------------------------------------------------


@dataclass
class SweepPoint:
    gamma: int
    recall: float
    mean_ios: float
    mean_hops: float
    mean_xi: float
    mean_latency_ms: float


def sweep_gamma(engine: SearchEngine, queries, truth, gammas, params: SearchParams = SearchParams()) -> list[SweepPoint]:
    points = []
    for g in gammas:
        p = replace(params, gamma=int(g))
        run, _ = run_queries(engine, queries, p)
        recall, _ = eval_recall(run.ids, truth, p.k)
        s = summarize(run.stats)
        points.append(SweepPoint(int(g), recall, s["mean_ios"], s["mean_hops"], s["mean_xi"], s["mean_latency_ms"]))
    return points


def value_at_recall(points: list[SweepPoint], target: float, attr: str = "mean_ios") -> float | None:
    """Linear interpolation of ``attr`` at ``target`` recall between the first bracketing pair.

    Returns None when the sweep never reaches the target or starts above it.
    """
    pts = sorted(points, key=lambda p: p.gamma)
    for a, b in zip(pts, pts[1:]):
        if a.recall <= target <= b.recall:
            if b.recall == a.recall:
                return float(getattr(a, attr))
            t = (target - a.recall) / (b.recall - a.recall)
            return float(getattr(a, attr) + t * (getattr(b, attr) - getattr(a, attr)))
    return None


# ---------------------------------------------------------------------------
# index cost
# ---------------------------------------------------------------------------


@dataclass
class IndexCostReport:
    t_disk_graph: float
    t_shuffling: float
    t_memory_graph: float
    t_pq: float
    mem_nav_bytes: int
    mem_map_bytes: int
    mem_pq_bytes: int
    disk_bytes: int

    @property
    def total_seconds(self) -> float:
        return self.t_disk_graph + self.t_shuffling + self.t_memory_graph + self.t_pq

    @property
    def total_memory_bytes(self) -> int:
        return self.mem_nav_bytes + self.mem_map_bytes + self.mem_pq_bytes

    @property
    def shuffle_fraction(self) -> float:
        return self.t_shuffling / self.t_disk_graph if self.t_disk_graph > 0 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total_seconds"] = self.total_seconds
        d["total_memory_bytes"] = self.total_memory_bytes
        return d


def report_index_costs(timers: dict, index=None, nav=None, codebook=None, codes=None) -> IndexCostReport:
    """Collect build timings (seconds) and in-memory / on-disk sizes.

    ``timers`` may hold ``disk_graph``, ``shuffling``, ``memory_graph`` and
    ``pq``; a missing phase counts as zero.
    """
    nav_bytes = 0
    if nav is not None:
        g = nav.graph
        nav_bytes = nav.vectors.values.nbytes + g.adjacency.nbytes + g.degrees.nbytes + 4 * nav.id_map.size
    map_bytes = 8 * index.n if index is not None else 0
    pq_bytes = 0
    if codebook is not None:
        pq_bytes += sum(c.nbytes for c in codebook.centroids)
    if codes is not None:
        pq_bytes += codes.nbytes
    disk = 0
    if index is not None:
        disk = os.path.getsize(index.prefix + ".idx")
    return IndexCostReport(
        float(timers.get("disk_graph", 0.0)),
        float(timers.get("shuffling", 0.0)),
        float(timers.get("memory_graph", 0.0)),
        float(timers.get("pq", 0.0)),
        int(nav_bytes),
        int(map_bytes),
        int(pq_bytes),
        int(disk),
    )
