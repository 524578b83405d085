"""Neighbor graphs: Vamana-style construction, greedy search, navigation graphs."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dataset import ELEM_CODES, ELEM_TYPES, Metric, VectorDataset, elem_from_code, sample_subset


@dataclass(frozen=True)
class BuildParams:
    max_degree: int = 48
    list_size: int = 128
    alpha: float = 1.2
    seed: int = 0
    two_pass: bool = True

    def __post_init__(self):
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        if self.list_size < self.max_degree:
            raise ValueError(f"list_size ({self.list_size}) must be >= max_degree ({self.max_degree})")
        if not self.alpha >= 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")


class NeighborGraph:
    """Directed graph with a hard out-degree cap and a designated entry vertex."""

    def __init__(self, adjacency: np.ndarray, degrees: np.ndarray, entry: int):
        self.adjacency = np.ascontiguousarray(adjacency, dtype=np.int32)
        self.degrees = np.ascontiguousarray(degrees, dtype=np.int32)
        self.entry = int(entry)
        if self.adjacency.shape[0] != self.degrees.shape[0]:
            raise ValueError("adjacency and degree arrays disagree on vertex count")

    @classmethod
    def from_lists(cls, lists, max_degree: int | None = None, entry: int = 0) -> "NeighborGraph":
        lists = [list(map(int, nbrs)) for nbrs in lists]
        cap = max_degree if max_degree is not None else max((len(x) for x in lists), default=0)
        adj = np.zeros((len(lists), cap), dtype=np.int32)
        deg = np.zeros(len(lists), dtype=np.int32)
        for u, nbrs in enumerate(lists):
            if len(nbrs) > cap:
                raise ValueError(f"vertex {u} has {len(nbrs)} neighbors, cap is {cap}")
            adj[u, : len(nbrs)] = nbrs
            deg[u] = len(nbrs)
        return cls(adj, deg, entry)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def max_degree(self) -> int:
        return self.adjacency.shape[1]

    def neighbors(self, u: int) -> np.ndarray:
        return self.adjacency[u, : self.degrees[u]]

    def edge_count(self) -> int:
        return int(self.degrees.sum())

    def in_neighbors(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR (indptr, ids) of incoming edges."""
        src = np.repeat(np.arange(self.n, dtype=np.int32), self.degrees)
        mask = np.arange(self.max_degree)[None, :] < self.degrees[:, None]
        dst = self.adjacency[mask]
        order = np.argsort(dst, kind="stable")
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(dst, minlength=self.n), out=indptr[1:])
        return indptr, src[order].astype(np.int32)

    def reachable_from_entry(self) -> np.ndarray:
        seen = np.zeros(self.n, dtype=bool)
        if self.n == 0:
            return seen
        seen[self.entry] = True
        queue = deque([self.entry])
        while queue:
            u = queue.popleft()
            for v in self.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    queue.append(int(v))
        return seen

    def validate(self) -> None:
        if np.any(self.degrees > self.max_degree) or np.any(self.degrees < 0):
            raise ValueError("degree out of range")
        for u in range(self.n):
            nbrs = self.neighbors(u)
            if nbrs.size and (nbrs.min() < 0 or nbrs.max() >= self.n):
                raise ValueError(f"vertex {u} has a neighbor id out of range")
            if np.any(nbrs == u):
                raise ValueError(f"vertex {u} has a self-loop")

    def copy(self) -> "NeighborGraph":
        return NeighborGraph(self.adjacency.copy(), self.degrees.copy(), self.entry)

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeighborGraph):
            return NotImplemented
        return (
            self.entry == other.entry
            and np.array_equal(self.degrees, other.degrees)
            and all(np.array_equal(self.neighbors(u), other.neighbors(u)) for u in range(self.n))
        )

    def __repr__(self) -> str:
        return f"NeighborGraph(n={self.n}, max_degree={self.max_degree}, entry={self.entry})"


def avg_out_degree(graph: NeighborGraph) -> float:
    if graph.n == 0:
        return 0.0
    return float(graph.degrees.mean())


def _as_float_rows(data) -> tuple[np.ndarray, Metric]:
    if isinstance(data, VectorDataset):
        return data.as_float32(), data.metric
    return np.ascontiguousarray(data, dtype=np.float32), Metric.L2


def greedy_vertex_search(graph: NeighborGraph, data, query, list_size: int, k: int, metric=None):
    """Best-first search from the graph's entry vertex.

    Returns ``(ids, dists, visited)``: the ``k`` closest expanded vertices and
    the ids of every vertex expanded during the search.
    """
    if not list_size >= k >= 1:
        raise ValueError(f"need list_size >= k >= 1, got list_size={list_size}, k={k}")
    if graph.n == 0:
        raise ValueError("graph is empty")
    rows, data_metric = _as_float_rows(data)
    metric = Metric(metric) if metric is not None else data_metric
    q = np.ascontiguousarray(query, dtype=np.float32)
    stamp = np.zeros(graph.n, dtype=np.int32)
    _, _, vid, vd = _kernels.greedy_search(
        graph.adjacency, graph.degrees, rows, q, graph.entry, list_size, metric.code, stamp, 1
    )
    order = np.lexsort((vid, vd))[:k]
    return vid[order].astype(np.int64), vd[order], vid.astype(np.int64)


def robust_prune(point, candidates, distances, data, max_degree: int, alpha: float, metric=Metric.L2) -> np.ndarray:
    """Alpha-prune ``candidates`` (sorted ascending by ``distances`` to ``point``)."""
    rows, _ = _as_float_rows(data)
    cand = np.ascontiguousarray(candidates, dtype=np.int32)
    cand_d = np.ascontiguousarray(distances, dtype=np.float64)
    out = np.empty(max(max_degree, 1), dtype=np.int32)
    cnt = _kernels.robust_prune(int(point), cand, cand_d, rows, float(alpha), max_degree, Metric(metric).code, out)
    return out[:cnt].astype(np.int64)


def find_medoid(dataset: VectorDataset, sample_size: int = 1000, seed: int = 0) -> int:
    """Vector minimizing the summed distance to a fixed-seed sample."""
    x = dataset.as_float32().astype(np.float64)
    if dataset.n <= sample_size:
        sample = x
    else:
        rng = np.random.default_rng(seed)
        sample = x[rng.choice(dataset.n, size=sample_size, replace=False)]
    total = sample.sum(axis=0)
    if dataset.metric is Metric.L2:
        # sum_j |x - s_j|^2 = m|x|^2 - 2 x.sum(s) + sum |s_j|^2
        scores = sample.shape[0] * np.einsum("ij,ij->i", x, x) - 2.0 * (x @ total)
    else:
        scores = -(x @ total)
    return int(np.argmin(scores))


def _repair_reachability(graph: NeighborGraph, rows: np.ndarray, metric: Metric, list_size: int) -> int:
    """Link unreachable vertices from their nearest reachable vertex; returns edges added."""
    added = 0
    stamp = np.zeros(graph.n, dtype=np.int32)
    gen = 0
    for _ in range(graph.n):
        seen = graph.reachable_from_entry()
        missing = np.flatnonzero(~seen)
        if missing.size == 0:
            return added
        for v in missing:
            gen += 1
            _, _, vid, vd = _kernels.greedy_search(
                graph.adjacency, graph.degrees, rows, rows[v], graph.entry, list_size, metric.code, stamp, gen
            )
            order = np.argsort(vd, kind="stable")
            host = -1
            for u in vid[order]:
                if u != v and graph.degrees[u] < graph.max_degree:
                    host = int(u)
                    break
            if host < 0:
                host = int(vid[order][0] if vid[order][0] != v else vid[order][1])
                graph.degrees[host] -= 1
            graph.adjacency[host, graph.degrees[host]] = v
            graph.degrees[host] += 1
            added += 1
    raise RuntimeError("could not make the graph reachable from its entry vertex")


def build_vamana(dataset: VectorDataset, params: BuildParams = BuildParams()) -> NeighborGraph:
    """Incremental Vamana build: greedy search + robust prune per vertex.

    Two passes over a seeded random permutation, the first with alpha=1 and the
    second with ``params.alpha``.  Reverse edges that overflow a vertex trigger
    a re-prune of that vertex.
    """
    if dataset.n < 2:
        raise ValueError("need at least two vectors to build a graph")
    rows = dataset.as_float32()
    n = dataset.n
    cap = min(params.max_degree, n - 1)
    adj = np.zeros((n, params.max_degree), dtype=np.int32)
    deg = np.zeros(n, dtype=np.int32)
    entry = find_medoid(dataset, seed=params.seed)
    rng = np.random.default_rng(params.seed)
    alphas = (1.0, params.alpha) if params.two_pass else (params.alpha,)
    for alpha in alphas:
        order = rng.permutation(n).astype(np.int64)
        _kernels.vamana_pass(adj, deg, rows, entry, order, params.list_size, cap, float(alpha), dataset.metric.code)
    graph = NeighborGraph(adj, deg, entry)
    _repair_reachability(graph, rows, dataset.metric, params.list_size)
    return graph


# ---------------------------------------------------------------------------
# navigation graph
# ---------------------------------------------------------------------------


@dataclass
class NavigationGraph:
    """A small in-memory graph over a uniform sample of the base vectors."""

    graph: NeighborGraph
    vectors: VectorDataset
    id_map: np.ndarray
    ratio: float

    def __post_init__(self):
        self.id_map = np.asarray(self.id_map, dtype=np.int64)
        if self.id_map.shape[0] != self.graph.n or self.vectors.n != self.graph.n:
            raise ValueError("navigation graph, vectors and id map disagree on size")

    @property
    def max_degree(self) -> int:
        return self.graph.max_degree

    def search(self, query, list_size: int = 32, count: int = 8) -> np.ndarray:
        """Sample-local rows of the ``count`` closest sampled vertices."""
        count = min(count, self.graph.n)
        list_size = max(list_size, count)
        rows, _, _ = greedy_vertex_search(self.graph, self.vectors, query, list_size, count)
        return rows

    def entry_points(self, query, list_size: int = 32, count: int = 8) -> np.ndarray:
        """Base-dataset ids of the ``count`` closest sampled vertices."""
        return self.id_map[self.search(query, list_size, count)]


def build_navigation(
    dataset: VectorDataset,
    ratio: float,
    params: BuildParams = BuildParams(max_degree=20, list_size=128),
) -> NavigationGraph:
    sample, id_map = sample_subset(dataset, ratio, seed=params.seed)
    if sample.n < 2:
        raise ValueError(f"sample of {sample.n} vectors is too small for a navigation graph")
    graph = build_vamana(sample, params)
    return NavigationGraph(graph, sample, id_map, ratio)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_GRAPH_HEADER = struct.Struct("<III")


def save_graph(path, graph: NeighborGraph) -> None:
    """Header (|V|, cap, entry) then per vertex: degree and its neighbor ids."""
    with open(path, "wb") as f:
        _write_graph(f, graph)


def _write_graph(f, graph: NeighborGraph) -> None:
    f.write(_GRAPH_HEADER.pack(graph.n, graph.max_degree, graph.entry))
    for u in range(graph.n):
        nbrs = graph.neighbors(u).astype("<u4")
        f.write(struct.pack("<I", nbrs.size))
        f.write(nbrs.tobytes())


def _read_graph(buf: memoryview, offset: int = 0) -> tuple[NeighborGraph, int]:
    n, cap, entry = _GRAPH_HEADER.unpack_from(buf, offset)
    offset += _GRAPH_HEADER.size
    adj = np.zeros((n, cap), dtype=np.int32)
    deg = np.zeros(n, dtype=np.int32)
    for u in range(n):
        (d,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if d > cap:
            raise ValueError(f"vertex {u} degree {d} exceeds cap {cap}")
        adj[u, :d] = np.frombuffer(buf, dtype="<u4", count=d, offset=offset)
        deg[u] = d
        offset += 4 * d
    return NeighborGraph(adj, deg, entry), offset


def load_graph(path) -> NeighborGraph:
    with open(path, "rb") as f:
        buf = memoryview(f.read())
    graph, _ = _read_graph(buf)
    return graph


_NAV_HEADER = struct.Struct("<8sdBBI")


def save_navigation(path, nav: NavigationGraph) -> None:
    """Graph section, then the id map (u32) and sampled vectors."""
    values = nav.vectors.values
    with open(path, "wb") as f:
        f.write(_NAV_HEADER.pack(b"BANAV001", nav.ratio, ELEM_CODES[nav.vectors.elem], nav.vectors.metric.code, nav.vectors.dim))
        _write_graph(f, nav.graph)
        f.write(nav.id_map.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(values).tobytes())


def load_navigation(path) -> NavigationGraph:
    with open(path, "rb") as f:
        buf = memoryview(f.read())
    magic, ratio, elem_code, metric_code, dim = _NAV_HEADER.unpack_from(buf, 0)
    if magic != b"BANAV001":
        raise ValueError(f"{path}: not a navigation graph file")
    graph, offset = _read_graph(buf, _NAV_HEADER.size)
    id_map = np.frombuffer(buf, dtype="<u4", count=graph.n, offset=offset).astype(np.int64)
    offset += 4 * graph.n
    dtype = ELEM_TYPES[elem_from_code(elem_code)]
    values = np.frombuffer(buf, dtype=dtype, count=graph.n * dim, offset=offset).reshape(graph.n, dim).copy()
    return NavigationGraph(graph, VectorDataset(values, Metric.from_code(metric_code)), id_map, ratio)
