"""Query engine: block search over the disk index, routed by PQ distances.

Per query the engine keeps a bounded candidate list C (approximate
distances), an unbounded result map R (exact distances) and, for range
queries, a pool P of unvisited candidates pushed out of C.  Each hop reads
the block of the closest unvisited candidate, expands that target and the
best few unvisited co-occupants of its block, and records how much of the
block was used.
"""

from __future__ import annotations

import heapq
import math
import time
from bisect import insort
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Metric, distances_to
from .diskindex import Block, DiskIndex
from .graph import NavigationGraph
from .pq import PQCodebook, approx_distances


@dataclass
class SearchParams:
    k: int = 10
    gamma: int = 128
    sigma: float = 0.3
    entries: int = 8
    nav_list: int = 32
    beam_width: int = 1
    radius: float | None = None
    phi: float = 0.5
    gamma0: int = 100
    max_doublings: int = 10
    pipeline: bool = False
    entry_mode: str = "nav"  # or "medoid"
    # read every entry block up front instead of using the sampled vectors held in memory
    seed_from_disk: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.gamma < self.k:
            raise ValueError(f"candidate capacity {self.gamma} is smaller than k={self.k}")
        # sigma == 0 stands for the limit sigma -> 0+: no co-occupant is expanded
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")
        if not 0.0 < self.phi <= 1.0:
            raise ValueError(f"phi must lie in (0, 1], got {self.phi}")
        if self.entries < 1 or self.beam_width < 1 or self.gamma0 < 1 or self.max_doublings < 0:
            raise ValueError("entries, beam width and initial capacity must be positive")
        if self.entry_mode not in ("nav", "medoid"):
            raise ValueError(f"unknown entry mode {self.entry_mode!r}")

    def pruned_count(self, slots: int) -> int:
        """How many non-target occupants a block contributes: ceil((slots - 1) * sigma)."""
        return int(math.ceil(round((slots - 1) * self.sigma, 9)))


@dataclass
class SearchStats:
    io_count: int = 0
    hops: int = 0
    processed: list = field(default_factory=list)  # vertices expanded per explored block
    slots: int = 1
    exact_count: int = 0
    approx_count: int = 0
    t_io: float = 0.0
    t_comp: float = 0.0
    t_other: float = 0.0
    t_total: float = 0.0
    doublings: int = 0
    final_capacity: int = 0

    @property
    def xi_samples(self) -> list[float]:
        return [c / self.slots for c in self.processed]

    @property
    def xi(self) -> float:
        """Mean block utilization, computed as one exact ratio of integers."""
        if not self.processed:
            return 0.0
        return sum(self.processed) / (len(self.processed) * self.slots)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("processed")
        d["xi"] = self.xi
        d["blocks_explored"] = len(self.processed)
        return d


class CandidateList:
    """Sorted (distance, id) list with a capacity; ids are unique."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: list[tuple[float, int]] = []
        self.members: set[int] = set()

    def __len__(self) -> int:
        return len(self.items)

    def __contains__(self, vid: int) -> bool:
        return vid in self.members

    def push(self, d: float, vid: int):
        """Insert if it fits.  Returns (inserted, evicted entry or None)."""
        item = (d, vid)
        if len(self.items) >= self.capacity and item >= self.items[-1]:
            return False, None
        insort(self.items, item)
        self.members.add(vid)
        if len(self.items) > self.capacity:
            out = self.items.pop()
            self.members.discard(out[1])
            return True, out
        return True, None

    def top_unvisited(self, visited: np.ndarray, count: int, exclude=()) -> list[int]:
        picked = []
        for _, vid in self.items:
            if not visited[vid] and vid not in exclude:
                picked.append(vid)
                if len(picked) == count:
                    break
        return picked


class _Query:
    """Private state of one query."""

    def __init__(self, engine: "SearchEngine", query: np.ndarray, params: SearchParams, capacity: int, radius):
        self.engine = engine
        self.q = query
        self.params = params
        self.radius = radius
        self.stats = SearchStats(slots=engine.index.geometry.slots)
        self.visited = np.zeros(engine.index.n, dtype=bool)
        self.C = CandidateList(capacity)
        self.R: dict[int, float] = {}
        self.P: list[tuple[float, int]] = []
        self.in_pool: set[int] = set()
        self.blocks: dict[int, Block] = {}
        self.block_dists: dict[int, np.ndarray] = {}
        t = time.perf_counter()
        self.table = engine.codebook.distance_table(query)
        self.stats.t_comp += time.perf_counter() - t

    # -- bookkeeping ---------------------------------------------------------

    def _spill(self, entry) -> None:
        if self.radius is None or entry is None:
            return
        d, vid = entry
        if not self.visited[vid] and vid not in self.in_pool:
            heapq.heappush(self.P, entry)
            self.in_pool.add(vid)

    def push_candidates(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return
        fresh = ids[~self.visited[ids]]
        fresh = np.array([v for v in fresh.tolist() if v not in self.C and v not in self.in_pool], dtype=np.int64)
        if fresh.size == 0:
            return
        t = time.perf_counter()
        d = approx_distances(self.table, self.engine.codes[fresh])
        self.stats.t_comp += time.perf_counter() - t
        self.stats.approx_count += fresh.size
        for dist, vid in zip(d.tolist(), fresh.tolist()):
            inserted, evicted = self.C.push(dist, vid)
            self._spill(evicted if inserted else (dist, vid))

    def admit(self, vid: int, dist: float) -> None:
        if self.radius is None or dist <= self.radius:
            self.R[vid] = dist

    def exact(self, block: Block) -> np.ndarray:
        dists = self.block_dists.get(block.block_id)
        if dists is None:
            t = time.perf_counter()
            dists = distances_to(block.vectors, self.q, self.engine.metric)
            self.stats.t_comp += time.perf_counter() - t
            self.stats.exact_count += dists.size
            self.block_dists[block.block_id] = dists
        return dists

    # -- block access --------------------------------------------------------

    def fetch(self, block_id: int) -> Block:
        """Blocking read (or cache hit)."""
        block = self.blocks.get(block_id)
        if block is None:
            t = time.perf_counter()
            block = self.engine.index.read_block(block_id)
            self.stats.t_io += time.perf_counter() - t
            self.stats.io_count += 1
            self.blocks[block_id] = block
        return block

    def block_of(self, vid: int) -> int:
        return int(self.engine.index.block_of[vid])

    # -- search phases -------------------------------------------------------

    def seed(self, entries, vectors=None) -> None:
        """Put the entries into C and R.

        With ``vectors`` (the entries' full-precision rows already in memory)
        no block is read; otherwise each entry's block is fetched once.
        """
        entries = np.asarray(entries, dtype=np.int64)
        if vectors is not None:
            t = time.perf_counter()
            dists = distances_to(vectors, self.q, self.engine.metric)
            self.stats.t_comp += time.perf_counter() - t
            self.stats.exact_count += dists.size
            for e, d in zip(entries.tolist(), dists.tolist()):
                self.admit(e, d)
        else:
            for e in dict.fromkeys(entries.tolist()):
                block = self.fetch(self.block_of(e))
                self.admit(e, float(self.exact(block)[block.position(e)]))
        self.push_candidates(np.array(list(dict.fromkeys(entries.tolist())), dtype=np.int64))

    def explore(self, block: Block, target: int, claimed: set) -> list[int]:
        """Expand the target and choose the co-occupants to expand (B')."""
        dists = self.exact(block)
        pos = block.position(target)
        self.visited[target] = True
        self.admit(target, float(dists[pos]))
        self.push_candidates(block.neighbors_of(pos))
        quota = self.params.pruned_count(self.engine.index.geometry.slots)
        chosen: list[int] = []
        if quota:
            order = np.lexsort((block.ids, dists))
            for p in order.tolist():
                vid = int(block.ids[p])
                if vid == target or self.visited[vid] or vid in claimed:
                    continue
                chosen.append(p)
                if len(chosen) == quota:
                    break
        self.stats.processed.append(1 + len(chosen))
        return chosen

    def merge(self, block: Block, chosen: list[int]) -> None:
        dists = self.exact(block)
        for p in chosen:
            vid = int(block.ids[p])
            self.visited[vid] = True
            self.admit(vid, float(dists[p]))
            self.push_candidates(block.neighbors_of(p))

    def run(self, pool: ThreadPoolExecutor | None) -> None:
        """Explore until C holds no unvisited candidate."""
        width = self.params.beam_width
        targets = self.C.top_unvisited(self.visited, width)
        for v in targets:
            self.visited[v] = True
        pending: dict[int, object] = {}
        while targets:
            round_picks: list[tuple[Block, list[int]]] = []
            claimed: set[int] = set()
            for v in targets:
                bid = self.block_of(v)
                if bid in self.blocks:
                    block = self.blocks[bid]
                elif bid in pending:
                    t = time.perf_counter()
                    block = pending.pop(bid).result()
                    self.stats.t_io += time.perf_counter() - t
                    self.blocks[bid] = block
                else:
                    block = self.fetch(bid)
                    self.stats.hops += 1
                chosen = self.explore(block, v, claimed)
                claimed.update(int(block.ids[p]) for p in chosen)
                round_picks.append((block, chosen))
            # the next targets are fixed before the co-occupants are merged,
            # so the outcome does not depend on whether their reads overlap
            nxt = self.C.top_unvisited(self.visited, width, claimed)
            for v in nxt:
                self.visited[v] = True
                bid = self.block_of(v)
                if pool is not None and bid not in self.blocks and bid not in pending:
                    pending[bid] = pool.submit(self.engine.index.read_block, bid)
                    self.stats.io_count += 1
                    self.stats.hops += 1
            for block, chosen in round_picks:
                self.merge(block, chosen)
            if not nxt:
                nxt = self.C.top_unvisited(self.visited, width)
                for v in nxt:
                    self.visited[v] = True
            targets = nxt

    def refill(self) -> int:
        added = 0
        while self.P and len(self.C) < self.C.capacity:
            d, vid = heapq.heappop(self.P)
            self.in_pool.discard(vid)
            if self.visited[vid] or vid in self.C:
                continue
            self.C.push(d, vid)
            added += 1
        return added


class SearchEngine:
    """Bundles the disk index, PQ codes and (optionally) a navigation graph."""

    def __init__(self, index: DiskIndex, codebook: PQCodebook, codes: np.ndarray, nav: NavigationGraph | None = None):
        if codes.shape != (index.n, codebook.m):
            raise ValueError(f"PQ codes have shape {codes.shape}, expected ({index.n}, {codebook.m})")
        if codebook.dim != index.header.dim:
            raise ValueError(f"PQ dim {codebook.dim} != index dim {index.header.dim}")
        if codebook.metric is not index.metric:
            raise ValueError("PQ and index metrics differ")
        if nav is not None:
            if nav.vectors.dim != index.header.dim:
                raise ValueError("navigation graph dim does not match the index")
            if nav.id_map.size and int(nav.id_map.max()) >= index.n:
                raise ValueError("navigation graph maps outside the index")
        self.index = index
        self.codebook = codebook
        self.codes = codes
        self.nav = nav

    @property
    def metric(self) -> Metric:
        return self.index.metric

    def entry_points(self, query, params: SearchParams) -> np.ndarray:
        return self._entries(np.asarray(query, dtype=np.float64), params)[0]

    def _entries(self, query, params: SearchParams):
        """Entry ids plus their in-memory vectors (None when they must come from disk)."""
        if params.entry_mode == "medoid" or self.nav is None:
            return np.array([self.index.entry], dtype=np.int64), None
        rows = self.nav.search(query, params.nav_list, params.entries)
        ids = self.nav.id_map[rows]
        if params.seed_from_disk:
            return ids, None
        return ids, self.nav.vectors.values[rows]

    def _prepare(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.index.header.dim,):
            raise ValueError(f"query shape {q.shape} does not match index dim {self.index.header.dim}")
        return q

    def _execute(self, state: _Query, params: SearchParams, phases) -> None:
        start = time.perf_counter()
        state.seed(*self._entries(state.q, params))
        if params.pipeline:
            with ThreadPoolExecutor(max_workers=params.beam_width) as pool:
                phases(state, pool)
        else:
            phases(state, None)
        st = state.stats
        st.t_total = time.perf_counter() - start
        st.t_other = max(0.0, st.t_total - st.t_io - st.t_comp)
        st.final_capacity = state.C.capacity

    def search(self, query, params: SearchParams = SearchParams()) -> tuple[np.ndarray, np.ndarray, SearchStats]:
        """k nearest neighbours; returns (ids, exact distances, stats)."""
        if params.k > self.index.n:
            raise ValueError(f"k={params.k} exceeds the index size {self.index.n}")
        state = _Query(self, self._prepare(query), params, params.gamma, None)
        self._execute(state, params, lambda s, pool: s.run(pool))
        ids, dists = _sorted_results(state.R)
        return ids[: params.k], dists[: params.k], state.stats

    def search_range(self, query, radius: float | None = None, params: SearchParams = SearchParams()) -> tuple[np.ndarray, np.ndarray, SearchStats]:
        """All ids found within ``radius`` (default ``params.radius``), with dynamic candidate capacity."""
        radius = params.radius if radius is None else radius
        if radius is None:
            raise ValueError("range search needs a radius")
        if self.metric is Metric.L2 and radius < 0:
            raise ValueError("radius must be non-negative for L2")
        state = _Query(self, self._prepare(query), params, params.gamma0, radius)

        def phases(s: _Query, pool):
            while True:
                s.run(pool)
                if len(s.R) / s.C.capacity < params.phi or s.stats.doublings >= params.max_doublings:
                    break
                s.C.capacity *= 2
                s.stats.doublings += 1
                if s.refill() == 0:
                    break

        self._execute(state, params, phases)
        ids, dists = _sorted_results(state.R)
        return ids, dists, state.stats


def _sorted_results(R: dict) -> tuple[np.ndarray, np.ndarray]:
    if not R:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    ids = np.fromiter(R.keys(), dtype=np.int64, count=len(R))
    dists = np.fromiter(R.values(), dtype=np.float64, count=len(R))
    order = np.lexsort((ids, dists))
    return ids[order], dists[order]
