"""Block-level placement of graph vertices and the shuffling heuristics.

A vertex record holds its vector, a 32-bit neighbor count and a fixed array
of 32-bit neighbor ids, so every record has the same size and a block holds
``floor(block_size / record_size)`` of them.  The quality of a placement is
its overlap ratio: for each vertex, the share of its block-mates that are
also its out-neighbors, averaged over all vertices.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels
from .graph import NeighborGraph


@dataclass(frozen=True)
class LayoutGeometry:
    block_size: int
    record_size: int
    slots: int
    blocks: int

    @property
    def capacity(self) -> int:
        return self.slots * self.blocks


def record_size(dim: int, elem_size: int, max_degree: int) -> int:
    return dim * elem_size + 4 + 4 * max_degree


def layout_geometry(dim: int, elem_size: int, max_degree: int, block_size: int, n: int) -> LayoutGeometry:
    gamma = record_size(dim, elem_size, max_degree)
    if gamma > block_size:
        raise ValueError(f"record of {gamma} bytes does not fit a {block_size}-byte block")
    slots = block_size // gamma
    return LayoutGeometry(block_size, gamma, slots, math.ceil(n / slots))


class BlockLayout:
    """Assignment of vertices to (block, slot) pairs.

    ``blocks`` is a ``(rho, eps)`` table of occupant ids (-1 for free slots),
    ``fill`` the occupancy per block; ``block_of`` / ``slot_of`` invert it.
    """

    def __init__(self, geometry: LayoutGeometry, blocks: np.ndarray, fill: np.ndarray):
        self.geometry = geometry
        self.blocks = np.ascontiguousarray(blocks, dtype=np.int32)
        self.fill = np.ascontiguousarray(fill, dtype=np.int32)
        n = int(self.fill.sum())
        self.block_of = np.full(n, -1, dtype=np.int32)
        self.slot_of = np.full(n, -1, dtype=np.int32)
        for b in range(self.blocks.shape[0]):
            occ = self.blocks[b, : self.fill[b]]
            if occ.size and (occ.min() < 0 or occ.max() >= n):
                raise ValueError(f"block {b} holds an out-of-range vertex id")
            if np.any(self.block_of[occ] >= 0):
                raise ValueError(f"block {b} holds a vertex already placed elsewhere")
            self.block_of[occ] = b
            self.slot_of[occ] = np.arange(occ.size, dtype=np.int32)

    @classmethod
    def from_block_of(cls, geometry: LayoutGeometry, block_of) -> "BlockLayout":
        block_of = np.asarray(block_of, dtype=np.int64)
        blocks = np.full((geometry.blocks, geometry.slots), -1, dtype=np.int32)
        fill = np.zeros(geometry.blocks, dtype=np.int32)
        for v, b in enumerate(block_of):
            if fill[b] >= geometry.slots:
                raise ValueError(f"block {b} over capacity")
            blocks[b, fill[b]] = v
            fill[b] += 1
        return cls(geometry, blocks, fill)

    @classmethod
    def from_groups(cls, geometry: LayoutGeometry, groups) -> "BlockLayout":
        blocks = np.full((geometry.blocks, geometry.slots), -1, dtype=np.int32)
        fill = np.zeros(geometry.blocks, dtype=np.int32)
        for b, members in enumerate(groups):
            blocks[b, : len(members)] = members
            fill[b] = len(members)
        return cls(geometry, blocks, fill)

    @property
    def n(self) -> int:
        return self.block_of.shape[0]

    def members(self, b: int) -> np.ndarray:
        return self.blocks[b, : self.fill[b]]

    def check(self) -> None:
        """Raise unless this is a bijection onto <= eps slots in exactly rho blocks."""
        g = self.geometry
        if self.blocks.shape != (g.blocks, g.slots):
            raise AssertionError(f"block table shape {self.blocks.shape} != {(g.blocks, g.slots)}")
        if np.any(self.fill > g.slots) or np.any(self.fill < 0):
            raise AssertionError("block occupancy out of range")
        if np.any(self.block_of < 0):
            raise AssertionError("unassigned vertex")
        occupied = self.blocks[self.blocks >= 0]
        if occupied.size != self.n or np.unique(occupied).size != self.n:
            raise AssertionError("layout is not a bijection")
        if not np.array_equal(self.blocks[self.block_of, self.slot_of], np.arange(self.n)):
            raise AssertionError("inverse maps disagree with the block table")

    def copy(self) -> "BlockLayout":
        return BlockLayout(self.geometry, self.blocks.copy(), self.fill.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, BlockLayout):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.blocks, other.blocks)


def sequential_layout(n: int, geometry: LayoutGeometry) -> BlockLayout:
    ids = np.arange(n, dtype=np.int32)
    return BlockLayout.from_block_of(geometry, ids // geometry.slots)


# ---------------------------------------------------------------------------
# overlap ratio
# ---------------------------------------------------------------------------


def overlap_counts(layout: BlockLayout, graph: NeighborGraph) -> np.ndarray:
    return _kernels.overlap_counts(graph.adjacency, graph.degrees, layout.block_of)


def or_vertices(layout: BlockLayout, graph: NeighborGraph) -> np.ndarray:
    counts = overlap_counts(layout, graph).astype(np.float64)
    mates = layout.fill[layout.block_of].astype(np.float64) - 1.0
    out = np.zeros(layout.n)
    np.divide(counts, mates, out=out, where=mates > 0)
    return out


def or_vertex(u: int, layout: BlockLayout, graph: NeighborGraph) -> float:
    b = layout.block_of[u]
    size = layout.fill[b]
    if size <= 1:
        return 0.0
    mates = set(layout.members(b).tolist()) - {u}
    hits = sum(1 for w in graph.neighbors(u) if int(w) in mates)
    return hits / (size - 1)


def or_block(b: int, layout: BlockLayout, graph: NeighborGraph) -> float:
    members = layout.members(b)
    if members.size == 0:
        return 0.0
    return float(np.mean([or_vertex(int(u), layout, graph) for u in members]))


def or_graph(layout: BlockLayout, graph: NeighborGraph) -> float:
    if layout.n != graph.n:
        raise ValueError(f"layout covers {layout.n} vertices, graph has {graph.n}")
    return float(or_vertices(layout, graph).mean())


# ---------------------------------------------------------------------------
# shuffling
# ---------------------------------------------------------------------------


class Algorithm(str, Enum):
    BNP = "bnp"
    BNF = "bnf"
    BNS = "bns"


@dataclass(frozen=True)
class ShuffleParams:
    algorithm: Algorithm = Algorithm.BNF
    max_iterations: int = 8
    gain_threshold: float = 0.01
    init: Algorithm = Algorithm.BNF

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "init", Algorithm(self.init))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gain_threshold < 0:
            raise ValueError("gain_threshold must be >= 0")
        if self.init is Algorithm.BNS:
            raise ValueError("BNS needs a BNP or BNF initial layout")


@dataclass
class ShuffleTrace:
    """What a shuffle run did: overlap ratio after each step and wall time."""

    algorithm: str
    iterations: int = 0
    gain_threshold: float = 0.0
    or_history: list[float] = field(default_factory=list)
    swaps: list[int] = field(default_factory=list)
    elapsed: float = 0.0

    def to_dict(self, geometry: LayoutGeometry | None = None) -> dict:
        d = {
            "algorithm": self.algorithm,
            "beta_used": self.iterations,
            "tau": self.gain_threshold,
            "or_per_iteration": self.or_history,
            "elapsed_seconds": self.elapsed,
        }
        if self.swaps:
            d["swaps_per_iteration"] = self.swaps
        if geometry is not None:
            d["eps"] = geometry.slots
            d["rho"] = geometry.blocks
        return d


def _check_sizes(graph: NeighborGraph, geometry: LayoutGeometry) -> None:
    if graph.n > geometry.capacity:
        raise ValueError(f"{graph.n} vertices do not fit {geometry.blocks} x {geometry.slots} slots")


def shuffle_bnp(graph: NeighborGraph, geometry: LayoutGeometry) -> BlockLayout:
    """Fill blocks one by one with each unplaced vertex followed by its unplaced neighbors."""
    _check_sizes(graph, geometry)
    blocks = np.full((geometry.blocks, geometry.slots), -1, dtype=np.int32)
    fill = np.zeros(geometry.blocks, dtype=np.int32)
    _kernels.bnp(graph.adjacency, graph.degrees, graph.n, geometry.slots, blocks, fill)
    return BlockLayout(geometry, blocks, fill)


def affinity_order(graph: NeighborGraph, block_of: np.ndarray) -> np.ndarray:
    """Vertices sorted by their largest neighbor count in any one block (descending, ties by id)."""
    radix = int(block_of.max()) + 1
    deg = graph.degrees
    src = np.repeat(np.arange(graph.n, dtype=np.int64), deg)
    mask = np.arange(graph.max_degree)[None, :] < deg[:, None]
    key = src * radix + block_of[graph.adjacency[mask]]
    uniq, cnt = np.unique(key, return_counts=True)
    best = np.zeros(graph.n, dtype=np.int64)
    np.maximum.at(best, uniq // radix, cnt)
    return np.lexsort((np.arange(graph.n), -best))


def shuffle_bnf(
    graph: NeighborGraph,
    initial: BlockLayout,
    max_iterations: int = 8,
    gain_threshold: float = 0.01,
    trace: ShuffleTrace | None = None,
) -> BlockLayout:
    """Iteratively move each vertex to the open block holding most of its neighbors.

    Every sweep reads the previous sweep's vertex->block map, clears all blocks
    and re-places vertices, strongest block affinity first (see
    ``affinity_order``).  Ties go to the lower block id; a vertex with no open
    neighbor block goes to an empty block, or the lowest-index open block if
    none is empty.
    Stops after ``max_iterations`` sweeps or when the overlap-ratio gain of a
    sweep drops below ``gain_threshold``.
    """
    geometry = initial.geometry
    _check_sizes(graph, geometry)
    start = time.perf_counter()
    trace = trace if trace is not None else ShuffleTrace("bnf")
    trace.gain_threshold = gain_threshold
    current = initial
    prev_or = or_graph(current, graph)
    trace.or_history.append(prev_or)
    blocks = np.empty_like(initial.blocks)
    fill = np.empty_like(initial.fill)
    for _ in range(max_iterations):
        order = affinity_order(graph, current.block_of)
        _kernels.bnf_iteration(graph.adjacency, graph.degrees, current.block_of, order, geometry.slots, blocks, fill)
        current = BlockLayout(geometry, blocks.copy(), fill.copy())
        trace.iterations += 1
        cur_or = or_graph(current, graph)
        trace.or_history.append(cur_or)
        if cur_or - prev_or < gain_threshold:
            break
        prev_or = cur_or
    trace.elapsed += time.perf_counter() - start
    return current


class _SwapState:
    """Mutable BNS working state with cached per-vertex overlap counts."""

    def __init__(self, graph: NeighborGraph, layout: BlockLayout):
        self.graph = graph
        self.geometry = layout.geometry
        self.blocks = layout.blocks.copy()
        self.fill = layout.fill.copy()
        self.block_of = layout.block_of.copy()
        self.slot_of = layout.slot_of.copy()
        self.in_ptr, self.in_ids = graph.in_neighbors()
        self.counts = _kernels.overlap_counts(graph.adjacency, graph.degrees, self.block_of)

    def try_pair(self, a: int, e: int) -> bool:
        g = self.graph
        return bool(
            _kernels.try_swap_pair(
                g.adjacency, g.degrees, self.in_ptr, self.in_ids, self.block_of, self.slot_of,
                self.blocks, self.fill, self.counts, a, e,
            )
        )

    def sweep(self) -> int:
        g = self.graph
        return int(
            _kernels.bns_iteration(
                g.adjacency, g.degrees, self.in_ptr, self.in_ids, self.block_of, self.slot_of,
                self.blocks, self.fill, self.counts,
            )
        )

    def layout(self) -> BlockLayout:
        return BlockLayout(self.geometry, self.blocks.copy(), self.fill.copy())


def shuffle_bns(
    graph: NeighborGraph,
    initial: BlockLayout,
    max_iterations: int = 8,
    gain_threshold: float = 0.01,
    trace: ShuffleTrace | None = None,
    check_each: bool = False,
) -> BlockLayout:
    """Swap the lowest-overlap vertices of two neighbor blocks when it pays off.

    For every vertex u and every pair (a, e) of its neighbors in different
    blocks, the lowest-overlap occupant of each block (ties to the lower id)
    are exchanged iff the summed vertex overlap of the two blocks strictly
    increases.  Gains are compared as exact fractions, so the graph-level
    overlap ratio never decreases.
    """
    geometry = initial.geometry
    _check_sizes(graph, geometry)
    start = time.perf_counter()
    trace = trace if trace is not None else ShuffleTrace("bns")
    trace.gain_threshold = gain_threshold
    state = _SwapState(graph, initial)
    prev_or = or_graph(initial, graph)
    trace.or_history.append(prev_or)
    for _ in range(max_iterations):
        swaps = state.sweep()
        trace.iterations += 1
        trace.swaps.append(swaps)
        current = state.layout()
        if check_each:
            current.check()
        cur_or = or_graph(current, graph)
        trace.or_history.append(cur_or)
        if cur_or - prev_or < gain_threshold:
            break
        prev_or = cur_or
    trace.elapsed += time.perf_counter() - start
    return state.layout()


def shuffle(graph: NeighborGraph, geometry: LayoutGeometry, params: ShuffleParams = ShuffleParams()) -> tuple[BlockLayout, ShuffleTrace]:
    """Run the requested algorithm end to end, including its initial layout."""
    trace = ShuffleTrace(params.algorithm.value)
    start = time.perf_counter()
    if params.algorithm is Algorithm.BNP:
        layout = shuffle_bnp(graph, geometry)
        trace.or_history.append(or_graph(layout, graph))
        trace.iterations = 1
        trace.elapsed = time.perf_counter() - start
        return layout, trace
    layout = shuffle_bnp(graph, geometry)
    if params.algorithm is Algorithm.BNF or params.init is Algorithm.BNF:
        layout = shuffle_bnf(graph, layout, params.max_iterations, params.gain_threshold, trace)
    if params.algorithm is Algorithm.BNS:
        bns_trace = ShuffleTrace("bns")
        layout = shuffle_bns(graph, layout, params.max_iterations, params.gain_threshold, bns_trace)
        trace.or_history.extend(bns_trace.or_history[1:])
        trace.swaps = bns_trace.swaps
        trace.iterations += bns_trace.iterations
    trace.gain_threshold = params.gain_threshold
    trace.elapsed = time.perf_counter() - start
    return layout, trace


# ---------------------------------------------------------------------------
# persistence: the vertex -> block table, plus the trace as json
# ---------------------------------------------------------------------------


def save_layout(path, layout: BlockLayout, trace: ShuffleTrace | None = None) -> None:
    g = layout.geometry
    header = np.array([g.block_size, g.record_size, g.slots, g.blocks, layout.n], dtype="<u8")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(layout.blocks.astype("<i4").tobytes())
    if trace is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(trace.to_dict(g), f, indent=2)


def load_layout(path) -> BlockLayout:
    raw = np.fromfile(path, dtype=np.uint8)
    block_size, rec, slots, nblocks, n = (int(x) for x in raw[:40].view("<u8"))
    blocks = raw[40:].view("<i4").reshape(nblocks, slots)
    fill = (blocks >= 0).sum(axis=1).astype(np.int32)
    layout = BlockLayout(LayoutGeometry(block_size, rec, slots, nblocks), blocks.copy(), fill)
    if layout.n != n:
        raise ValueError(f"{path}: layout holds {layout.n} vertices, header says {n}")
    return layout
