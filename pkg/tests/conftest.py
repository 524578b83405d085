"""Shared builds for the test suite.

``desk`` is the 10K x 128 uint8 setup (max degree 48, 4 KB blocks) used by the
acceptance checks; ``small`` is a 1K build for quicker properties.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from blockann.dataset import VectorDataset, bigann_like, knn_ground_truth
from blockann.diskindex import DiskIndex, write_index
from blockann.engine import SearchEngine
from blockann.graph import BuildParams, NavigationGraph, NeighborGraph, build_navigation, build_vamana
from blockann.layout import (
    BlockLayout,
    LayoutGeometry,
    ShuffleParams,
    ShuffleTrace,
    layout_geometry,
    sequential_layout,
    shuffle,
)
from blockann.pq import PQCodebook, encode_all, train_for_dataset


@dataclass
class Build:
    dataset: VectorDataset
    queries: np.ndarray
    graph: NeighborGraph
    geometry: LayoutGeometry
    seq: BlockLayout
    bnf: BlockLayout
    bnf_trace: ShuffleTrace
    t_graph: float
    prefix_seq: str = ""
    prefix_bnf: str = ""
    codebook: PQCodebook | None = None
    codes: np.ndarray | None = None
    nav: NavigationGraph | None = None
    truth: np.ndarray | None = None
    timers: dict = field(default_factory=dict)
    _engines: dict = field(default_factory=dict)

    def engine(self, layout: str = "bnf") -> SearchEngine:
        if layout not in self._engines:
            prefix = self.prefix_bnf if layout == "bnf" else self.prefix_seq
            self._engines[layout] = SearchEngine(DiskIndex(prefix), self.codebook, self.codes, self.nav)
        return self._engines[layout]

    def close(self) -> None:
        for eng in self._engines.values():
            eng.index.close()


def _make_build(tmp, n: int, nq: int, seed: int, list_size: int, pq_m: int, with_search: bool) -> Build:
    base, queries = bigann_like(n, nq, seed=seed)
    ds = VectorDataset(base)
    start = time.perf_counter()
    graph = build_vamana(ds, BuildParams(max_degree=48, list_size=list_size))
    t_graph = time.perf_counter() - start
    geo = layout_geometry(128, 1, 48, 4096, n)
    seq = sequential_layout(n, geo)
    bnf, trace = shuffle(graph, geo, ShuffleParams(max_iterations=8, gain_threshold=0.01))
    b = Build(ds, queries, graph, geo, seq, bnf, trace, t_graph)
    b.timers = {"disk_graph": t_graph, "shuffling": trace.elapsed}
    if not with_search:
        return b
    b.prefix_seq, b.prefix_bnf = str(tmp / "seq"), str(tmp / "bnf")
    write_index(ds, graph, seq, b.prefix_seq)
    write_index(ds, graph, bnf, b.prefix_bnf)
    start = time.perf_counter()
    b.codebook = train_for_dataset(ds, pq_m)
    b.codes = encode_all(ds, b.codebook)
    b.timers["pq"] = time.perf_counter() - start
    start = time.perf_counter()
    b.nav = build_navigation(ds, 0.1)
    b.timers["memory_graph"] = time.perf_counter() - start
    b.truth = knn_ground_truth(ds, queries, 10).as_matrix()
    return b


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    b = _make_build(tmp_path_factory.mktemp("desk"), 10_000, 1_000, 0, 128, 16, True)
    yield b
    b.close()


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    b = _make_build(tmp_path_factory.mktemp("small"), 1_000, 100, 1, 64, 16, True)
    yield b
    b.close()


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance check, with its measured detail."""
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", "") or rep.when != "call" and key != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            status = "PASS" if rep.passed else "FAIL"
            name = rep.nodeid.split("::")[-1]
            lines.append((name, f"{status} {name}: {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance checks")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
