"""Command-line entry point: ``blockann <command> ...``.

Artifacts share a prefix: ``P.graph`` + ``P.meta.json`` (build), ``P.layout``
(shuffle), ``P.idx`` + ``P.map`` (pack), ``P.nav`` (nav) and ``P.pq`` (pq).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .bench import report_index_costs, run_benchmark
from .dataset import (
    Metric,
    VectorDataset,
    knn_ground_truth,
    load_ground_truth,
    load_vectors,
    range_ground_truth,
    save_ground_truth,
)
from .diskindex import DiskIndex, verify_index, write_index
from .engine import SearchEngine, SearchParams
from .graph import BuildParams, build_navigation, build_vamana, load_graph, load_navigation, save_graph, save_navigation
from .layout import (
    Algorithm,
    BlockLayout,
    ShuffleParams,
    layout_geometry,
    load_layout,
    or_graph,
    save_layout,
    sequential_layout,
    shuffle,
)
from .pq import choose_m, encode_all, load_pq, save_pq, train_for_dataset

log = logging.getLogger("blockann")


class CliError(Exception):
    pass


def _meta_path(prefix) -> Path:
    return Path(f"{prefix}.meta.json")


def _read_meta(prefix) -> dict:
    path = _meta_path(prefix)
    return json.loads(path.read_text()) if path.exists() else {}


def _update_meta(prefix, **values) -> None:
    meta = _read_meta(prefix)
    meta.update(values)
    _meta_path(prefix).write_text(json.dumps(meta, indent=2, sort_keys=True))


def _load(args) -> VectorDataset:
    return load_vectors(args.data, metric=args.metric)


def cmd_gt(args) -> dict:
    base = _load(args)
    queries = load_vectors(args.queries).values
    if args.mode == "knn":
        if args.k is None:
            raise CliError("--k is required for knn ground truth")
        gt = knn_ground_truth(base, queries, args.k)
    else:
        if args.r is None:
            raise CliError("--r is required for range ground truth")
        gt = range_ground_truth(base, queries, args.r)
    save_ground_truth(args.out, gt)
    return {"queries": len(gt), "out": args.out}


def cmd_build(args) -> dict:
    data = _load(args)
    params = BuildParams(max_degree=args.max_degree, list_size=args.build_list, alpha=args.alpha, seed=args.seed)
    start = time.perf_counter()
    graph = build_vamana(data, params)
    elapsed = time.perf_counter() - start
    save_graph(f"{args.out}.graph", graph)
    _update_meta(
        args.out, data=str(args.data), metric=data.metric.value, dim=data.dim, elem=data.elem,
        elem_size=data.elem_size, max_degree=graph.max_degree, t_disk_graph=elapsed,
    )
    return {"graph": f"{args.out}.graph", "seconds": elapsed, "avg_degree": float(graph.degrees.mean())}


def cmd_shuffle(args) -> dict:
    meta = _read_meta(args.index)
    if not meta:
        raise CliError(f"{_meta_path(args.index)} not found; run build first")
    graph = load_graph(f"{args.index}.graph")
    geo = layout_geometry(meta["dim"], meta["elem_size"], graph.max_degree, args.block_size, graph.n)
    params = ShuffleParams(Algorithm(args.algo), args.beta, args.tau, Algorithm(args.init))
    layout, trace = shuffle(graph, geo, params)
    save_layout(f"{args.index}.layout", layout, trace)
    _update_meta(args.index, t_shuffling=trace.elapsed, block_size=args.block_size)
    return trace.to_dict(geo)


def cmd_pack(args) -> dict:
    data = _load(args)
    graph = load_graph(args.graph)
    geo = layout_geometry(data.dim, data.elem_size, graph.max_degree, args.block_size, data.n)
    if args.layout == "seq":
        layout = sequential_layout(data.n, geo)
    else:
        layout = load_layout(args.layout)
        if layout.geometry != geo:
            raise CliError(f"layout geometry {layout.geometry} does not match {geo}")
    header = write_index(data, graph, layout, args.out)
    return {"n": header.n, "eps": header.slots, "rho": header.blocks, "block_size": header.block_size,
            "or": or_graph(layout, graph)}


def cmd_nav(args) -> dict:
    data = _load(args)
    start = time.perf_counter()
    nav = build_navigation(data, args.mu, BuildParams(max_degree=args.max_degree, list_size=args.build_list, seed=args.seed))
    elapsed = time.perf_counter() - start
    save_navigation(f"{args.out}.nav", nav)
    _update_meta(args.out, t_memory_graph=elapsed)
    return {"nav": f"{args.out}.nav", "sample": nav.graph.n, "seconds": elapsed}


def cmd_pq(args) -> dict:
    data = _load(args)
    m = choose_m(data.n, data.dim, args.budget_bytes)
    start = time.perf_counter()
    codebook = train_for_dataset(data, m, seed=args.seed)
    codes = encode_all(data, codebook)
    elapsed = time.perf_counter() - start
    save_pq(f"{args.out}.pq", codebook, codes)
    _update_meta(args.out, t_pq=elapsed)
    return {"pq": f"{args.out}.pq", "m": m, "seconds": elapsed}


def open_engine(prefix, nav: bool = True) -> SearchEngine:
    index = DiskIndex(prefix)
    codebook, codes = load_pq(f"{prefix}.pq")
    nav_path = Path(f"{prefix}.nav")
    graph = load_navigation(nav_path) if nav and nav_path.exists() else None
    return SearchEngine(index, codebook, codes, graph)


def cmd_search(args) -> dict:
    engine = open_engine(args.index, nav=args.entry_mode == "nav")
    queries = load_vectors(args.queries).values
    params = SearchParams(
        k=args.k, gamma=args.gamma, sigma=args.sigma, entries=args.entries, nav_list=args.nav_list,
        beam_width=args.beam_width, phi=args.phi, gamma0=args.gamma0, max_doublings=args.max_doublings,
        pipeline=args.pipeline == "on", entry_mode=args.entry_mode, seed_from_disk=args.seed_from_disk,
    )
    radius = None
    if args.mode == "range":
        if args.r is None:
            raise CliError("--r is required for range search")
        radius = args.r
    truth = load_ground_truth(args.gt) if args.gt else None
    report, run = run_benchmark(engine, queries, params, truth, args.threads, args.repetitions, args.seed, radius)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for qi, (ids, dists) in enumerate(zip(run.ids, run.distances)):
            for rank, (vid, d) in enumerate(zip(ids.tolist(), dists.tolist())):
                out.write(f"{qi} {rank} {vid} {d:.6g}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    summary = {
        "recall" if radius is None else "ap": report.accuracy,
        "mean_latency_ms": report.mean_latency_ms,
        "qps": report.qps,
        "mean_ios": report.mean_ios,
        "mean_hops": report.mean_hops,
        "mean_xi": report.mean_xi,
        "t_io_frac": report.t_io_frac,
        "t_comp_frac": report.t_comp_frac,
        "direct_io": report.direct_io,
    }
    if args.stats_out:
        Path(args.stats_out).write_text(json.dumps({**summary, "report": report.to_dict()}, indent=2))
    return summary


def cmd_layout_stats(args) -> dict:
    graph = load_graph(args.graph)
    with DiskIndex(args.index, direct=False) as index:
        layout = BlockLayout.from_block_of(index.geometry, index.block_of)
        meta = _read_meta(args.index)
        timers = {
            "disk_graph": meta.get("t_disk_graph", 0.0),
            "shuffling": meta.get("t_shuffling", 0.0),
            "memory_graph": meta.get("t_memory_graph", 0.0),
            "pq": meta.get("t_pq", 0.0),
        }
        nav_path, pq_path = Path(f"{args.index}.nav"), Path(f"{args.index}.pq")
        nav = load_navigation(nav_path) if nav_path.exists() else None
        codebook, codes = load_pq(pq_path) if pq_path.exists() else (None, None)
        costs = report_index_costs(timers, index, nav, codebook, codes)
        g = index.geometry
        return {
            "n": index.n, "eps": g.slots, "rho": g.blocks, "record_size": g.record_size,
            "block_size": g.block_size, "or": or_graph(layout, graph), "costs": costs.to_dict(),
        }


def cmd_verify(args) -> dict:
    report = verify_index(args.index)
    if not report.ok:
        raise CliError(report.message)
    return {"ok": True, "checks": report.checks}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockann", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def data_args(p, queries=False):
        p.add_argument("--data", required=True, help=".bvecs (uint8) or .fvecs (float32)")
        p.add_argument("--metric", choices=[m.value for m in Metric], default="l2")
        if queries:
            p.add_argument("--queries", required=True)

    p = sub.add_parser("gt", help="brute-force ground truth")
    data_args(p, queries=True)
    p.add_argument("--mode", choices=["knn", "range"], default="knn")
    p.add_argument("--k", type=int)
    p.add_argument("--r", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gt)

    p = sub.add_parser("build", help="build the disk graph")
    data_args(p)
    p.add_argument("--max-degree", type=int, default=48)
    p.add_argument("--build-list", type=int, default=128)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("shuffle", help="compute a block layout for a built graph")
    p.add_argument("--index", required=True, help="prefix given to build")
    p.add_argument("--algo", choices=[a.value for a in Algorithm], default="bnf")
    p.add_argument("--beta", type=int, default=8)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--init", choices=["bnp", "bnf"], default="bnf")
    p.add_argument("--block-size", type=int, default=4096)
    p.set_defaults(func=cmd_shuffle)

    p = sub.add_parser("pack", help="write the .idx/.map files")
    data_args(p)
    p.add_argument("--graph", required=True)
    p.add_argument("--layout", default="seq", help="'seq' or a layout file")
    p.add_argument("--block-size", type=int, default=4096)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("nav", help="build the in-memory navigation graph")
    data_args(p)
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--max-degree", type=int, default=20)
    p.add_argument("--build-list", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_nav)

    p = sub.add_parser("pq", help="train PQ and encode the base vectors")
    data_args(p)
    p.add_argument("--budget-bytes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pq)

    p = sub.add_parser("search", help="run queries against a packed index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--mode", choices=["knn", "range"], default="knn")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--r", type=float)
    p.add_argument("--gamma", type=int, default=128)
    p.add_argument("--gamma0", type=int, default=100)
    p.add_argument("--max-doublings", type=int, default=10)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--phi", type=float, default=0.5)
    p.add_argument("--entries", type=int, default=8)
    p.add_argument("--nav-list", type=int, default=32)
    p.add_argument("--entry-mode", choices=["nav", "medoid"], default="nav")
    p.add_argument("--seed-from-disk", action="store_true", help="read entry blocks up front instead of using in-memory sample vectors")
    p.add_argument("--beam-width", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pipeline", choices=["on", "off"], default="off")
    p.add_argument("--gt", help="ground truth written by the gt command")
    p.add_argument("--out", help="result lines (query rank id distance); stdout if omitted")
    p.add_argument("--stats-out")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("layout-stats", help="overlap ratio and cost summary of a packed index")
    p.add_argument("--index", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--json", action="store_true", help="emit JSON (default is key: value lines)")
    p.set_defaults(func=cmd_layout_stats)

    p = sub.add_parser("verify", help="check a packed index")
    p.add_argument("--index", required=True)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except (CliError, ValueError, OSError, LookupError) as exc:
        print(json.dumps({"ok": False, "command": args.command, "error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1
    if args.command == "layout-stats" and not args.json:
        for key, value in result.items():
            print(f"{key}: {value}")
    elif args.command != "search" or args.out:
        print(json.dumps(result, default=float))
    else:
        print(json.dumps(result, default=float), file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
