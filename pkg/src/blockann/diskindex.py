"""On-disk block format: header block, data blocks of vertex records, location map.

``<prefix>.idx``
    block 0 is the header (zero padded to the block size); data block ``i``
    starts at byte ``(i + 1) * block_size``.  Slot ``j`` of a block starts at
    ``j * record_size``; the unused tail of a block is zero.
``<prefix>.map``
    one little-endian u64 per vertex: ``block_id * 256 + slot``.

A record is the raw vector, a u32 neighbor count and ``max_degree`` u32
neighbor slots, of which only the first ``count`` are meaningful.
"""

from __future__ import annotations

import mmap
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ELEM_CODES, ELEM_TYPES, Metric, VectorDataset, elem_from_code
from .graph import NeighborGraph
from .layout import BlockLayout, LayoutGeometry, record_size

MAGIC = b"STARSEG1"
VERSION = 1
SLOT_RADIX = 256

# magic, version, elem, metric, reserved, n, dim, max_degree, record_size,
# slots, blocks, block_size, entry
_HEADER = struct.Struct("<8sIBBHQIIIIQII")


def index_paths(prefix) -> tuple[Path, Path]:
    prefix = str(prefix)
    return Path(prefix + ".idx"), Path(prefix + ".map")


@dataclass(frozen=True)
class IndexHeader:
    n: int
    dim: int
    max_degree: int
    record_size: int
    slots: int
    blocks: int
    block_size: int
    elem: str
    metric: Metric
    entry: int
    version: int = VERSION

    def pack(self) -> bytes:
        raw = _HEADER.pack(
            MAGIC, self.version, ELEM_CODES[self.elem], self.metric.code, 0, self.n, self.dim,
            self.max_degree, self.record_size, self.slots, self.blocks, self.block_size, self.entry,
        )
        return raw + bytes(self.block_size - len(raw))

    @classmethod
    def unpack(cls, raw: bytes) -> "IndexHeader":
        if len(raw) < _HEADER.size:
            raise ValueError("short header")
        (magic, version, elem, metric, _, n, dim, max_degree, rec, slots, blocks, block_size, entry) = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ValueError(f"unsupported version {version}")
        return cls(n, dim, max_degree, rec, slots, blocks, block_size, elem_from_code(elem), Metric.from_code(metric), entry, version)

    @property
    def geometry(self) -> LayoutGeometry:
        return LayoutGeometry(self.block_size, self.record_size, self.slots, self.blocks)

    def record_dtype(self) -> np.dtype:
        return record_dtype(self.dim, self.elem, self.max_degree)


def record_dtype(dim: int, elem: str, max_degree: int) -> np.dtype:
    return np.dtype([("vec", ELEM_TYPES[elem], (dim,)), ("deg", "<u4"), ("nbrs", "<u4", (max_degree,))])


def pack_locations(layout: BlockLayout) -> np.ndarray:
    return layout.block_of.astype("<u8") * SLOT_RADIX + layout.slot_of.astype("<u8")


def write_index(dataset: VectorDataset, graph: NeighborGraph, layout: BlockLayout, prefix) -> IndexHeader:
    """Serialize vectors + adjacency in ``layout`` order; returns the header written."""
    if not (dataset.n == graph.n == layout.n):
        raise ValueError(f"size mismatch: dataset {dataset.n}, graph {graph.n}, layout {layout.n}")
    geo = layout.geometry
    gamma = record_size(dataset.dim, dataset.elem_size, graph.max_degree)
    if gamma != geo.record_size:
        raise ValueError(f"layout record size {geo.record_size} != {gamma} implied by data and graph")
    if geo.slots > SLOT_RADIX:
        raise ValueError(f"{geo.slots} slots per block exceeds the location map's slot field")
    layout.check()
    header = IndexHeader(
        dataset.n, dataset.dim, graph.max_degree, gamma, geo.slots, geo.blocks, geo.block_size,
        dataset.elem, dataset.metric, graph.entry,
    )
    rec = header.record_dtype()
    assert rec.itemsize == gamma

    records = np.zeros(dataset.n, dtype=rec)
    records["vec"] = dataset.values
    records["deg"] = graph.degrees
    live = np.arange(graph.max_degree)[None, :] < graph.degrees[:, None]
    records["nbrs"] = np.where(live, graph.adjacency, 0)

    body = np.zeros((geo.blocks, geo.block_size), dtype=np.uint8)
    slots = body[:, : geo.slots * gamma].reshape(geo.blocks, geo.slots, gamma)
    slots[layout.block_of, layout.slot_of] = records.view(np.uint8).reshape(dataset.n, gamma)

    idx_path, map_path = index_paths(prefix)
    with open(idx_path, "wb") as f:
        f.write(header.pack())
        f.write(body.tobytes())
    pack_locations(layout).tofile(map_path)
    return header


@dataclass
class Block:
    block_id: int
    ids: np.ndarray
    vectors: np.ndarray
    degrees: np.ndarray
    neighbors: np.ndarray
    raw: memoryview

    def neighbors_of(self, pos: int) -> np.ndarray:
        return self.neighbors[pos, : self.degrees[pos]]

    def position(self, vertex: int) -> int:
        hits = np.flatnonzero(self.ids == vertex)
        if hits.size == 0:
            raise LookupError(f"vertex {vertex} is not in block {self.block_id}")
        return int(hits[0])


class DiskIndex:
    """Read-only handle; safe to share between threads."""

    def __init__(self, prefix, direct: bool = True):
        self.prefix = str(prefix)
        idx_path, map_path = index_paths(prefix)
        with open(idx_path, "rb") as f:
            head = f.read(_HEADER.size)
            self.header = IndexHeader.unpack(head)
        self.geometry = self.header.geometry
        self._dtype = self.header.record_dtype()
        self.packed_map = np.fromfile(map_path, dtype="<u8")
        if self.packed_map.size != self.header.n:
            raise ValueError(f"{map_path}: {self.packed_map.size} entries, expected {self.header.n}")
        self.block_of = (self.packed_map // SLOT_RADIX).astype(np.int64)
        self.slot_of = (self.packed_map % SLOT_RADIX).astype(np.int64)
        if self.header.n and (self.block_of.max() >= self.geometry.blocks or self.slot_of.max() >= self.geometry.slots):
            raise ValueError("map out of range")
        self.members = np.full((self.geometry.blocks, self.geometry.slots), -1, dtype=np.int64)
        self.members[self.block_of, self.slot_of] = np.arange(self.header.n)
        self._lock = threading.Lock()
        self.io_count = 0
        self.direct_io = False
        self._fd = -1
        if direct and hasattr(os, "O_DIRECT"):
            try:
                fd = os.open(idx_path, os.O_RDONLY | os.O_DIRECT)
                buf = mmap.mmap(-1, self.geometry.block_size)
                os.preadv(fd, [buf], 0)
                self._fd, self.direct_io = fd, True
            except OSError:
                if "fd" in locals() and fd >= 0:
                    os.close(fd)
        if self._fd < 0:
            self._fd = os.open(idx_path, os.O_RDONLY)
        self.file_size = os.fstat(self._fd).st_size

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @property
    def n(self) -> int:
        return self.header.n

    @property
    def metric(self) -> Metric:
        return self.header.metric

    @property
    def entry(self) -> int:
        return self.header.entry

    def locate(self, vertex: int) -> tuple[int, int]:
        if not 0 <= vertex < self.n:
            raise IndexError(f"vertex {vertex} out of range [0, {self.n})")
        packed = int(self.packed_map[vertex])
        return packed // SLOT_RADIX, packed % SLOT_RADIX

    def read_raw(self, block_id: int) -> memoryview:
        """One aligned block-sized read of data block ``block_id``."""
        if not 0 <= block_id < self.geometry.blocks:
            raise IndexError(f"block {block_id} out of range [0, {self.geometry.blocks})")
        size = self.geometry.block_size
        offset = (block_id + 1) * size
        assert offset % size == 0
        buf = mmap.mmap(-1, size)
        got = os.preadv(self._fd, [buf], offset)
        if got != size:
            raise IOError(f"short read of block {block_id}: {got} of {size} bytes")
        with self._lock:
            self.io_count += 1
        return memoryview(buf)

    def decode(self, block_id: int, raw) -> Block:
        occupants = self.members[block_id]
        used = np.flatnonzero(occupants >= 0)
        recs = np.frombuffer(raw, dtype=self._dtype, count=self.geometry.slots)[used]
        return Block(block_id, occupants[used], recs["vec"], recs["deg"].astype(np.int64), recs["nbrs"], raw)

    def read_block(self, block_id: int) -> Block:
        return self.decode(block_id, self.read_raw(block_id))

    def read_all(self) -> tuple[VectorDataset, NeighborGraph]:
        """Reassemble vectors and adjacency in vertex-id order (does not bump the I/O counter)."""
        h = self.header
        with open(index_paths(self.prefix)[0], "rb") as f:
            f.seek(h.block_size)
            body = np.frombuffer(f.read(h.blocks * h.block_size), dtype=np.uint8)
        body = body.reshape(h.blocks, h.block_size)[:, : h.slots * h.record_size]
        recs = np.ascontiguousarray(body.reshape(h.blocks, h.slots, h.record_size)[self.block_of, self.slot_of])
        recs = recs.view(self._dtype).reshape(h.n)
        adj = recs["nbrs"].astype(np.int32)
        graph = NeighborGraph(adj, recs["deg"].astype(np.int32), h.entry)
        return VectorDataset(recs["vec"].copy(), h.metric), graph

    def disk_bytes(self) -> int:
        return self.file_size


@dataclass
class VerifyReport:
    ok: bool
    message: str
    checks: int = 0

    def __bool__(self) -> bool:
        return self.ok


def verify_index(prefix) -> VerifyReport:
    """Check header, map and every record; report the first violation."""
    idx_path, map_path = index_paths(prefix)
    checks = 0
    try:
        raw = idx_path.read_bytes()
        header = IndexHeader.unpack(raw[:_HEADER.size])
    except (OSError, ValueError) as exc:
        return VerifyReport(False, f"header: {exc}")
    checks += 1
    h = header
    if h.record_size != record_size(h.dim, ELEM_TYPES[h.elem].itemsize, h.max_degree):
        return VerifyReport(False, "record size disagrees with dim/elem/max_degree", checks)
    if h.slots != h.block_size // h.record_size or h.slots < 1:
        return VerifyReport(False, "slots per block disagree with block and record size", checks)
    if h.blocks != -(-h.n // h.slots):
        return VerifyReport(False, "block count disagrees with n and slots", checks)
    if len(raw) != (h.blocks + 1) * h.block_size:
        return VerifyReport(False, f"file size {len(raw)} != {(h.blocks + 1) * h.block_size}", checks)
    if not 0 <= h.entry < h.n:
        return VerifyReport(False, "entry vertex out of range", checks)
    checks += 1
    try:
        packed = np.fromfile(map_path, dtype="<u8")
    except OSError as exc:
        return VerifyReport(False, f"map: {exc}", checks)
    if packed.size != h.n:
        return VerifyReport(False, f"map has {packed.size} entries, expected {h.n}", checks)
    blocks = packed // SLOT_RADIX
    slots = packed % SLOT_RADIX
    bad = np.flatnonzero((blocks >= h.blocks) | (slots >= h.slots))
    if bad.size:
        return VerifyReport(False, f"map out of range at vertex {int(bad[0])}", checks)
    flat = blocks * h.slots + slots
    if np.unique(flat).size != h.n:
        return VerifyReport(False, "map is not injective", checks)
    checks += 1
    rec = h.record_dtype()
    body = np.frombuffer(raw, dtype=np.uint8, offset=h.block_size).reshape(h.blocks, h.block_size)
    recs = np.ascontiguousarray(body[:, : h.slots * h.record_size]).view(rec).reshape(h.blocks, h.slots)
    occupied = np.zeros((h.blocks, h.slots), dtype=bool)
    occupied[blocks, slots] = True
    deg = recs["deg"]
    over = np.argwhere(occupied & (deg > h.max_degree))
    if over.size:
        b, s = (int(x) for x in over[0])
        return VerifyReport(False, f"block {b} slot {s}: neighbor count {int(deg[b, s])} exceeds {h.max_degree}", checks)
    live = np.arange(h.max_degree)[None, None, :] < deg[:, :, None]
    out = np.argwhere(occupied[:, :, None] & live & (recs["nbrs"] >= h.n))
    if out.size:
        b, s, _ = (int(x) for x in out[0])
        return VerifyReport(False, f"block {b} slot {s}: neighbor id out of range", checks)
    checks += 1
    return VerifyReport(True, "ok", checks)
