"""Vector containers, distance kernels and brute-force oracles.

Files use the texmex layout: every record is a little-endian int32 dimension
followed by ``dim`` values (float32 for ``.fvecs``, uint8 for ``.bvecs``,
int32 for ``.ivecs``).

Distances follow one convention everywhere: smaller means more similar.
L2 is the *squared* Euclidean distance and IP is the negated inner product,
so a single minimizing search path serves both metrics.  Range radii are
expressed in the same units (squared L2, or negated IP).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Metric(str, Enum):
    L2 = "l2"
    IP = "ip"

    @property
    def code(self) -> int:
        return 0 if self is Metric.L2 else 1

    @classmethod
    def from_code(cls, code: int) -> "Metric":
        return {0: cls.L2, 1: cls.IP}[int(code)]


ELEM_TYPES = {
    "uint8": np.dtype(np.uint8),
    "float32": np.dtype("<f4"),
}
ELEM_CODES = {"uint8": 0, "float32": 1}
_EXTENSION_ELEM = {".bvecs": "uint8", ".fvecs": "float32"}


def elem_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in ELEM_TYPES.items():
        if dt == dtype:
            return name
    raise ValueError(f"unsupported element type {dtype}")


def elem_from_code(code: int) -> str:
    for name, c in ELEM_CODES.items():
        if c == code:
            return name
    raise ValueError(f"unknown element type code {code}")


def guess_elem(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    try:
        return _EXTENSION_ELEM[ext]
    except KeyError:
        raise ValueError(f"cannot infer element type from extension {ext!r}") from None


@dataclass(frozen=True, eq=False)
class VectorDataset:
    """An immutable ``n x D`` collection of vectors with a fixed metric."""

    values: np.ndarray
    metric: Metric = Metric.L2
    _float: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d array")
        n, dim = values.shape
        if n < 1 or dim < 1:
            raise ValueError("dataset must hold at least one vector of dim >= 1")
        elem_name(values.dtype)
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "metric", Metric(self.metric))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def elem(self) -> str:
        return elem_name(self.values.dtype)

    @property
    def elem_size(self) -> int:
        return self.values.dtype.itemsize

    def as_float32(self) -> np.ndarray:
        """Float32 view used by the build kernels (exact for uint8 inputs)."""
        if self._float is None:
            f = np.ascontiguousarray(self.values, dtype=np.float32)
            f.setflags(write=False)
            object.__setattr__(self, "_float", f)
        return self._float

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"VectorDataset(n={self.n}, dim={self.dim}, elem={self.elem}, metric={self.metric.value})"


@dataclass(frozen=True)
class GroundTruth:
    """Exact answers per query: ids and matching distances.

    For KNN every row has the same length ``k``; for range queries rows are
    ragged.
    """

    ids: list[np.ndarray]
    distances: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.ids)

    def as_matrix(self) -> np.ndarray:
        return np.vstack(self.ids)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _read_records(path, dtype: np.dtype) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        raise ValueError(f"{path}: zero records")
    if raw.size < 4:
        raise ValueError(f"{path}: truncated header")
    dim = int(raw[:4].view("<i4")[0])
    if dim < 1:
        raise ValueError(f"{path}: invalid dimension {dim}")
    rec_size = 4 + dim * dtype.itemsize
    if raw.size % rec_size:
        raise ValueError(
            f"{path}: file size {raw.size} is not a multiple of record size {rec_size}"
        )
    recs = raw.reshape(-1, rec_size)
    dims = np.ascontiguousarray(recs[:, :4]).view("<i4").ravel()
    if np.any(dims != dim):
        bad = int(np.flatnonzero(dims != dim)[0])
        raise ValueError(f"{path}: record {bad} has dimension {dims[bad]}, expected {dim}")
    return np.ascontiguousarray(recs[:, 4:]).view(dtype).reshape(-1, dim)


def load_vectors(path, elem: str | None = None, metric: Metric | str = Metric.L2) -> VectorDataset:
    """Read an fvecs/bvecs file; ``n`` is inferred from the file size."""
    elem = elem or guess_elem(path)
    values = _read_records(path, ELEM_TYPES[elem])
    return VectorDataset(values, Metric(metric))


def write_vectors(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values)
    elem_name(values.dtype)
    n, dim = values.shape
    header = np.full((n, 1), dim, dtype="<i4").view(np.uint8)
    body = values.view(np.uint8).reshape(n, -1)
    np.hstack([header, body]).tofile(path)


def write_ivecs(path, rows) -> None:
    with open(path, "wb") as f:
        for row in rows:
            row = np.asarray(row, dtype="<i4")
            f.write(np.int32(row.size).tobytes())
            f.write(row.tobytes())


def read_ivecs(path) -> list[np.ndarray]:
    """Read ivecs allowing ragged rows (range ground truth)."""
    raw = np.fromfile(path, dtype="<i4")
    rows, pos = [], 0
    while pos < raw.size:
        count = int(raw[pos])
        if count < 0 or pos + 1 + count > raw.size:
            raise ValueError(f"{path}: corrupt record at word {pos}")
        rows.append(raw[pos + 1 : pos + 1 + count].copy())
        pos += 1 + count
    return rows


def write_fvecs_rows(path, rows) -> None:
    with open(path, "wb") as f:
        for row in rows:
            row = np.asarray(row, dtype="<f4")
            f.write(np.int32(row.size).tobytes())
            f.write(row.tobytes())


def read_fvecs_rows(path) -> list[np.ndarray]:
    raw = np.fromfile(path, dtype="<i4")
    rows, pos = [], 0
    while pos < raw.size:
        count = int(raw[pos])
        rows.append(raw[pos + 1 : pos + 1 + count].view("<f4").copy())
        pos += 1 + count
    return rows


def save_ground_truth(path, gt: GroundTruth) -> None:
    """ivecs of ids plus a ``.dist`` float32 sidecar with matching rows."""
    write_ivecs(path, gt.ids)
    write_fvecs_rows(str(path) + ".dist", gt.distances)


def load_ground_truth(path) -> GroundTruth:
    ids = read_ivecs(path)
    dist_path = str(path) + ".dist"
    if os.path.exists(dist_path):
        dists = read_fvecs_rows(dist_path)
    else:
        dists = [np.full(len(r), np.nan, dtype=np.float32) for r in ids]
    return GroundTruth(ids, dists)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def distance(a, b, metric: Metric | str = Metric.L2) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if Metric(metric) is Metric.L2:
        diff = a - b
        return float(diff @ diff)
    return float(-(a @ b))


def distances_to(values: np.ndarray, query, metric: Metric | str = Metric.L2) -> np.ndarray:
    """Distances from ``query`` to every row of ``values`` (float64)."""
    q = np.asarray(query, dtype=np.float64)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != q.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape} vs {q.shape}")
    if Metric(metric) is Metric.L2:
        diff = x - q
        return np.einsum("ij,ij->i", diff, diff)
    return -(x @ q)


def _check_query(dataset: VectorDataset, query) -> np.ndarray:
    q = np.asarray(query)
    if q.ndim != 1 or q.shape[0] != dataset.dim:
        raise ValueError(f"query dim {q.shape} does not match dataset dim {dataset.dim}")
    return q


def brute_force_knn(dataset: VectorDataset, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbours; ties go to the lower id."""
    if not 0 < k < dataset.n:
        raise ValueError(f"k must satisfy 0 < k < n={dataset.n}, got {k}")
    q = _check_query(dataset, query)
    d = distances_to(dataset.values, q, dataset.metric)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(d.size), d))[:k]
    return order.astype(np.int64), d[order]


def brute_force_range(dataset: VectorDataset, query, r: float) -> tuple[np.ndarray, np.ndarray]:
    """All ids with ``distance <= r`` (inclusive), sorted by distance."""
    if dataset.metric is Metric.L2 and r < 0:
        raise ValueError("radius must be non-negative for L2")
    q = _check_query(dataset, query)
    d = distances_to(dataset.values, q, dataset.metric)
    ids = np.flatnonzero(d <= r)
    order = np.lexsort((ids, d[ids]))
    ids = ids[order]
    return ids.astype(np.int64), d[ids]


def knn_ground_truth(dataset: VectorDataset, queries: np.ndarray, k: int) -> GroundTruth:
    ids, dists = [], []
    for q in queries:
        i, d = brute_force_knn(dataset, q, k)
        ids.append(i)
        dists.append(d)
    return GroundTruth(ids, dists)


def range_ground_truth(dataset: VectorDataset, queries: np.ndarray, r: float) -> GroundTruth:
    ids, dists = [], []
    for q in queries:
        i, d = brute_force_range(dataset, q, r)
        ids.append(i)
        dists.append(d)
    return GroundTruth(ids, dists)


# ---------------------------------------------------------------------------
# sampling and synthetic data
# ---------------------------------------------------------------------------


def sample_subset(dataset: VectorDataset, ratio: float, seed: int = 0) -> tuple[VectorDataset, np.ndarray]:
    """Uniform sample without replacement of ``floor(ratio * n)`` vectors.

    Returns the subset and the sorted map from subset position to base id.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"sample ratio must be in (0, 1], got {ratio}")
    m = int(np.floor(ratio * dataset.n))
    if m < 1:
        raise ValueError(f"ratio {ratio} yields an empty sample of n={dataset.n}")
    if m == dataset.n:
        ids = np.arange(dataset.n, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        ids = np.sort(rng.choice(dataset.n, size=m, replace=False)).astype(np.int64)
    return VectorDataset(dataset.values[ids], dataset.metric), ids


def make_clustered(
    n: int,
    dim: int = 128,
    *,
    clusters: int = 64,
    latent_dim: int = 12,
    noise: float = 2.0,
    spread: float = 1.0,
    separation: float = 4.0,
    query_spread: float = 1.0,
    elem: str = "uint8",
    seed: int = 0,
    queries: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic SIFT-like data: clustered, low intrinsic dimension, uint8 range.

    Points come from a Gaussian mixture in a ``latent_dim`` space pushed through
    a fixed random linear map.  Queries are drawn from the same mixture and are
    not part of the base set.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, separation, size=(clusters, latent_dim))
    scales = rng.uniform(0.6, 1.4, size=clusters) * spread
    proj = rng.normal(0.0, 1.0, size=(latent_dim, dim)) / np.sqrt(latent_dim)
    offset = rng.uniform(40.0, 90.0, size=dim)

    def draw(count: int, widen: float = 1.0) -> np.ndarray:
        which = rng.integers(0, clusters, size=count)
        z = centers[which] + rng.normal(size=(count, latent_dim)) * scales[which, None] * widen
        x = z @ proj * 12.0 + offset + rng.normal(0.0, noise, size=(count, dim))
        if elem == "uint8":
            return np.clip(np.rint(x), 0, 255).astype(np.uint8)
        return (x / 64.0).astype(np.float32)

    return draw(n), draw(queries, query_spread)


def bigann_like(n: int = 10_000, queries: int = 1_000, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """128-d uint8 base and query sets with SIFT-like local cluster structure."""
    return make_clustered(
        n, 128, clusters=800, latent_dim=128, noise=4.0, spread=0.35, separation=0.5,
        seed=seed, queries=queries,
    )
