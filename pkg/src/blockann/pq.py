"""Product quantization: per-subspace k-means codebooks and table-based distances."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .dataset import Metric, VectorDataset, sample_subset

log = logging.getLogger(__name__)

CENTROIDS = 256
TRAIN_CAP = 100_000
_MAGIC = b"BAPQ0001"
_HEADER = struct.Struct("<8sIIBQ")  # magic, M, D, metric, n


def choose_m(n: int, dim: int, budget: int) -> int:
    """Largest M with n*M <= budget, capped at dim and at least 1."""
    if n < 1:
        raise ValueError("n must be positive")
    if budget < n:
        raise ValueError(f"budget of {budget} bytes is below one byte per vector ({n})")
    return max(1, min(dim, budget // n))


def subspace_dims(dim: int, m: int) -> np.ndarray:
    if not 1 <= m <= dim:
        raise ValueError(f"need 1 <= M <= D, got M={m}, D={dim}")
    base, extra = divmod(dim, m)
    return np.array([base + 1] * extra + [base] * (m - extra), dtype=np.int64)


@dataclass
class PQCodebook:
    dims: np.ndarray
    centroids: list  # M arrays of shape (256, dims[s]), float32
    metric: Metric = Metric.L2

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)])
        if len(self.centroids) != len(self.dims):
            raise ValueError("one centroid table per subspace expected")
        for s, c in enumerate(self.centroids):
            if c.shape != (CENTROIDS, self.dims[s]):
                raise ValueError(f"subspace {s}: centroid table shape {c.shape}")

    @property
    def m(self) -> int:
        return len(self.dims)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def split(self, x: np.ndarray, s: int) -> np.ndarray:
        return x[..., self.offsets[s] : self.offsets[s + 1]]

    def encode(self, vectors) -> np.ndarray:
        x = np.asarray(vectors, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ValueError(f"vectors have dim {x.shape[1]}, codebook expects {self.dim}")
        codes = np.empty((x.shape[0], self.m), dtype=np.uint8)
        for s in range(self.m):
            codes[:, s] = _assign(self.split(x, s), self.centroids[s])[0]
        return codes

    def decode(self, codes) -> np.ndarray:
        codes = np.atleast_2d(np.asarray(codes))
        return np.concatenate([self.centroids[s][codes[:, s]] for s in range(self.m)], axis=1)

    def distance_table(self, query) -> np.ndarray:
        """(M, 256) partial scores; their sum over subspaces is the approximate distance."""
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query has shape {q.shape}, expected ({self.dim},)")
        table = np.empty((self.m, CENTROIDS), dtype=np.float64)
        for s in range(self.m):
            c = self.centroids[s].astype(np.float64)
            qs = self.split(q, s)
            if self.metric is Metric.IP:
                table[s] = -(c @ qs)
            else:
                diff = c - qs
                table[s] = np.einsum("ij,ij->i", diff, diff)
        return table


def approx_distance(table: np.ndarray, code) -> float:
    code = np.asarray(code, dtype=np.int64)
    return float(table[np.arange(table.shape[0]), code].sum())


def approx_distances(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Vectorized lookup for a batch of codes, shape (k, M) -> (k,)."""
    return table[np.arange(table.shape[0]), codes.astype(np.intp)].sum(axis=1)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _assign(x: np.ndarray, c: np.ndarray, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row (ties to the lowest index) and the squared distance."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    labels = np.empty(x.shape[0], dtype=np.int64)
    best = np.empty(x.shape[0], dtype=np.float64)
    for lo in range(0, x.shape[0], chunk):
        d = _sq_dists(x[lo : lo + chunk], c)
        labels[lo : lo + chunk] = d.argmin(axis=1)
        best[lo : lo + chunk] = d[np.arange(d.shape[0]), labels[lo : lo + chunk]]
    return labels, best


def kmeans(x: np.ndarray, k: int, iterations: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd's algorithm with random-sample init; empty clusters take the farthest points."""
    x = np.asarray(x, dtype=np.float64)
    centroids = x[rng.choice(x.shape[0], size=k, replace=False)].copy()
    for _ in range(iterations):
        labels, best = _assign(x, centroids)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        full = counts > 0
        centroids[full] = sums[full] / counts[full, None]
        empty = np.flatnonzero(~full)
        if empty.size:
            far = np.argsort(-best, kind="stable")[: empty.size]
            centroids[empty] = x[far]
    return centroids


def train_pq(
    training,
    m: int,
    iterations: int = 12,
    seed: int = 0,
    metric: Metric | str = Metric.L2,
) -> PQCodebook:
    x = np.asarray(training.as_float32() if isinstance(training, VectorDataset) else training, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training set must be a non-empty 2-d array")
    if x.shape[0] < CENTROIDS:
        log.warning("only %d training vectors; padding to %d by duplication", x.shape[0], CENTROIDS)
        x = np.resize(x, (CENTROIDS, x.shape[1]))
    if np.all(x == x[0]):
        log.warning("training vectors are all identical; codebook collapses to one centroid")
    dims = subspace_dims(x.shape[1], m)
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(dims)])
    centroids = [
        kmeans(x[:, offsets[s] : offsets[s + 1]], CENTROIDS, iterations, rng).astype(np.float32)
        for s in range(m)
    ]
    return PQCodebook(dims, centroids, Metric(metric))


def train_for_dataset(dataset: VectorDataset, m: int, iterations: int = 12, seed: int = 0) -> PQCodebook:
    """Train on at most 100K vectors drawn uniformly from the dataset."""
    sample = dataset
    if dataset.n > TRAIN_CAP:
        sample, _ = sample_subset(dataset, TRAIN_CAP / dataset.n, seed=seed)
    return train_pq(sample, m, iterations, seed, dataset.metric)


def encode_all(dataset, codebook: PQCodebook) -> np.ndarray:
    values = dataset.as_float32() if isinstance(dataset, VectorDataset) else dataset
    return codebook.encode(values)


def save_pq(path, codebook: PQCodebook, codes: np.ndarray) -> None:
    """Header, subspace dims, centroid tables, then n*M code bytes."""
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    if codes.ndim != 2 or codes.shape[1] != codebook.m:
        raise ValueError("codes must be (n, M)")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, codebook.m, codebook.dim, codebook.metric.code, codes.shape[0]))
        f.write(codebook.dims.astype("<u4").tobytes())
        for c in codebook.centroids:
            f.write(c.astype("<f4").tobytes())
        f.write(codes.tobytes())


def load_pq(path) -> tuple[PQCodebook, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    magic, m, dim, metric, n = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a PQ file")
    off = _HEADER.size
    dims = np.frombuffer(buf, dtype="<u4", count=m, offset=off).astype(np.int64)
    off += 4 * m
    if int(dims.sum()) != dim:
        raise ValueError(f"{path}: subspace dims sum to {dims.sum()}, header says {dim}")
    centroids = []
    for d in dims:
        centroids.append(np.frombuffer(buf, dtype="<f4", count=CENTROIDS * int(d), offset=off).reshape(CENTROIDS, int(d)).copy())
        off += 4 * CENTROIDS * int(d)
    codes = np.frombuffer(buf, dtype=np.uint8, count=n * m, offset=off).reshape(n, m).copy()
    return PQCodebook(dims, centroids, Metric.from_code(metric)), codes
