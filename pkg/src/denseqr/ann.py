"""Exact cosine search and an IVFPQ approximate index.

Vectors are L2-normalized, so cosine becomes an inner product.  The IVFPQ
index zero-pads them to a multiple of the sub-vector count, assigns each to a
coarse k-means centroid and product-quantizes the residual with one byte per
sub-vector.  Search probes the ``nprobe`` nearest centroids and scores codes
with per-subspace lookup tables.

Index file layout (little-endian)::

    magic   b"DQIV"   version u32
    dim u32  d_pad u32  M u32  n_partitions u32  ksub u32  flags u32
    centroids  tensor (n_partitions, d_pad) f4
    codebooks  tensor (M, ksub, d_pad / M) f4
    per partition: ids tensor (n,) i8, codes tensor (n, M) u1
                   (with the lossless flag: vectors tensor (n, dim) f4 instead)

Tensors use the container tensor encoding from :mod:`denseqr.serialize`.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .evalkit import RankedList, rank_scores
from .rng import make_rng
from .serialize import FormatError, _read_exact, read_tensor, write_tensor
from .tensor import ContractError, ShapeError

MAGIC = b"DQIV"
VERSION = 1
KSUB = 256
FLAG_LOSSLESS = 1


def normalize_rows(x) -> np.ndarray:
    """Unit-norm float32 rows; zero rows stay zero."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return (x / np.where(n > 0, n, 1.0)).astype(np.float32)


def pad_to(x: np.ndarray, d_pad: int) -> np.ndarray:
    if x.shape[1] == d_pad:
        return x
    out = np.zeros((x.shape[0], d_pad), dtype=x.dtype)
    out[:, : x.shape[1]] = x
    return out


def row_dots(x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-row float64 inner products; each value depends on its own row only."""
    return (x.astype(np.float64) * q.astype(np.float64)).sum(axis=1)


def _top(query_id: int, ids: np.ndarray, scores: np.ndarray, k: int, exclude: int | None) -> RankedList:
    if exclude is not None:
        keep = ids != exclude
        ids, scores = ids[keep], scores[keep]
    return rank_scores(query_id, ids, scores, k)


def brute_force_search(vectors, query, k: int, ids: Sequence[int] | None = None,
                       query_id: int = -1, exclude: int | None = None) -> RankedList:
    """Exact cosine top-``k`` over all rows of ``vectors``."""
    x = normalize_rows(vectors)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids, dtype=np.int64)
    q = normalize_rows(query)[0]
    if q.shape[0] != x.shape[1]:
        raise ShapeError(f"query dim {q.shape[0]} vs stored dim {x.shape[1]}")
    return _top(query_id, ids, row_dots(x, q), k, exclude)


class ExactIndex:
    """Normalized vectors with their question ids; the evaluation default."""

    def __init__(self, ids: Sequence[int], vectors):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = normalize_rows(vectors)
        if len(self.ids) != len(self.vectors):
            raise ShapeError("ids and vectors differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ContractError("duplicate question ids")
        self._row = {int(i): r for r, i in enumerate(self.ids)}

    def vectors_of(self, ids: Sequence[int]) -> np.ndarray:
        return self.vectors[[self._row[int(i)] for i in ids]]

    def search(self, query, k: int, query_id: int = -1, exclude_self: bool = False) -> RankedList:
        q = normalize_rows(query)[0]
        return _top(query_id, self.ids, row_dots(self.vectors, q), k,
                    query_id if exclude_self else None)

    def search_many(self, query_ids: Sequence[int], queries, k: int,
                    exclude_self: bool = False) -> list[RankedList]:
        return [self.search(q, k, int(qid), exclude_self) for qid, q in zip(query_ids, queries)]


# -- k-means -----------------------------------------------------------------

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
        else:
            centers[j] = x[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(1))
    return centers


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assign: np.ndarray
    objective: list[float]
    iterations: int


def kmeans(x, k: int, rng: np.random.Generator, max_iter: int = 25, tol: float = 1e-4) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; stops at ``max_iter`` or centroid shift < ``tol``.

    Empty clusters are re-seeded with the point farthest from its centroid.
    ``objective`` holds the mean squared distance after each assignment step.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1 or n < k:
        raise ContractError(f"k-means needs at least k={k} points, got {n}")
    c = kmeans_pp_init(x, k, rng)
    history: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, c)
        assign = d.argmin(1)
        best = d[np.arange(n), assign]
        history.append(float(best.mean()))
        counts = np.bincount(assign, minlength=k)
        new = np.zeros_like(c)
        np.add.at(new, assign, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        taken: set[int] = set()
        for j in np.flatnonzero(~nonempty):
            order = np.argsort(-best, kind="stable")
            far = next(int(i) for i in order if int(i) not in taken)
            taken.add(far)
            new[j] = x[far]
            best[far] = 0.0
        shift = float(np.sqrt(((new - c) ** 2).sum(1)).max())
        c = new
        if shift < tol:
            break
    d = _sq_dists(x, c)
    assign = d.argmin(1)
    return KMeansResult(c, assign, history, it)


# -- IVFPQ -------------------------------------------------------------------

def resolve_partitions(requested: int, n: int) -> int:
    """``requested`` unless it exceeds the corpus, then ceil(sqrt(n))."""
    if requested <= n:
        return requested
    return max(1, math.ceil(math.sqrt(n)))


@dataclass(frozen=True)
class SearchParams:
    k: int = 100
    nprobe: int = 10


class IvfPqIndex:
    def __init__(self, dim: int, M: int, centroids: np.ndarray, codebooks: np.ndarray,
                 lossless: bool = False):
        self.dim = dim
        self.M = M
        self.d_pad = centroids.shape[1]
        self.centroids = centroids.astype(np.float32)
        self.codebooks = codebooks.astype(np.float32)
        self.lossless = lossless
        n_part = len(centroids)
        self._ids: list[list[int]] = [[] for _ in range(n_part)]
        self._codes: list[list[np.ndarray]] = [[] for _ in range(n_part)]
        self._frozen: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._seen: set[int] = set()

    @property
    def n_partitions(self) -> int:
        return len(self.centroids)

    @property
    def dsub(self) -> int:
        return self.d_pad // self.M

    def __len__(self) -> int:
        return len(self._seen)

    # -- build --------------------------------------------------------------
    @classmethod
    def train(cls, vectors, n_partitions: int = 2000, M: int = 16, seed: int = 0,
              lossless: bool = False, max_iter: int = 25) -> "IvfPqIndex":
        x = normalize_rows(vectors)
        n, dim = x.shape
        if n < n_partitions:
            raise ContractError(f"{n} training vectors < n_partitions={n_partitions}; "
                                f"use n_partitions <= {n} (e.g. {math.ceil(math.sqrt(n))})")
        if M < 1:
            raise ContractError("M must be >= 1")
        d_pad = -(-dim // M) * M
        xp = pad_to(x, d_pad).astype(np.float64)
        coarse = kmeans(xp, n_partitions, make_rng(seed, "ivf", "coarse"), max_iter=max_iter)
        resid = xp - coarse.centroids[coarse.assign]
        dsub = d_pad // M
        books = np.zeros((M, KSUB, dsub))
        for m in range(M):
            sub = resid[:, m * dsub:(m + 1) * dsub]
            k = min(KSUB, n)
            km = kmeans(sub, k, make_rng(seed, "ivf", "pq", m), max_iter=max_iter)
            books[m, :k] = km.centroids
            books[m, k:] = km.centroids[0]
        return cls(dim, M, coarse.centroids, books, lossless)

    def _prepare(self, vectors) -> tuple[np.ndarray, np.ndarray]:
        x = normalize_rows(vectors)
        if x.shape[1] != self.dim:
            raise ShapeError(f"vector dim {x.shape[1]} vs index dim {self.dim}")
        return x, pad_to(x, self.d_pad)

    def assign(self, xp: np.ndarray) -> np.ndarray:
        return _sq_dists(xp.astype(np.float64), self.centroids.astype(np.float64)).argmin(1)

    def encode(self, resid: np.ndarray) -> np.ndarray:
        codes = np.empty((len(resid), self.M), dtype=np.uint8)
        for m in range(self.M):
            sub = resid[:, m * self.dsub:(m + 1) * self.dsub].astype(np.float64)
            codes[:, m] = _sq_dists(sub, self.codebooks[m].astype(np.float64)).argmin(1)
        return codes

    def add(self, ids: Sequence[int], vectors) -> None:
        ids = [int(i) for i in np.atleast_1d(ids)]
        if len(set(ids)) != len(ids) or self._seen.intersection(ids):
            raise ContractError("duplicate question id in add")
        x, xp = self._prepare(vectors)
        if len(ids) != len(x):
            raise ShapeError("ids and vectors differ in length")
        part = self.assign(xp)
        if self.lossless:
            payload = x
        else:
            payload = self.encode(xp - self.centroids[part])
        for i, p, row in zip(ids, part.tolist(), payload):
            self._ids[p].append(i)
            self._codes[p].append(row)
        self._seen.update(ids)
        self._frozen = None

    def _lists(self) -> list[tuple[np.ndarray, np.ndarray]]:
        if self._frozen is None:
            width = self.dim if self.lossless else self.M
            dtype = np.float32 if self.lossless else np.uint8
            self._frozen = [
                (np.asarray(ids, dtype=np.int64),
                 np.asarray(rows, dtype=dtype).reshape(len(ids), width))
                for ids, rows in zip(self._ids, self._codes)
            ]
        return self._frozen

    def partition_sizes(self) -> list[int]:
        return [len(i) for i in self._ids]

    # -- search -------------------------------------------------------------
    def probe(self, qp: np.ndarray, nprobe: int) -> np.ndarray:
        dist = _sq_dists(qp[None, :].astype(np.float64), self.centroids.astype(np.float64))[0]
        return np.lexsort((np.arange(len(dist)), dist))[:nprobe]

    def search(self, query, params: SearchParams = SearchParams(), query_id: int = -1,
               exclude_self: bool = False) -> RankedList:
        if params.k <= 0:
            raise ContractError(f"k must be positive, got {params.k}")
        if not 1 <= params.nprobe <= self.n_partitions:
            raise ContractError(f"nprobe must lie in [1, {self.n_partitions}]")
        if not self._seen:
            return RankedList(query_id, [])
        q, qp = self._prepare(query)
        q, qp = q[0], qp[0]
        lists = self._lists()
        ids_parts, score_parts = [], []
        qsub = qp.astype(np.float64).reshape(self.M, self.dsub)
        base = np.einsum("md,mkd->mk", qsub, self.codebooks.astype(np.float64))
        for p in self.probe(qp, params.nprobe):
            ids, rows = lists[p]
            if not len(ids):
                continue
            if self.lossless:
                scores = row_dots(rows, q)
            else:
                csub = self.centroids[p].astype(np.float64).reshape(self.M, self.dsub)
                table = base + (qsub * csub).sum(1)[:, None]
                scores = table[np.arange(self.M)[None, :], rows].sum(1)
            ids_parts.append(ids)
            score_parts.append(scores)
        if not ids_parts:
            return RankedList(query_id, [])
        return _top(query_id, np.concatenate(ids_parts), np.concatenate(score_parts), params.k,
                    query_id if exclude_self else None)

    def search_many(self, query_ids: Sequence[int], queries, params: SearchParams = SearchParams(),
                    exclude_self: bool = False) -> list[RankedList]:
        return [self.search(q, params, int(qid), exclude_self) for qid, q in zip(query_ids, queries)]

    # -- persistence ----------------------------------------------------------
    def to_bytes(self) -> bytes:
        f = io.BytesIO()
        f.write(MAGIC)
        flags = FLAG_LOSSLESS if self.lossless else 0
        f.write(struct.pack("<7I", VERSION, self.dim, self.d_pad, self.M, self.n_partitions, KSUB, flags))
        write_tensor(f, self.centroids)
        write_tensor(f, self.codebooks)
        for ids, rows in self._lists():
            write_tensor(f, ids)
            write_tensor(f, rows)
        return f.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "IvfPqIndex":
        f = io.BytesIO(data)
        if _read_exact(f, 4) != MAGIC:
            raise FormatError("not an IVFPQ index file")
        version, dim, d_pad, M, n_part, ksub, flags = struct.unpack("<7I", _read_exact(f, 28))
        if version != VERSION or ksub != KSUB or d_pad % M:
            raise FormatError(f"unsupported index header (version {version}, ksub {ksub})")
        centroids = read_tensor(f)
        books = read_tensor(f)
        if centroids.shape != (n_part, d_pad) or books.shape != (M, ksub, d_pad // M):
            raise FormatError("index block shapes disagree with the header")
        idx = cls(dim, M, centroids, books, bool(flags & FLAG_LOSSLESS))
        for p in range(n_part):
            ids = read_tensor(f)
            rows = read_tensor(f)
            if not idx.lossless and rows.size and int(rows.max()) >= ksub:
                raise FormatError("code byte out of codebook range")
            idx._ids[p] = ids.tolist()
            idx._codes[p] = list(rows)
            idx._seen.update(idx._ids[p])
        if f.read(1):
            raise FormatError("trailing bytes after index")
        return idx

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "IvfPqIndex":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def overlap_recall(approx: Sequence[RankedList], exact: Sequence[RankedList], k: int) -> float:
    """Mean fraction of each exact top-``k`` present in the approximate top-``k``."""
    vals = []
    for a, e in zip(approx, exact):
        truth = set(e.ids[:k])
        if truth:
            vals.append(len(truth & set(a.ids[:k])) / len(truth))
    return float(np.mean(vals)) if vals else 0.0
