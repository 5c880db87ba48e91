"""Training examples with BM25 hard negatives and in-batch negatives.

Each example's candidate set in a batch is its own positive and hard
negatives plus the positives and hard negatives of every other example.
Candidates that are judged positives of the example (other than its labelled
positive), or the query itself, are masked out of that example's softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .lexical import InvertedIndex
from .tensor import ContractError


@dataclass(frozen=True)
class TrainingExample:
    query_id: int
    positive_id: int
    hard_negative_ids: tuple[int, ...] = ()

    def __post_init__(self):
        negs = self.hard_negative_ids
        if self.positive_id in negs or self.query_id in negs:
            raise ContractError(f"example {self.query_id}: negatives contain the query or its positive")
        if len(set(negs)) != len(negs):
            raise ContractError(f"example {self.query_id}: duplicate negatives")


@dataclass(frozen=True)
class SamplerConfig:
    pool_depth: int = 100
    num_negatives: int = 2
    seed: int = 0
    # draw fresh negatives from the static pools every epoch; False fixes them once
    resample_each_epoch: bool = True

    def __post_init__(self):
        if self.pool_depth < 0 or self.num_negatives < 0:
            raise ContractError("pool_depth and num_negatives must be non-negative")
        if self.pool_depth == 0 and self.num_negatives:
            object.__setattr__(self, "num_negatives", 0)


def mine_pool(index: InvertedIndex, query_tokens: Mapping[int, Sequence[str]],
              qrels: Mapping[int, set[int]], query_id: int, depth: int) -> list[int]:
    """BM25 top-``depth`` for the query minus the query itself and its judged positives."""
    if query_id not in query_tokens:
        raise KeyError(f"unknown query id {query_id}")
    if depth == 0:
        return []
    ranked = index.search(query_tokens[query_id], depth, query_id=query_id)
    banned = qrels.get(query_id, set()) | {query_id}
    return [i for i in ranked.ids if i not in banned]


def mine_pools(index: InvertedIndex, query_tokens: Mapping[int, Sequence[str]],
               qrels: Mapping[int, set[int]], query_ids: Sequence[int], depth: int) -> dict[int, list[int]]:
    return {q: mine_pool(index, query_tokens, qrels, q, depth) for q in sorted(set(query_ids))}


def sample_negatives(pool: Sequence[int], j: int, rng: np.random.Generator) -> list[int]:
    """Uniform draw of ``j`` ids without replacement; the whole pool if it is smaller."""
    if j <= 0 or not pool:
        return []
    if len(pool) <= j:
        return [pool[i] for i in rng.permutation(len(pool))]
    return [pool[i] for i in rng.choice(len(pool), size=j, replace=False)]


@dataclass
class Batch:
    """Queries, the shared candidate list, and per-query candidate masks."""

    examples: list[TrainingExample]
    candidate_ids: list[int]
    allowed: np.ndarray  # (B, C) bool
    labels: np.ndarray  # (B,) column of each example's positive
    query_ids: list[int] = field(init=False)

    def __post_init__(self):
        self.query_ids = [e.query_id for e in self.examples]

    def candidates_of(self, i: int) -> list[int]:
        return [c for c, ok in zip(self.candidate_ids, self.allowed[i]) if ok]


def build_batch(examples: Sequence[TrainingExample], qrels: Mapping[int, set[int]]) -> Batch:
    if not examples:
        raise ContractError("empty batch")
    cands: list[int] = []
    col: dict[int, int] = {}
    for e in examples:
        for c in (e.positive_id, *e.hard_negative_ids):
            if c not in col:
                col[c] = len(cands)
                cands.append(c)
    allowed = np.ones((len(examples), len(cands)), dtype=bool)
    labels = np.zeros(len(examples), dtype=np.int64)
    for i, e in enumerate(examples):
        judged = qrels.get(e.query_id, set())
        for c, k in col.items():
            if c == e.query_id or (c in judged and c != e.positive_id):
                allowed[i, k] = False
        labels[i] = col[e.positive_id]
    return Batch(list(examples), cands, allowed, labels)


class BatchStream:
    """Per-epoch example lists and batches, reproducible from the sampler seed."""

    def __init__(self, pairs: Sequence[tuple[int, int]], pools: Mapping[int, list[int]],
                 qrels: Mapping[int, set[int]], config: SamplerConfig):
        if not pairs:
            raise ContractError("no training pairs")
        self.pairs = list(pairs)
        self.pools = pools
        self.qrels = qrels
        self.config = config
        self._fixed: list[list[int]] | None = None

    def epoch_examples(self, epoch: int, rng: np.random.Generator) -> list[TrainingExample]:
        cfg = self.config
        if cfg.resample_each_epoch or self._fixed is None:
            negs = []
            for q, p in self.pairs:
                pool = [c for c in self.pools.get(q, []) if c != p]
                negs.append(sample_negatives(pool, cfg.num_negatives, rng))
            if not cfg.resample_each_epoch:
                self._fixed = negs
        else:
            negs = self._fixed
        order = rng.permutation(len(self.pairs))
        return [TrainingExample(self.pairs[i][0], self.pairs[i][1], tuple(negs[i])) for i in order]

    def batches(self, epoch: int, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
        if batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        examples = self.epoch_examples(epoch, rng)
        for s in range(0, len(examples), batch_size):
            yield build_batch(examples[s:s + batch_size], self.qrels)

    def steps_per_epoch(self, batch_size: int) -> int:
        return -(-len(self.pairs) // batch_size)
