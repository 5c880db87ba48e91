"""Ranking metrics, run files and the layer-wise discrimination diagnostic.

Relevance is binary.  MAP divides by the number of relevant items (trec_eval
convention), not by ``min(|relevant|, k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import ContractError

Qrels = dict[int, set[int]]

DEFAULT_METRICS = (("recall", 100), ("mrr", 100), ("map", 100), ("ndcg", 10))


@dataclass
class RankedList:
    """Results for one query, ordered by descending score then ascending id."""

    query_id: int
    items: list[tuple[int, float]] = field(default_factory=list)

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.items]

    def __len__(self) -> int:
        return len(self.items)


def rank_scores(query_id: int, ids: Sequence[int], scores: Sequence[float], k: int) -> RankedList:
    """Top-``k`` of ``(id, score)`` pairs ordered by (-score, id)."""
    if k <= 0:
        raise ContractError(f"k must be positive, got {k}")
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if ids.size == 0:
        return RankedList(query_id, [])
    if ids.size > k:
        # partial selection, then an exact lexsort over survivors and ties at the cut
        kth = np.partition(-scores, k - 1)[k - 1]
        keep = -scores <= kth
        ids, scores = ids[keep], scores[keep]
    order = np.lexsort((ids, -scores))[:k]
    return RankedList(query_id, [(int(ids[i]), float(scores[i])) for i in order])


def _ids(ranked) -> list[int]:
    return ranked.ids if isinstance(ranked, RankedList) else list(ranked)


def _relevant(ranked, qrels: Mapping[int, set[int]], query_id: int | None) -> set[int]:
    qid = ranked.query_id if query_id is None else query_id
    if qid not in qrels or not qrels[qid]:
        raise ContractError(f"no relevance judgments for query {qid}")
    return qrels[qid]


def recall_at_k(ranked: RankedList, qrels: Mapping[int, set[int]], k: int, query_id=None) -> float:
    rel = _relevant(ranked, qrels, query_id)
    return len(rel.intersection(_ids(ranked)[:k])) / len(rel)


def mrr_at_k(ranked: RankedList, qrels: Mapping[int, set[int]], k: int, query_id=None) -> float:
    rel = _relevant(ranked, qrels, query_id)
    for r, doc in enumerate(_ids(ranked)[:k], start=1):
        if doc in rel:
            return 1.0 / r
    return 0.0


def map_at_k(ranked: RankedList, qrels: Mapping[int, set[int]], k: int, query_id=None) -> float:
    rel = _relevant(ranked, qrels, query_id)
    hits = 0
    total = 0.0
    for r, doc in enumerate(_ids(ranked)[:k], start=1):
        if doc in rel:
            hits += 1
            total += hits / r
    return total / len(rel)


def ndcg_at_k(ranked: RankedList, qrels: Mapping[int, set[int]], k: int, query_id=None) -> float:
    rel = _relevant(ranked, qrels, query_id)
    dcg = sum(1.0 / math.log2(r + 1)
              for r, doc in enumerate(_ids(ranked)[:k], start=1) if doc in rel)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(rel), k) + 1))
    return dcg / idcg


METRICS = {"recall": recall_at_k, "mrr": mrr_at_k, "map": map_at_k, "ndcg": ndcg_at_k}


@dataclass
class MetricReport:
    """Per-query values and their means for a set of ``(metric, k)`` pairs."""

    metrics: tuple[tuple[str, int], ...]
    per_query: dict[int, dict[str, float]]

    @property
    def mean(self) -> dict[str, float]:
        names = [f"{m}@{k}" for m, k in self.metrics]
        n = len(self.per_query)
        return {name: (sum(v[name] for v in self.per_query.values()) / n if n else 0.0)
                for name in names}

    def to_tsv(self) -> str:
        names = [f"{m}@{k}" for m, k in self.metrics]
        lines = ["query_id\t" + "\t".join(names)]
        for qid in sorted(self.per_query):
            lines.append(f"{qid}\t" + "\t".join(f"{self.per_query[qid][n]:.6f}" for n in names))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        lines = [f"queries\t{len(self.per_query)}"]
        lines += [f"{name}\t{value:.6f}" for name, value in self.mean.items()]
        return "\n".join(lines) + "\n"


def evaluate(runs: Iterable[RankedList], qrels: Mapping[int, set[int]],
             metrics: Sequence[tuple[str, int]] = DEFAULT_METRICS) -> MetricReport:
    """Score every ranked list that has judgments; queries without qrels are skipped."""
    per_query = {}
    for ranked in runs:
        if not qrels.get(ranked.query_id):
            continue
        per_query[ranked.query_id] = {
            f"{m}@{k}": METRICS[m](ranked, qrels, k) for m, k in metrics
        }
    return MetricReport(tuple(metrics), per_query)


# -- run files -------------------------------------------------------------

def format_run(runs: Iterable[RankedList], tag: str) -> str:
    """Six-column ``query_id Q0 question_id rank score tag`` lines."""
    lines = []
    for ranked in runs:
        for r, (doc, score) in enumerate(ranked.items, start=1):
            lines.append(f"{ranked.query_id} Q0 {doc} {r} {score:.6f} {tag}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_run(path, runs: Iterable[RankedList], tag: str) -> None:
    Path(path).write_text(format_run(runs, tag), encoding="utf-8")


def read_run(path) -> list[RankedList]:
    runs: dict[int, list[tuple[int, int, float]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            try:
                qid, doc, r, score = int(parts[0]), int(parts[2]), int(parts[3]), float(parts[4])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            runs.setdefault(qid, []).append((r, doc, score))
    out = []
    for qid, rows in runs.items():
        rows.sort()
        out.append(RankedList(qid, [(doc, score) for _, doc, score in rows]))
    return out


# -- discrimination diagnostic ----------------------------------------------

COS_FLOOR = 1e-6


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dot = (a * b).sum(axis=-1)
    return np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)


def discrimination_from_vectors(q: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> np.ndarray:
    """Per-layer mean of |ln c(q, q+) - ln c(q, q-)| with cosines clamped to [1e-6, 1].

    Inputs have shape ``(layers, triples, dim)``.
    """
    if q.shape[1] == 0:
        raise ContractError("discrimination diagnostic needs at least one triple")
    cp = np.clip(_cos_rows(q, pos), COS_FLOOR, 1.0)
    cn = np.clip(_cos_rows(q, neg), COS_FLOOR, 1.0)
    return np.abs(np.log(cp) - np.log(cn)).mean(axis=1)


def discrimination_diagnostic(model, triples: Sequence[tuple[Sequence[int], Sequence[int], Sequence[int]]],
                              ) -> list[float]:
    """One value per layer 0..N for ``model`` over ``(q, q+, q-)`` token-id triples.

    ``model`` must offer ``layer_representations_batch(list_of_token_ids)``
    returning an array of shape ``(N + 1, batch, d)`` in eval mode.
    """
    if not triples:
        raise ContractError("discrimination diagnostic needs at least one triple")
    qs, ps, ns = zip(*triples)
    reps = [np.asarray(model.layer_representations_batch(list(group)), dtype=np.float64)
            for group in (qs, ps, ns)]
    return [float(v) for v in discrimination_from_vectors(*reps)]


def sample_triples(qrels: Mapping[int, set[int]], corpus_ids: Sequence[int],
                   rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """One ``(q, q+, q-)`` per judged pair; q- uniform over non-relevant corpus ids."""
    corpus_ids = np.asarray(sorted(corpus_ids), dtype=np.int64)
    triples = []
    for qid in sorted(qrels):
        rel = qrels[qid]
        if len(set(corpus_ids.tolist()) - rel - {qid}) == 0:
            raise ContractError(f"query {qid} has no non-relevant corpus question to sample")
        for pos in sorted(rel):
            while True:
                neg = int(corpus_ids[rng.integers(len(corpus_ids))])
                if neg != qid and neg not in rel:
                    break
            triples.append((qid, pos, neg))
    return triples
