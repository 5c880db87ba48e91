"""Contrastive training of the encoder with Adam and warmup / linear decay."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .encoder import Encoder, EncoderConfig, vocab_hash
from .evalkit import recall_at_k
from .lexical import InvertedIndex, Vocab
from .rng import make_rng
from .sampling import Batch, BatchStream, SamplerConfig, mine_pools
from .tensor import ContractError, Tensor

MASKED = -1e9


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    batch_size: int = 32
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    epochs: int = 20
    pool_depth: int = 100
    num_negatives: int = 2
    resample_each_epoch: bool = True
    seed: int = 0
    eval_every: int = 0  # 0 evaluates once per epoch
    eval_k: int = 100
    temperature: float = 1.0
    max_steps: int = 0  # 0 means epochs * steps_per_epoch

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ContractError("warmup_fraction must lie in (0, 1)")
        if self.peak_lr <= 0:
            raise ContractError("peak_lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be >= 1")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.pool_depth, self.num_negatives, self.seed, self.resample_each_epoch)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def cosine_scores(q: Tensor, c: Tensor) -> Tensor:
    """(B, D) x (C, D) -> (B, C) cosine similarities."""
    return T.l2_normalize(q) @ T.l2_normalize(c).transpose(1, 0)


def batch_loss(q: Tensor, c: Tensor, labels: Sequence[int], allowed: np.ndarray | None = None,
               temperature: float = 1.0) -> Tensor:
    """Mean softmax cross-entropy of each query's labelled candidate.

    ``allowed[i, j]`` False removes candidate j from query i's softmax.
    """
    scores = cosine_scores(q, c) * (1.0 / temperature)
    return loss_from_scores(scores, labels, allowed)


def loss_from_scores(scores: Tensor, labels: Sequence[int], allowed: np.ndarray | None = None) -> Tensor:
    B, C = scores.shape
    labels = np.asarray(labels, dtype=np.int64)
    if C == 0 or labels.shape != (B,):
        raise ContractError("need one label per query and a non-empty candidate set")
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if not allowed.any(axis=1).all():
            raise ContractError("a query has an empty candidate set")
        if not allowed[np.arange(B), labels].all():
            raise ContractError("a label points at a masked candidate")
        scores = scores + Tensor(np.where(allowed, 0.0, MASKED).astype(scores.dtype))
    logp = T.log_softmax(scores, axis=-1)
    return -(logp[np.arange(B), labels].mean())


def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return max(1, math.ceil(config.warmup_fraction * total_steps))


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, config)
    if step <= w:
        return config.peak_lr * step / w
    if total_steps == w:
        return 0.0
    return config.peak_lr * (total_steps - step) / (total_steps - w)


def adam_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam update in place; parameters without grads see a zero gradient."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr != 0.0:
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.data.dtype)


def step_batch(encoder: Encoder, token_ids: Mapping[int, Sequence[int]], batch: Batch,
               temperature: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Encode a batch's queries and candidates in one pass and return the loss."""
    seqs = [token_ids[q] for q in batch.query_ids] + [token_ids[c] for c in batch.candidate_ids]
    enc = encoder.forward(seqs, training=training, rng=rng)
    B = len(batch.query_ids)
    return batch_loss(enc[:B], enc[B:], batch.labels, batch.allowed, temperature)


def dev_recall(encoder: Encoder, token_ids: Mapping[int, Sequence[int]],
               qrels: Mapping[int, set[int]], k: int) -> float:
    from .ann import ExactIndex

    ids = sorted(token_ids)
    idx = ExactIndex(ids, encoder.encode([token_ids[i] for i in ids]))
    queries = sorted(q for q in qrels if qrels[q])
    if not queries:
        return 0.0
    qvecs = idx.vectors_of(queries)
    runs = idx.search_many(queries, qvecs, k, exclude_self=True)
    return float(np.mean([recall_at_k(r, qrels, k) for r in runs]))


@dataclass
class LogRow:
    step: int
    lr: float
    loss: float
    dev: float | None = None

    def tsv(self) -> str:
        dev = "" if self.dev is None else f"{self.dev:.6f}"
        return f"{self.step}\t{self.lr:.8e}\t{self.loss:.6f}\t{dev}"


LOG_HEADER = "step\tlr\tloss\tdev_recall@100"


@dataclass
class TrainResult:
    encoder: Encoder
    log: list[LogRow]
    best_step: int
    best_dev: float
    meta: dict[str, str]

    def log_tsv(self) -> str:
        return "\n".join([LOG_HEADER] + [r.tsv() for r in self.log]) + "\n"

    def checkpoint(self) -> bytes:
        return self.encoder.to_bytes(self.meta)


def train(dataset: Dataset, vocab: Vocab, encoder_config: EncoderConfig, config: TrainConfig,
          index: InvertedIndex | None = None, pretrained: tuple[np.ndarray, np.ndarray] | None = None,
          pools: Mapping[int, list[int]] | None = None, progress=None) -> TrainResult:
    """Train from scratch and return the best-dev encoder with its log.

    Without dev qrels every evaluation scores 0 and the final weights are kept.
    ``pools`` overrides BM25 mining with precomputed negative pools.
    """
    if not dataset.train_pairs:
        raise ContractError("no training pairs")
    token_ids = dataset.token_ids(vocab, encoder_config.max_len)
    train_qrels: dict[int, set[int]] = {}
    for a, b in dataset.train_pairs:
        train_qrels.setdefault(a, set()).add(b)

    sampler = config.sampler()
    if pools is not None:
        pools = {q: list(p)[:sampler.pool_depth] for q, p in pools.items()}
    elif sampler.pool_depth > 0:
        toks = dataset.tokens()
        index = index or InvertedIndex.build(toks)
        pools = mine_pools(index, toks, train_qrels, [a for a, _ in dataset.train_pairs], sampler.pool_depth)
    else:
        pools = {}
    stream = BatchStream(dataset.train_pairs, pools, train_qrels, sampler)

    encoder = Encoder(encoder_config, seed=config.seed, pretrained=pretrained)
    params = encoder.params
    state = OptimizerState()
    sample_rng = make_rng(config.seed, "sampling")
    drop_rng = make_rng(config.seed, "dropout")

    per_epoch = stream.steps_per_epoch(config.batch_size)
    total = per_epoch * config.epochs
    if config.max_steps:
        total = min(total, config.max_steps)
    eval_every = config.eval_every or per_epoch

    log: list[LogRow] = []
    best_dev, best_step = -1.0, 0
    best_state = {k: v.data.copy() for k, v in params.items()}
    step = 0
    for epoch in range(config.epochs):
        for batch in stream.batches(epoch, config.batch_size, sample_rng):
            if step >= total:
                break
            lr = lr_at(step, total, config)
            encoder.zero_grad()
            loss = step_batch(encoder, token_ids, batch, config.temperature, True, drop_rng)
            loss.backward()
            adam_step(params, state, lr, config)
            step += 1
            row = LogRow(step, lr, loss.item())
            if step % eval_every == 0 or step == total:
                row.dev = dev_recall(encoder, token_ids, dataset.dev_qrels, config.eval_k) \
                    if dataset.dev_qrels else 0.0
                if row.dev > best_dev:
                    best_dev, best_step = row.dev, step
                    best_state = {k: v.data.copy() for k, v in params.items()}
            log.append(row)
            if progress:
                progress(row)
        if step >= total:
            break

    encoder.load_state_dict(best_state)
    meta = {
        "vocab_hash": vocab_hash(vocab.words),
        "best_step": str(best_step),
        "best_dev_recall": f"{best_dev:.6f}",
        "total_steps": str(total),
    }
    meta.update({f"train.{k}": str(v) for k, v in asdict(config).items()})
    return TrainResult(encoder, log, best_step, best_dev, meta)
