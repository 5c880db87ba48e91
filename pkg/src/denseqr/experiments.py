"""Desk-scale training protocol shared by the sweeps and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ann import ExactIndex
from .data import Dataset
from .encoder import Encoder, EncoderConfig
from .evalkit import evaluate, discrimination_diagnostic, sample_triples
from .lexical import InvertedIndex, Vocab, build_vocab
from .rng import make_rng
from .synthetic import SyntheticConfig, generate
from .trainer import TrainConfig, train


@dataclass(frozen=True)
class Protocol:
    """Reduced model width and epoch budget for single-CPU runs; optimizer defaults unchanged."""

    d: int = 64
    num_layers: int = 3
    num_heads: int = 4
    max_len: int = 12
    dropout_p: float = 0.1
    peak_lr: float = 1e-4
    epochs: int = 3
    batch_size: int = 32
    num_negatives: int = 2
    temperature: float = 1.0

    def encoder_config(self, vocab_size: int, connectivity: str, num_layers: int | None = None) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, d=self.d, num_layers=num_layers or self.num_layers,
                             num_heads=self.num_heads, max_len=self.max_len, dropout_p=self.dropout_p,
                             connectivity=connectivity)

    def train_config(self, pool_depth: int, seed: int) -> TrainConfig:
        return TrainConfig(peak_lr=self.peak_lr, batch_size=self.batch_size, epochs=self.epochs,
                           pool_depth=pool_depth, num_negatives=self.num_negatives if pool_depth else 0,
                           temperature=self.temperature, seed=seed)


@dataclass
class Prepared:
    dataset: Dataset
    vocab: Vocab
    index: InvertedIndex


def prepare(dataset: Dataset | None = None, cfg: SyntheticConfig = SyntheticConfig()) -> Prepared:
    ds = dataset if dataset is not None else generate(cfg)[0]
    toks = ds.tokens()
    return Prepared(ds, build_vocab(toks.values()), InvertedIndex.build(toks))


@dataclass
class VariantResult:
    connectivity: str
    num_layers: int
    pool_depth: int
    seed: int
    metrics: dict[str, float]
    discrimination: list[float]
    encoder: Encoder


def exact_runs(encoder: Encoder, token_ids: dict[int, list[int]], queries, k: int = 100):
    ids = sorted(token_ids)
    idx = ExactIndex(ids, encoder.encode([token_ids[i] for i in ids]))
    queries = sorted(queries)
    return idx.search_many(queries, idx.vectors_of(queries), k, exclude_self=True)


EVAL_METRICS = (("recall", 10), ("recall", 20), ("recall", 50), ("recall", 100),
                ("mrr", 100), ("map", 100), ("ndcg", 10))


def run_variant(prep: Prepared, connectivity: str = "dense", pool_depth: int = 100, seed: int = 0,
                protocol: Protocol = Protocol(), num_layers: int | None = None,
                split: str = "test") -> VariantResult:
    """Train one model, then score it on ``split`` and run the discrimination diagnostic."""
    enc_cfg = protocol.encoder_config(len(prep.vocab), connectivity, num_layers)
    res = train(prep.dataset, prep.vocab, enc_cfg, protocol.train_config(pool_depth, seed), prep.index)
    qrels = prep.dataset.test_qrels if split == "test" else prep.dataset.dev_qrels
    token_ids = prep.dataset.token_ids(prep.vocab, enc_cfg.max_len)
    report = evaluate(exact_runs(res.encoder, token_ids, qrels), qrels, EVAL_METRICS)
    triples = sample_triples(qrels, sorted(prep.dataset.corpus), make_rng(seed, "diagnostic"))
    diag = discrimination_diagnostic(res.encoder, [tuple(token_ids[i] for i in t) for t in triples])
    return VariantResult(connectivity, enc_cfg.num_layers, pool_depth, seed, report.mean, diag, res.encoder)


def mean_metric(results: list[VariantResult], name: str) -> float:
    return float(np.mean([r.metrics[name] for r in results]))


def with_epochs(protocol: Protocol, epochs: int) -> Protocol:
    return replace(protocol, epochs=epochs)
