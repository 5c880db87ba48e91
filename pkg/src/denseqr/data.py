"""TSV readers and writers for corpora, pairs and qrels.

All files are UTF-8, one record per line, tab separated:

* corpus: ``question_id<TAB>text``
* pairs:  ``query_id<TAB>positive_id``
* qrels:  ``query_id<TAB>relevant_id``

Question ids are non-negative integers.  Malformed lines raise
:class:`DataError` naming the file and line number.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .lexical import Vocab, tokenize


class DataError(ValueError):
    """A malformed input file."""


def _rows(path, ncols: int):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise DataError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def _qid(path, lineno, raw: str) -> int:
    try:
        v = int(raw)
    except ValueError:
        raise DataError(f"{path}:{lineno}: question id {raw!r} is not an integer") from None
    if v < 0:
        raise DataError(f"{path}:{lineno}: question id {v} is negative")
    return v


def read_corpus(path) -> dict[int, str]:
    corpus: dict[int, str] = {}
    for lineno, (qid, text) in _rows(path, 2):
        q = _qid(path, lineno, qid)
        if q in corpus:
            raise DataError(f"{path}:{lineno}: duplicate question id {q}")
        corpus[q] = text
    return corpus


def read_pairs(path) -> list[tuple[int, int]]:
    return [(_qid(path, n, a), _qid(path, n, b)) for n, (a, b) in _rows(path, 2)]


def read_qrels(path) -> dict[int, set[int]]:
    qrels: dict[int, set[int]] = defaultdict(set)
    for a, b in read_pairs(path):
        qrels[a].add(b)
    return dict(qrels)


def write_corpus(path, corpus: Mapping[int, str]) -> None:
    Path(path).write_text("".join(f"{q}\t{corpus[q]}\n" for q in sorted(corpus)), encoding="utf-8")


def write_pairs(path, pairs: Iterable[tuple[int, int]]) -> None:
    Path(path).write_text("".join(f"{a}\t{b}\n" for a, b in pairs), encoding="utf-8")


def write_qrels(path, qrels: Mapping[int, set[int]]) -> None:
    write_pairs(path, [(q, r) for q in sorted(qrels) for r in sorted(qrels[q])])


def qrels_from_pairs(pairs: Iterable[tuple[int, int]]) -> dict[int, set[int]]:
    out: dict[int, set[int]] = defaultdict(set)
    for a, b in pairs:
        out[a].add(b)
    return dict(out)


@dataclass
class Dataset:
    """A corpus with its training pairs and evaluation judgments."""

    corpus: dict[int, str]
    train_pairs: list[tuple[int, int]]
    dev_qrels: dict[int, set[int]] = field(default_factory=dict)
    test_qrels: dict[int, set[int]] = field(default_factory=dict)

    def tokens(self) -> dict[int, list[str]]:
        return {q: tokenize(t) for q, t in self.corpus.items()}

    def token_ids(self, vocab: Vocab, max_len: int) -> dict[int, list[int]]:
        return {q: vocab.encode(tokenize(t), max_len) for q, t in self.corpus.items()}

    def validate(self) -> None:
        known = self.corpus.keys()
        for a, b in self.train_pairs:
            if a not in known or b not in known:
                raise DataError(f"training pair ({a}, {b}) references an unknown question")
        for name, qrels in (("dev", self.dev_qrels), ("test", self.test_qrels)):
            for q, rel in qrels.items():
                if q not in known or not rel <= known:
                    raise DataError(f"{name} qrels for {q} reference an unknown question")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        ds = cls(
            corpus=read_corpus(d / "corpus.tsv"),
            train_pairs=read_pairs(d / "train_pairs.tsv"),
            dev_qrels=read_qrels(d / "dev_qrels.tsv") if (d / "dev_qrels.tsv").exists() else {},
            test_qrels=read_qrels(d / "test_qrels.tsv") if (d / "test_qrels.tsv").exists() else {},
        )
        ds.validate()
        return ds

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_corpus(d / "corpus.tsv", self.corpus)
        write_pairs(d / "train_pairs.tsv", self.train_pairs)
        write_qrels(d / "dev_qrels.tsv", self.dev_qrels)
        write_qrels(d / "test_qrels.tsv", self.test_qrels)
