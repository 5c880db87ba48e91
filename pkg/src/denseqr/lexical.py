"""Tokenizer, vocabulary, inverted index and BM25 ranking.

The tokenizer lowercases, splits on Unicode whitespace and strips leading and
trailing punctuation from each token; interior punctuation ("u.s.a") is kept.

BM25 uses the non-negative IDF ``ln(1 + (N - df + 0.5) / (df + 0.5))``.
"""

from __future__ import annotations

import io
import math
import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .evalkit import RankedList, rank_scores
from .serialize import FormatError, _read_exact, read_str, read_tensor, write_str, write_tensor
from .tensor import ContractError

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("[PAD]", "[CLS]", "[UNK]")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith(("P", "S"))


def tokenize(text: str) -> list[str]:
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punct(raw[start]):
            start += 1
        while end > start and _is_punct(raw[end - 1]):
            end -= 1
        if start < end:
            tokens.append(raw[start:end])
    return tokens


@dataclass
class Vocab:
    words: list[str]
    doc_freq: list[int]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def encode(self, tokens: Sequence[str], max_len: int | None = None) -> list[int]:
        ids = [self.index.get(t, UNK) for t in tokens]
        return ids if max_len is None else ids[:max_len]

    def to_text(self) -> str:
        return "".join(f"{i}\t{w}\t{df}\n" for i, (w, df) in enumerate(zip(self.words, self.doc_freq)))

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        words, dfs = [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 3 or int(parts[0]) != lineno - 1:
                raise FormatError(f"vocab line {lineno}: expected 'id<TAB>word<TAB>df'")
            words.append(parts[1])
            dfs.append(int(parts[2]))
        if tuple(words[:3]) != RESERVED:
            raise FormatError("vocab must start with the reserved [PAD] [CLS] [UNK] entries")
        return cls(words, dfs)


def build_vocab(corpus: Iterable[Sequence[str]], min_freq: int = 1) -> Vocab:
    """Ids ordered by descending corpus frequency, ties lexicographic, after reserved ids."""
    if min_freq < 1:
        raise ContractError("min_freq must be >= 1")
    freq: Counter[str] = Counter()
    df: Counter[str] = Counter()
    for tokens in corpus:
        freq.update(tokens)
        df.update(set(tokens))
    kept = sorted((w for w, c in freq.items() if c >= min_freq and w not in RESERVED),
                  key=lambda w: (-freq[w], w))
    return Vocab(list(RESERVED) + kept, [0, 0, 0] + [df[w] for w in kept])


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 3.44
    b: float = 0.87

    def __post_init__(self):
        if self.k1 < 0:
            raise ContractError("k1 must be non-negative")
        if not 0 <= self.b <= 1:
            raise ContractError("b must lie in [0, 1]")


INDEX_MAGIC = b"DQBM"


@dataclass
class InvertedIndex:
    """Term -> postings of (question_id, tf), sorted by question_id."""

    postings: dict[str, tuple[np.ndarray, np.ndarray]]
    lengths: dict[int, int]
    avg_length: float
    params: Bm25Params = field(default_factory=Bm25Params)

    def __post_init__(self):
        self._qids = np.array(sorted(self.lengths), dtype=np.int64)
        self._lens = np.array([self.lengths[int(i)] for i in self._qids], dtype=np.float64)
        self._pos = {t: np.searchsorted(self._qids, ids) for t, (ids, _) in self.postings.items()}

    @property
    def n_docs(self) -> int:
        return len(self.lengths)

    @property
    def question_ids(self) -> np.ndarray:
        return self._qids

    @classmethod
    def build(cls, docs: Mapping[int, Sequence[str]], params: Bm25Params | None = None) -> "InvertedIndex":
        acc: dict[str, list[tuple[int, int]]] = {}
        lengths = {}
        for qid in sorted(docs):
            tokens = docs[qid]
            lengths[int(qid)] = len(tokens)
            for term, tf in Counter(tokens).items():
                acc.setdefault(term, []).append((int(qid), tf))
        postings = {
            t: (np.array([p[0] for p in plist], dtype=np.int64),
                np.array([p[1] for p in plist], dtype=np.int64))
            for t, plist in sorted(acc.items())
        }
        avg = sum(lengths.values()) / len(lengths) if lengths else 0.0
        return cls(postings, lengths, avg, params or Bm25Params())

    def df(self, term: str) -> int:
        p = self.postings.get(term)
        return 0 if p is None else len(p[0])

    def score_all(self, query_tokens: Sequence[str]) -> np.ndarray:
        """BM25 score of every indexed question, aligned with ``question_ids``."""
        out = np.zeros(len(self._qids), dtype=np.float64)
        n = self.n_docs
        k1, b = self.params.k1, self.params.b
        for term in query_tokens:
            p = self.postings.get(term)
            if p is None:
                continue
            tfs = p[1].astype(np.float64)
            pos = self._pos[term]
            df = len(tfs)
            idf = math.log(1.0 + (n - df + 0.5) / (df + 0.5))
            if self.avg_length > 0:
                norm = k1 * (1.0 - b + b * self._lens[pos] / self.avg_length)
            else:
                norm = k1
            out[pos] += idf * tfs * (k1 + 1.0) / (tfs + norm)
        return out

    def search(self, query_tokens: Sequence[str], k: int, query_id: int = -1,
               exclude: Iterable[int] = ()) -> RankedList:
        """Top-k questions; non-matching questions (score 0) fill the tail by id."""
        if k <= 0:
            raise ContractError(f"k must be positive, got {k}")
        scores = self.score_all(query_tokens)
        ids = self._qids
        excl = [e for e in exclude]
        if excl:
            keep = ~np.isin(ids, np.asarray(excl, dtype=np.int64))
            ids, scores = ids[keep], scores[keep]
        return rank_scores(query_id, ids, scores, k)

    # -- persistence -------------------------------------------------------
    def to_bytes(self) -> bytes:
        """Layout: magic, k1 f64, b f64, avg f64, lengths block, u32 terms, per-term postings."""
        buf = io.BytesIO()
        buf.write(INDEX_MAGIC)
        buf.write(struct.pack("<ddd", self.params.k1, self.params.b, self.avg_length))
        qids = np.array(sorted(self.lengths), dtype=np.int64)
        write_tensor(buf, qids)
        write_tensor(buf, np.array([self.lengths[int(i)] for i in qids], dtype=np.int64))
        buf.write(struct.pack("<I", len(self.postings)))
        for term, (ids, tfs) in self.postings.items():
            write_str(buf, term)
            write_tensor(buf, ids)
            write_tensor(buf, tfs)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "InvertedIndex":
        f = io.BytesIO(data)
        if _read_exact(f, 4) != INDEX_MAGIC:
            raise FormatError("bad BM25 index magic")
        k1, b, avg = struct.unpack("<ddd", _read_exact(f, 24))
        qids = read_tensor(f)
        lens = read_tensor(f)
        (n_terms,) = struct.unpack("<I", _read_exact(f, 4))
        postings = {}
        for _ in range(n_terms):
            term = read_str(f)
            postings[term] = (read_tensor(f), read_tensor(f))
        lengths = {int(q): int(n) for q, n in zip(qids, lens)}
        return cls(postings, lengths, avg, Bm25Params(k1, b))


def bm25_search(index: InvertedIndex, query_tokens: Sequence[str], k: int,
                params: Bm25Params | None = None, query_id: int = -1) -> RankedList:
    if params is not None and params != index.params:
        index = InvertedIndex(index.postings, index.lengths, index.avg_length, params)
    return index.search(query_tokens, k, query_id=query_id)


def load_word_vectors(path, vocab: Vocab, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``V d`` header text file; returns (vectors[V_vocab x d], found mask)."""
    out = np.zeros((len(vocab), dim), dtype=np.float64)
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if len(header) != 2:
            raise FormatError(f"{path}:1: expected header 'V d'")
        if int(header[1]) != dim:
            raise FormatError(f"{path}: vectors have dim {header[1]}, model expects {dim}")
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").rstrip().split(" ")
            if len(parts) != dim + 1:
                raise FormatError(f"{path}:{lineno}: expected token and {dim} values")
            idx = vocab.index.get(parts[0])
            if idx is None or idx < len(RESERVED):
                continue
            out[idx] = np.array(parts[1:], dtype=np.float64)
            found[idx] = True
    return out, found
