"""Dense-connected Transformer question encoder with [CLS] pooling.

Layer ``l`` of the stack reads a feature-axis concatenation of earlier layer
outputs, chosen by the connectivity mode:

=============  =====================================  ============================
mode           input of layer l                       encoding
=============  =====================================  ============================
dense          [E0; E1; ...; E(l-1)]                  [CLS] row of E(N)
top_dense      dense for l < N, E(N-1) for l = N      [CLS] row of E(N)
all_dense      E(l-1)                                 [CLS] row of E(N)
concat_pool    E(l-1)                                 [CLS] rows of E1..E(N) concat
=============  =====================================  ============================

Every layer emits width ``d`` whatever its input width.  When the input is
wider than ``d`` the first residual path goes through a learned projection.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .lexical import CLS, PAD
from .rng import make_rng
from .serialize import load_container, dump_container
from .tensor import ContractError, ShapeError, Tensor

CONNECTIVITY = ("dense", "top_dense", "all_dense", "concat_pool")
MASK_VALUE = -1e9


@dataclass
class EncoderConfig:
    vocab_size: int
    d: int = 300
    num_layers: int = 3
    num_heads: int = 6
    d_ff: int | None = None
    max_len: int = 30
    dropout_p: float = 0.1
    connectivity: str = "dense"
    # top_dense only: "last" pools E(N); "concat" pools [CLS] rows of E1..E(N)
    top_dense_output: str = "last"
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        if self.vocab_size < 3:
            raise ContractError("vocab_size must cover the reserved ids")
        if self.num_layers < 1 or self.num_heads < 1:
            raise ContractError("num_layers and num_heads must be positive")
        if self.d % self.num_heads:
            raise ContractError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.max_len < 1:
            raise ContractError("max_len must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ContractError("dropout_p must lie in [0, 1)")
        if self.connectivity not in CONNECTIVITY:
            raise ContractError(f"unknown connectivity {self.connectivity!r}")
        if self.top_dense_output not in ("last", "concat"):
            raise ContractError(f"unknown top_dense_output {self.top_dense_output!r}")

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def in_dims(self) -> list[int]:
        """Input width of layers 1..N."""
        d, n = self.d, self.num_layers
        if self.connectivity == "dense":
            return [l * d for l in range(1, n + 1)]
        if self.connectivity == "top_dense":
            return [l * d for l in range(1, n)] + [d]
        return [d] * n

    def sources(self, layer: int) -> list[int]:
        """Indices of the outputs E0..E(N) concatenated as input to ``layer`` (1-based)."""
        if self.connectivity == "dense" or (self.connectivity == "top_dense" and layer < self.num_layers):
            return list(range(layer))
        return [layer - 1]

    @property
    def output_dim(self) -> int:
        if self.connectivity == "concat_pool" or (
                self.connectivity == "top_dense" and self.top_dense_output == "concat"):
            return self.num_layers * self.d
        return self.d

    def to_meta(self) -> dict[str, str]:
        return {f"config.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "EncoderConfig":
        kwargs = {}
        for f in fields(cls):
            raw = meta.get(f"config.{f.name}")
            if raw is None:
                continue
            if f.name in ("connectivity", "top_dense_output", "dtype"):
                kwargs[f.name] = raw
            elif f.name == "dropout_p":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def pad_batch(token_lists: Sequence[Sequence[int]], length: int) -> tuple[np.ndarray, np.ndarray]:
    """Prepend [CLS] and pad to ``length`` rows; returns (ids, pad_mask) of shape (B, length)."""
    ids = np.full((len(token_lists), length), PAD, dtype=np.int64)
    ids[:, 0] = CLS
    for i, toks in enumerate(token_lists):
        if len(toks) > length - 1:
            raise ContractError(f"question of {len(toks)} tokens exceeds {length - 1}")
        ids[i, 1:1 + len(toks)] = toks
    mask = np.ones_like(ids, dtype=bool)
    mask[:, 0] = False
    for i, toks in enumerate(token_lists):
        mask[i, 1:1 + len(toks)] = False
    return ids, mask


class Encoder:
    """Shared question encoder (one parameter set for both sides of the dual encoder)."""

    def __init__(self, config: EncoderConfig, seed: int = 0,
                 pretrained: tuple[np.ndarray, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init_params(make_rng(seed, "encoder", "init"), pretrained)

    # -- parameters --------------------------------------------------------
    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True, dtype=self.config.np_dtype)

    def _init_params(self, rng: np.random.Generator, pretrained) -> None:
        c = self.config
        tok = rng.uniform(-0.2, 0.2, size=(c.vocab_size, c.d))
        if pretrained is not None:
            vecs, found = pretrained
            tok[found] = vecs[found]
        self._add("tok_emb", tok)
        self._add("pos_emb", rng.uniform(-0.02, 0.02, size=(c.max_len + 1, c.d)))

        def linear(fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        for l, in_dim in enumerate(c.in_dims(), start=1):
            p = f"layer{l}."
            self._add(p + "wq", linear(in_dim, (in_dim, c.d)))
            self._add(p + "wk", linear(in_dim, (in_dim, c.d)))
            self._add(p + "wv", linear(in_dim, (in_dim, c.d)))
            self._add(p + "wo", linear(c.d, (c.d, c.d)))
            if in_dim != c.d:
                self._add(p + "wr", linear(in_dim, (in_dim, c.d)))
            self._add(p + "ln1_g", np.ones(c.d))
            self._add(p + "ln1_b", np.zeros(c.d))
            self._add(p + "w1", linear(c.d, (c.d, c.d_ff)))
            self._add(p + "b1", linear(c.d, (c.d_ff,)))
            self._add(p + "w2", linear(c.d_ff, (c.d_ff, c.d)))
            self._add(p + "b2", linear(c.d_ff, (c.d,)))
            self._add(p + "ln2_g", np.ones(c.d))
            self._add(p + "ln2_b", np.zeros(c.d))

    def head_projection(self, layer: int, which: str, head: int) -> np.ndarray:
        """Per-head slice W^{which}_head (in_dim x d/H) of a fused projection."""
        h = self.config.head_dim
        return self.params[f"layer{layer}.w{which}"].data[:, head * h:(head + 1) * h]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward -----------------------------------------------------------
    def embed_input(self, token_lists: Sequence[Sequence[int]], length: int | None = None
                    ) -> tuple[Tensor, np.ndarray]:
        """E0 of shape (B, length, d) plus the pad mask; ``length`` defaults to max_len + 1."""
        c = self.config
        length = c.max_len + 1 if length is None else length
        if length > c.max_len + 1:
            raise ContractError(f"length {length} exceeds max_len + 1 = {c.max_len + 1}")
        ids, mask = pad_batch(token_lists, length)
        tok = T.embedding_lookup(self.params["tok_emb"], ids)
        pos = self.params["pos_emb"][:length]
        return tok + pos, mask

    def encode_layer(self, layer: int, x: Tensor, mask: np.ndarray, training: bool = False,
                     rng: np.random.Generator | None = None, return_attention: bool = False):
        c = self.config
        p = f"layer{layer}."
        P = self.params
        in_dim = c.in_dims()[layer - 1]
        if x.shape[-1] != in_dim:
            raise ShapeError(f"layer {layer} expects width {in_dim}, got {x.shape[-1]}")
        B, L, _ = x.shape
        H, hd = c.num_heads, c.head_dim

        def heads(t: Tensor) -> Tensor:
            return t.reshape(B, L, H, hd).transpose(0, 2, 1, 3)

        q = heads(x @ P[p + "wq"])
        k = heads(x @ P[p + "wk"])
        v = heads(x @ P[p + "wv"])
        bias = np.where(mask, MASK_VALUE, 0.0).astype(c.np_dtype)[:, None, None, :]
        logits = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(c.d)) + Tensor(bias)
        attn = T.softmax(logits, axis=-1)
        attn_d = T.dropout(attn, c.dropout_p, training, rng)
        ctx = T.matmul(attn_d, v).transpose(0, 2, 1, 3).reshape(B, L, c.d)
        a = T.dropout(ctx @ P[p + "wo"], c.dropout_p, training, rng)
        res = x if in_dim == c.d else x @ P[p + "wr"]
        h = T.layer_norm(a + res, P[p + "ln1_g"], P[p + "ln1_b"])
        f = T.relu(h @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
        f = T.dropout(f, c.dropout_p, training, rng)
        out = T.layer_norm(f + h, P[p + "ln2_g"], P[p + "ln2_b"])
        if return_attention:
            return out, attn.data
        return out

    def forward(self, token_lists: Sequence[Sequence[int]], training: bool = False,
                rng: np.random.Generator | None = None, length: int | None = None,
                return_layers: bool = False, _detach_skips: bool = False):
        """Encode a batch; returns (B, output_dim) and optionally all layer outputs."""
        c = self.config
        if length is None:
            length = 1 + max((len(t) for t in token_lists), default=0)
        e0, mask = self.embed_input(token_lists, length)
        outs = [e0]
        for l in range(1, c.num_layers + 1):
            src = c.sources(l)
            parts = [outs[i] for i in src]
            if _detach_skips:
                parts = [t if i == l - 1 else t.detach() for i, t in zip(src, parts)]
            inp = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
            outs.append(self.encode_layer(l, inp, mask, training, rng))
        if c.output_dim == c.d:
            enc = outs[-1][:, 0, :]
        else:
            enc = T.concat([o[:, 0, :] for o in outs[1:]], axis=-1)
        if return_layers:
            return enc, outs
        return enc

    def dense_forward(self, token_ids: Sequence[int], return_layers: bool = False):
        """Single-question eval-mode forward; returns the encoding vector."""
        enc, outs = self.forward([token_ids], return_layers=True)
        vec = enc.data[0].copy()
        if return_layers:
            return vec, [o.data[0] for o in outs]
        return vec

    def encode(self, token_lists: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
        """Eval-mode encodings of many questions, shape (n, output_dim)."""
        out = np.zeros((len(token_lists), self.config.output_dim), dtype=self.config.np_dtype)
        for s in range(0, len(token_lists), batch_size):
            chunk = token_lists[s:s + batch_size]
            out[s:s + len(chunk)] = self.forward(chunk).data
        return out

    def layer_representations(self, token_ids: Sequence[int]) -> list[np.ndarray]:
        """[CLS] rows of E0..E(N) for one question, eval mode."""
        return list(self.layer_representations_batch([token_ids])[:, 0, :])

    def layer_representations_batch(self, token_lists: Sequence[Sequence[int]],
                                    batch_size: int = 256) -> np.ndarray:
        n_layers = self.config.num_layers + 1
        out = np.zeros((n_layers, len(token_lists), self.config.d), dtype=self.config.np_dtype)
        for s in range(0, len(token_lists), batch_size):
            chunk = token_lists[s:s + batch_size]
            _, outs = self.forward(chunk, return_layers=True)
            for l, o in enumerate(outs):
                out[l, s:s + len(chunk)] = o.data[:, 0, :]
        return out

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) ^ set(state)
            raise ContractError(f"checkpoint parameters do not match model: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: checkpoint {v.shape} vs model {self.params[k].shape}")
            self.params[k] = Tensor(v.copy(), requires_grad=True, dtype=self.config.np_dtype)

    def to_bytes(self, extra_meta: dict[str, str] | None = None) -> bytes:
        meta = {"format": "denseqr-checkpoint", "version": f"denseqr-{__version__}"}
        meta.update(self.config.to_meta())
        meta.update(extra_meta or {})
        return dump_container(self.state_dict(), meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Encoder":
        tensors, meta = load_container(data)
        if meta.get("format") != "denseqr-checkpoint":
            raise ContractError("not an encoder checkpoint")
        enc = cls.__new__(cls)
        enc.config = EncoderConfig.from_meta(meta)
        enc.params = {}
        enc.meta = meta
        for k, v in tensors.items():
            enc.params[k] = Tensor(v, requires_grad=True, dtype=enc.config.np_dtype)
        return enc


def vocab_hash(words: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(words).encode("utf-8")).hexdigest()[:16]


@dataclass
class QuestionEncoding:
    question_id: int
    vector: np.ndarray


class ZeroVectorWarning(UserWarning):
    """Cosine similarity with a zero vector is undefined; scored as 0."""


def score(u, h) -> float:
    """Cosine similarity of two encodings (arrays or :class:`QuestionEncoding`)."""
    u = np.asarray(getattr(u, "vector", u), dtype=np.float64)
    h = np.asarray(getattr(h, "vector", h), dtype=np.float64)
    if u.shape != h.shape:
        raise ShapeError(f"score: encodings of shape {u.shape} and {h.shape}")
    nu, nh = np.linalg.norm(u), np.linalg.norm(h)
    if nu == 0 or nh == 0:
        warnings.warn("cosine with a zero vector scored as 0", ZeroVectorWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(u, h) / (nu * nh), -1.0, 1.0))
