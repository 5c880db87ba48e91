"""Command-line pipeline.

Every subcommand accepts ``--seed``, ``--config`` (a ``key=value`` file) and
``--out-dir``, writes its outputs plus ``<command>.manifest`` into the output
directory, and exits non-zero with a single ``error: ...`` line on failure.
Environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .ann import ExactIndex, IvfPqIndex, SearchParams, resolve_partitions
from .data import Dataset, read_pairs, read_qrels
from .encoder import CONNECTIVITY, Encoder, EncoderConfig, vocab_hash
from .evalkit import DEFAULT_METRICS, discrimination_diagnostic, evaluate, read_run, sample_triples, write_run
from .experiments import Protocol, prepare, run_variant
from .lexical import Bm25Params, InvertedIndex, Vocab, build_vocab, load_word_vectors, tokenize
from .rng import make_rng
from .sampling import mine_pools
from .serialize import read_container, save_container
from .synthetic import SyntheticConfig, generate
from .trainer import TrainConfig, train

SWEEPS = {
    "layers": [1, 2, 3, 4],
    "negpool": [0, 100, 200, 300, 500, 1000],
    "cutoff": [10, 20, 50, 100],
}

_ENCODER_KEYS = {f.name: f.type for f in dataclasses.fields(EncoderConfig) if f.name != "vocab_size"}
_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig) if f.name != "seed"}
_PROTOCOL_KEYS = {f.name: f.type for f in dataclasses.fields(Protocol)}
CONFIG_KEYS: dict[str, set[str]] = {
    "synth": {f.name for f in dataclasses.fields(SyntheticConfig) if f.name != "seed"},
    "build-vocab": {"min_freq"},
    "bm25-index": {"k1", "b"},
    "mine-negatives": {"pool_depth"},
    "train": set(_ENCODER_KEYS) | set(_TRAIN_KEYS) | {"word_vectors"},
    "encode": {"batch_size"},
    "ann-build": {"n_partitions", "M", "lossless"},
    "search": {"k", "nprobe"},
    "eval": set(),
    "diagnose": set(),
    "sweep": set(_PROTOCOL_KEYS) | {"seeds", "k"},
}


class CliError(Exception):
    pass


# -- config and manifest -------------------------------------------------------

def parse_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    if path is None:
        return out
    p = Path(path)
    if not p.exists():
        raise CliError(f"config file not found: {p}")
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{p}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def _convert(value: str, kind) -> object:
    kind = str(kind)
    if "bool" in kind:
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise CliError(f"not a boolean: {value!r}")
    try:
        if "int" in kind:
            return int(value)
        if "float" in kind:
            return float(value)
    except ValueError:
        raise CliError(f"bad numeric value {value!r}") from None
    return value


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict[str, str]
    seed: int
    inputs: dict[str, str]
    version: str = __version__
    started: str = ""
    finished: str = ""

    def text(self) -> str:
        lines = [f"command={self.command}", f"version=denseqr-{self.version}", f"seed={self.seed}"]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        lines += [f"input.{k}={v}" for k, v in sorted(self.inputs.items())]
        lines += [f"started={self.started}", f"finished={self.finished}"]
        return "\n".join(lines) + "\n"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# -- helpers -----------------------------------------------------------------

class Ctx:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = Path(args.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = parse_config(args.config)
        allowed = CONFIG_KEYS[args.command]
        for key in self.config:
            if key not in allowed:
                raise CliError(f"unknown config key {key!r} for {args.command}")
        self.inputs: dict[str, str] = {}

    def get(self, key: str, default, kind=None):
        if key not in self.config:
            return default
        return _convert(self.config[key], kind or type(default).__name__)

    def need(self, name: str, path) -> Path:
        if path is None:
            raise CliError(f"--{name.replace('_', '-')} is required")
        p = Path(path)
        if not p.exists():
            raise CliError(f"missing input file: {p}")
        if p.is_file():
            self.inputs[name] = file_hash(p)
        else:
            for f in sorted(p.glob("*.tsv")):
                self.inputs[f"{name}/{f.name}"] = file_hash(f)
        return p


def _vocab(ctx: Ctx) -> Vocab:
    return Vocab.from_text(ctx.need("vocab", ctx.args.vocab).read_text(encoding="utf-8"))


def _dataset(ctx: Ctx) -> Dataset:
    return Dataset.load(ctx.need("data", ctx.args.data))


def _qrels_for(ds: Dataset, split: str) -> dict[int, set[int]]:
    if split == "dev":
        return ds.dev_qrels
    if split == "test":
        return ds.test_qrels
    raise CliError(f"unknown split {split!r}")


def read_pools(path) -> dict[int, list[int]]:
    pools = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        qid, _, rest = line.partition("\t")
        try:
            pools[int(qid)] = [int(x) for x in rest.split(",") if x]
        except ValueError:
            raise CliError(f"{path}:{lineno}: malformed pool line") from None
    return pools


def load_encodings(path) -> tuple[np.ndarray, np.ndarray, dict[str, str]]:
    tensors, meta = read_container(path)
    if meta.get("format") != "denseqr-encodings":
        raise CliError(f"{path}: not an encodings file")
    return tensors["ids"], tensors["vectors"], meta


# -- subcommands ---------------------------------------------------------------

def cmd_synth(ctx: Ctx) -> None:
    kw = {f.name: ctx.get(f.name, f.default) for f in dataclasses.fields(SyntheticConfig) if f.name != "seed"}
    ds, clusters = generate(SyntheticConfig(seed=ctx.args.seed, **kw))
    ds.save(ctx.out)
    (ctx.out / "clusters.tsv").write_text("".join(f"{q}\t{c}\n" for q, c in sorted(clusters.items())))


def cmd_build_vocab(ctx: Ctx) -> None:
    ds = _dataset(ctx)
    vocab = build_vocab(ds.tokens().values(), ctx.get("min_freq", 1))
    (ctx.out / "vocab.tsv").write_text(vocab.to_text(), encoding="utf-8")


def cmd_bm25_index(ctx: Ctx) -> None:
    ds = _dataset(ctx)
    params = Bm25Params(ctx.get("k1", 3.44), ctx.get("b", 0.87))
    (ctx.out / "bm25.idx").write_bytes(InvertedIndex.build(ds.tokens(), params).to_bytes())


def cmd_mine_negatives(ctx: Ctx) -> None:
    ds = _dataset(ctx)
    index = InvertedIndex.from_bytes(ctx.need("index", ctx.args.index).read_bytes())
    depth = ctx.get("pool_depth", ctx.args.depth)
    qrels: dict[int, set[int]] = {}
    for a, b in ds.train_pairs:
        qrels.setdefault(a, set()).add(b)
    pools = mine_pools(index, ds.tokens(), qrels, [a for a, _ in ds.train_pairs], depth)
    text = "".join(f"{q}\t{','.join(map(str, p))}\n" for q, p in sorted(pools.items()))
    (ctx.out / "pools.tsv").write_text(text, encoding="utf-8")


def cmd_train(ctx: Ctx) -> None:
    ds = _dataset(ctx)
    vocab = _vocab(ctx)
    enc_kw = {k: _convert(v, _ENCODER_KEYS[k]) for k, v in ctx.config.items() if k in _ENCODER_KEYS}
    tr_kw = {k: _convert(v, _TRAIN_KEYS[k]) for k, v in ctx.config.items() if k in _TRAIN_KEYS}
    enc_cfg = EncoderConfig(vocab_size=len(vocab), **enc_kw)
    cfg = TrainConfig(seed=ctx.args.seed, **tr_kw)
    pools = read_pools(ctx.need("pools", ctx.args.pools)) if ctx.args.pools else None
    pretrained = None
    if "word_vectors" in ctx.config:
        pretrained = load_word_vectors(ctx.need("word_vectors", ctx.config["word_vectors"]), vocab, enc_cfg.d)
    res = train(ds, vocab, enc_cfg, cfg, pools=pools, pretrained=pretrained)
    (ctx.out / "checkpoint.bin").write_bytes(res.checkpoint())
    (ctx.out / "train_log.tsv").write_text(res.log_tsv(), encoding="utf-8")


def _checkpoint(ctx: Ctx, vocab: Vocab) -> Encoder:
    enc = Encoder.from_bytes(ctx.need("checkpoint", ctx.args.checkpoint).read_bytes())
    if enc.meta.get("vocab_hash") not in (None, vocab_hash(vocab.words)):
        raise CliError("checkpoint was trained with a different vocabulary")
    return enc


def cmd_encode(ctx: Ctx) -> None:
    ds = _dataset(ctx)
    vocab = _vocab(ctx)
    enc = _checkpoint(ctx, vocab)
    ids = sorted(ds.corpus)
    tok = ds.token_ids(vocab, enc.config.max_len)
    vecs = enc.encode([tok[i] for i in ids], batch_size=ctx.get("batch_size", 256))
    save_container(ctx.out / "encodings.bin", {"ids": np.asarray(ids, dtype=np.int64), "vectors": vecs},
                   {"format": "denseqr-encodings", "dim": str(vecs.shape[1])})
    (ctx.out / "encodings.ids.tsv").write_text("".join(f"{r}\t{i}\n" for r, i in enumerate(ids)))


def cmd_ann_build(ctx: Ctx) -> None:
    ids, vecs, _ = load_encodings(ctx.need("encodings", ctx.args.encodings))
    n_part = resolve_partitions(ctx.get("n_partitions", 2000), len(ids))
    idx = IvfPqIndex.train(vecs, n_part, ctx.get("M", 16), seed=ctx.args.seed,
                           lossless=ctx.get("lossless", False, "bool"))
    idx.add(ids, vecs)
    idx.save(ctx.out / "index.ivf")


def cmd_search(ctx: Ctx) -> None:
    a = ctx.args
    ds = _dataset(ctx)
    ids, vecs, _ = load_encodings(ctx.need("encodings", a.encodings))
    qrels = _qrels_for(ds, a.split)
    queries = sorted(qrels)
    k = ctx.get("k", a.k)
    exact = ExactIndex(ids, vecs)
    qvecs = exact.vectors_of(queries)
    if a.backend == "exact":
        runs = exact.search_many(queries, qvecs, k, exclude_self=True)
    else:
        idx = IvfPqIndex.load(ctx.need("index", a.index))
        params = SearchParams(k, ctx.get("nprobe", a.nprobe))
        runs = idx.search_many(queries, qvecs, params, exclude_self=True)
    write_run(ctx.out / "run.txt", runs, a.tag)


def cmd_eval(ctx: Ctx) -> None:
    runs = read_run(ctx.need("run", ctx.args.run))
    qrels = read_qrels(ctx.need("qrels", ctx.args.qrels))
    report = evaluate(runs, qrels, DEFAULT_METRICS)
    (ctx.out / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (ctx.out / "summary.tsv").write_text(report.summary(), encoding="utf-8")
    print(report.summary(), end="")


def cmd_diagnose(ctx: Ctx) -> None:
    ds = _dataset(ctx)
    vocab = _vocab(ctx)
    enc = _checkpoint(ctx, vocab)
    qrels = _qrels_for(ds, ctx.args.split)
    tok = ds.token_ids(vocab, enc.config.max_len)
    triples = sample_triples(qrels, sorted(ds.corpus), make_rng(ctx.args.seed, "diagnostic"))
    vals = discrimination_diagnostic(enc, [tuple(tok[i] for i in t) for t in triples])
    text = "layer\tdiscrimination\n" + "".join(f"{l}\t{v:.6f}\n" for l, v in enumerate(vals))
    (ctx.out / "diagnostic.tsv").write_text(text, encoding="utf-8")


def cmd_sweep(ctx: Ctx) -> None:
    a = ctx.args
    if a.kind == "cutoff":
        runs = read_run(ctx.need("run", a.run))
        qrels = read_qrels(ctx.need("qrels", a.qrels))
        ks = SWEEPS["cutoff"]
        report = evaluate(runs, qrels, [("recall", k) for k in ks])
        rows = [(k, report.mean[f"recall@{k}"]) for k in ks]
        metric = "recall"
    else:
        ds = _dataset(ctx)
        proto_kw = {k: _convert(v, _PROTOCOL_KEYS[k]) for k, v in ctx.config.items() if k in _PROTOCOL_KEYS}
        proto = Protocol(**proto_kw)
        prep = prepare(ds)
        seeds = [ctx.args.seed + i for i in range(ctx.get("seeds", 1))]
        metric = f"recall@{ctx.get('k', 10)}"
        rows = []
        for setting in SWEEPS[a.kind]:
            vals = []
            for s in seeds:
                if a.kind == "layers":
                    r = run_variant(prep, "dense", 100, s, proto, num_layers=setting, split=a.split)
                else:
                    r = run_variant(prep, "dense", setting, s, proto, split=a.split)
                vals.append(r.metrics[metric])
            rows.append((setting, float(np.mean(vals))))
    text = f"setting\t{metric}\n" + "".join(f"{s}\t{v:.6f}\n" for s, v in rows)
    (ctx.out / f"sweep_{a.kind}.tsv").write_text(text, encoding="utf-8")


COMMANDS = {
    "synth": cmd_synth,
    "build-vocab": cmd_build_vocab,
    "bm25-index": cmd_bm25_index,
    "mine-negatives": cmd_mine_negatives,
    "train": cmd_train,
    "encode": cmd_encode,
    "ann-build": cmd_ann_build,
    "search": cmd_search,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value file")
    common.add_argument("--out-dir", default=".")

    parser = argparse.ArgumentParser(prog="denseqr", description="Dense question retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common]) for name in COMMANDS}

    for name in ("build-vocab", "bm25-index", "mine-negatives", "train", "encode", "search", "diagnose"):
        p[name].add_argument("--data", help="dataset directory")
    for name in ("train", "encode", "diagnose"):
        p[name].add_argument("--vocab")
    for name in ("encode", "diagnose"):
        p[name].add_argument("--checkpoint")
    for name in ("search", "diagnose"):
        p[name].add_argument("--split", default="test", choices=["dev", "test"])
    p["mine-negatives"].add_argument("--index")
    p["mine-negatives"].add_argument("--depth", type=int, default=100)
    p["train"].add_argument("--pools")
    p["ann-build"].add_argument("--encodings")
    s = p["search"]
    s.add_argument("--encodings")
    s.add_argument("--backend", choices=["exact", "ivfpq"], default="exact")
    s.add_argument("--index")
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--nprobe", type=int, default=10)
    s.add_argument("--tag", default="denseqr")
    p["eval"].add_argument("--run")
    p["eval"].add_argument("--qrels")
    w = p["sweep"]
    w.add_argument("kind", choices=sorted(SWEEPS))
    w.add_argument("--data")
    w.add_argument("--run")
    w.add_argument("--qrels")
    w.add_argument("--split", default="test", choices=["dev", "test"])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        ctx = Ctx(args)
        started = _now()
        COMMANDS[args.command](ctx)
        manifest = RunManifest(args.command, dict(ctx.config), args.seed, ctx.inputs,
                               started=started, finished=_now())
        (ctx.out / f"{args.command}.manifest").write_text(manifest.text(), encoding="utf-8")
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
