"""Template-generated paraphrase corpus with known clusters.

A cluster is an (intent, entity, modifier) triple.  Its members are the
intent's surface templates filled with the entity and one synonym of the
modifier, so members share few words beyond the entity while questions from
other clusters often share a whole template.  Term matching alone therefore
confuses template-mates with paraphrases, and a learned model has to tie the
templates of one intent together while keeping entity and modifier exact.

Entities are split as well: dev and test clusters only use entities never
seen in training, so their embeddings stay at initialization and retrieval
depends on carrying exact token identity through the encoder.  Clusters are
split into train / dev / test.  Every member of a dev or test cluster is a
query whose relevant set is the other members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .rng import make_rng

INTENTS: dict[str, list[str]] = {
    "learn": ["how do i learn {e} {m}", "what is the best way to study {e} {m}",
              "how can i master {e} {m}", "tips to get good at {e} {m}"],
    "start": ["how do i start {e} {m}", "how can i begin {e} {m}",
              "what is the first step into {e} {m}", "how to get started with {e} {m}"],
    "cost": ["how much does {e} cost {m}", "what is the price of {e} {m}",
             "is {e} expensive {m}", "how expensive is {e} {m}"],
    "quit": ["how do i stop {e} {m}", "how can i quit {e} {m}",
             "what is the best way to give up {e} {m}", "how to get rid of {e} {m}"],
    "find": ["where can i find {e} {m}", "where do i get {e} {m}",
             "what is the best place to buy {e} {m}", "where to look for {e} {m}"],
    "improve": ["how can i improve my {e} {m}", "how do i get better at {e} {m}",
                "ways to enhance my {e} {m}", "how to boost my {e} {m}"],
    "explain": ["what is {e} {m}", "can someone explain {e} {m}",
                "what does {e} mean {m}", "what is the meaning of {e} {m}"],
    "worth": ["is {e} worth it {m}", "should i try {e} {m}",
              "is it a good idea to do {e} {m}", "does {e} make sense {m}"],
    "danger": ["is {e} dangerous {m}", "what are the risks of {e} {m}",
               "can {e} be harmful {m}", "is {e} risky {m}"],
    "choose": ["what is the best {e} {m}", "which {e} should i choose {m}",
               "what {e} do you recommend {m}", "how do i pick a good {e} {m}"],
}

MODIFIERS: list[tuple[str, str]] = [
    ("quickly", "fast"), ("cheaply", "affordably"), ("online", "remotely"),
    ("safely", "securely"), ("alone", "solo"), ("daily", "everyday"),
    ("legally", "lawfully"), ("abroad", "overseas"),
]

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_CODAS = ["", "n", "r", "x", "k", "l", "s"]


@dataclass(frozen=True)
class SyntheticConfig:
    n_clusters: int = 500
    n_entities: int = 80
    train_fraction: float = 0.6
    dev_fraction: float = 0.2
    heldout_entity_fraction: float = 0.5
    seed: int = 13


def _entities(n: int, rng: np.random.Generator) -> list[str]:
    names: set[str] = set()
    while len(names) < n:
        parts = [
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            + _CODAS[rng.integers(len(_CODAS))]
            for _ in range(2)
        ]
        names.add("".join(parts))
    return sorted(names)


def _pick(rng, n, intents, entities, n_mod):
    total = len(intents) * len(entities) * n_mod
    if n > total:
        raise ValueError(f"at most {total} distinct clusters exist for {len(entities)} entities")
    codes = rng.choice(total, size=n, replace=False).tolist()
    out = []
    for code in codes:
        i, rest = divmod(code, len(entities) * n_mod)
        e, m = divmod(rest, n_mod)
        out.append((intents[i], entities[e], m))
    return out


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> tuple[Dataset, dict[int, int]]:
    """Build the dataset; also returns question id -> cluster id."""
    rng = make_rng(cfg.seed, "synthetic")
    entities = _entities(cfg.n_entities, rng)
    intents = sorted(INTENTS)
    n_held = int(round(cfg.heldout_entity_fraction * cfg.n_entities))
    order = rng.permutation(cfg.n_entities).tolist()
    held = sorted(entities[i] for i in order[:n_held])
    seen = sorted(entities[i] for i in order[n_held:])
    if not seen or (n_held == 0 and cfg.heldout_entity_fraction > 0):
        raise ValueError("entity split leaves a side empty")

    n_train = int(round(cfg.train_fraction * cfg.n_clusters))
    n_dev = int(round(cfg.dev_fraction * cfg.n_clusters))
    n_eval = cfg.n_clusters - n_train
    if held:
        train_defs = _pick(rng, n_train, intents, seen, len(MODIFIERS))
        eval_defs = _pick(rng, n_eval, intents, held, len(MODIFIERS))
    else:
        both = _pick(rng, cfg.n_clusters, intents, seen, len(MODIFIERS))
        train_defs, eval_defs = both[:n_train], both[n_train:]
    defs = train_defs + eval_defs

    corpus: dict[int, str] = {}
    cluster_of: dict[int, int] = {}
    members: list[list[int]] = []
    qid = 0
    for c, (intent, entity, m) in enumerate(defs):
        templates = INTENTS[intent]
        ids = []
        for t in rng.permutation(len(templates)).tolist():
            mod = MODIFIERS[m][int(rng.integers(2))]
            corpus[qid] = templates[t].format(e=entity, m=mod)
            cluster_of[qid] = c
            ids.append(qid)
            qid += 1
        members.append(ids)

    train_c = range(n_train)
    dev_c = range(n_train, n_train + n_dev)
    test_c = range(n_train + n_dev, cfg.n_clusters)

    pairs = [(a, b) for c in train_c for a in members[c] for b in members[c] if a != b]

    def qrels(clusters):
        return {a: {b for b in members[c] if b != a} for c in clusters for a in members[c]}

    return Dataset(corpus, pairs, qrels(dev_c), qrels(test_c)), cluster_of
