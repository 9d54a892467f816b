"""Planted-structure interaction logs with matching modality vectors.

Users prefer a couple of semantics and drift between them. Within the current
semantic a pick is weighted by a personal taste vector or, with probability
``follow_prob``, by similarity to the previous item's taste instead; only the
item sequence reveals the latter. With probability ``noise`` a click is a
uniformly random unseen item. Image/text vectors are the item's semantic
prototype plus Gaussian noise of scale ``noise``; id vectors use three times
that scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Interaction, InteractionLog
from .semantics import ModalityEmbeddings


@dataclass
class SyntheticConfig:
    users: int = 2000
    items: int = 300
    semantics: int = 12
    noise: float = 0.3
    seed: int = 0
    dim: int = 16
    min_len: int = 5
    max_len: int = 16
    prefs_per_user: int = 2
    stay_prob: float = 0.7
    taste_dim: int = 8
    taste_scale: float = 1.5
    extra_category_prob: float = 0.3
    follow_prob: float = 0.5
    follow_scale: float = 3.0


@dataclass
class SyntheticData:
    log: InteractionLog
    modalities: ModalityEmbeddings
    categories: dict[int, list[int]]
    true_semantics: np.ndarray  # 1..k per dense item id
    item_taste: np.ndarray
    config: SyntheticConfig


def generate(cfg: SyntheticConfig) -> SyntheticData:
    if cfg.items < cfg.semantics or cfg.semantics < 2:
        raise ValueError("need at least 2 semantics and no more semantics than items")
    if cfg.max_len >= cfg.items:
        raise ValueError("max_len must be below the item count")
    rng = np.random.default_rng(cfg.seed)
    k = cfg.semantics
    sem = rng.permutation(np.arange(cfg.items) % k)  # balanced, 0-based
    members = [np.flatnonzero(sem == s) for s in range(k)]

    protos = rng.normal(size=(k, cfg.dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    scale = cfg.noise / np.sqrt(cfg.dim)
    image = protos[sem] + rng.normal(scale=scale, size=(cfg.items, cfg.dim))
    text = protos[sem] + rng.normal(scale=scale, size=(cfg.items, cfg.dim))
    ids = protos[sem] + rng.normal(scale=3 * scale, size=(cfg.items, cfg.dim))

    item_taste = rng.normal(size=(cfg.items, cfg.taste_dim)) / np.sqrt(cfg.taste_dim)

    interactions = []
    for u in range(cfg.users):
        prefs = rng.choice(k, size=min(cfg.prefs_per_user, k), replace=False)
        taste = rng.normal(size=cfg.taste_dim)
        n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        seen: set[int] = set()
        current = int(rng.choice(prefs))
        t = int(rng.integers(0, 1_000_000))
        prev = -1
        for _ in range(n):
            if len(prefs) > 1 and rng.random() > cfg.stay_prob:
                current = int(rng.choice(prefs[prefs != current]))
            if rng.random() < cfg.noise:
                pool = np.setdiff1d(np.arange(cfg.items), list(seen))
                item = int(rng.choice(pool))
            else:
                pool = np.array([i for i in members[current] if i not in seen])
                if len(pool) == 0:
                    pool = np.setdiff1d(np.arange(cfg.items), list(seen))
                if prev >= 0 and rng.random() < cfg.follow_prob:
                    logits = cfg.follow_scale * np.sqrt(cfg.taste_dim) * item_taste[pool] @ item_taste[prev]
                else:
                    logits = cfg.taste_scale * item_taste[pool] @ taste
                p = np.exp(logits - logits.max())
                item = int(rng.choice(pool, p=p / p.sum()))
            seen.add(item)
            prev = item
            t += int(rng.integers(1, 1000))
            interactions.append(Interaction(u, item, t))

    categories = {}
    for i in range(cfg.items):
        cats = [int(sem[i]) + 1]
        if rng.random() < cfg.extra_category_prob:
            other = int(rng.integers(k - 1))
            cats.append(other + 1 if other < sem[i] else other + 2)
        categories[i] = cats

    log = InteractionLog(
        interactions,
        user_ids={f"u{u}": u for u in range(cfg.users)},
        item_ids={f"i{i}": i for i in range(cfg.items)},
    )
    return SyntheticData(
        log=log,
        modalities=ModalityEmbeddings(id=ids, image=image, text=text),
        categories=categories,
        true_semantics=(sem + 1).astype(np.int64),
        item_taste=item_taste,
        config=cfg,
    )


def write_interactions(path, log: InteractionLog) -> None:
    users = {v: k for k, v in log.user_ids.items()}
    items = {v: k for k, v in log.item_ids.items()}
    with open(path, "w") as f:
        f.write("user,item,timestamp\n")
        for x in log.interactions:
            f.write(f"{users[x.user_id]},{items[x.item_id]},{x.timestamp}\n")


def write_categories(path, categories: dict[int, list[int]]) -> None:
    with open(path, "w") as f:
        for item in sorted(categories):
            f.write(f"{item}\t{'|'.join(map(str, categories[item]))}\n")


def read_categories(path) -> dict[int, list[int]]:
    out = {}
    with open(path) as f:
        for line in f:
            item, cats = line.rstrip("\n").split("\t")
            out[int(item)] = [int(c) for c in cats.split("|")]
    return out
