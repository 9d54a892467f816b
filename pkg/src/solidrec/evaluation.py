"""CTR and ranking metrics for the 1-positive + n-negatives protocol, and stability variance."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import Samples

logger = logging.getLogger(__name__)

DEFAULT_KS = (10, 20)


def auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie) over all positive/negative pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def per_user_auc(scores, labels, users) -> dict[int, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    users = np.asarray(users)
    order = np.argsort(users, kind="stable")
    uniq, starts = np.unique(users[order], return_index=True)
    out = {}
    for u, idx in zip(uniq, np.split(order, starts[1:])):
        lab = labels[idx]
        if lab.min() == lab.max():
            logger.debug("user %s has a single class; skipped in UAUC", u)
            continue
        out[int(u)] = auc(scores[idx], lab)
    return out


def uauc(scores, labels, users) -> float:
    """Unweighted mean of per-user AUC over users that have both classes."""
    per = per_user_auc(scores, labels, users)
    if not per:
        raise ValueError("no user has both positive and negative samples")
    return float(np.mean(list(per.values())))


def positive_rank(scores, labels) -> int:
    """1-based rank of the single positive; ties rank the positive below the negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if int((labels == 1).sum()) != 1:
        raise ValueError("candidate list must hold exactly one positive")
    p = scores[labels == 1][0]
    return 1 + int((scores[labels == 0] >= p).sum())


def ndcg_from_rank(rank, k: int):
    rank = np.asarray(rank, dtype=np.float64)
    return np.where(rank <= k, 1.0 / np.log2(rank + 1.0), 0.0)


def recall_from_rank(rank, k: int):
    return (np.asarray(rank) <= k).astype(np.float64)


def ndcg_at_k(scores, labels, k: int) -> float:
    return float(ndcg_from_rank(positive_rank(scores, labels), k))


def recall_at_k(scores, labels, k: int) -> float:
    return float(recall_from_rank(positive_rank(scores, labels), k))


def group_ranks(scores, labels, groups) -> tuple[np.ndarray, np.ndarray]:
    """Pessimistic positive rank per candidate group; returns (group ids, ranks)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    pos = labels == 1
    gids = groups[pos]
    if len(np.unique(gids)) != len(gids):
        raise ValueError("each candidate group must hold exactly one positive")
    n_groups = int(groups.max()) + 1 if len(groups) else 0
    pos_score = np.full(n_groups, np.nan)
    pos_score[gids] = scores[pos]
    beats = (~pos) & (scores >= pos_score[groups])
    ranks = 1 + np.bincount(groups, weights=beats, minlength=n_groups).astype(np.int64)
    return gids, ranks[gids]


@dataclass
class EvalReport:
    auc: float
    uauc: float
    ndcg: dict[int, float]
    recall: dict[int, float]
    per_user: dict[int, dict[str, float]] = field(repr=False)
    variance_summary: dict[str, float] | None = None

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "uauc": self.uauc,
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "per_user": {str(u): m for u, m in self.per_user.items()},
            "variance_summary": self.variance_summary,
        }

    def rows(self) -> list[tuple[str, str, float]]:
        out = [("auc", "", self.auc), ("uauc", "", self.uauc)]
        for k in sorted(self.ndcg):
            out.append(("ndcg", str(k), self.ndcg[k]))
        for k in sorted(self.recall):
            out.append(("recall", str(k), self.recall[k]))
        return out

    def write(self, directory, prefix: str = "report") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{prefix}.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(d / f"{prefix}.tsv", "w") as f:
            f.write("metric\tK\tvalue\n")
            for m, k, v in self.rows():
                f.write(f"{m}\t{k}\t{v:.10f}\n")
        if self.variance_summary is not None:
            write_variance_tsv(d / f"{prefix}_variance.tsv", {"model": self.variance_summary})

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            auc=d["auc"],
            uauc=d["uauc"],
            ndcg={int(k): v for k, v in d["ndcg"].items()},
            recall={int(k): v for k, v in d["recall"].items()},
            per_user={int(u): m for u, m in d["per_user"].items()},
            variance_summary=d.get("variance_summary"),
        )


def evaluate(scores, samples: Samples, ks=DEFAULT_KS) -> EvalReport:
    """Pooled AUC, UAUC and per-user-averaged NDCG/Recall@K."""
    scores = np.asarray(scores, dtype=np.float64)
    per_auc = per_user_auc(scores, samples.labels, samples.users)
    gids, ranks = group_ranks(scores, samples.labels, samples.groups)
    group_user = samples.users[samples.labels == 1]
    per_user: dict[int, dict[str, float]] = {}
    user_order = np.argsort(group_user, kind="stable")
    uniq, starts = np.unique(group_user[user_order], return_index=True)
    for u, idx in zip(uniq, np.split(user_order, starts[1:])):
        m: dict[str, float] = {}
        if int(u) in per_auc:
            m["auc"] = per_auc[int(u)]
        for k in ks:
            m[f"ndcg@{k}"] = float(ndcg_from_rank(ranks[idx], k).mean())
            m[f"recall@{k}"] = float(recall_from_rank(ranks[idx], k).mean())
        per_user[int(u)] = m
    return EvalReport(
        auc=auc(scores, samples.labels),
        uauc=float(np.mean([m["auc"] for m in per_user.values() if "auc" in m])),
        ndcg={k: float(np.mean([m[f"ndcg@{k}"] for m in per_user.values()])) for k in ks},
        recall={k: float(np.mean([m[f"recall@{k}"] for m in per_user.values()])) for k in ks},
        per_user=per_user,
    )


# -- stability under one-behavior perturbations ----------------------------------


def dominant_semantic(seq_c: np.ndarray) -> int:
    vals = seq_c[seq_c > 0]
    if len(vals) == 0:
        return 0
    return int(np.bincount(vals).argmax())  # lowest id on ties


def make_perturbations(
    samples: Samples,
    histories,
    assignment: np.ndarray,
    n_perturb: int = 5,
    seed: int = 0,
) -> tuple[list[Samples], list[int]]:
    """Copies of ``samples`` where each user's sequence gains one extra behavior.

    The extra behavior is the next held-out interaction when the user has one
    after the sequence window, otherwise a random unseen item from the user's
    dominant semantic. Returns the perturbed sample sets and the users that had
    no perturbation source (they are dropped from every copy).
    """
    rng = np.random.default_rng(seed)
    assignment = np.asarray(assignment)
    pos = np.flatnonzero(samples.labels == 1)
    order = np.argsort(samples.groups, kind="stable")
    gvals, starts = np.unique(samples.groups[order], return_index=True)
    candidates = {int(g): samples.targets[idx] for g, idx in zip(gvals, np.split(order, starts[1:]))}
    extra = {}
    skipped = []
    for r in pos:
        u = int(samples.users[r])
        hist = np.asarray(histories[u])
        p = int(samples.positions[r])
        later = hist[p + 1:] if p >= 0 else hist[:0]
        choices = []
        if len(later):
            choices = list(later[:n_perturb])
        if len(choices) < n_perturb:
            sem = dominant_semantic(samples.seq_c[r])
            pool = np.flatnonzero(assignment == sem) if sem else np.arange(len(assignment))
            pool = np.setdiff1d(pool, np.concatenate([hist, candidates[int(samples.groups[r])]]))
            if len(pool) == 0 and not choices:
                logger.info("user %d: no perturbation source; skipped", u)
                skipped.append(u)
                continue
            if len(pool):
                choices += list(rng.choice(pool, size=n_perturb - len(choices), replace=True))
        while len(choices) < n_perturb:
            choices.append(choices[-1])
        extra[int(samples.groups[r])] = np.asarray(choices, dtype=np.int64)

    keep = np.isin(samples.groups, list(extra.keys()))
    base = samples.take(keep)
    lookup = np.concatenate([[0], assignment]).astype(np.int64)
    out = []
    for i in range(n_perturb):
        add = np.array([extra[g][i] for g in base.groups.tolist()], dtype=np.int64) + 1
        seq_v = np.concatenate([base.seq_v[:, 1:], add[:, None]], axis=1)
        seq_c = np.concatenate([base.seq_c[:, 1:], lookup[add][:, None]], axis=1)
        out.append(replace(base, seq_v=seq_v, seq_c=seq_c))
    return out, skipped


def variance_summary(per_user_var: dict[int, float]) -> dict[str, float]:
    v = np.array(list(per_user_var.values()), dtype=np.float64)
    if len(v) == 0:
        raise ValueError("no user variances to summarise")
    return {"median": float(np.median(v)), "mean": float(v.mean()), "min": float(v.min()), "max": float(v.max())}


def stability_variance(score_fn, perturbed: list[Samples]) -> tuple[dict[int, float], dict[str, float]]:
    """Per-user variance of AUC across perturbed copies, plus median/mean/min/max.

    ``score_fn(samples) -> scores`` is the model under test.
    """
    if len(perturbed) < 2:
        raise ValueError("need at least two perturbations to measure variance")
    aucs: dict[int, list[float]] = {}
    for s in perturbed:
        for u, a in per_user_auc(score_fn(s), s.labels, s.users).items():
            aucs.setdefault(u, []).append(a)
    per_user = {u: float(np.var(v)) for u, v in aucs.items() if len(v) == len(perturbed)}
    return per_user, variance_summary(per_user)


def write_variance_tsv(path, summaries: dict[str, dict[str, float]]) -> None:
    with open(path, "w") as f:
        f.write("model\tmedian\tmean\tmin\tmax\n")
        for name, s in summaries.items():
            f.write(f"{name}\t{s['median']:.10g}\t{s['mean']:.10g}\t{s['min']:.10g}\t{s['max']:.10g}\n")
