"""Item -> semantic id assignment, from clustering or from category labels."""

from __future__ import annotations

import warnings
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODALITIES = ("id", "image", "text")


@dataclass
class ModalityEmbeddings:
    """Row-aligned per-item vectors. ``id`` is required, ``image``/``text`` optional."""

    id: np.ndarray
    image: np.ndarray | None = None
    text: np.ndarray | None = None

    def __post_init__(self):
        n = None
        for name in MODALITIES:
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=np.float64)
            if m.ndim != 2:
                raise ValueError(f"{name} embeddings must be 2-D")
            if n is not None and m.shape[0] != n:
                raise ValueError(f"{name} embeddings have {m.shape[0]} rows, expected {n}")
            if not np.isfinite(m).all():
                raise ValueError(f"{name} embeddings contain non-finite values")
            n = m.shape[0]
            setattr(self, name, m)

    @property
    def n_items(self) -> int:
        return self.id.shape[0]

    def available(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if getattr(self, m) is not None)


@dataclass
class SemanticMap:
    """``assignment[item]`` in ``1..k`` for dense item ids; 0 is reserved for padding."""

    assignment: np.ndarray
    centroids: np.ndarray
    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def lookup(self) -> np.ndarray:
        """Indexable by shifted (sequence) ids: ``lookup[0] == 0``."""
        return np.concatenate([[0], self.assignment]).astype(np.int64)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms > 0, norms, 1.0)


def fuse_modalities(emb: ModalityEmbeddings, selection: Iterable[str] = ("id",)) -> np.ndarray:
    """Mean of the L2-normalized rows of the selected modalities."""
    selection = tuple(selection)
    if not selection:
        raise ValueError("modality selection is empty")
    mats = []
    for name in selection:
        if name not in MODALITIES:
            raise ValueError(f"unknown modality {name!r}")
        m = getattr(emb, name)
        if m is None:
            raise ValueError(f"modality {name!r} requested but not supplied")
        mats.append(_normalize_rows(m))
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1:
        raise ValueError(f"selected modalities differ in width: {sorted(widths)}")
    return np.mean(mats, axis=0)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences keep exact ties exact
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    idx = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[idx]).min(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # fewer distinct rows than k; fall back to any unused row
            rest = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[idx].copy()


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 0.0):
    """Lloyd iterations with k-means++ seeding and farthest-point reseeding.

    Returns ``(labels, centroids, inertia_history)``; labels are 0-based.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centroids)
        new_labels = d2.argmin(1)
        used_reseed: set[int] = set()
        for _guard in range(k):
            counts = np.bincount(new_labels, minlength=k)
            empty = np.flatnonzero(counts == 0)
            if len(empty) == 0:
                break
            own = d2[np.arange(n), new_labels]
            order = np.argsort(-own, kind="stable")
            for c in empty:
                cand = next((int(i) for i in order if int(i) not in used_reseed), None)
                if cand is None:
                    break
                used_reseed.add(cand)
                centroids[c] = x[cand]
            d2 = _sq_dists(x, centroids)
            new_labels = d2.argmin(1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        converged = labels is not None and np.array_equal(labels, new_labels)
        labels = new_labels
        for c in range(k):
            members = x[labels == c]
            if len(members):
                centroids[c] = members.mean(0)
        if converged:
            break
        if tol > 0 and len(history) > 1 and history[-2] - history[-1] <= tol * history[-2]:
            break
    d2 = _sq_dists(x, centroids)
    labels = d2.argmin(1)
    history.append(float(d2[np.arange(n), labels].sum()))
    return labels, centroids, history


def cluster_semantics(fused: np.ndarray, k: int | None = None, seed: int = 0, max_iter: int = 100) -> SemanticMap:
    fused = np.asarray(fused, dtype=np.float64)
    if k is None:
        k = default_semantic_count(len(fused))
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(fused):
        raise ValueError(f"k={k} exceeds the number of items ({len(fused)})")
    labels, centroids, _ = kmeans(fused, k, seed=seed, max_iter=max_iter)
    return SemanticMap(
        assignment=(labels + 1).astype(np.int64),
        centroids=centroids,
        counts=np.bincount(labels, minlength=k).astype(np.int64),
    )


def default_semantic_count(n_items: int) -> int:
    return max(2, int(round(np.sqrt(n_items))))


@dataclass
class CategoryCentroids:
    labels: list
    centroids: np.ndarray
    counts: np.ndarray


def category_centroids(fused: np.ndarray, categories: Mapping, all_categories: Iterable | None = None) -> CategoryCentroids:
    """Mean embedding per category. Items listed under several categories count in each."""
    fused = np.asarray(fused, dtype=np.float64)
    members: dict = {}
    for c in all_categories or ():
        members.setdefault(c, [])
    for item in range(len(fused)):
        cats = categories.get(item)
        if not cats:
            raise ValueError(f"item {item} has no category label")
        for c in cats:
            members.setdefault(c, []).append(item)
    labels, rows, counts = [], [], []
    for c in sorted(members, key=lambda v: (str(type(v)), v)):
        idx = members[c]
        if not idx:
            warnings.warn(f"category {c!r} has no members; excluded", stacklevel=2)
            continue
        labels.append(c)
        rows.append(fused[idx].sum(0) / len(idx))
        counts.append(len(idx))
    return CategoryCentroids(labels, np.array(rows), np.array(counts, dtype=np.int64))


def assign_primary_category(fused: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """0-based index of the nearest centroid per row; ties go to the lowest index."""
    centroids = np.asarray(centroids, dtype=np.float64)
    if len(centroids) == 0:
        raise ValueError("no centroids")
    return _sq_dists(np.asarray(fused, dtype=np.float64), centroids).argmin(1)


def semantics_from_categories(fused: np.ndarray, categories: Mapping, all_categories=None) -> tuple[SemanticMap, list]:
    cc = category_centroids(fused, categories, all_categories)
    primary = assign_primary_category(fused, cc.centroids)
    smap = SemanticMap(assignment=(primary + 1).astype(np.int64), centroids=cc.centroids, counts=cc.counts)
    return smap, cc.labels


def lift_sequence(seq, semantic_map) -> list[int]:
    """Replace each non-pad item id by its semantic id; padding stays 0.

    ``semantic_map`` is a :class:`SemanticMap` (keyed by shifted ids through
    ``lookup``) or a plain mapping from sequence id to semantic id.
    """
    out = []
    if isinstance(semantic_map, SemanticMap):
        table = semantic_map.lookup
        for v in seq:
            v = int(v)
            if v == 0:
                out.append(0)
            elif 0 < v < len(table):
                out.append(int(table[v]))
            else:
                raise ValueError(f"item id {v} is not covered by the semantic map")
    else:
        for v in seq:
            v = int(v)
            if v == 0:
                out.append(0)
            elif v in semantic_map:
                out.append(int(semantic_map[v]))
            else:
                raise ValueError(f"item id {v} is not covered by the semantic map")
    return out


def lift_array(seq: np.ndarray, semantic_map: SemanticMap) -> np.ndarray:
    table = semantic_map.lookup
    seq = np.asarray(seq)
    if seq.size and (seq.min() < 0 or seq.max() >= len(table)):
        raise ValueError("sequence contains ids outside the semantic map")
    return table[seq]


# -- persistence ----------------------------------------------------------------


def write_matrix(path, m: np.ndarray, tag: str) -> None:
    m = np.asarray(m, dtype=np.float64)
    with open(path, "w") as f:
        f.write(f"{m.shape[0]} {m.shape[1]} {tag}\n")
        np.savetxt(f, m, fmt="%.17g")


def read_matrix(path) -> tuple[np.ndarray, str]:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: header must be 'rows cols tag'")
        rows, cols, tag = int(header[0]), int(header[1]), header[2]
        m = np.loadtxt(f, dtype=np.float64, ndmin=2) if rows else np.zeros((0, cols))
    if m.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, body is {m.shape[0]}x{m.shape[1]}")
    return m, tag


def write_modalities(directory, emb: ModalityEmbeddings) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in emb.available():
        write_matrix(d / f"modality_{name}.txt", getattr(emb, name), name)


def read_modalities(directory) -> ModalityEmbeddings:
    d = Path(directory)
    mats = {}
    for name in MODALITIES:
        p = d / f"modality_{name}.txt"
        if p.exists():
            m, tag = read_matrix(p)
            if tag != name:
                raise ValueError(f"{p}: tag {tag!r} does not match {name!r}")
            mats[name] = m
    if "id" not in mats:
        raise ValueError(f"{d}: modality_id.txt missing")
    return ModalityEmbeddings(**mats)


def write_semantic_map(directory, smap: SemanticMap) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "semantics.tsv", "w") as f:
        for item, sem in enumerate(smap.assignment):
            f.write(f"{item}\t{sem}\n")
    write_matrix(d / "centroids.txt", smap.centroids, "centroids")


def read_semantic_map(directory) -> SemanticMap:
    d = Path(directory)
    pairs = np.loadtxt(d / "semantics.tsv", dtype=np.int64, ndmin=2)
    assignment = np.zeros(len(pairs), dtype=np.int64)
    assignment[pairs[:, 0]] = pairs[:, 1]
    centroids, _ = read_matrix(d / "centroids.txt")
    counts = np.bincount(assignment - 1, minlength=len(centroids)).astype(np.int64)
    return SemanticMap(assignment, centroids, counts)
