"""Interaction logs, leave-one-out splitting, sequence building and negative sampling.

Item ids have two conventions here:

* dense ids ``0 .. n_items - 1`` (``Samples.targets``, user histories, id maps);
* shifted ids ``dense + 1`` inside sequences, so that ``0`` is the padding slot.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0

_USER_KEYS = ("user", "user_id", "userid", "uid")
_ITEM_KEYS = ("item", "item_id", "itemid", "iid", "asin")
_TIME_KEYS = ("timestamp", "time", "ts", "unix_time", "unixreviewtime")


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int


@dataclass
class InteractionLog:
    """Deduplicated interactions, sorted by (user, timestamp), plus the id maps."""

    interactions: list[Interaction]
    user_ids: dict[str, int]
    item_ids: dict[str, int]

    def __len__(self) -> int:
        return len(self.interactions)

    def __iter__(self):
        return iter(self.interactions)

    def __getitem__(self, i):
        return self.interactions[i]

    @property
    def user_vocab_size(self) -> int:
        return len(self.user_ids)

    @property
    def item_vocab_size(self) -> int:
        return len(self.item_ids)


def _parse_time(raw, lineno: int) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise DataError(f"line {lineno}: bad timestamp {raw!r}") from None
        if not value.is_integer():
            raise DataError(f"line {lineno}: non-integer timestamp {raw!r}")
        return int(value)


def _pick(keys: tuple[str, ...], names: list[str]) -> int | None:
    lowered = [n.strip().lower() for n in names]
    for k in keys:
        if k in lowered:
            return lowered.index(k)
    return None


def _read_delimited(path: Path, delimiter: str):
    with open(path, newline="") as f:
        rows = [(i + 1, row) for i, row in enumerate(csv.reader(f, delimiter=delimiter)) if row]
    if not rows:
        raise DataError(f"{path}: empty file")
    cols = (0, 1, 2)
    first_no, first = rows[0]
    try:
        int(float(first[2]))
        has_header = False
    except (IndexError, ValueError):
        has_header = True
    if has_header:
        u, i, t = _pick(_USER_KEYS, first), _pick(_ITEM_KEYS, first), _pick(_TIME_KEYS, first)
        if None in (u, i, t):
            raise DataError(f"line {first_no}: header lacks user/item/timestamp columns: {first}")
        cols = (u, i, t)
        rows = rows[1:]
        if not rows:
            raise DataError(f"{path}: header but no records")
    need = max(cols) + 1
    for lineno, row in rows:
        if len(row) < need:
            raise DataError(f"line {lineno}: expected at least {need} fields, got {len(row)}")
        yield lineno, row[cols[0]].strip(), row[cols[1]].strip(), _parse_time(row[cols[2]].strip(), lineno)


def _read_jsonl(path: Path):
    empty = True
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            empty = False
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid json ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"line {lineno}: expected an object")
            keys = {k.lower(): k for k in rec}
            try:
                u = rec[next(keys[k] for k in _USER_KEYS if k in keys)]
                i = rec[next(keys[k] for k in _ITEM_KEYS if k in keys)]
                t = rec[next(keys[k] for k in _TIME_KEYS if k in keys)]
            except StopIteration:
                raise DataError(f"line {lineno}: missing user/item/timestamp key") from None
            yield lineno, str(u), str(i), _parse_time(t, lineno)
    if empty:
        raise DataError(f"{path}: empty file")


def load_interactions(path, format: str | None = None) -> InteractionLog:
    """Read a csv/tsv/jsonl log into dense-id interactions.

    Rows may carry a trailing rating column; it is ignored. Duplicate
    (user, item, timestamp) triples are dropped, keeping the first.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        records = _read_delimited(path, ",")
    elif fmt == "tsv":
        records = _read_delimited(path, "\t")
    elif fmt in ("jsonl", "json"):
        records = _read_jsonl(path)
    else:
        raise DataError(f"unsupported format {fmt!r}")

    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    seen = set()
    out = []
    for _, u, i, t in records:
        uid = user_ids.setdefault(u, len(user_ids))
        iid = item_ids.setdefault(i, len(item_ids))
        key = (uid, iid, t)
        if key in seen:
            continue
        seen.add(key)
        out.append(Interaction(uid, iid, t))
    # stable: file order breaks timestamp ties
    out.sort(key=lambda x: (x.user_id, x.timestamp))
    return InteractionLog(out, user_ids, item_ids)


def user_histories(interactions, n_users: int | None = None) -> list[np.ndarray]:
    """Chronological dense item ids per user."""
    inters = list(interactions)
    if n_users is None:
        n_users = max((x.user_id for x in inters), default=-1) + 1
    buckets: list[list[tuple[int, int, int]]] = [[] for _ in range(n_users)]
    for order, x in enumerate(inters):
        buckets[x.user_id].append((x.timestamp, order, x.item_id))
    return [np.array([it for _, _, it in sorted(b)], dtype=np.int64) for b in buckets]


@dataclass
class Samples:
    """Columnar sample store. Row ``i`` is one (user, target, label, s_v, s_c) record.

    ``groups`` ties each negative to the positive it was drawn for; a group is
    one positive followed by its negatives. ``positions`` is the index of the
    positive's target inside the user's chronological history.
    """

    users: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    seq_v: np.ndarray
    seq_c: np.ndarray
    groups: np.ndarray
    positions: np.ndarray

    @classmethod
    def empty(cls, seq_len: int = 0) -> "Samples":
        z = np.zeros(0, dtype=np.int64)
        s = np.zeros((0, seq_len), dtype=np.int64)
        return cls(z, z.copy(), z.copy(), s, s.copy(), z.copy(), z.copy())

    def __len__(self) -> int:
        return len(self.users)

    @property
    def seq_len(self) -> int:
        return self.seq_v.shape[1]

    def row(self, i: int) -> "Sample":
        return Sample(
            int(self.users[i]),
            int(self.targets[i]),
            self.seq_v[i].tolist(),
            self.seq_c[i].tolist(),
            int(self.labels[i]),
        )

    def take(self, idx) -> "Samples":
        return Samples(*(getattr(self, f)[idx] for f in _SAMPLE_FIELDS))

    def positives(self) -> "Samples":
        return self.take(self.labels == 1)


_SAMPLE_FIELDS = ("users", "targets", "labels", "seq_v", "seq_c", "groups", "positions")


@dataclass(frozen=True)
class Sample:
    user_id: int
    target_item: int
    item_seq: list[int]
    semantic_seq: list[int]
    label: int


@dataclass
class SplitDataset:
    train: Samples
    valid: Samples
    test: Samples
    item_vocab_size: int
    user_vocab_size: int
    histories: list[np.ndarray] = field(repr=False)
    timestamps: list[np.ndarray] = field(default_factory=list, repr=False)


def _positives(users, targets, positions) -> Samples:
    users = np.asarray(users, dtype=np.int64)
    n = len(users)
    return Samples(
        users=users,
        targets=np.asarray(targets, dtype=np.int64),
        labels=np.ones(n, dtype=np.int64),
        seq_v=np.zeros((n, 0), dtype=np.int64),
        seq_c=np.zeros((n, 0), dtype=np.int64),
        groups=np.arange(n, dtype=np.int64),
        positions=np.asarray(positions, dtype=np.int64),
    )


def leave_one_out_split(interactions, n_users: int | None = None, n_items: int | None = None) -> SplitDataset:
    """Last interaction per user to test, second-to-last to validation, rest to training.

    Users with fewer than three interactions only contribute training positives.
    """
    inters = list(interactions)
    if n_users is None:
        n_users = max((x.user_id for x in inters), default=-1) + 1
    if n_items is None:
        n_items = max((x.item_id for x in inters), default=-1) + 1
    buckets: list[list[tuple[int, int, int]]] = [[] for _ in range(n_users)]
    for order, x in enumerate(inters):
        buckets[x.user_id].append((x.timestamp, order, x.item_id))

    histories, stamps = [], []
    tr, va, te = ([], [], []), ([], [], []), ([], [], [])
    for u, b in enumerate(buckets):
        b.sort()
        items = np.array([it for _, _, it in b], dtype=np.int64)
        histories.append(items)
        stamps.append(np.array([t for t, _, _ in b], dtype=np.int64))
        n = len(items)
        n_train = n - 2 if n >= 3 else n
        for p in range(n_train):
            tr[0].append(u), tr[1].append(items[p]), tr[2].append(p)
        if n >= 3:
            va[0].append(u), va[1].append(items[n - 2]), va[2].append(n - 2)
            te[0].append(u), te[1].append(items[n - 1]), te[2].append(n - 1)
    return SplitDataset(
        train=_positives(*tr),
        valid=_positives(*va),
        test=_positives(*te),
        item_vocab_size=n_items,
        user_vocab_size=n_users,
        histories=histories,
        timestamps=stamps,
    )


def history_window(history: np.ndarray, position: int, seq_len: int) -> np.ndarray:
    """Shifted ids of the <= seq_len items before ``position``, left-padded with 0."""
    prev = history[max(0, position - seq_len):position] + 1
    out = np.zeros(seq_len, dtype=np.int64)
    if len(prev):
        out[seq_len - len(prev):] = prev
    return out


def _with_sequences(samples: Samples, histories, seq_len: int) -> Samples:
    seq = np.zeros((len(samples), seq_len), dtype=np.int64)
    for r, (u, p) in enumerate(zip(samples.users, samples.positions)):
        seq[r] = history_window(histories[u], p, seq_len)
    return replace(samples, seq_v=seq, seq_c=np.zeros_like(seq))


def build_sequences(split: SplitDataset, seq_len: int = 10) -> SplitDataset:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    return replace(
        split,
        train=_with_sequences(split.train, split.histories, seq_len),
        valid=_with_sequences(split.valid, split.histories, seq_len),
        test=_with_sequences(split.test, split.histories, seq_len),
    )


def sample_negatives(samples: Samples, k: int, item_vocab_size: int, histories, seed: int) -> Samples:
    """Attach ``k`` distinct negatives to every positive.

    Negatives are uniform over items outside the user's full history and share
    the positive's sequences. Output rows are grouped: positive, then its
    ``k`` negatives.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pos = samples.positives()
    rng = np.random.default_rng(seed)
    all_items = np.arange(item_vocab_size, dtype=np.int64)
    allowed_cache: dict[int, np.ndarray] = {}
    n = len(pos)
    neg_targets = np.empty((n, k), dtype=np.int64)
    for r in range(n):
        u = int(pos.users[r])
        allowed = allowed_cache.get(u)
        if allowed is None:
            allowed = np.setdiff1d(all_items, histories[u], assume_unique=False)
            allowed_cache[u] = allowed
        if len(allowed) < k:
            raise DataError(f"user {u}: only {len(allowed)} unseen items, cannot draw {k} negatives")
        neg_targets[r] = rng.choice(allowed, size=k, replace=False)

    rep = np.repeat(np.arange(n), k + 1)
    targets = np.concatenate([pos.targets[:, None], neg_targets], axis=1).reshape(-1)
    labels = np.zeros((n, k + 1), dtype=np.int64)
    labels[:, 0] = 1
    return Samples(
        users=pos.users[rep],
        targets=targets,
        labels=labels.reshape(-1),
        seq_v=pos.seq_v[rep],
        seq_c=pos.seq_c[rep],
        groups=rep.astype(np.int64),
        positions=pos.positions[rep],
    )


@dataclass(frozen=True)
class NegativeCounts:
    train: int = 4
    valid: int = 99
    test: int = 99


def build_dataset(log, seq_len: int = 10, negatives: NegativeCounts = NegativeCounts(), seed: int = 0) -> SplitDataset:
    """split -> sequences -> negatives for every split, deterministic under ``seed``."""
    n_users = getattr(log, "user_vocab_size", None)
    n_items = getattr(log, "item_vocab_size", None)
    split = build_sequences(leave_one_out_split(log, n_users, n_items), seq_len)
    h, v = split.histories, split.item_vocab_size
    return replace(
        split,
        train=sample_negatives(split.train, negatives.train, v, h, seed * 3 + 0),
        valid=sample_negatives(split.valid, negatives.valid, v, h, seed * 3 + 1),
        test=sample_negatives(split.test, negatives.test, v, h, seed * 3 + 2),
    )


# -- dataset directory ----------------------------------------------------------

SPLITS = ("train", "valid", "test")


def write_samples(path, samples: Samples) -> None:
    with open(path, "w") as f:
        for r in range(len(samples)):
            sv = "|".join(map(str, samples.seq_v[r]))
            sc = "|".join(map(str, samples.seq_c[r]))
            f.write(f"{samples.users[r]}\t{samples.targets[r]}\t{samples.labels[r]}\t{sv}\t{sc}\n")


def read_samples(path) -> Samples:
    users, targets, labels, sv, sc = [], [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise DataError(f"{path} line {lineno}: expected 5 fields")
            users.append(int(parts[0]))
            targets.append(int(parts[1]))
            labels.append(int(parts[2]))
            sv.append([int(x) for x in parts[3].split("|")] if parts[3] else [])
            sc.append([int(x) for x in parts[4].split("|")] if parts[4] else [])
    labels_arr = np.asarray(labels, dtype=np.int64)
    groups = np.cumsum(labels_arr) - 1
    if len(labels_arr) and labels_arr[0] != 1:
        raise DataError(f"{path}: first sample must be a positive")
    width = len(sv[0]) if sv else 0
    return Samples(
        users=np.asarray(users, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        labels=labels_arr,
        seq_v=np.asarray(sv, dtype=np.int64).reshape(-1, width),
        seq_c=np.asarray(sc, dtype=np.int64).reshape(-1, width),
        groups=groups.astype(np.int64),
        positions=np.full(len(users), -1, dtype=np.int64),
    )


def write_id_map(path, ids: dict[str, int]) -> None:
    with open(path, "w") as f:
        for orig, dense in ids.items():
            f.write(f"{orig}\t{dense}\n")


def read_id_map(path) -> dict[str, int]:
    out = {}
    with open(path) as f:
        for line in f:
            orig, dense = line.rstrip("\n").split("\t")
            out[orig] = int(dense)
    return out


def write_dataset(directory, split: SplitDataset, manifest: dict, log: InteractionLog | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_samples(d / f"{name}.tsv", getattr(split, name))
    with open(d / "histories.tsv", "w") as f:
        for u, h in enumerate(split.histories):
            f.write(f"{u}\t{'|'.join(map(str, h))}\n")
    if log is not None:
        write_id_map(d / "users.tsv", log.user_ids)
        write_id_map(d / "items.tsv", log.item_ids)
    meta = dict(manifest)
    meta.update(n_users=split.user_vocab_size, n_items=split.item_vocab_size, seq_len=split.train.seq_len)
    (d / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def read_dataset(directory) -> tuple[SplitDataset, dict]:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise DataError(f"{d}: not a dataset directory (manifest.json missing)")
    meta = json.loads((d / "manifest.json").read_text())
    histories = []
    with open(d / "histories.tsv") as f:
        for line in f:
            _, items = line.rstrip("\n").split("\t")
            histories.append(np.array([int(x) for x in items.split("|")] if items else [], dtype=np.int64))
    split = SplitDataset(
        train=read_samples(d / "train.tsv"),
        valid=read_samples(d / "valid.tsv"),
        test=read_samples(d / "test.tsv"),
        item_vocab_size=int(meta["n_items"]),
        user_vocab_size=int(meta["n_users"]),
        histories=histories,
    )
    return split, meta
