"""Behavior records, vocabularies, the log format and dataset construction."""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "BehaviorType",
    "BehaviorEvent",
    "RankingSample",
    "CausalSubsequences",
    "Vocabulary",
    "ParseError",
    "MissingCategoryError",
    "NegativePoolError",
    "ingest_log",
    "parse_log_lines",
    "tokenize_category",
    "build_query",
    "context_bucket",
    "split_leave_one_out",
    "make_sample",
    "sample_negatives",
    "extract_causal_subsequences",
    "prepare_dataset",
    "build_counterfactual_sets",
    "write_samples",
    "read_samples",
    "SplitReport",
]

PAD = 0
DEFAULT_MIN_EVENTS = 20
DEFAULT_SHORT_LEN = 10
DEFAULT_LONG_CAP = 50
DEFAULT_NEGATIVES = 10


class ParseError(ValueError):
    """A behavior-log line could not be parsed."""


class MissingCategoryError(ValueError):
    """An item has no category to build a query from."""


class NegativePoolError(ValueError):
    """No same-category candidates are available for negative sampling."""


class BehaviorType(enum.IntEnum):
    # value doubles as the embedding row; 0 is the padding row
    CLICK = 1
    FAVORITE = 2
    PURCHASE = 3

    @classmethod
    def parse(cls, token: str) -> "BehaviorType":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise ParseError(f"unknown behavior type {token!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class BehaviorEvent:
    user_id: int
    item_id: int
    category_id: int
    behavior_type: BehaviorType
    timestamp: int

    def as_row(self) -> list[int]:
        return [self.item_id, self.category_id, int(self.behavior_type), self.timestamp]

    @classmethod
    def from_row(cls, user_id: int, row: Sequence[int]) -> "BehaviorEvent":
        return cls(user_id, int(row[0]), int(row[1]), BehaviorType(int(row[2])), int(row[3]))


@dataclass
class RankingSample:
    """One (user, query, candidate) instance with its behavior windows.

    ``proxy_windows`` holds the complete, consecutive windows of ``short_len``
    events from the start of the user's history up to the sample time; they
    feed the long-term proxy.
    """

    user_id: int
    query_tokens: list[int]
    target_item: int
    target_category: int
    context_id: int
    long_seq: list[BehaviorEvent]
    short_seq: list[BehaviorEvent]
    label: int
    timestamp: int = 0
    list_id: int = -1
    event_type: int = int(BehaviorType.PURCHASE)
    proxy_windows: list[list[tuple[int, int, int]]] = field(default_factory=list)

    def with_target(self, item_id: int, label: int) -> "RankingSample":
        return RankingSample(
            user_id=self.user_id,
            query_tokens=list(self.query_tokens),
            target_item=item_id,
            target_category=self.target_category,
            context_id=self.context_id,
            long_seq=self.long_seq,
            short_seq=self.short_seq,
            label=label,
            timestamp=self.timestamp,
            list_id=self.list_id,
            event_type=self.event_type,
            proxy_windows=self.proxy_windows,
        )

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "query_tokens": list(self.query_tokens),
            "target_item": self.target_item,
            "target_category": self.target_category,
            "context_id": self.context_id,
            "long_seq": [e.as_row() for e in self.long_seq],
            "short_seq": [e.as_row() for e in self.short_seq],
            "label": self.label,
            "timestamp": self.timestamp,
            "list_id": self.list_id,
            "event_type": self.event_type,
            "proxy_windows": [[list(ev) for ev in w] for w in self.proxy_windows],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RankingSample":
        uid = int(obj["user_id"])
        return cls(
            user_id=uid,
            query_tokens=[int(t) for t in obj["query_tokens"]],
            target_item=int(obj["target_item"]),
            target_category=int(obj["target_category"]),
            context_id=int(obj["context_id"]),
            long_seq=[BehaviorEvent.from_row(uid, r) for r in obj["long_seq"]],
            short_seq=[BehaviorEvent.from_row(uid, r) for r in obj["short_seq"]],
            label=int(obj["label"]),
            timestamp=int(obj.get("timestamp", 0)),
            list_id=int(obj.get("list_id", -1)),
            event_type=int(obj.get("event_type", BehaviorType.PURCHASE)),
            proxy_windows=[[tuple(int(v) for v in ev) for ev in w] for w in obj.get("proxy_windows", [])],
        )


@dataclass(frozen=True)
class CausalSubsequences:
    """Same-category clicks and purchases around a focal event, as indices
    into the source sequence."""

    before_click: tuple[int, ...]
    before_purchase: tuple[int, ...]
    after_click: tuple[int, ...]
    after_purchase: tuple[int, ...]

    def as_tuple(self) -> tuple[tuple[int, ...], ...]:
        return (self.before_click, self.before_purchase, self.after_click, self.after_purchase)


class _IdMap:
    """Bidirectional map from raw keys to dense ids starting at 1."""

    def __init__(self, keys: Iterable = ()):
        self.to_id: dict = {}
        self.keys: list = [None]
        for k in keys:
            self.add(k)

    def add(self, key) -> int:
        idx = self.to_id.get(key)
        if idx is None:
            idx = self.to_id[key] = len(self.keys)
            self.keys.append(key)
        return idx

    def __len__(self) -> int:
        # number of rows including the padding row
        return len(self.keys)

    def __contains__(self, key) -> bool:
        return key in self.to_id

    def __getitem__(self, key) -> int:
        return self.to_id[key]

    def key(self, idx: int):
        if idx <= 0:
            raise KeyError(idx)
        return self.keys[idx]


N_CONTEXT_BUCKETS = 24


class Vocabulary:
    """Id maps for users, items, categories, query tokens and contexts.

    Id 0 is the padding sentinel in every map.
    """

    def __init__(self):
        self.users = _IdMap()
        self.items = _IdMap()
        self.categories = _IdMap()
        self.tokens = _IdMap()
        self.contexts = _IdMap(range(N_CONTEXT_BUCKETS))
        self.item_category: dict[int, int] = {}

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_contexts(self) -> int:
        return len(self.contexts)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def category_name(self, category_id: int) -> str:
        return self.categories.key(category_id)

    def items_in_category(self, category_id: int) -> list[int]:
        return sorted(i for i, c in self.item_category.items() if c == category_id)

    def catalog(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for item, cat in sorted(self.item_category.items()):
            out.setdefault(cat, []).append(item)
        return out

    def sizes(self) -> dict[str, int]:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "n_categories": self.n_categories,
            "n_tokens": self.n_tokens,
            "n_contexts": self.n_contexts,
        }

    def to_json(self) -> dict:
        return {
            "users": self.users.keys[1:],
            "items": self.items.keys[1:],
            "categories": self.categories.keys[1:],
            "tokens": self.tokens.keys[1:],
            "contexts": self.contexts.keys[1:],
            "item_category": {str(k): v for k, v in sorted(self.item_category.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        voc = cls()
        voc.users = _IdMap(obj["users"])
        voc.items = _IdMap(obj["items"])
        voc.categories = _IdMap(obj["categories"])
        voc.tokens = _IdMap(obj["tokens"])
        voc.contexts = _IdMap(obj["contexts"])
        voc.item_category = {int(k): int(v) for k, v in obj["item_category"].items()}
        return voc


# ---------------------------------------------------------------------------
# ingestion

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


def tokenize_category(name: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop empties."""
    return [t for t in _TOKEN_SPLIT.split(name.lower()) if t]


def parse_log_lines(lines: Iterable[str]):
    """Yield ``(user, timestamp, item, category, BehaviorType)`` per data line."""
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if lineno == 1 and fields[0].strip() == "user_id":
            continue
        if len(fields) != 5:
            raise ParseError(f"line {lineno}: expected 5 tab-separated fields, got {len(fields)}")
        user, ts, item, cat, btype = fields
        try:
            parsed = (int(user), int(ts), int(item))
        except ValueError:
            raise ParseError(f"line {lineno}: user_id, timestamp and item_id must be integers") from None
        if not cat.strip():
            raise ParseError(f"line {lineno}: empty category")
        try:
            kind = BehaviorType.parse(btype)
        except ParseError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        yield lineno, parsed[0], parsed[1], parsed[2], cat, kind


def ingest_log(path, min_events: int = DEFAULT_MIN_EVENTS):
    """Read a behavior-log TSV into a vocabulary and per-user event lists.

    Users with fewer than ``min_events`` events are dropped. Each user's
    events are sorted by timestamp (stable in file order) and equal
    timestamps are bumped by one second so the order is strict.

    Returns ``(vocabulary, {user_id: [BehaviorEvent, ...]}, dropped_users)``
    where user ids are dense vocabulary ids.
    """
    with open(path, encoding="utf-8") as fh:
        rows = list(parse_log_lines(fh))
    return _build_from_rows(rows, min_events)


def _build_from_rows(rows, min_events: int):
    per_user: dict[int, list] = {}
    item_cat_raw: dict[int, str] = {}
    for lineno, user, ts, item, cat, kind in rows:
        seen = item_cat_raw.setdefault(item, cat)
        if seen != cat:
            raise ParseError(f"line {lineno}: item {item} listed under {cat!r} and {seen!r}")
        per_user.setdefault(user, []).append((ts, lineno, item, cat, kind))

    voc = Vocabulary()
    kept: dict[int, list[BehaviorEvent]] = {}
    dropped = 0
    for raw_user in sorted(per_user):
        evs = per_user[raw_user]
        if len(evs) < min_events:
            dropped += 1
            continue
        evs = sorted(evs, key=lambda e: (e[0], e[1]))
        uid = voc.users.add(raw_user)
        out = []
        last_ts = None
        for ts, _, item, cat, kind in evs:
            if last_ts is not None and ts <= last_ts:
                ts = last_ts + 1
            last_ts = ts
            cid = voc.categories.add(cat)
            iid = voc.items.add(item)
            voc.item_category[iid] = cid
            for tok in tokenize_category(cat):
                voc.tokens.add(tok)
            out.append(BehaviorEvent(uid, iid, cid, kind, ts))
        kept[uid] = out
    return voc, kept, dropped


def build_query(category_id: int | None, vocab: Vocabulary) -> list[int]:
    """Token ids of the category name of an item's category."""
    if category_id is None or category_id == PAD:
        raise MissingCategoryError("item has no category")
    name = vocab.category_name(category_id)
    toks = tokenize_category(name)
    if not toks:
        raise MissingCategoryError(f"category {name!r} has no tokens")
    return [vocab.tokens[t] for t in toks]


def context_bucket(timestamp: int) -> int:
    """Hour-of-day bucket, offset so that 0 stays the padding id."""
    return int(timestamp // 3600) % N_CONTEXT_BUCKETS + 1


# ---------------------------------------------------------------------------
# samples


def _windows(history: Sequence[BehaviorEvent], short_len: int) -> list[list[tuple[int, int, int]]]:
    n_full = len(history) // short_len
    return [
        [(e.item_id, e.category_id, int(e.behavior_type)) for e in history[k * short_len:(k + 1) * short_len]]
        for k in range(n_full)
    ]


def make_sample(
    events: Sequence[BehaviorEvent],
    index: int,
    vocab: Vocabulary,
    short_len: int = DEFAULT_SHORT_LEN,
    long_cap: int = DEFAULT_LONG_CAP,
    label: int = 1,
    list_id: int = -1,
) -> RankingSample:
    """Positive sample for ``events[index]`` built from the strictly earlier history."""
    target = events[index]
    history = list(events[:index])
    short = history[-short_len:] if short_len else []
    older = history[: len(history) - len(short)]
    long_ = older[-long_cap:] if long_cap else []
    return RankingSample(
        user_id=target.user_id,
        query_tokens=build_query(target.category_id, vocab),
        target_item=target.item_id,
        target_category=target.category_id,
        context_id=context_bucket(target.timestamp),
        long_seq=long_,
        short_seq=short,
        label=label,
        timestamp=target.timestamp,
        list_id=list_id,
        event_type=int(target.behavior_type),
        proxy_windows=_windows(history, short_len),
    )


def split_leave_one_out(events: Sequence[BehaviorEvent]):
    """Partition a user's purchases into train / valid / test seed indices.

    Returns ``(train, valid, test, excluded)``; ``valid`` and ``test`` are
    ``None`` and ``excluded`` is True when the user has fewer than three
    purchases, in which case every purchase is a train seed.
    """
    purchases = [i for i, e in enumerate(events) if e.behavior_type == BehaviorType.PURCHASE]
    if len(purchases) < 3:
        return purchases, None, None, True
    return purchases[:-2], purchases[-2], purchases[-1], False


def _list_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(k) for k in keys]]))


def sample_negatives(
    positive: RankingSample,
    catalog: dict[int, Sequence[int]],
    k: int = DEFAULT_NEGATIVES,
    rng_seed: int = 0,
) -> list[RankingSample]:
    """``k`` same-category negatives, uniform over the pool without the target.

    Draws without replacement when the pool holds at least ``k`` items,
    with replacement otherwise.
    """
    cat = positive.target_category
    pool = [i for i in catalog.get(cat, ()) if i != positive.target_item]
    if not pool:
        raise NegativePoolError(f"no negative candidates in category {cat}")
    rng = _list_rng(rng_seed, positive.user_id, positive.timestamp, positive.target_item)
    pool_arr = np.asarray(sorted(pool))
    if len(pool_arr) >= k:
        picks = rng.choice(pool_arr, size=k, replace=False)
    else:
        picks = rng.choice(pool_arr, size=k, replace=True)
    return [positive.with_target(int(i), 0) for i in picks]


def extract_causal_subsequences(seq: Sequence[BehaviorEvent], focal_index: int) -> CausalSubsequences:
    """Same-category clicks/purchases before and after the focal event.

    Favorites never enter a sub-sequence; sequence position defines
    before/after.
    """
    focal = seq[focal_index]
    bc, bp, ac, ap = [], [], [], []
    for j, ev in enumerate(seq):
        if j == focal_index or ev.category_id != focal.category_id:
            continue
        if ev.behavior_type == BehaviorType.CLICK:
            (bc if j < focal_index else ac).append(j)
        elif ev.behavior_type == BehaviorType.PURCHASE:
            (bp if j < focal_index else ap).append(j)
    return CausalSubsequences(tuple(bc), tuple(bp), tuple(ac), tuple(ap))


@dataclass
class SplitReport:
    users_kept: int = 0
    users_dropped: int = 0
    users_excluded_from_eval: int = 0
    samples: dict[str, int] = field(default_factory=lambda: {"train": 0, "valid": 0, "test": 0})
    positives: dict[str, int] = field(default_factory=lambda: {"train": 0, "valid": 0, "test": 0})

    def to_json(self) -> dict:
        return {
            "users_kept": self.users_kept,
            "users_dropped": self.users_dropped,
            "users_excluded_from_eval": self.users_excluded_from_eval,
            "samples": dict(self.samples),
            "positives": dict(self.positives),
        }


def _with_negatives(pos: RankingSample, catalog, k: int, seed: int, list_id: int) -> list[RankingSample]:
    pos.list_id = list_id
    group = [pos] + sample_negatives(pos, catalog, k, seed)
    # shuffled so ties can never silently favor the positive
    order = _list_rng(seed, list_id, 7919).permutation(len(group))
    return [group[i] for i in order]


def prepare_dataset(
    vocab: Vocabulary,
    users: dict[int, list[BehaviorEvent]],
    short_len: int = DEFAULT_SHORT_LEN,
    long_cap: int = DEFAULT_LONG_CAP,
    n_negatives: int = DEFAULT_NEGATIVES,
    train_negatives: int | None = None,
    seed: int = 0,
    dropped: int = 0,
):
    """Leave-one-out purchase splits with same-category negatives.

    Returns ``({"train": [...], "valid": [...], "test": [...]}, SplitReport)``.
    """
    catalog = vocab.catalog()
    train_negatives = n_negatives if train_negatives is None else train_negatives
    report = SplitReport(users_kept=len(users), users_dropped=dropped)
    splits: dict[str, list[RankingSample]] = {"train": [], "valid": [], "test": []}
    list_id = 0
    for uid in sorted(users):
        events = users[uid]
        train, valid, test, excluded = split_leave_one_out(events)
        report.users_excluded_from_eval += int(excluded)
        plan = [("train", i) for i in train]
        if not excluded:
            plan += [("valid", valid), ("test", test)]
        for split, idx in plan:
            pos = make_sample(events, idx, vocab, short_len, long_cap)
            k = train_negatives if split == "train" else n_negatives
            group = _with_negatives(pos, catalog, k, seed, list_id)
            list_id += 1
            splits[split].extend(group)
            report.samples[split] += len(group)
            report.positives[split] += 1
    return splits, report


def build_counterfactual_sets(
    vocab: Vocabulary,
    users: dict[int, list[BehaviorEvent]],
    holdout_fraction: float = 0.25,
    short_len: int = DEFAULT_SHORT_LEN,
    long_cap: int = DEFAULT_LONG_CAP,
    n_negatives: int = DEFAULT_NEGATIVES,
    train_negatives: int | None = None,
    valid_fraction: float = 0.1,
    seed: int = 0,
):
    """Click-trained sets with behavior-type evaluation slices.

    Each user's history is split in time: events before the final
    ``holdout_fraction`` supply click positives for training (a slice of
    users is kept aside for validation), and every event in the held-out
    tail becomes a positive in the slice of its behavior type.

    Returns ``(train, valid, {"click": [...], "favorite": [...], "purchase": [...]})``.
    """
    catalog = vocab.catalog()
    train_negatives = n_negatives if train_negatives is None else train_negatives
    train: list[RankingSample] = []
    valid: list[RankingSample] = []
    slices: dict[str, list[RankingSample]] = {t.label: [] for t in BehaviorType}
    list_id = 0
    uids = sorted(users)
    n_valid_users = int(round(len(uids) * valid_fraction))
    valid_users = set(_list_rng(seed, 104729).permutation(uids)[:n_valid_users].tolist()) if n_valid_users else set()
    for uid in uids:
        events = users[uid]
        cut = len(events) - max(1, int(round(len(events) * holdout_fraction)))
        for idx, ev in enumerate(events):
            if idx < cut:
                if ev.behavior_type != BehaviorType.CLICK:
                    continue
                pos = make_sample(events, idx, vocab, short_len, long_cap)
                group = _with_negatives(pos, catalog, train_negatives, seed, list_id)
                (valid if uid in valid_users else train).extend(group)
            else:
                pos = make_sample(events, idx, vocab, short_len, long_cap)
                group = _with_negatives(pos, catalog, n_negatives, seed, list_id)
                slices[BehaviorType(ev.behavior_type).label].extend(group)
            list_id += 1
    return train, valid, slices


def write_samples(samples: Iterable[RankingSample], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_samples(path) -> list[RankingSample]:
    with open(path, encoding="utf-8") as fh:
        return [RankingSample.from_json(json.loads(line)) for line in fh if line.strip()]


def save_vocabulary(vocab: Vocabulary, path) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), sort_keys=True), encoding="utf-8")


def load_vocabulary(path) -> Vocabulary:
    return Vocabulary.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
