"""Rating files, per-domain indexing, user overlap and the cold-start split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class SplitError(DataError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float
    timestamp: int

    def __post_init__(self):
        if not 0.0 <= self.rating <= 5.0:
            raise DataError(f"rating {self.rating} outside [0, 5]")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


class History(NamedTuple):
    items: np.ndarray
    ratings: np.ndarray


class DomainDataset:
    """One domain's ratings with dense user/item indices.

    Indices follow first appearance in the (filtered) input. Interactions are
    stored sorted by (user index, timestamp), so ``user_ptr[u]:user_ptr[u+1]``
    slices a user's chronological record.
    """

    def __init__(self, records: Sequence[Interaction], domain_tag: str):
        if domain_tag not in ("source", "target"):
            raise ValueError(f"domain_tag must be 'source' or 'target', got {domain_tag!r}")
        self.domain_tag = domain_tag
        self.user_ids: List[str] = []
        self.item_ids: List[str] = []
        self.user_index: Dict[str, int] = {}
        self.item_index: Dict[str, int] = {}
        u = np.empty(len(records), dtype=np.int64)
        v = np.empty(len(records), dtype=np.int64)
        for n, r in enumerate(records):
            if r.user_id not in self.user_index:
                self.user_index[r.user_id] = len(self.user_ids)
                self.user_ids.append(r.user_id)
            if r.item_id not in self.item_index:
                self.item_index[r.item_id] = len(self.item_ids)
                self.item_ids.append(r.item_id)
            u[n] = self.user_index[r.user_id]
            v[n] = self.item_index[r.item_id]
        y = np.array([r.rating for r in records], dtype=np.float64)
        t = np.array([r.timestamp for r in records], dtype=np.int64)
        order = np.lexsort((t, u))
        self.users = u[order]
        self.items = v[order]
        self.ratings = y[order]
        self.timestamps = t[order]
        self.user_ptr = np.zeros(len(self.user_ids) + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.users, minlength=len(self.user_ids)), out=self.user_ptr[1:])

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.ratings)

    def user_slice(self, user: int) -> slice:
        return slice(int(self.user_ptr[user]), int(self.user_ptr[user + 1]))

    def interactions(self) -> List[Interaction]:
        return [
            Interaction(self.user_ids[u], self.item_ids[v], float(y), int(t))
            for u, v, y, t in zip(self.users, self.items, self.ratings, self.timestamps)
        ]

    def __repr__(self) -> str:
        return f"DomainDataset({self.domain_tag}, users={self.n_users}, items={self.n_items}, ratings={len(self)})"


def filter_min_count(records: Sequence[Interaction], min_count: int) -> List[Interaction]:
    """Drop users and items with fewer than ``min_count`` ratings until nothing changes."""
    records = list(records)
    while True:
        uc: Dict[str, int] = {}
        ic: Dict[str, int] = {}
        for r in records:
            uc[r.user_id] = uc.get(r.user_id, 0) + 1
            ic[r.item_id] = ic.get(r.item_id, 0) + 1
        kept = [r for r in records if uc[r.user_id] >= min_count and ic[r.item_id] >= min_count]
        if len(kept) == len(records):
            return kept
        records = kept


def read_ratings(path) -> List[Interaction]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            user, item, rating, ts = row
            try:
                y = float(rating)
                t = int(ts)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: cannot parse rating/timestamp {row[2:]!r}") from None
            if not math.isfinite(y) or not 0.0 <= y <= 5.0:
                raise DataError(f"{path}:{lineno}: rating {rating} outside [0, 5]")
            try:
                out.append(Interaction(user, item, y, t))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def load_ratings(path, domain_tag: str, min_count: int = 5) -> DomainDataset:
    records = read_ratings(path)
    if min_count > 1:
        records = filter_min_count(records, min_count)
    return DomainDataset(records, domain_tag)


def write_ratings(dataset: DomainDataset, path) -> None:
    # repr() keeps the float exact so a reload is lossless
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in dataset.interactions():
            w.writerow([r.user_id, r.item_id, repr(r.rating), r.timestamp])


def compute_overlap(source: DomainDataset, target: DomainDataset) -> Tuple[List[str], List[str]]:
    """Return (users in both domains, source-only users), each sorted."""
    tgt = set(target.user_ids)
    overlap = sorted(u for u in source.user_ids if u in tgt)
    source_only = sorted(u for u in source.user_ids if u not in tgt)
    return overlap, source_only


@dataclass(frozen=True)
class CrossDomainSplit:
    overlap_users: Tuple[str, ...]
    train_users: Tuple[str, ...]
    test_users: Tuple[str, ...]
    alpha: float
    seed: int


def split_cold_start(overlap: Sequence[str], alpha: float, seed: int) -> CrossDomainSplit:
    """Shuffle the overlapping users and hide the first floor(alpha * N) of them."""
    if not 0.0 < alpha < 1.0:
        raise SplitError(f"alpha must lie in (0, 1), got {alpha}")
    overlap = list(overlap)
    if len(overlap) < 2:
        raise SplitError(f"need at least 2 overlapping users, got {len(overlap)}")
    perm = np.random.default_rng(seed).permutation(len(overlap))
    n_test = math.floor(alpha * len(overlap))
    shuffled = [overlap[i] for i in perm]
    return CrossDomainSplit(
        overlap_users=tuple(overlap),
        train_users=tuple(sorted(shuffled[n_test:])),
        test_users=tuple(sorted(shuffled[:n_test])),
        alpha=alpha,
        seed=seed,
    )


def write_split_manifest(split: CrossDomainSplit, path) -> None:
    Path(path).write_text("".join(u + "\n" for u in split.test_users), encoding="utf-8")


def build_history(source: DomainDataset, user, max_len: int) -> History:
    """The user's source ratings in time order, truncated to the latest ``max_len``.

    ``user`` is an external id or a dense source index.
    """
    if isinstance(user, str):
        try:
            user = source.user_index[user]
        except KeyError:
            raise KeyError(f"unknown source user {user!r}") from None
    elif not 0 <= user < source.n_users:
        raise KeyError(f"unknown source user index {user}")
    sl = source.user_slice(int(user))
    items, ratings = source.items[sl], source.ratings[sl]
    if len(items) > max_len:
        items, ratings = items[-max_len:], ratings[-max_len:]
    return History(items.copy(), ratings.copy())
