"""Support/query episodes over overlapping and cold-start users."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np

from .data import CrossDomainSplit, DataError, DomainDataset, build_history


class TaskError(DataError):
    pass


@dataclass(frozen=True)
class RatingExample:
    user: int  # dense source-domain index
    history: np.ndarray  # source item indices, oldest first
    candidate_item: int  # dense target-domain index
    rating: Optional[float] = None

    def hidden(self) -> "RatingExample":
        return replace(self, rating=None)


@dataclass(frozen=True)
class Task:
    support: List[RatingExample]
    query: List[RatingExample]
    phase: str  # "training" or "testing"


class TaskBuilder:
    """Samples training and testing tasks for one split.

    Pools are precomputed once: the train users' visible target ratings as
    (source user, target item, rating) triples, and each user's truncated
    source history.
    """

    def __init__(
        self,
        source: DomainDataset,
        target: DomainDataset,
        split: CrossDomainSplit,
        history_len: int = 20,
        support_size: int = 40,
        query_size: int = 40,
    ):
        self.source = source
        self.target = target
        self.split = split
        self.history_len = history_len
        self.support_size = support_size
        self.query_size = query_size
        self._histories: Dict[int, np.ndarray] = {}
        self.train_pool = self._pool(split.train_users)

    def _pool(self, users):
        us, vs, ys = [], [], []
        for ext in users:
            s = self.source.user_index[ext]
            sl = self.target.user_slice(self.target.user_index[ext])
            # one triple per (user, item): keep the latest rating
            items = self.target.items[sl][::-1]
            _, first = np.unique(items, return_index=True)
            keep = np.sort(len(items) - 1 - first)
            us.append(np.full(len(keep), s, dtype=np.int64))
            vs.append(self.target.items[sl][keep])
            ys.append(self.target.ratings[sl][keep])
        if not us:
            return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
        return np.concatenate(us), np.concatenate(vs), np.concatenate(ys)

    def history(self, src_user: int) -> np.ndarray:
        h = self._histories.get(src_user)
        if h is None:
            h = build_history(self.source, src_user, self.history_len).items
            self._histories[src_user] = h
        return h

    def _example(self, u, v, y) -> RatingExample:
        return RatingExample(int(u), self.history(int(u)), int(v), float(y))

    def _sample_pool(self, rng: np.random.Generator, n: int) -> List[RatingExample]:
        us, vs, ys = self.train_pool
        if len(us) < n:
            raise TaskError(f"train pool has {len(us)} ratings, task needs {n}")
        picks = rng.choice(len(us), size=n, replace=False)
        return [self._example(us[i], vs[i], ys[i]) for i in picks]

    def build_support(self, rng: np.random.Generator) -> List[RatingExample]:
        return self._sample_pool(rng, self.support_size)

    def build_training_task(self, rng: np.random.Generator) -> Task:
        examples = self._sample_pool(rng, self.support_size + self.query_size)
        return Task(examples[: self.support_size], examples[self.support_size :], "training")

    def build_testing_task(self, cold_user: str, rng: np.random.Generator) -> Optional[Task]:
        """Support from train users; query = every target rating of ``cold_user``.

        Returns None when the user has no target ratings to score.
        """
        if cold_user not in self.split.test_users:
            raise TaskError(f"{cold_user!r} is not a test user of this split")
        t = self.target.user_index.get(cold_user)
        if t is None:
            return None
        sl = self.target.user_slice(t)
        if sl.stop == sl.start:
            return None
        s = self.source.user_index[cold_user]
        query = [self._example(s, v, y) for v, y in zip(self.target.items[sl], self.target.ratings[sl])]
        return Task(self.build_support(rng), query, "testing")

    def train_target_ratings(self) -> np.ndarray:
        return self.train_pool[2]
