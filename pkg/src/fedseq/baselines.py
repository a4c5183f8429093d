"""Comparison predictors sharing one interface: observe events, score candidates.

Predictors are pure functions of what they have observed (plus their seed).
``fit`` consumes the initial training stream, ``update`` appends more data
between evaluation cycles, and ``score(user, session_prefix, candidates)``
returns one score per candidate app for the next-launch prediction.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from typing import Sequence

import numpy as np

from .ingest import Event
from .seqmf import Hyperparams, relevance_infer


class Predictor:
    name = "base"

    def fit(self, events: Sequence[Event]) -> None:
        self.update(events)

    def update(self, events: Sequence[Event]) -> None:
        pass

    def score(
        self, user_id: int, session_prefix: Sequence[int], candidates: Sequence[int]
    ) -> np.ndarray:
        raise NotImplementedError


class RandomPredictor(Predictor):
    """Uniform random scores; deterministic for a fixed seed and call order."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def score(self, user_id, session_prefix, candidates):
        return self.rng.random(len(candidates))


class MRUPredictor(Predictor):
    """Recency scores from the current session only.

    The j-th most recent *distinct* in-session app scores 1/j; apps absent
    from the session score 0.
    """

    name = "mru"

    def score(self, user_id, session_prefix, candidates):
        rank: dict[int, int] = {}
        for app in reversed(session_prefix):
            if app not in rank:
                rank[app] = len(rank) + 1
        return np.array([1.0 / rank[app] if app in rank else 0.0 for app in candidates])


class MFUPredictor(Predictor):
    """Per-user lifetime launch counts over the observed stream."""

    name = "mfu"

    def __init__(self):
        self.counts: dict[int, Counter] = defaultdict(Counter)

    def update(self, events):
        for ev in events:
            self.counts[ev.user_id][ev.app_id] += 1

    def score(self, user_id, session_prefix, candidates):
        counts = self.counts.get(user_id)
        if not counts:
            return np.zeros(len(candidates))
        return np.array([float(counts.get(app, 0)) for app in candidates])


class SRPredictor(Predictor):
    """Immediate-successor co-occurrence counts, used unnormalized.

    ``pooled=True`` shares one count table across users (collaborative);
    ``pooled=False`` keeps per-user tables (the on-device variant). Scores
    condition on the last app of the session prefix only.
    """

    def __init__(self, pooled: bool = True):
        self.pooled = pooled
        self.name = "sr" if pooled else "sr_od"
        self.counts: dict[object, Counter] = defaultdict(Counter)
        self._last_app: dict[int, int] = {}

    def update(self, events):
        for ev in events:
            prev = self._last_app.get(ev.user_id)
            if prev is not None:
                key = prev if self.pooled else (ev.user_id, prev)
                self.counts[key][ev.app_id] += 1
            self._last_app[ev.user_id] = ev.app_id

    def score(self, user_id, session_prefix, candidates):
        if not session_prefix:
            return np.zeros(len(candidates))
        last = session_prefix[-1]
        key = last if self.pooled else (user_id, last)
        successors = self.counts.get(key)
        if not successors:
            return np.zeros(len(candidates))
        return np.array([float(successors.get(app, 0)) for app in candidates])


class FactorizationPredictor(Predictor):
    """Scores from trained embeddings.

    With ``use_recency`` the last ``recency_len`` in-session apps contribute
    the transition-similarity term; without it the score degenerates to the
    plain user-item dot product.
    """

    def __init__(
        self,
        Q: np.ndarray,
        user_embeddings: dict[int, np.ndarray],
        hp: Hyperparams,
        use_recency: bool = True,
        name: str = "seqmf",
    ):
        self.Q = Q
        self.user_embeddings = user_embeddings
        self.hp = hp
        self.use_recency = use_recency
        self.name = name

    def score(self, user_id, session_prefix, candidates):
        p = self.user_embeddings.get(user_id)
        if p is None:
            p = np.zeros(self.Q.shape[1])
        recent = list(session_prefix)[-self.hp.recency_len:] if self.use_recency else []
        return relevance_infer(self.Q, p, recent, candidates)


def make_baseline(name: str, seed: int = 0) -> Predictor:
    """Counting/stateless baselines by name (factorization models train elsewhere)."""
    name = name.lower()
    if name == "random":
        return RandomPredictor(seed)
    if name == "mru":
        return MRUPredictor()
    if name == "mfu":
        return MFUPredictor()
    if name == "sr":
        return SRPredictor(pooled=True)
    if name == "sr_od":
        return SRPredictor(pooled=False)
    raise ValueError(f"unknown baseline {name!r}")


BASELINE_NAMES = ("random", "mru", "mfu", "sr", "sr_od")
MODEL_NAMES = BASELINE_NAMES + ("mf", "seqmf")
