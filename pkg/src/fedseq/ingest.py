"""App-launch event streams: parsing, cleaning, sessionizing, splitting, synthesis.

Everything here operates on immutable :class:`EventLog` values and returns new
logs, so the functions are safe to call from multiple threads.
"""

from __future__ import annotations

import csv
import heapq
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SECONDS_PER_DAY = 86_400

#: Same-app launches closer than this many seconds are collapsed into one event.
DEFAULT_DEDUP_WINDOW = 3

#: A gap larger than this many seconds starts a new session (15 minutes).
DEFAULT_SESSION_GAP = 900

EVENT_COLUMNS = ("user_id", "app_id", "timestamp")


class ParseError(ValueError):
    """Malformed or empty event file."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ConfigurationError(ValueError):
    """Invalid split or cycle parameters."""


@dataclass(frozen=True, slots=True)
class Event:
    """One app launch: dense user index, dense app index, Unix seconds."""

    user_id: int
    app_id: int
    timestamp: int


@dataclass
class EventLog:
    """Launch events plus the raw-identifier vocabularies that index them.

    ``events`` is globally sorted by timestamp (stable, so per-user streams
    keep their input order on ties). Vocabularies map raw string identifiers
    to dense indices assigned in first-appearance order.
    """

    events: list[Event]
    app_vocabulary: dict[str, int]
    user_vocabulary: dict[str, int]

    @property
    def n_apps(self) -> int:
        return len(self.app_vocabulary)

    @property
    def n_users(self) -> int:
        return len(self.user_vocabulary)

    def __len__(self) -> int:
        return len(self.events)

    def per_user(self) -> dict[int, list[Event]]:
        """Events grouped by user, each stream in chronological order."""
        streams: dict[int, list[Event]] = {}
        for ev in self.events:
            streams.setdefault(ev.user_id, []).append(ev)
        return streams

    def replace_events(self, events: list[Event]) -> "EventLog":
        return EventLog(events, self.app_vocabulary, self.user_vocabulary)


@dataclass(frozen=True, slots=True)
class Session:
    """A maximal run of one user's events with no internal gap above the threshold."""

    user_id: int
    apps: tuple[int, ...]
    start: int
    end: int

    def __len__(self) -> int:
        return len(self.apps)


@dataclass
class Cycle:
    """One rebalanced slice of the event stream for the dynamic environment.

    ``events`` maps user id to that user's ordered slice; concatenating a
    user's slices across cycles reproduces their original stream.
    """

    index: int
    events: dict[int, list[Event]]

    @property
    def active_users(self) -> set[int]:
        return set(self.events)

    def all_events(self) -> list[Event]:
        merged = [ev for evs in self.events.values() for ev in evs]
        merged.sort(key=lambda e: e.timestamp)
        return merged


def _parse_timestamp_mode(raw: str) -> str:
    try:
        int(raw)
        return "unix"
    except ValueError:
        pass
    try:
        _iso_to_unix(raw)
        return "iso"
    except ValueError:
        raise ValueError(f"unrecognised timestamp {raw!r}")


def _iso_to_unix(raw: str) -> int:
    text = raw.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_events(path: str | Path, delimiter: str = ",") -> EventLog:
    """Read a delimiter-separated event file into an :class:`EventLog`.

    Expects a header row ``user_id,app_id,timestamp``. Timestamps may be
    integer Unix seconds or ISO-8601 strings; the format is auto-detected from
    the first data row and applied to the whole file. Raw identifiers are
    mapped to dense indices in first-appearance order, then events are
    stable-sorted by timestamp.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty event file") from None
        header = [col.strip() for col in header]
        if header != list(EVENT_COLUMNS):
            raise ParseError(
                f"expected header {','.join(EVENT_COLUMNS)}, got {','.join(header)}",
                line_number=1,
            )

        users: dict[str, int] = {}
        apps: dict[str, int] = {}
        events: list[Event] = []
        ts_mode: str | None = None
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line_number=line_no)
            raw_user, raw_app, raw_ts = (f.strip() for f in row)
            if ts_mode is None:
                try:
                    ts_mode = _parse_timestamp_mode(raw_ts)
                except ValueError as exc:
                    raise ParseError(str(exc), line_number=line_no) from None
            try:
                ts = int(raw_ts) if ts_mode == "unix" else _iso_to_unix(raw_ts)
            except ValueError:
                raise ParseError(
                    f"unparseable {ts_mode} timestamp {raw_ts!r}", line_number=line_no
                ) from None
            uid = users.setdefault(raw_user, len(users))
            aid = apps.setdefault(raw_app, len(apps))
            events.append(Event(uid, aid, ts))

    if not events:
        raise ParseError(f"{path}: no events")
    events.sort(key=lambda e: e.timestamp)
    return EventLog(events, apps, users)


def write_events(log: EventLog, path: str | Path, delimiter: str = ",") -> None:
    """Serialize a log back to the ``user_id,app_id,timestamp`` text format."""
    user_names = {idx: name for name, idx in log.user_vocabulary.items()}
    app_names = {idx: name for name, idx in log.app_vocabulary.items()}
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(EVENT_COLUMNS)
        for ev in log.events:
            writer.writerow([user_names[ev.user_id], app_names[ev.app_id], ev.timestamp])


def deduplicate(log: EventLog, window: int = DEFAULT_DEDUP_WINDOW) -> EventLog:
    """Collapse bursts of repeated launches of the same app.

    A run of same-app events in which every consecutive gap is below
    ``window`` seconds is replaced by its first event; events of different
    apps are never merged. Idempotent.
    """
    last_app: dict[int, int] = {}
    last_ts: dict[int, int] = {}
    kept: list[Event] = []
    for ev in log.events:
        prev_app = last_app.get(ev.user_id)
        if prev_app == ev.app_id and ev.timestamp - last_ts[ev.user_id] < window:
            last_ts[ev.user_id] = ev.timestamp  # extend the run, drop the event
            continue
        kept.append(ev)
        last_app[ev.user_id] = ev.app_id
        last_ts[ev.user_id] = ev.timestamp
    return log.replace_events(kept)


def sessionize(log: EventLog, threshold: int = DEFAULT_SESSION_GAP) -> list[Session]:
    """Split each user's stream into sessions at gaps exceeding ``threshold`` seconds.

    Returns sessions ordered by (user, start time). Meant to run on a
    deduplicated log.
    """
    sessions: list[Session] = []
    for user_id in sorted(log.per_user()):
        stream = log.per_user()[user_id]
        current: list[Event] = []
        for ev in stream:
            if current and ev.timestamp - current[-1].timestamp > threshold:
                sessions.append(_close_session(current))
                current = []
            current.append(ev)
        if current:
            sessions.append(_close_session(current))
    return sessions


def _close_session(events: list[Event]) -> Session:
    return Session(
        user_id=events[0].user_id,
        apps=tuple(ev.app_id for ev in events),
        start=events[0].timestamp,
        end=events[-1].timestamp,
    )


def mean_sessions_per_user(sessions: Sequence[Session]) -> float:
    """Average number of sessions per user appearing in ``sessions``."""
    if not sessions:
        return 0.0
    users = {s.user_id for s in sessions}
    return len(sessions) / len(users)


def split_static(
    log: EventLog, train_days: int, val_days: int, test_days: int
) -> tuple[EventLog, EventLog, EventLog]:
    """Chronological day-based split relative to the log's first timestamp.

    Day boundaries are multiples of 86 400 s after the first event (UTC
    convention); every event lands in exactly one split. Raises if the day
    budget does not cover the log span or if the train split comes out empty.
    """
    for name, days in (("train_days", train_days), ("val_days", val_days), ("test_days", test_days)):
        if days < 0:
            raise ConfigurationError(f"{name} must be >= 0, got {days}")
    if train_days <= 0:
        raise ConfigurationError("train split must cover at least one day")
    if not log.events:
        raise ConfigurationError("cannot split an empty log")
    t0 = log.events[0].timestamp
    total = train_days + val_days + test_days
    last_day = (log.events[-1].timestamp - t0) // SECONDS_PER_DAY
    if last_day >= total:
        raise ConfigurationError(
            f"log spans {last_day + 1} days but the split only covers {total}"
        )
    buckets: tuple[list[Event], list[Event], list[Event]] = ([], [], [])
    for ev in log.events:
        day = (ev.timestamp - t0) // SECONDS_PER_DAY
        if day < train_days:
            buckets[0].append(ev)
        elif day < train_days + val_days:
            buckets[1].append(ev)
        else:
            buckets[2].append(ev)
    if not buckets[0]:
        raise ConfigurationError("train split is empty")
    return tuple(log.replace_events(b) for b in buckets)  # type: ignore[return-value]


def _day_blocks(log: EventLog) -> dict[int, list[tuple[int, list[Event]]]]:
    """Per-user chronological (day index, events) blocks."""
    if not log.events:
        return {}
    t0 = log.events[0].timestamp
    blocks: dict[int, list[tuple[int, list[Event]]]] = {}
    for user_id, stream in log.per_user().items():
        user_blocks: list[tuple[int, list[Event]]] = []
        for ev in stream:
            day = (ev.timestamp - t0) // SECONDS_PER_DAY
            if user_blocks and user_blocks[-1][0] == day:
                user_blocks[-1][1].append(ev)
            else:
                user_blocks.append((day, [ev]))
        blocks[user_id] = user_blocks
    return blocks


def rebalance_cycles(log: EventLog, target_active_users_per_cycle: int) -> list[Cycle]:
    """Deal per-user day blocks into cycles with roughly equal active-user counts.

    Greedy: repeatedly open a cycle and pull the chronologically earliest
    pending block from users not yet in it, until the cycle holds the target
    number of distinct users (or no eligible user remains). Each cycle takes
    at most one day block per user, and per-user event order is preserved
    exactly. Balance is best effort; inspect :func:`cycle_user_counts`.
    """
    target = target_active_users_per_cycle
    if target < 1:
        raise ConfigurationError(f"target active users must be >= 1, got {target}")
    if target > log.n_users:
        raise ConfigurationError(
            f"target active users {target} exceeds user count {log.n_users}"
        )
    queues = {u: deque(blocks) for u, blocks in _day_blocks(log).items()}
    heap = [(queue[0][0], user) for user, queue in queues.items()]
    heapq.heapify(heap)

    cycles: list[Cycle] = []
    while heap:
        members: dict[int, list[Event]] = {}
        deferred: list[tuple[int, int]] = []
        while heap and len(members) < target:
            day, user = heapq.heappop(heap)
            if user in members:
                deferred.append((day, user))  # next block of this user waits a cycle
                continue
            _, events = queues[user].popleft()
            members[user] = events
            if queues[user]:
                heapq.heappush(heap, (queues[user][0][0], user))
        for item in deferred:
            heapq.heappush(heap, item)
        cycles.append(Cycle(index=len(cycles), events=members))
    return cycles


def cycle_user_counts(cycles: Sequence[Cycle]) -> list[int]:
    """Achieved distinct-active-user count per cycle."""
    return [len(c.active_users) for c in cycles]


def daily_user_counts(log: EventLog) -> list[int]:
    """Distinct active users per calendar day (relative to the first event)."""
    if not log.events:
        return []
    t0 = log.events[0].timestamp
    by_day: dict[int, set[int]] = {}
    for ev in log.events:
        by_day.setdefault((ev.timestamp - t0) // SECONDS_PER_DAY, set()).add(ev.user_id)
    return [len(by_day[d]) for d in sorted(by_day)]


def coefficient_of_variation(counts: Sequence[int]) -> float:
    arr = np.asarray(counts, dtype=float)
    if arr.size == 0 or arr.mean() == 0:
        return 0.0
    return float(arr.std() / arr.mean())


# --- synthetic data -------------------------------------------------------

#: Sharpness of similarity-driven transitions; higher means more predictable chains.
TRANSITION_SHARPNESS = 4.0

#: Spread of per-user app-popularity logits.
POPULARITY_SCALE = 1.0

#: Logit penalty damping immediate app self-transitions (re-launches happen,
#: just less often than the raw self-similarity would suggest).
SELF_TRANSITION_PENALTY = 1.0

#: Probability that a step ends the current session (geometric run lengths).
SESSION_BREAK_PROB = 1.0 / 15.0


@dataclass(frozen=True)
class SyntheticTruth:
    """Generator parameters behind a synthetic log, kept for convergence checks."""

    app_vectors: np.ndarray
    installed: tuple[np.ndarray, ...]
    transition: tuple[np.ndarray, ...]
    start_probs: tuple[np.ndarray, ...]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=-1, keepdims=True)


def synthetic_truth(
    n_users: int,
    n_apps: int,
    latent_dim: int,
    seed: int,
    installed_range: tuple[int, int] = (5, 20),
) -> SyntheticTruth:
    """Draw the per-user Markov generators used by :func:`generate_synthetic`.

    Each user installs a random subset of apps and transitions between them
    with probabilities driven by latent app-vector similarity plus a personal
    popularity prior. Deterministic in ``seed``.
    """
    if n_users < 2 or n_apps < 2:
        raise ConfigurationError("need at least 2 users and 2 apps")
    truth_ss, _ = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(truth_ss)
    vectors = rng.normal(size=(n_apps, latent_dim))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)

    installed: list[np.ndarray] = []
    transition: list[np.ndarray] = []
    start_probs: list[np.ndarray] = []
    lo = max(2, min(installed_range[0], n_apps))
    hi = max(lo, min(installed_range[1], n_apps, 20))
    for _ in range(n_users):
        size = int(rng.integers(lo, hi + 1))
        apps = np.sort(rng.choice(n_apps, size=size, replace=False))
        popularity = rng.normal(scale=POPULARITY_SCALE, size=size)
        logits = TRANSITION_SHARPNESS * (vectors[apps] @ vectors[apps].T)
        logits += popularity[None, :]
        logits[np.diag_indices(size)] -= SELF_TRANSITION_PENALTY
        installed.append(apps)
        transition.append(_softmax_rows(logits))
        start_probs.append(_softmax_rows(popularity))
    return SyntheticTruth(vectors, tuple(installed), tuple(transition), tuple(start_probs))


def generate_synthetic(
    n_users: int,
    n_apps: int,
    latent_dim: int,
    steps_per_user: int,
    seed: int,
    *,
    installed_range: tuple[int, int] = (5, 20),
    start_span_days: int = 30,
    min_gap: int = 4,
    max_gap: int = 120,
    min_break: int = 901,
    max_break: int = 30_000,
) -> EventLog:
    """Sample an event log from per-user Markov chains over installed apps.

    Produces exactly ``n_users * steps_per_user`` events. Fifteen-minute-plus
    session breaks are inserted after geometrically distributed run lengths;
    the chain itself continues across breaks, so raw consecutive pairs follow
    the generator transition matrix. Byte-identical output for a fixed seed.
    """
    truth = synthetic_truth(n_users, n_apps, latent_dim, seed, installed_range)
    _, sample_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(sample_ss)

    events: list[Event] = []
    for user in range(n_users):
        apps = truth.installed[user]
        cum_rows = np.cumsum(truth.transition[user], axis=1)
        cum_start = np.cumsum(truth.start_probs[user])
        t = int(rng.integers(0, start_span_days)) * SECONDS_PER_DAY + int(
            rng.integers(0, SECONDS_PER_DAY)
        )
        state = int(np.searchsorted(cum_start, rng.random()))
        steps_to_break = int(rng.geometric(SESSION_BREAK_PROB))
        for step in range(steps_per_user):
            events.append(Event(user, int(apps[state]), t))
            if step == steps_per_user - 1:
                break
            state = int(np.searchsorted(cum_rows[state], rng.random()))
            steps_to_break -= 1
            if steps_to_break == 0:
                t += int(rng.integers(min_break, max_break + 1))
                steps_to_break = int(rng.geometric(SESSION_BREAK_PROB))
            else:
                t += int(rng.integers(min_gap, max_gap + 1))

    events.sort(key=lambda e: e.timestamp)
    app_vocab = {f"app{i}": i for i in range(n_apps)}
    user_vocab = {f"user{u}": u for u in range(n_users)}
    return EventLog(events, app_vocab, user_vocab)
