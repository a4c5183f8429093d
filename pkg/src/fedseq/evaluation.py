"""Evaluation protocol: restricted top-n prediction with iterative revealing
inside sessions, hierarchically averaged HR/MRR/NDCG, and the static and
dynamic experiment harnesses.

Averaging is hierarchical: per-event values are averaged within a session,
session means within a user, and user means across users, so heavy users do
not dominate the headline numbers.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import (
    BASELINE_NAMES,
    FactorizationPredictor,
    Predictor,
    make_baseline,
)
from .federation import (
    RoundConfig,
    TrainingRun,
    client_local_step,
    fit,
    init_client,
    init_server,
    run_training,
)
from .ingest import (
    ConfigurationError,
    Cycle,
    EventLog,
    Session,
    sessionize,
    split_static,
)
from .privacy import Passthrough
from .seqmf import Hyperparams, toprec

METRIC_NS = (1, 3, 5)
METRIC_NAMES = ("hr", "mrr", "ndcg")
TOP_N = max(METRIC_NS)


class MetricError(ValueError):
    """Undefined metric (no prediction events) or violated metric invariant."""


@dataclass(frozen=True)
class PredictionEvent:
    """One next-app prediction: the revealed step of a session and the ranked guess."""

    user_id: int
    session_key: tuple
    step: int
    target: int
    ranked: tuple[int, ...]


@dataclass(frozen=True)
class MetricRecord:
    """One evaluation result row."""

    environment: str
    cycle: int | str
    model: str
    metric: str
    n: int
    value: float


def candidate_sets(log: EventLog) -> dict[int, np.ndarray]:
    """Installed-apps proxy: the distinct apps each user ever launched."""
    apps: dict[int, set[int]] = defaultdict(set)
    for ev in log.events:
        apps[ev.user_id].add(ev.app_id)
    return {u: np.array(sorted(s)) for u, s in apps.items()}


def candidates_from_cycles(cycles: Sequence[Cycle]) -> dict[int, np.ndarray]:
    apps: dict[int, set[int]] = defaultdict(set)
    for cycle in cycles:
        for user, events in cycle.events.items():
            apps[user].update(ev.app_id for ev in events)
    return {u: np.array(sorted(s)) for u, s in apps.items()}


def iterate_sessions(
    predictor: Predictor,
    sessions: Sequence[Session],
    candidates: dict[int, np.ndarray],
    n: int = TOP_N,
) -> list[PredictionEvent]:
    """Iterative revealing: predict each session position from its prefix.

    A session of length L yields L-1 prediction events; at step k the
    predictor sees the first k apps and must rank the user's candidate set.
    Length-1 sessions yield nothing.
    """
    events: list[PredictionEvent] = []
    for idx, session in enumerate(sessions):
        if len(session) < 2:
            continue
        cands = candidates[session.user_id]
        cand_set = set(cands.tolist())
        key = (session.user_id, idx)
        for step in range(1, len(session)):
            prefix = session.apps[:step]
            target = session.apps[step]
            if target not in cand_set:
                raise MetricError(
                    f"target app {target} missing from user {session.user_id}'s candidates"
                )
            scores = predictor.score(session.user_id, prefix, cands)
            ranked = toprec(cands, scores, n)
            events.append(
                PredictionEvent(
                    user_id=session.user_id,
                    session_key=key,
                    step=step,
                    target=target,
                    ranked=tuple(int(app) for app in ranked),
                )
            )
    return events


def _event_value(event: PredictionEvent, metric: str, n: int) -> float:
    ranked = event.ranked[:n]
    if event.target not in ranked:
        return 0.0
    rank = ranked.index(event.target) + 1
    if metric == "hr":
        return 1.0
    if metric == "mrr":
        return 1.0 / rank
    if metric == "ndcg":
        return 1.0 / math.log2(rank + 1)
    raise ValueError(f"unknown metric {metric!r}")


def metric_value(
    events: Sequence[PredictionEvent],
    metric: str,
    n: int,
    grouping: str = "hierarchical",
) -> float:
    """Average a per-event metric, either pooled or hierarchically.

    Hierarchical: mean over events within each session, then over sessions
    within each user, then over users.
    """
    if not events:
        raise MetricError("metric undefined: no prediction events")
    values = [(_event_value(ev, metric, n), ev) for ev in events]
    if grouping == "pooled":
        return float(np.mean([v for v, _ in values]))
    if grouping != "hierarchical":
        raise ValueError(f"unknown grouping {grouping!r}")
    per_session: dict[tuple, list[float]] = defaultdict(list)
    for value, ev in values:
        per_session[ev.session_key].append(value)
    per_user: dict[int, list[float]] = defaultdict(list)
    for (user_id, _), session_values in per_session.items():
        per_user[user_id].append(float(np.mean(session_values)))
    return float(np.mean([np.mean(vs) for vs in per_user.values()]))


def metric_hr(events, n, grouping="hierarchical"):
    return metric_value(events, "hr", n, grouping)


def metric_mrr(events, n, grouping="hierarchical"):
    return metric_value(events, "mrr", n, grouping)


def metric_ndcg(events, n, grouping="hierarchical"):
    return metric_value(events, "ndcg", n, grouping)


def check_metric_identities(values: dict[tuple[str, int], float]) -> None:
    """Rank-1 credit is identical across metrics and all metrics grow with n."""
    if not (values[("hr", 1)] == values[("mrr", 1)] == values[("ndcg", 1)]):
        raise MetricError(f"rank-1 metrics disagree: {values}")
    for metric in METRIC_NAMES:
        for lo, hi in zip(METRIC_NS, METRIC_NS[1:]):
            if values[(metric, hi)] < values[(metric, lo)] - 1e-12:
                raise MetricError(
                    f"{metric}@{hi} < {metric}@{lo}: "
                    f"{values[(metric, hi)]} vs {values[(metric, lo)]}"
                )


def evaluate_events(
    events: Sequence[PredictionEvent],
    environment: str,
    cycle: int | str,
    model: str,
) -> list[MetricRecord]:
    """All metric records for one batch of prediction events, identity-checked."""
    values = {
        (metric, n): metric_value(events, metric, n)
        for metric in METRIC_NAMES
        for n in METRIC_NS
    }
    check_metric_identities(values)
    return [
        MetricRecord(environment, cycle, model, metric, n, values[(metric, n)])
        for metric in METRIC_NAMES
        for n in METRIC_NS
    ]


# --- factorization training glue ------------------------------------------------


def train_factorization(
    train_log: EventLog,
    n_apps: int,
    hp: Hyperparams,
    seed: int,
    rounds: int,
    optimizer: str = "adam",
    sequence_aware: bool = True,
    log_sink: list | None = None,
) -> FactorizationPredictor:
    """Fit item and user embeddings on a training stream via the federated loop.

    ``sequence_aware=False`` zeroes all transition statistics in training and
    drops the recency term at inference, which is exactly the plain matrix
    factorization baseline.
    """
    hp = replace(hp, use_transitions=sequence_aware)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFAC7]))
    clients = {}
    for user, stream in sorted(train_log.per_user().items()):
        client = init_client(user, hp, rng)
        client_local_step(client, np.zeros((n_apps, hp.dim)), stream, hp, update_p=False)
        clients[user] = client
    server = init_server(n_apps, hp, rng)
    cfg = RoundConfig(mechanism=Passthrough(), optimizer=optimizer, regime="full")
    rows = fit(clients, server, hp, cfg, rng, rounds=rounds)
    if log_sink is not None:
        log_sink.extend(rows)
    return FactorizationPredictor(
        Q=server.Q,
        user_embeddings={u: c.p for u, c in clients.items()},
        hp=hp,
        use_recency=sequence_aware,
        name="seqmf" if sequence_aware else "mf",
    )


def _grid_combinations(grid: dict[str, list]) -> list[dict]:
    combos: list[dict] = [{}]
    for key, options in grid.items():
        combos = [dict(combo, **{key: value}) for combo in combos for value in options]
    return combos


# --- static environment -----------------------------------------------------------


@dataclass
class StaticConfig:
    split_days: tuple[int, int, int] = (6, 1, 1)
    train_rounds: int = 150
    optimizer: str = "adam"
    grid: dict[str, list] | None = None


def run_static(
    log: EventLog,
    models: Sequence[str],
    hp: Hyperparams,
    cfg: StaticConfig,
    seed: int = 0,
    round_log: list | None = None,
) -> list[MetricRecord]:
    """Train on the train split, tune on validation HR@5, report on test.

    The log should already be deduplicated. Candidate sets come from the full
    log (the installed-apps proxy), so targets are always scoreable.
    """
    train, val, test = split_static(log, *cfg.split_days)
    if not test.events:
        raise ConfigurationError("test split is empty but evaluation was requested")
    candidates = candidate_sets(log)
    val_sessions = sessionize(val)
    test_sessions = sessionize(test)

    records: list[MetricRecord] = []
    for model in models:
        predictor = _build_static_predictor(
            model, train, log.n_apps, hp, cfg, seed, val_sessions, candidates, round_log
        )
        events = iterate_sessions(predictor, test_sessions, candidates)
        records.extend(evaluate_events(events, "static", "test", model))
    return records


def _build_static_predictor(
    model, train, n_apps, hp, cfg, seed, val_sessions, candidates, round_log=None
) -> Predictor:
    if model in BASELINE_NAMES:
        predictor = make_baseline(model, seed=seed)
        predictor.fit(train.events)
        return predictor
    if model not in ("mf", "seqmf"):
        raise ConfigurationError(f"unknown model {model!r}")
    sequence_aware = model == "seqmf"
    best_hp = hp
    if cfg.grid and val_sessions:
        best_score = -1.0
        for overrides in _grid_combinations(cfg.grid):
            trial_hp = replace(hp, **overrides)
            predictor = train_factorization(
                train, n_apps, trial_hp, seed, cfg.train_rounds, cfg.optimizer,
                sequence_aware,
            )
            events = iterate_sessions(predictor, val_sessions, candidates)
            score = metric_hr(events, 5) if events else 0.0
            if score > best_score:
                best_score, best_hp = score, trial_hp
    return train_factorization(
        train, n_apps, best_hp, seed, cfg.train_rounds, cfg.optimizer, sequence_aware,
        log_sink=round_log,
    )


# --- dynamic environment -----------------------------------------------------------


@dataclass
class DynamicConfig:
    q_update_period: int = 2
    pretrain_rounds: int = 60
    steps_per_update: int = 1
    optimizer: str = "adam"
    participation: float = 1.0
    mechanism: object = field(default_factory=Passthrough)


@dataclass(frozen=True)
class PlotRow:
    """One row of the plot-data companion file."""

    cycle: int
    model: str
    regime: str
    hr5: float
    delta_hr5_cum: float | None


@dataclass
class DynamicResult:
    records: list[MetricRecord]
    plot_rows: list[PlotRow]
    hr5_series: dict[tuple[str, str], dict[int, float]]
    round_logs: dict[str, list] = field(default_factory=dict)
    pretrained: dict[str, np.ndarray] = field(default_factory=dict)

    def final_cumulative_delta(self, model: str, regime: str) -> float:
        rows = [r for r in self.plot_rows
                if r.model == model and r.regime == regime and r.delta_hr5_cum is not None]
        if not rows:
            raise MetricError(f"no delta series for {model}/{regime}")
        return rows[-1].delta_hr5_cum


def _cycle_sessions(cycle: Cycle) -> list[Session]:
    return sessionize(EventLog(cycle.all_events(), {}, {}))


def run_dynamic(
    cycles: Sequence[Cycle],
    models: Sequence[str],
    regimes: Sequence[str],
    n_apps: int,
    hp: Hyperparams,
    cfg: DynamicConfig,
    seed: int = 0,
) -> DynamicResult:
    """Stream evaluation: bootstrap on cycle 0, then evaluate-before-update.

    Each later cycle is scored with the model state from before its events are
    ingested. Factorization models run once per requested regime; counting
    baselines retrain from all previous cycles. ``delta HR@5`` series are
    reported against the full-regime sequence-aware run when it is present.
    """
    if len(cycles) < 2:
        raise ConfigurationError("dynamic evaluation needs at least 2 cycles")
    candidates = candidates_from_cycles(cycles)
    sessions = {c.index: _cycle_sessions(c) for c in cycles[1:]}

    hr5: dict[tuple[str, str], dict[int, float]] = {}
    records: list[MetricRecord] = []
    round_logs: dict[str, list] = {}
    pretrained: dict[str, np.ndarray] = {}

    def evaluate_cycle(predictor, cycle_index, model, regime):
        events = iterate_sessions(predictor, sessions[cycle_index], candidates)
        if not events:
            return
        label = model if regime == "-" else f"{model}-{regime}"
        recs = evaluate_events(events, "dynamic", cycle_index, label)
        records.extend(recs)
        value = next(r.value for r in recs if r.metric == "hr" and r.n == 5)
        hr5.setdefault((model, regime), {})[cycle_index] = value

    for model in models:
        if model in BASELINE_NAMES:
            predictor = make_baseline(model, seed=seed)
            predictor.fit(cycles[0].all_events())
            for cycle in cycles[1:]:
                evaluate_cycle(predictor, cycle.index, model, "-")
                predictor.update(cycle.all_events())
        elif model in ("mf", "seqmf"):
            sequence_aware = model == "seqmf"
            model_hp = replace(hp, use_transitions=sequence_aware)
            model_regimes = regimes if sequence_aware else ("full",)
            for regime in model_regimes:
                run = _train_dynamic(cycles, n_apps, model_hp, cfg, regime, seed)
                round_logs[f"{model}-{regime}"] = run.round_log
                pretrained[f"{model}-{regime}"] = run.snapshots[0].Q
                for snapshot in run.snapshots:
                    predictor = FactorizationPredictor(
                        snapshot.Q,
                        snapshot.user_embeddings,
                        model_hp,
                        use_recency=sequence_aware,
                        name=model,
                    )
                    evaluate_cycle(predictor, snapshot.cycle, model, regime)
        else:
            raise ConfigurationError(f"unknown model {model!r}")

    plot_rows = _delta_series(hr5, reference=("seqmf", "full"))
    return DynamicResult(records=records, plot_rows=plot_rows, hr5_series=hr5,
                         round_logs=round_logs, pretrained=pretrained)


def _train_dynamic(cycles, n_apps, hp, cfg, regime, seed) -> TrainingRun:
    round_cfg = RoundConfig(
        mechanism=cfg.mechanism,
        optimizer=cfg.optimizer,
        regime=regime,
        participation=cfg.participation,
        q_update_period=cfg.q_update_period,
        steps_per_update=cfg.steps_per_update,
    )
    return run_training(
        cycles,
        n_apps,
        hp,
        round_cfg,
        seed=seed,
        pretrain_rounds=cfg.pretrain_rounds,
        pretrain_mechanism=Passthrough(),
    )


def _delta_series(
    hr5: dict[tuple[str, str], dict[int, float]],
    reference: tuple[str, str],
) -> list[PlotRow]:
    ref_series = hr5.get(reference, {})
    rows: list[PlotRow] = []
    for (model, regime), series in sorted(hr5.items()):
        cumulative = 0.0
        for cycle in sorted(series):
            delta = None
            if cycle in ref_series:
                cumulative += series[cycle] - ref_series[cycle]
                delta = cumulative
            rows.append(PlotRow(cycle, model, regime, series[cycle], delta))
    return rows


def compare_privacy(
    cycles: Sequence[Cycle],
    mechanisms: Sequence[object],
    n_apps: int,
    hp: Hyperparams,
    cfg: DynamicConfig,
    seed: int = 0,
) -> DynamicResult:
    """Run the full-regime dynamic pipeline once per mechanism.

    The delta series are taken against the passthrough (non-private) run,
    which is added automatically when absent. Pretraining always uses the
    passthrough path, so runs differ only in the streamed updates.
    """
    mechs = list(mechanisms)
    if not any(getattr(m, "name", None) == "none" for m in mechs):
        mechs.insert(0, Passthrough())
    candidates = candidates_from_cycles(cycles)
    sessions = {c.index: _cycle_sessions(c) for c in cycles[1:]}

    hr5: dict[tuple[str, str], dict[int, float]] = {}
    records: list[MetricRecord] = []
    round_logs: dict[str, list] = {}
    pretrained: dict[str, np.ndarray] = {}
    for mechanism in mechs:
        label = mechanism.name
        run = _train_dynamic(
            cycles, n_apps, hp, replace(cfg, mechanism=mechanism), "full", seed
        )
        round_logs[f"seqmf-{label}"] = run.round_log
        pretrained[f"seqmf-{label}"] = run.snapshots[0].Q
        for snapshot in run.snapshots:
            predictor = FactorizationPredictor(
                snapshot.Q, snapshot.user_embeddings, hp,
                use_recency=hp.use_transitions, name="seqmf",
            )
            events = iterate_sessions(predictor, sessions[snapshot.cycle], candidates)
            if not events:
                continue
            recs = evaluate_events(events, "dynamic", snapshot.cycle, f"seqmf[{label}]")
            records.extend(recs)
            value = next(r.value for r in recs if r.metric == "hr" and r.n == 5)
            hr5.setdefault(("seqmf", label), {})[snapshot.cycle] = value

    plot_rows = _delta_series(hr5, reference=("seqmf", "none"))
    return DynamicResult(records=records, plot_rows=plot_rows, hr5_series=hr5,
                         round_logs=round_logs, pretrained=pretrained)
