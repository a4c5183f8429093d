"""Single-process simulation of the hybrid federated optimization.

Clients own their history, statistics, and user embedding; the server owns
the item embeddings. Each round, participating clients refresh their user
embedding in closed form, compute the item-embedding gradient locally, and
transmit it through the configured privacy mechanism; the server aggregates
and takes an optimizer step. Only the mechanism's message type and (under
explicit passthrough) the raw gradient ever cross the client-server boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import Cycle, Event
from .privacy import Passthrough, PerturbedGradientMessage
from .seqmf import (
    Hyperparams,
    als_user_update,
    build_confidence,
    build_transition_matrix,
    interaction_vector,
    local_gradient,
    loss,
)

REGIMES = ("full", "rare", "global")
OPTIMIZERS = ("sgd", "momentum", "adam")

#: Per-coordinate init range for user and item embeddings.
INIT_SCALE = 0.01


class FederationError(RuntimeError):
    """Protocol-level failure (bad config, non-finite aggregate, empty round)."""


@dataclass
class RoundConfig:
    """Knobs of one simulated deployment."""

    mechanism: object = field(default_factory=Passthrough)
    optimizer: str = "sgd"
    regime: str = "full"
    participation: float = 1.0
    q_update_period: int = 1
    steps_per_update: int = 1

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise FederationError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.optimizer not in OPTIMIZERS:
            raise FederationError(
                f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}"
            )
        if not 0.0 < self.participation <= 1.0:
            raise FederationError(f"participation must lie in (0, 1], got {self.participation}")
        if self.q_update_period < 1:
            raise FederationError(f"q_update_period must be >= 1, got {self.q_update_period}")
        if self.steps_per_update < 1:
            raise FederationError(f"steps_per_update must be >= 1, got {self.steps_per_update}")


@dataclass
class ServerState:
    """Item embeddings plus optimizer buffers."""

    Q: np.ndarray
    reg: float
    lr: float
    optimizer: str = "sgd"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class ClientState:
    """Everything a simulated device keeps locally."""

    user_id: int
    p: np.ndarray
    history: list[int] = field(default_factory=list)
    S: sp.spmatrix | None = None
    c: np.ndarray | None = None
    a: np.ndarray | None = None
    q_version: int = -1

    @property
    def has_data(self) -> bool:
        return len(self.history) > 0


def init_server(n_apps: int, hp: Hyperparams, rng: np.random.Generator,
                Q: np.ndarray | None = None, optimizer: str = "sgd") -> ServerState:
    if Q is None:
        Q = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n_apps, hp.dim))
    else:
        Q = np.array(Q, dtype=float, copy=True)
        if Q.shape != (n_apps, hp.dim):
            raise FederationError(f"checkpoint shape {Q.shape} != {(n_apps, hp.dim)}")
    return ServerState(Q=Q, reg=hp.reg, lr=hp.lr, optimizer=optimizer)


def init_client(user_id: int, hp: Hyperparams, rng: np.random.Generator) -> ClientState:
    return ClientState(user_id=user_id, p=rng.uniform(-INIT_SCALE, INIT_SCALE, size=hp.dim))


def reset_user_embedding(client: ClientState, hp: Hyperparams, rng: np.random.Generator) -> None:
    client.p = rng.uniform(-INIT_SCALE, INIT_SCALE, size=hp.dim)


def _refresh_statistics(client: ClientState, n_apps: int, hp: Hyperparams) -> None:
    window = client.history if hp.history_window is None else client.history[-hp.history_window:]
    if hp.use_transitions:
        client.S = build_transition_matrix(window, n_apps)
    else:
        client.S = sp.csr_matrix((n_apps, n_apps))
    client.c = build_confidence(window, hp.alpha, hp.gamma, n_apps)
    client.a = interaction_vector(window, n_apps)


def client_local_step(
    client: ClientState,
    Q: np.ndarray,
    new_events: Sequence[Event],
    hp: Hyperparams,
    update_p: bool,
) -> ClientState:
    """Ingest new events, rebuild local statistics, optionally refit p.

    ``update_p`` reflects the regime schedule: full updates every cycle, rare
    only on item-embedding update cycles, global never.
    """
    n_apps = Q.shape[0]
    if new_events:
        client.history.extend(ev.app_id for ev in new_events)
        _refresh_statistics(client, n_apps, hp)
    elif client.has_data and client.S is None:
        _refresh_statistics(client, n_apps, hp)
    if update_p and client.has_data:
        client.p = als_user_update(Q, client.a, client.c, client.S, hp.reg)
    return client


def audit_transmission(message: object, mechanism: object) -> None:
    """Assert that only sanctioned payloads cross the client-server boundary.

    Harmony-family mechanisms may only emit :class:`PerturbedGradientMessage`
    (k signed triples plus the scalar f_max); dense arrays are allowed only
    for the Laplace mechanism (noisy) and the explicit passthrough.
    """
    allowed_dense = {"none", "laplace"}
    name = getattr(mechanism, "name", None)
    if isinstance(message, PerturbedGradientMessage):
        fields = set(message.__dataclass_fields__)
        if fields != {"user_id", "values", "rows", "cols", "f_max"}:
            raise FederationError(f"unexpected message fields {fields}")
        return
    if isinstance(message, np.ndarray):
        if name not in allowed_dense:
            raise FederationError(
                f"mechanism {name!r} may not transmit dense gradients"
            )
        return
    raise FederationError(f"unsanctioned transmission type {type(message)!r}")


def collect_gradients(
    clients: Sequence[ClientState],
    Q: np.ndarray,
    mechanism: object,
    client_rngs: dict[int, np.random.Generator],
) -> tuple[np.ndarray, list]:
    """Gather one perturbed gradient per participating client and aggregate.

    Under passthrough the aggregate is exactly the sum of the raw per-client
    gradients. Returns the aggregate and the transmitted messages.
    """
    if not clients:
        raise FederationError("gradient collection requires a nonempty participant set")
    messages = []
    for client in clients:
        grad = local_gradient(Q, client.p, client.a, client.c, client.S)
        msg = mechanism.privatize(grad, client_rngs[client.user_id], user_id=client.user_id)
        audit_transmission(msg, mechanism)
        messages.append(msg)
    return mechanism.aggregate(messages, Q.shape), messages


def server_update(server: ServerState, F_bar: np.ndarray) -> ServerState:
    """One optimizer step on the item embeddings with gradient ``F_bar + reg*Q``."""
    if not np.all(np.isfinite(F_bar)):
        raise FederationError(
            f"aborting round {server.step}: aggregated gradient has non-finite entries"
        )
    grad = F_bar + server.reg * server.Q
    server.step += 1
    if server.optimizer == "sgd":
        server.Q = server.Q - server.lr * grad
    elif server.optimizer == "momentum":
        if server.m is None:
            server.m = np.zeros_like(server.Q)
        server.m = server.momentum * server.m + grad
        server.Q = server.Q - server.lr * server.m
    elif server.optimizer == "adam":
        if server.m is None:
            server.m = np.zeros_like(server.Q)
            server.v = np.zeros_like(server.Q)
        b1, b2 = server.adam_beta1, server.adam_beta2
        server.m = b1 * server.m + (1 - b1) * grad
        server.v = b2 * server.v + (1 - b2) * grad * grad
        m_hat = server.m / (1 - b1**server.step)
        v_hat = server.v / (1 - b2**server.step)
        server.Q = server.Q - server.lr * m_hat / (np.sqrt(v_hat) + server.adam_eps)
    else:  # pragma: no cover - guarded by RoundConfig
        raise FederationError(f"unknown optimizer {server.optimizer!r}")
    return server


@dataclass(frozen=True)
class RoundLogRow:
    """One line of the structured round log."""

    cycle: int
    phase: str
    users_active: int
    mechanism: str
    epsilon: float
    grad_inf_norm: float
    loss: float | None

    def as_csv_row(self) -> list[str]:
        return [
            str(self.cycle),
            self.phase,
            str(self.users_active),
            self.mechanism,
            "inf" if math.isinf(self.epsilon) else repr(self.epsilon),
            repr(self.grad_inf_norm),
            "NA" if self.loss is None else repr(self.loss),
        ]


ROUND_LOG_COLUMNS = ("cycle", "phase", "users_active", "mechanism",
                     "epsilon", "grad_inf_norm", "loss_or_NA")


def _sample_participants(
    clients: Sequence[ClientState], fraction: float, rng: np.random.Generator
) -> list[ClientState]:
    eligible = [c for c in clients if c.has_data]
    if fraction >= 1.0 or len(eligible) <= 1:
        return eligible
    size = max(1, int(round(fraction * len(eligible))))
    idx = rng.choice(len(eligible), size=size, replace=False)
    return [eligible[i] for i in sorted(idx)]


def _loss_if_passthrough(server: ServerState, clients: Sequence[ClientState],
                         mechanism: object) -> float | None:
    if getattr(mechanism, "name", None) != "none":
        return None
    terms = [(c.p, c.a, c.c, c.S) for c in clients if c.has_data]
    return loss(server.Q, terms, server.reg)


def fit(
    clients: dict[int, ClientState],
    server: ServerState,
    hp: Hyperparams,
    cfg: RoundConfig,
    rng: np.random.Generator,
    rounds: int,
    phase: str = "train",
    cycle: int = 0,
) -> list[RoundLogRow]:
    """Train on the clients' current histories for a fixed number of rounds.

    Each round: regime-scheduled user-embedding refits, participant sampling,
    privatized gradient collection, one server step. With passthrough, full
    participation, and the plain-gradient optimizer this reproduces
    centralized gradient descent on the joint objective exactly.
    """
    ordered = [clients[u] for u in sorted(clients)]
    client_rngs = _client_rngs(clients, rng)
    log: list[RoundLogRow] = []
    for rnd in range(rounds):
        update_p = cfg.regime == "full" or (
            cfg.regime == "rare" and rnd % cfg.q_update_period == 0
        )
        for client in ordered:
            client_local_step(client, server.Q, (), hp, update_p)
        participants = _sample_participants(ordered, cfg.participation, rng)
        if not participants:
            raise FederationError("no client holds data; cannot train")
        F_bar, _ = collect_gradients(participants, server.Q, cfg.mechanism, client_rngs)
        server_update(server, F_bar)
        log.append(
            RoundLogRow(
                cycle=cycle if cycle else rnd,
                phase=phase,
                users_active=len(participants),
                mechanism=getattr(cfg.mechanism, "name", "?"),
                epsilon=getattr(cfg.mechanism, "epsilon", math.inf),
                grad_inf_norm=float(np.abs(F_bar).max()),
                loss=_loss_if_passthrough(server, ordered, cfg.mechanism),
            )
        )
    return log


def _client_rngs(clients: dict[int, ClientState], rng: np.random.Generator):
    seeds = rng.integers(0, 2**63 - 1, size=len(clients))
    return {
        u: np.random.default_rng(int(seed))
        for u, seed in zip(sorted(clients), seeds)
    }


@dataclass(frozen=True)
class CycleSnapshot:
    """Model state visible to clients at the start of a cycle (pre-ingestion)."""

    cycle: int
    Q: np.ndarray
    user_embeddings: dict[int, np.ndarray]


@dataclass
class TrainingRun:
    server: ServerState
    clients: dict[int, ClientState]
    snapshots: list[CycleSnapshot]
    round_log: list[RoundLogRow]


def run_training(
    cycles: Sequence[Cycle],
    n_apps: int,
    hp: Hyperparams,
    cfg: RoundConfig,
    seed: int,
    pretrain_rounds: int = 50,
    pretrained_Q: np.ndarray | None = None,
    pretrain_mechanism: object | None = None,
) -> TrainingRun:
    """Drive the full dynamic protocol over a cycle stream.

    Cycle 0 trains the item embeddings from scratch (or adopts a checkpoint),
    after which user embeddings are re-randomized. Every later cycle ingests
    its events, refits user embeddings per the regime schedule, and on
    item-update cycles (every ``cfg.q_update_period``) aggregates privatized
    gradients from the cycle's active users and steps the server. A snapshot
    of (Q, user embeddings) is taken before each cycle's ingestion, which is
    exactly the state a predictor would use on that cycle's traffic.
    """
    if len(cycles) < 2:
        raise FederationError("dynamic training needs at least 2 cycles")
    root = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    all_users = sorted({u for cyc in cycles for u in cyc.events})
    clients = {u: init_client(u, hp, root) for u in all_users}
    server = init_server(n_apps, hp, root, Q=pretrained_Q, optimizer=cfg.optimizer)
    log: list[RoundLogRow] = []

    # cycle 0: bootstrap item embeddings
    for user, events in sorted(cycles[0].events.items()):
        client_local_step(clients[user], server.Q, events, hp, update_p=False)
    if pretrained_Q is None and pretrain_rounds > 0:
        pre_cfg = replace(
            cfg,
            mechanism=pretrain_mechanism if pretrain_mechanism is not None else cfg.mechanism,
            regime="full",
            q_update_period=1,
        )
        with_data = {u: c for u, c in clients.items() if c.has_data}
        log.extend(fit(with_data, server, hp, pre_cfg, root, pretrain_rounds, phase="pretrain"))
    for user in all_users:
        reset_user_embedding(clients[user], hp, root)

    client_rngs = _client_rngs(clients, root)
    snapshots: list[CycleSnapshot] = []
    for cycle in cycles[1:]:
        snapshots.append(
            CycleSnapshot(
                cycle=cycle.index,
                Q=server.Q.copy(),
                user_embeddings={u: c.p.copy() for u, c in clients.items()},
            )
        )
        active = sorted(cycle.events)
        is_update_cycle = cycle.index % cfg.q_update_period == 0
        update_p = cfg.regime == "full" or (cfg.regime == "rare" and is_update_cycle)
        for user in active:
            client_local_step(clients[user], server.Q, cycle.events[user], hp, update_p)
        if is_update_cycle:
            participants = _sample_participants(
                [clients[u] for u in active], cfg.participation, root
            )
            if participants:
                for _ in range(cfg.steps_per_update):
                    F_bar, _ = collect_gradients(
                        participants, server.Q, cfg.mechanism, client_rngs
                    )
                    server_update(server, F_bar)
                log.append(
                    RoundLogRow(
                        cycle=cycle.index,
                        phase="update",
                        users_active=len(participants),
                        mechanism=getattr(cfg.mechanism, "name", "?"),
                        epsilon=getattr(cfg.mechanism, "epsilon", math.inf),
                        grad_inf_norm=float(np.abs(F_bar).max()),
                        loss=_loss_if_passthrough(server, participants, cfg.mechanism),
                    )
                )
        else:
            log.append(
                RoundLogRow(
                    cycle=cycle.index,
                    phase="local",
                    users_active=len(active),
                    mechanism=getattr(cfg.mechanism, "name", "?"),
                    epsilon=getattr(cfg.mechanism, "epsilon", math.inf),
                    grad_inf_norm=0.0,
                    loss=None,
                )
            )
    return TrainingRun(server=server, clients=clients, snapshots=snapshots, round_log=log)
