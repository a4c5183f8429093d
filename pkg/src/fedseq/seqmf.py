"""Sequence-aware matrix factorization: transition statistics, confidence
weights, relevance scoring, the closed-form user update, and the item-side
gradient a client contributes.

Conventions: ``Q`` is the (n_apps, dim) item-embedding matrix with one app per
row, ``p`` a user's dim-vector, ``S`` the user's sparse (n_apps, n_apps)
transition matrix with rows indexed by the source app, ``c`` the length-n_apps
confidence vector (diagonal of the weighting matrix), and ``a`` the binary
interaction indicator vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve


@dataclass(frozen=True)
class Hyperparams:
    """Model settings shared by clients and server.

    ``dim``: embedding dimension; ``reg``: L2 penalty on all embeddings;
    ``alpha``/``gamma``: additive smoothing and frequency damping for the
    confidence weights; ``recency_len``: how many most-recent in-session apps
    feed the lightweight inference score; ``lr``: server learning rate;
    ``history_window``: number of trailing events used for per-user
    statistics (None means the full history); ``use_transitions``: False
    degenerates the model to plain matrix factorization (zero transition
    matrix in training, no recency term at inference).
    """

    dim: int = 32
    reg: float = 0.1
    alpha: float = 0.1
    gamma: float = 0.5
    recency_len: int = 10
    lr: float = 0.05
    history_window: int | None = None
    use_transitions: bool = True

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.reg < 0:
            raise ValueError(f"reg must be >= 0, got {self.reg}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.recency_len < 1:
            raise ValueError(f"recency_len must be >= 1, got {self.recency_len}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")


def build_transition_matrix(history: Sequence[int], n_apps: int) -> sp.csr_matrix:
    """Relative-frequency matrix of immediate app-to-app transitions.

    Entry (i, j) is the count of transitions i -> j divided by the number of
    times i occurs as a transition source (occurrences in a non-final
    position). Rows of apps never seen as a source are zero; a history shorter
    than 2 yields the all-zero matrix.
    """
    history = list(history)
    for app in history:
        if not 0 <= app < n_apps:
            raise IndexError(f"app index {app} out of range for {n_apps} apps")
    if len(history) < 2:
        return sp.csr_matrix((n_apps, n_apps))
    sources = np.asarray(history[:-1])
    targets = np.asarray(history[1:])
    counts = sp.coo_matrix(
        (np.ones(len(sources)), (sources, targets)), shape=(n_apps, n_apps)
    ).tocsr()
    row_totals = np.asarray(counts.sum(axis=1)).ravel()
    inv = np.divide(1.0, row_totals, out=np.zeros(n_apps), where=row_totals > 0)
    return sp.diags(inv) @ counts


def build_confidence(
    history: Sequence[int], alpha: float, gamma: float, n_apps: int
) -> np.ndarray:
    """Smoothed relative-frequency confidence weights over all apps.

    ``c_i = (d_i**gamma + alpha) / (sum_j d_j**gamma + alpha * n_apps)`` with
    launch counts ``d`` and the convention ``0**gamma == 0`` even at gamma=0,
    so never-launched apps get weight ``alpha`` before normalization.
    """
    if not 0.0 <= alpha <= 1.0 or not 0.0 <= gamma <= 1.0:
        raise ValueError("alpha and gamma must lie in [0, 1]")
    counts = np.bincount(np.asarray(list(history), dtype=int), minlength=n_apps).astype(float)
    if counts.size > n_apps:
        raise IndexError("app index out of range")
    damped = np.where(counts > 0, counts**gamma, 0.0)
    denom = damped.sum() + alpha * n_apps
    if denom == 0:
        raise ZeroDivisionError("empty history with alpha=0 leaves no confidence mass")
    return (damped + alpha) / denom


def interaction_vector(history: Sequence[int], n_apps: int) -> np.ndarray:
    """Binary indicator of apps launched in the history window."""
    a = np.zeros(n_apps)
    if len(history):
        a[np.asarray(list(history), dtype=int)] = 1.0
    return a


def transition_similarity(Q: np.ndarray, S: sp.spmatrix) -> np.ndarray:
    """Per-app average similarity to its observed successors.

    Element i is ``sum_j S_ij * (q_i . q_j)``, the diagonal of ``S Q Q^T``
    computed without forming the dense product.
    """
    return np.einsum("ij,ij->i", S @ Q, Q)


def relevance_train(Q: np.ndarray, p: np.ndarray, S: sp.spmatrix) -> np.ndarray:
    """Training-time relevance scores: base affinity plus the transition term."""
    if Q.shape[1] != p.shape[0] or S.shape != (Q.shape[0], Q.shape[0]):
        raise ValueError(
            f"shape mismatch: Q {Q.shape}, p {p.shape}, S {S.shape}"
        )
    return Q @ p + transition_similarity(Q, S)


def relevance_infer(
    Q: np.ndarray,
    p: np.ndarray,
    recent: Sequence[int],
    candidates: Sequence[int],
) -> np.ndarray:
    """Lightweight inference scores for the candidate apps only.

    ``score(i) = q_i . p + q_i . sum(q_k for k in recent)``. Touches only the
    candidate and recent rows of Q, so the cost is
    O(|candidates| * dim + |recent| * dim).
    """
    cand = np.asarray(list(candidates), dtype=int)
    if cand.size == 0:
        raise ValueError("candidate set is empty")
    profile = p.copy()
    for app in recent:
        profile = profile + Q[int(app)]
    return Q[cand] @ profile


def toprec(candidates: Sequence[int], scores: np.ndarray, n: int) -> np.ndarray:
    """Highest-scoring ``min(len(candidates), n)`` apps, best first.

    Ties break by ascending app index for determinism.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand = np.asarray(list(candidates), dtype=int)
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((cand, -scores))
    return cand[order[: min(len(cand), n)]]


def loss(
    Q: np.ndarray,
    users: Iterable[tuple[np.ndarray, np.ndarray, np.ndarray, sp.spmatrix]],
    reg: float,
) -> float:
    """Weighted squared-error objective over all users plus L2 penalties.

    ``users`` yields (p, a, c, S) per user.
    """
    total = 0.5 * reg * float(np.sum(Q * Q))
    for p, a, c, S in users:
        resid = relevance_train(Q, p, S) - a
        total += 0.5 * float(resid @ (c * resid))
        total += 0.5 * reg * float(p @ p)
    return total


def als_user_update(
    Q: np.ndarray, a: np.ndarray, c: np.ndarray, S: sp.spmatrix, reg: float
) -> np.ndarray:
    """Closed-form minimizer of one user's loss block in p, items fixed.

    Solves ``(Q^T C Q + reg I) p = Q^T C (a - h)`` with h the transition
    similarity term, via a Cholesky factorization of the dim x dim normal
    matrix. Raises ``scipy.linalg.LinAlgError`` when reg=0 leaves the system
    singular.
    """
    h = transition_similarity(Q, S)
    weighted = Q * c[:, None]
    normal = weighted.T @ Q + reg * np.eye(Q.shape[1])
    rhs = weighted.T @ (a - h)
    return cho_solve(cho_factor(normal), rhs)


def local_gradient(
    Q: np.ndarray, p: np.ndarray, a: np.ndarray, c: np.ndarray, S: sp.spmatrix
) -> np.ndarray:
    """One user's contribution to the item-embedding gradient.

    With ``dvec = c * (r - a)`` this is
    ``outer(dvec, p) + diag(dvec) S Q + S^T diag(dvec) Q``; the regularization
    term is added once server-side, not here.
    """
    dvec = c * (relevance_train(Q, p, S) - a)
    return np.outer(dvec, p) + dvec[:, None] * (S @ Q) + S.T @ (dvec[:, None] * Q)


def save_embeddings(path: str | Path, Q: np.ndarray) -> None:
    """Write a matrix as text: one ``N d`` header line, then row-major rows.

    Values use repr-precision so a round trip is exact.
    """
    Q = np.asarray(Q, dtype=float)
    with Path(path).open("w") as fh:
        fh.write(f"{Q.shape[0]} {Q.shape[1]}\n")
        for row in Q:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path: str | Path) -> np.ndarray:
    with Path(path).open() as fh:
        n, d = (int(tok) for tok in fh.readline().split())
        Q = np.loadtxt(fh, dtype=float, ndmin=2)
    if Q.shape != (n, d):
        raise ValueError(f"header promises {(n, d)}, file holds {Q.shape}")
    return Q
