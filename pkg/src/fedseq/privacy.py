"""Locally differentially private gradient transmission.

Clients normalize their item-embedding gradient into [-1, 1], perturb it with
a randomized-response mechanism, and ship a compact message; the server
reconstructs an aggregate update. Four mechanisms are provided:

* ``qharmony`` - sparse randomized response with quantization-style server
  aggregation scaled by the maximal positive-report count,
* ``kharmony`` - the same client-side perturbation with classic debiased
  mean-estimation aggregation,
* ``laplace`` - dense Laplace noise,
* ``none`` - a passthrough that transmits the raw gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class UnsupportedMechanismError(ValueError):
    """Raised when an introspection helper cannot handle a mechanism."""


@dataclass(frozen=True)
class PerturbedGradientMessage:
    """What a client transmits: k signed unit values at distinct coordinates
    plus the signed maximum of its normalized gradient."""

    user_id: int
    values: np.ndarray  # (k,) entries in {-1.0, +1.0}
    rows: np.ndarray  # (k,) row indices
    cols: np.ndarray  # (k,) column indices
    f_max: float

    def __post_init__(self):
        k = len(self.values)
        if len(self.rows) != k or len(self.cols) != k:
            raise ValueError("values, rows, cols must have equal length")
        if not np.all(np.isin(self.values, (-1.0, 1.0))):
            raise ValueError("perturbed values must be +/-1")
        pairs = set(zip(self.rows.tolist(), self.cols.tolist()))
        if len(pairs) != k:
            raise ValueError("coordinate pairs must be distinct")

    @property
    def k(self) -> int:
        return len(self.values)

    def densify(self, shape: tuple[int, int]) -> np.ndarray:
        dense = np.zeros(shape)
        dense[self.rows, self.cols] = self.values
        return dense


def normalize_gradient(F: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale a gradient into [-1, 1] by its max absolute entry.

    Returns ``(F / scale, scale)``; an all-zero input passes through with
    scale 1 so the round trip stays exact.
    """
    F = np.asarray(F, dtype=float)
    if not np.all(np.isfinite(F)):
        raise ValueError("gradient contains non-finite entries")
    scale = float(np.max(np.abs(F)))
    if scale == 0.0:
        return F.copy(), 1.0
    return F / scale, scale


def positive_probability(f, eps_per_coord):
    """Probability that a normalized entry ``f`` is reported as +1.

    ``(f (t - 1) + t + 1) / (2 (t + 1))`` with ``t = exp(eps_per_coord)``;
    the complementary event reports -1. Supports eps_per_coord = inf, where
    the rule degenerates to the unbiased one-bit quantizer ``(f + 1) / 2``.
    """
    if eps_per_coord <= 0:
        raise ValueError(f"privacy budget per coordinate must be > 0, got {eps_per_coord}")
    if math.isinf(eps_per_coord):
        return (np.asarray(f) + 1.0) / 2.0
    t = math.exp(eps_per_coord)
    return (np.asarray(f) * (t - 1.0) + t + 1.0) / (2.0 * (t + 1.0))


def _check_budget(eps: float, k: int, size: int) -> None:
    if eps <= 0:
        raise ValueError(f"privacy budget must be > 0, got {eps}")
    if not 1 <= k <= size:
        raise ValueError(f"k must lie in [1, {size}], got {k}")


def qharmony_client(
    F_norm: np.ndarray,
    eps: float,
    k: int,
    rng: np.random.Generator,
    user_id: int = 0,
) -> PerturbedGradientMessage:
    """Client-side sparse randomized response.

    Samples k distinct coordinates uniformly, flips each selected entry to
    +/-1 by the Bernoulli rule of :func:`positive_probability` at budget
    eps/k, and attaches the signed maximum of the whole normalized gradient.
    """
    F_norm = np.asarray(F_norm, dtype=float)
    n, d = F_norm.shape
    _check_budget(eps, k, n * d)
    if np.abs(F_norm).max(initial=0.0) > 1.0 + 1e-12:
        raise ValueError("normalized gradient entries must lie in [-1, 1]")
    flat = rng.choice(n * d, size=k, replace=False)
    rows, cols = np.divmod(flat, d)
    probs = positive_probability(F_norm[rows, cols], eps / k)
    values = np.where(rng.random(k) < probs, 1.0, -1.0)
    return PerturbedGradientMessage(
        user_id=user_id,
        values=values,
        rows=rows,
        cols=cols,
        f_max=float(F_norm.max()),
    )


# the k-sparse perturbation is shared; only the server-side estimate differs
kharmony_client = qharmony_client


def qharmony_server(
    messages: Sequence[PerturbedGradientMessage], shape: tuple[int, int]
) -> np.ndarray:
    """Quantization-style aggregation of perturbed gradients.

    Accumulates the signed reports S and the positive-report counts Z per
    coordinate, then returns ``(max_u f_max(u) / max_ij Z_ij) * S``. With no
    positive report anywhere the estimate degenerates to the zero matrix.
    """
    if not messages:
        raise ValueError("no messages to aggregate")
    signed = np.zeros(shape)
    positive = np.zeros(shape)
    for msg in messages:
        signed[msg.rows, msg.cols] += msg.values
        positive[msg.rows, msg.cols] += msg.values > 0
    z_max = positive.max()
    if z_max == 0:
        return np.zeros(shape)
    f_max = max(msg.f_max for msg in messages)
    return (f_max / z_max) * signed


def kharmony_aggregate(
    messages: Sequence[PerturbedGradientMessage],
    eps: float,
    k: int,
    shape: tuple[int, int],
) -> np.ndarray:
    """Debiased mean estimate of the normalized gradients.

    Each densified message is scaled by ``(n d / k) (t + 1) / (t - 1)`` with
    ``t = exp(eps / k)`` so that its expectation equals the client's
    normalized gradient, then the messages are averaged.
    """
    if not messages:
        raise ValueError("no messages to aggregate")
    size = shape[0] * shape[1]
    _check_budget(eps, k, size)
    if math.isinf(eps):
        factor = size / k
    else:
        t = math.exp(eps / k)
        factor = (size / k) * (t + 1.0) / (t - 1.0)
    total = np.zeros(shape)
    for msg in messages:
        total += msg.densify(shape)
    return factor * total / len(messages)


def laplace_mechanism(
    F_norm: np.ndarray, eps: float, rng: np.random.Generator
) -> np.ndarray:
    """Dense Laplace perturbation of a normalized gradient.

    The noise scale is ``sqrt(2) n d / eps`` per element, i.e. a per-element
    variance of ``4 n^2 d^2 / eps^2``.
    """
    if eps <= 0:
        raise ValueError(f"privacy budget must be > 0, got {eps}")
    F_norm = np.asarray(F_norm, dtype=float)
    n, d = F_norm.shape
    if math.isinf(eps):
        return F_norm.copy()
    scale = math.sqrt(2.0) * n * d / eps
    return F_norm + rng.laplace(0.0, scale, size=F_norm.shape)


@dataclass(frozen=True)
class LdpBoundReport:
    """Worst-case output-probability ratio of a single perturbed coordinate."""

    mechanism: str
    eps_per_coord: float
    max_ratio: float
    bound: float
    within_bound: bool
    composed_budget: float


def ldp_ratio_check(mechanism: str | object, eps: float, k: int) -> LdpBoundReport:
    """Exact privacy-ratio audit for mechanisms with a two-point output space.

    Scans inputs over [-1, 1] and both outputs, reporting the maximal ratio
    ``P[out = y | v] / P[out = y | v']`` against the per-coordinate bound
    ``exp(eps / k)``; k perturbed coordinates compose sequentially to eps.
    """
    name = getattr(mechanism, "name", mechanism)
    if name not in ("qharmony", "kharmony"):
        raise UnsupportedMechanismError(
            f"ratio check needs an enumerable output space, not {name!r}"
        )
    if eps <= 0 or k < 1:
        raise ValueError("need eps > 0 and k >= 1")
    per_coord = eps / k
    grid = np.linspace(-1.0, 1.0, 201)
    p_plus = positive_probability(grid, per_coord)
    ratios = [
        p_plus.max() / p_plus.min(),
        (1.0 - p_plus).max() / (1.0 - p_plus).min(),
    ]
    max_ratio = float(max(ratios))
    bound = math.exp(per_coord)
    return LdpBoundReport(
        mechanism=str(name),
        eps_per_coord=per_coord,
        max_ratio=max_ratio,
        bound=bound,
        within_bound=max_ratio <= bound + 1e-12,
        composed_budget=eps,
    )


# --- mechanism objects shared with the federation loop ----------------------


class Passthrough:
    """No privacy: the raw gradient crosses the wire and aggregation sums."""

    name = "none"
    epsilon = math.inf

    def privatize(self, grad: np.ndarray, rng: np.random.Generator, user_id: int = 0):
        return np.array(grad, dtype=float, copy=True)

    def aggregate(self, messages: Sequence[np.ndarray], shape: tuple[int, int]):
        total = np.zeros(shape)
        for msg in messages:
            total += msg
        return total

    def describe(self) -> str:
        return self.name


class QHarmony:
    """Sparse randomized response with quantization-style aggregation."""

    name = "qharmony"

    def __init__(self, epsilon: float, k: int, use_abs_max: bool = False):
        if epsilon <= 0:
            raise ValueError(f"privacy budget must be > 0, got {epsilon}")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.epsilon = epsilon
        self.k = k
        # deviation from the stated algorithm: scale by max |f| instead of the
        # signed maximum; off by default
        self.use_abs_max = use_abs_max

    def privatize(self, grad, rng, user_id: int = 0) -> PerturbedGradientMessage:
        normalized, _ = normalize_gradient(grad)
        msg = qharmony_client(normalized, self.epsilon, self.k, rng, user_id=user_id)
        if self.use_abs_max:
            msg = PerturbedGradientMessage(
                user_id=msg.user_id,
                values=msg.values,
                rows=msg.rows,
                cols=msg.cols,
                f_max=float(np.abs(normalized).max()),
            )
        return msg

    def aggregate(self, messages, shape):
        return qharmony_server(messages, shape)

    def describe(self) -> str:
        return f"{self.name}(eps={self.epsilon}, k={self.k})"


class KHarmony:
    """Sparse randomized response with debiased mean aggregation."""

    name = "kharmony"

    def __init__(self, epsilon: float, k: int):
        if epsilon <= 0:
            raise ValueError(f"privacy budget must be > 0, got {epsilon}")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        self.epsilon = epsilon
        self.k = k

    def privatize(self, grad, rng, user_id: int = 0) -> PerturbedGradientMessage:
        normalized, _ = normalize_gradient(grad)
        return kharmony_client(normalized, self.epsilon, self.k, rng, user_id=user_id)

    def aggregate(self, messages, shape):
        return kharmony_aggregate(messages, self.epsilon, self.k, shape)

    def describe(self) -> str:
        return f"{self.name}(eps={self.epsilon}, k={self.k})"


class Laplace:
    """Dense Laplace noise on the normalized gradient; aggregation averages."""

    name = "laplace"

    def __init__(self, epsilon: float):
        if epsilon <= 0:
            raise ValueError(f"privacy budget must be > 0, got {epsilon}")
        self.epsilon = epsilon

    def privatize(self, grad, rng, user_id: int = 0) -> np.ndarray:
        normalized, _ = normalize_gradient(grad)
        return laplace_mechanism(normalized, self.epsilon, rng)

    def aggregate(self, messages, shape):
        total = np.zeros(shape)
        for msg in messages:
            total += msg
        return total / len(messages)

    def describe(self) -> str:
        return f"{self.name}(eps={self.epsilon})"


def make_mechanism(name: str, epsilon: float | None = None, k: int | None = None):
    """Mechanism factory used by configuration code."""
    name = name.lower()
    if name in ("none", "passthrough"):
        return Passthrough()
    if epsilon is None:
        raise ValueError(f"mechanism {name!r} needs a privacy budget")
    if name == "qharmony":
        return QHarmony(epsilon, k or 1)
    if name == "kharmony":
        return KHarmony(epsilon, k or 1)
    if name == "laplace":
        return Laplace(epsilon)
    raise ValueError(f"unknown privacy mechanism {name!r}")


# --- wire format for simulator logging ---------------------------------------


def write_messages(path: str | Path, messages: Iterable[PerturbedGradientMessage]) -> None:
    """Log messages as ``u,f_max,k`` lines each followed by k ``value,row,col`` lines."""
    with Path(path).open("w") as fh:
        for msg in messages:
            fh.write(f"{msg.user_id},{msg.f_max!r},{msg.k}\n")
            for value, row, col in zip(msg.values, msg.rows, msg.cols):
                fh.write(f"{int(value)},{int(row)},{int(col)}\n")


def read_messages(path: str | Path) -> list[PerturbedGradientMessage]:
    messages = []
    with Path(path).open() as fh:
        lines = [line.strip() for line in fh if line.strip()]
    pos = 0
    while pos < len(lines):
        user_id, f_max, k = lines[pos].split(",")
        k = int(k)
        triples = [lines[pos + 1 + i].split(",") for i in range(k)]
        pos += 1 + k
        messages.append(
            PerturbedGradientMessage(
                user_id=int(user_id),
                values=np.array([float(v) for v, _, _ in triples]),
                rows=np.array([int(r) for _, r, _ in triples]),
                cols=np.array([int(c) for _, _, c in triples]),
                f_max=float(f_max),
            )
        )
    return messages
