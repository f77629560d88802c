"""Projector MLPs, pairwise logits, the graded contrastive loss, and its
analytic gradients.

All math runs in float64. The loss over one batch couples a projected
modality block A (through the MLP) with m frozen blocks B_j; for each j it
sums the graded cross-entropy over row-softmaxes of S_j = A B_j^T / tau_j in
both directions, sharing the per-row target probabilities p. Temperatures
live in log-space, one per (projected, frozen) modality pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FROZEN_MODALITIES, PROJECTED_MODALITIES, Modality
from .errors import DegenerateBatch, DimMismatch, UnknownPair, ZeroVector

GELU_C = 0.7978845608  # sqrt(2/pi), tanh approximation
GELU_A = 0.044715

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 1.0

_NORM_EPS = 1e-12


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(GELU_C * (x + GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * GELU_C * (1.0 + 3.0 * GELU_A * x**2)


@dataclass
class ProjectorParams:
    """Two-layer MLP: dim_in -> dim_hidden (GELU) -> dim_out, then row L2-norm."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def dim_in(self) -> int:
        return self.W1.shape[0]

    @property
    def dim_hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def dim_out(self) -> int:
        return self.W2.shape[1]

    @property
    def param_count(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def copy(self) -> "ProjectorParams":
        return ProjectorParams(
            self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy()
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


def init_projector(
    dim_in: int = 1024,
    dim_hidden: int = 2048,
    dim_out: int = 1024,
    seed: int = 0,
) -> ProjectorParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    s1 = 1.0 / np.sqrt(dim_in)
    s2 = 1.0 / np.sqrt(dim_hidden)
    return ProjectorParams(
        W1=rng.uniform(-s1, s1, size=(dim_in, dim_hidden)),
        b1=np.zeros(dim_hidden),
        W2=rng.uniform(-s2, s2, size=(dim_hidden, dim_out)),
        b2=np.zeros(dim_out),
    )


PairKey = tuple[Modality, Modality]


@dataclass
class TemperatureSet:
    """Trainable log-temperatures per (projected, frozen) modality pair."""

    log_tau: dict[PairKey, float]

    @classmethod
    def default(cls) -> "TemperatureSet":
        lt = float(np.log(TAU_INIT))
        return cls(
            {
                (p, f): lt
                for p in sorted(PROJECTED_MODALITIES, key=lambda m: m.value)
                for f in sorted(FROZEN_MODALITIES, key=lambda m: m.value)
            }
        )

    def tau(self, key: PairKey) -> float:
        if key not in self.log_tau:
            raise UnknownPair(f"no temperature for pair {key[0].value}->{key[1].value}")
        return float(np.exp(self.log_tau[key]))

    def clamp(self) -> None:
        """Keep tau inside [0.01, 1.0]; call after every optimizer step."""
        for key, lt in self.log_tau.items():
            tau = float(np.clip(np.exp(lt), TAU_MIN, TAU_MAX))
            self.log_tau[key] = float(np.log(tau))

    def copy(self) -> "TemperatureSet":
        return TemperatureSet(dict(self.log_tau))


@dataclass
class TrainBatch:
    """One projected-modality block, m >= 1 frozen blocks, and targets p.

    Row i of every frozen block is the item paired with row i of a_in; the
    projected modality is carried so the right temperatures can be found.
    """

    projected: Modality
    a_in: np.ndarray
    frozen: list[tuple[Modality, np.ndarray]]
    p: np.ndarray

    def __post_init__(self):
        self.a_in = np.asarray(self.a_in, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        b = self.a_in.shape[0]
        if b < 2:
            raise DegenerateBatch(f"batch has {b} rows, need >= 2")
        if not self.frozen:
            raise ValueError("batch needs at least one frozen block")
        if self.p.shape != (b,):
            raise ValueError(f"p has shape {self.p.shape}, expected ({b},)")
        if ((self.p < 0) | (self.p > 1)).any():
            raise ValueError("targets p must lie in [0, 1]")
        self.frozen = [(m, np.asarray(x, dtype=np.float64)) for m, x in self.frozen]
        for mod, block in self.frozen:
            if block.shape[0] != b:
                raise ValueError(f"frozen block {mod.value} has {block.shape[0]} rows")
            norms = np.linalg.norm(block, axis=1)
            if (np.abs(norms - 1.0) > 1e-4).any():
                raise ValueError(f"frozen block {mod.value} is not normalized")

    @property
    def batch_size(self) -> int:
        return self.a_in.shape[0]


def _forward(params: ProjectorParams, X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != params.dim_in:
        raise DimMismatch(f"input dim {X.shape[1]} != projector dim_in {params.dim_in}")
    h_pre = X @ params.W1 + params.b1
    h = gelu(h_pre)
    y_pre = h @ params.W2 + params.b2
    norms = np.linalg.norm(y_pre, axis=1)
    if len(norms):
        worst = int(np.argmin(norms))
        if norms[worst] <= _NORM_EPS:
            raise ZeroVector(worst)
    a = y_pre / norms[:, None]
    return a, (X, h_pre, h, y_pre, norms)


def projector_forward(params: ProjectorParams, X: np.ndarray) -> np.ndarray:
    """Project raw encoder outputs into the bound space; rows are unit-norm."""
    a, _ = _forward(params, X)
    return a


def pair_logits(A: np.ndarray, Bm: np.ndarray, tau: float) -> np.ndarray:
    """Scaled similarity logits S[i, j] = (A_i . B_j) / tau."""
    if not (TAU_MIN <= tau <= TAU_MAX):
        raise ValueError(f"tau {tau} outside [{TAU_MIN}, {TAU_MAX}]")
    A = np.asarray(A, dtype=np.float64)
    Bm = np.asarray(Bm, dtype=np.float64)
    if A.shape[1] != Bm.shape[1]:
        raise DimMismatch(f"dims {A.shape[1]} vs {Bm.shape[1]}")
    return (A @ Bm.T) / tau


def _log_q_terms(S: np.ndarray):
    """Stable log q_i and log(1 - q_i) for the row softmax diagonal.

    log(1 - q_i) is summed over the off-diagonal exponentials rather than
    computed as log1p(-q), which would cancel catastrophically near q = 1.
    """
    rowmax = S.max(axis=1, keepdims=True)
    sh = S - rowmax
    ex = np.exp(sh)
    sumex = ex.sum(axis=1)
    diag_sh = np.diagonal(sh)
    log_q = diag_sh - np.log(sumex)
    ex_off = ex.copy()
    np.fill_diagonal(ex_off, 0.0)
    offsum = ex_off.sum(axis=1)
    with np.errstate(divide="ignore"):
        log_1mq = np.log(offsum) - np.log(sumex)
    sig = ex / sumex[:, None]
    return log_q, log_1mq, sig


def graded_infonce(S: np.ndarray, p: np.ndarray) -> float:
    """Cross-entropy between targets p and the diagonal row-softmax q.

    loss = -(1/B) sum_i [p_i log q_i + (1 - p_i) log(1 - q_i)]
    """
    S = np.asarray(S, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    b = S.shape[0]
    if b < 2:
        raise DegenerateBatch(f"need B >= 2, got {b}")
    if S.shape != (b, b) or p.shape != (b,):
        raise DimMismatch(f"S {S.shape} / p {p.shape}")
    log_q, log_1mq, _ = _log_q_terms(S)
    terms = np.zeros(b)
    pos = p > 0.0
    terms[pos] += p[pos] * log_q[pos]
    neg = p < 1.0
    terms[neg] += (1.0 - p[neg]) * log_1mq[neg]
    return float(-terms.mean())


def _graded_infonce_with_grad(S: np.ndarray, p: np.ndarray):
    """Loss and dLoss/dS for one direction of one frozen block."""
    b = S.shape[0]
    log_q, log_1mq, sig = _log_q_terms(S)
    terms = np.zeros(b)
    pos = p > 0.0
    terms[pos] += p[pos] * log_q[pos]
    neg = p < 1.0
    terms[neg] += (1.0 - p[neg]) * log_1mq[neg]
    loss = float(-terms.mean())
    # d loss / dS_ik = g_i (sig_ik - delta_ik) / B with
    # g_i = p_i - (1 - p_i) q_i / (1 - q_i); the ratio is exp(log q - log(1-q))
    g = np.array(p, dtype=np.float64)
    if neg.any():
        ratio = np.exp(log_q[neg] - log_1mq[neg])
        g[neg] = p[neg] - (1.0 - p[neg]) * ratio
    dS = g[:, None] * sig
    dS[np.arange(b), np.arange(b)] -= g
    dS /= b
    return loss, dS


@dataclass
class BatchGrads:
    dW1: np.ndarray
    db1: np.ndarray
    dW2: np.ndarray
    db2: np.ndarray
    dlog_tau: dict[PairKey, float] = field(default_factory=dict)


def batch_loss(
    params: ProjectorParams, temps: TemperatureSet, batch: TrainBatch
) -> tuple[float, BatchGrads]:
    """Total batch loss and exact gradients for the projector and log-taus.

    For each frozen block j: graded cross-entropy over rows of S_j plus over
    rows of S_j^T, both against the same p; blocks are summed, not averaged.
    """
    a, cache = _forward(params, batch.a_in)
    X, h_pre, h, y_pre, norms = cache
    b = batch.batch_size
    dA = np.zeros_like(a)
    dlog_tau: dict[PairKey, float] = {}
    total = 0.0
    for mod, block in batch.frozen:
        if block.shape[1] != a.shape[1]:
            raise DimMismatch(
                f"frozen block {mod.value} dim {block.shape[1]} != {a.shape[1]}"
            )
        key = (batch.projected, mod)
        tau = temps.tau(key)
        S = (a @ block.T) / tau
        loss_ab, g_ab = _graded_infonce_with_grad(S, batch.p)
        loss_ba, g_ba = _graded_infonce_with_grad(S.T, batch.p)
        total += loss_ab + loss_ba
        g_total = g_ab + g_ba.T  # both as gradients w.r.t. S
        dA += (g_total @ block) / tau
        # S = D * exp(-log tau)  =>  dS/dlog_tau = -S
        dlog_tau[key] = dlog_tau.get(key, 0.0) - float(np.sum(g_total * S))
    # back through row normalization a = y / ||y||
    dot = np.sum(dA * a, axis=1, keepdims=True)
    d_y = (dA - dot * a) / norms[:, None]
    dW2 = h.T @ d_y
    db2 = d_y.sum(axis=0)
    dh = d_y @ params.W2.T
    dh_pre = dh * gelu_grad(h_pre)
    dW1 = X.T @ dh_pre
    db1 = dh_pre.sum(axis=0)
    return total, BatchGrads(dW1, db1, dW2, db2, dlog_tau)
