"""Contrastive objectives over paired unit embeddings.

``info_nce`` is the symmetric cross-modal objective: each anchor's positive
logit is normalized against all in-batch cross-modal candidates, in both the
shape->image and image->shape directions, each weighted 1/2.

``hcl`` replaces the uniform in-batch negative sum with Q times an
expectation under a hardness-weighted negative distribution: an unnormalized
von Mises-Fisher density centered on the anchor with concentration beta,
estimated by self-normalized importance weights over the Q = N - 1 in-batch
negatives. At beta = 0 the weights are uniform and the objective coincides
with ``info_nce`` exactly.

All gradients are analytic, including the weights' dependence on the
embeddings, and every softmax / log-sum-exp uses max-subtraction in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ParameterError

TAU_MIN = 0.01
TAU_MAX = 1.0
TAU_INIT = 0.07

NORM_TOL = 1e-6


class LossOutput(NamedTuple):
    loss: float
    d_shape: np.ndarray
    d_image: np.ndarray
    d_log_tau: float


@dataclass(frozen=True)
class LossConfig:
    """Temperature and hardness settings; tau is learnable, stored as log."""

    tau: float = TAU_INIT
    beta: float = 0.0

    def validate(self) -> None:
        if not (TAU_MIN <= self.tau <= TAU_MAX):
            raise ParameterError(f"tau {self.tau} outside [{TAU_MIN}, {TAU_MAX}]")
        if self.beta < 0.0:
            raise ParameterError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class BetaSchedule:
    """Stagewise concentration ladder over the training epochs."""

    total_epochs: int
    stage_values: tuple[float, ...] = (0.5, 0.4, 0.3, 0.2, 0.1)

    def __post_init__(self) -> None:
        if self.total_epochs < 1:
            raise ParameterError("total_epochs must be >= 1")
        if len(self.stage_values) < 1:
            raise ParameterError("schedule needs at least one stage")
        if any(b < 0.0 for b in self.stage_values):
            raise ParameterError("stage values must be >= 0")

    @property
    def beta0(self) -> float:
        return self.stage_values[0]

    @property
    def n_stages(self) -> int:
        return len(self.stage_values)


def anneal_beta(epoch: int, schedule: BetaSchedule) -> float:
    """Return the stage value for ``epoch``.

    Stages partition [0, total_epochs) into equal blocks; the last block
    absorbs any remainder.
    """
    if not (0 <= epoch < schedule.total_epochs):
        raise ParameterError(
            f"epoch {epoch} outside [0, {schedule.total_epochs})")
    block = max(1, schedule.total_epochs // schedule.n_stages)
    stage = min(epoch // block, schedule.n_stages - 1)
    return schedule.stage_values[stage]


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _validate_batch(shape_embs: np.ndarray, image_embs: np.ndarray, tau: float,
                    min_n: int) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(shape_embs, dtype=np.float64)
    v = np.asarray(image_embs, dtype=np.float64)
    if u.ndim != 2 or v.ndim != 2 or u.shape != v.shape:
        raise ParameterError(
            f"embedding batches must share an (N, D) shape, got {u.shape} and {v.shape}")
    if u.shape[0] < min_n:
        raise ParameterError(f"batch size {u.shape[0]} below minimum {min_n}")
    if not (np.isfinite(tau) and tau > 0.0):
        raise ParameterError(f"tau must be positive and finite, got {tau}")
    for name, m in (("shape", u), ("image", v)):
        norms = np.linalg.norm(m, axis=1)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > NORM_TOL:
            raise ParameterError(
                f"{name} embeddings must be unit-norm (max deviation {worst:.2e})")
    return u, v


# ---------------------------------------------------------------------------
# Multi-modal InfoNCE
# ---------------------------------------------------------------------------


def info_nce(shape_embs: np.ndarray, image_embs: np.ndarray, tau: float,
             validate: bool = True) -> LossOutput:
    """Symmetric cross-modal InfoNCE over matched rows.

    Args:
        shape_embs: (N, D) unit-norm shape embeddings.
        image_embs: (N, D) unit-norm image embeddings, row i paired with row i.
        tau: temperature dividing all logits.

    Returns:
        (loss, d_shape, d_image, d_log_tau) with exact gradients.
    """
    if validate:
        u, v = _validate_batch(shape_embs, image_embs, tau, min_n=1)
    else:
        u = np.asarray(shape_embs, dtype=np.float64)
        v = np.asarray(image_embs, dtype=np.float64)
        if u.shape[0] < 1:
            raise ParameterError("batch must be non-empty")
    n = u.shape[0]
    s = u @ v.T
    z = s / tau
    diag = np.arange(n)

    row_lse = _logsumexp(z, axis=1)
    col_lse = _logsumexp(z, axis=0)
    loss = float(np.mean(0.5 * (row_lse - z[diag, diag]) + 0.5 * (col_lse - z[diag, diag])))

    p_row = np.exp(z - row_lse[:, None])
    p_col = np.exp(z - col_lse[None, :])
    g = (p_row + p_col) / (2.0 * n)
    g[diag, diag] -= 1.0 / n

    d_shape = (g @ v) / tau
    d_image = (g.T @ u) / tau
    d_log_tau = -float(np.sum(g * z))
    return LossOutput(loss, d_shape, d_image, d_log_tau)


# ---------------------------------------------------------------------------
# von Mises-Fisher negative weighting
# ---------------------------------------------------------------------------


def vmf_weights(anchor: np.ndarray, negatives: np.ndarray, beta: float) -> np.ndarray:
    """Self-normalized hardness weights over the negatives.

    w_j = exp(beta <anchor, neg_j>) / sum_k exp(beta <anchor, neg_k>); the
    uniform in-batch marginal cancels in the normalization. beta = 0 gives
    uniform weights.
    """
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] < 1:
        raise ParameterError("need at least one negative")
    if beta < 0.0:
        raise ParameterError(f"beta must be >= 0, got {beta}")
    logits = beta * (negatives @ np.asarray(anchor, dtype=np.float64))
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


# ---------------------------------------------------------------------------
# Multi-modal hard contrastive loss
# ---------------------------------------------------------------------------


def hcl(shape_embs: np.ndarray, image_embs: np.ndarray, tau: float, beta: float,
        validate: bool = True) -> LossOutput:
    """Hard contrastive loss with vMF-reweighted in-batch negatives.

    Per anchor the negative mass is Q * E_q[exp(sim / tau)] where the
    expectation runs over the Q cross-modal in-batch negatives under the
    weights of :func:`vmf_weights` (image negatives for shape anchors, shape
    negatives for image anchors). Gradients account for the weights'
    dependence on the embeddings. Requires N >= 2.
    """
    if validate:
        u, v = _validate_batch(shape_embs, image_embs, tau, min_n=2)
    else:
        u = np.asarray(shape_embs, dtype=np.float64)
        v = np.asarray(image_embs, dtype=np.float64)
        if u.shape[0] < 2:
            raise ParameterError("hcl needs N >= 2 so that at least one negative exists")
    if beta < 0.0:
        raise ParameterError(f"beta must be >= 0, got {beta}")
    n = u.shape[0]
    q_count = n - 1
    log_q = np.log(float(q_count))
    diag = np.arange(n)

    s = u @ v.T
    z = s / tau
    masked = beta * s
    masked[diag, diag] = -np.inf

    # Shape anchors vs image negatives (rows), image anchors vs shape
    # negatives (columns); each side gets its own weight normalization.
    log_w_row = masked - _logsumexp(masked, axis=1)[:, None]
    log_w_col = masked - _logsumexp(masked, axis=0)[None, :]

    m_row = log_q + log_w_row + z
    m_row[diag, diag] = z[diag, diag]
    m_col = log_q + log_w_col + z
    m_col[diag, diag] = z[diag, diag]

    denom_row = _logsumexp(m_row, axis=1)
    denom_col = _logsumexp(m_col, axis=0)
    loss = float(np.mean(0.5 * (denom_row - z[diag, diag]) + 0.5 * (denom_col - z[diag, diag])))

    g_row = np.exp(m_row - denom_row[:, None])   # diag holds P_i
    g_col = np.exp(m_col - denom_col[None, :])

    z_grad = g_row + g_col
    z_grad[diag, diag] -= 2.0

    # Off-diagonal negative masses 1 - P per anchor.
    neg_row = 1.0 - g_row[diag, diag]
    neg_col = 1.0 - g_col[diag, diag]
    w_row = np.exp(log_w_row)
    w_col = np.exp(log_w_col)
    w_grad = beta * (g_row - w_row * neg_row[:, None]) + beta * (g_col - w_col * neg_col[None, :])
    w_grad[diag, diag] = 0.0

    d_s = (z_grad / tau + w_grad) / (2.0 * n)
    d_shape = d_s @ v
    d_image = d_s.T @ u
    d_log_tau = -float(np.sum(z_grad * z)) / (2.0 * n)
    return LossOutput(loss, d_shape, d_image, d_log_tau)
