"""Contrastive image-text losses with exact gradients.

Variants (per direction, anchor row ``i`` of the similarity matrix ``M``):

* ``infonce``  -  -M_ii/tau + log sum_j exp(M_ij/tau)
* ``dcl``      -  positive removed from the log-sum (negatives only)
* ``hn_nce``   -  InfoNCE with the negatives reweighted by hardness weights
* ``dhn_nce``  -  decoupled and hardness-weighted

Image-to-text uses ``M = S``; text-to-image uses ``M = S.T`` where
``S[i, j] = I_i . T_j``. Hardness weights are ``(B-1) * softmax(beta * s / tau)``
over the anchor's negatives, so they always sum to ``B-1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .embedding import EmbeddingBatch

VARIANTS = ("infonce", "dcl", "hn_nce", "dhn_nce")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.6
    beta1: float = 0.15
    beta2: float = 0.15
    variant: str = "dhn_nce"
    reduce: str = "mean"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ValueError("hardness parameters must be non-negative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.reduce not in ("sum", "mean"):
            raise ValueError("reduce must be 'sum' or 'mean'")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: obj[k] for k in ("temperature", "beta1", "beta2", "variant", "reduce") if k in obj})


class LossValue(NamedTuple):
    total: float
    image_to_text: float
    text_to_image: float


def similarity_matrix(batch: EmbeddingBatch) -> np.ndarray:
    if batch.size < 2:
        raise ValueError("need at least one negative: batch size must be >= 2")
    return batch.image_embeddings @ batch.text_embeddings.T


def _lse_rows(x):
    """Row-wise log-sum-exp and softmax; -inf entries are excluded."""
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s))[:, 0], e / s


def hardness_weights(s_negatives, beta: float, tau: float) -> np.ndarray:
    """Weights ``(B-1) * exp(beta*s_j/tau) / sum_k exp(beta*s_k/tau)`` over one anchor's negatives."""
    s = np.asarray(s_negatives, dtype=np.float64).ravel()
    if s.size < 1:
        raise ValueError("need at least one negative")
    z = beta * s / tau
    e = np.exp(z - z.max())
    return s.size * e / e.sum()


def hardness_weight_matrix(M, beta, tau):
    """Full B x B weight matrix for anchors in rows (diagonal set to 0)."""
    M = np.asarray(M, dtype=np.float64)
    B = M.shape[0]
    off = ~np.eye(B, dtype=bool)
    z = np.where(off, beta * M / tau, -np.inf)
    _, q = _lse_rows(z)
    return (B - 1) * q


def _direction(M, beta, tau, decoupled):
    """Per-anchor losses and dL/dM for one direction."""
    B = M.shape[0]
    diag = np.eye(B, dtype=bool)
    pos = np.diag(M) / tau
    neg_mask = np.where(diag, -np.inf, 0.0)
    # log sum_{j!=i} exp(M_ij/tau) * W_ij
    #   = log(B-1) + LSE_neg((1+beta) M / tau) - LSE_neg(beta M / tau)
    lse_a, p = _lse_rows((1.0 + beta) * M / tau + neg_mask)
    if beta > 0:
        lse_b, q = _lse_rows(beta * M / tau + neg_mask)
    else:
        lse_b, q = np.full(B, np.log(B - 1.0)), np.zeros((B, B))
    log_neg = np.log(B - 1.0) + lse_a - lse_b
    d_neg = ((1.0 + beta) * p - beta * q) / tau

    grad = np.zeros((B, B))
    if decoupled:
        per_anchor = -pos + log_neg
        grad += d_neg
        grad[diag] = -1.0 / tau
    else:
        log_z = np.logaddexp(pos, log_neg)
        per_anchor = -pos + log_z
        w_pos = np.exp(pos - log_z)
        grad += (1.0 - w_pos)[:, None] * d_neg
        grad[diag] = (w_pos - 1.0) / tau
    return per_anchor, grad


def _evaluate(batch: EmbeddingBatch, cfg: LossConfig):
    I, T = batch.image_embeddings, batch.text_embeddings
    if not (np.isfinite(I).all() and np.isfinite(T).all()):
        raise ValueError("embeddings contain non-finite values")
    S = similarity_matrix(batch)
    decoupled = cfg.variant in ("dcl", "dhn_nce")
    hard = cfg.variant in ("hn_nce", "dhn_nce")
    b1 = cfg.beta1 if hard else 0.0
    b2 = cfg.beta2 if hard else 0.0
    l_vt, g_vt = _direction(S, b1, cfg.temperature, decoupled)
    l_tv, g_tv = _direction(S.T, b2, cfg.temperature, decoupled)
    scale = 1.0 / batch.size if cfg.reduce == "mean" else 1.0
    v2t = float(l_vt.sum()) * scale
    t2v = float(l_tv.sum()) * scale
    g_S = (g_vt + g_tv.T) * scale
    return LossValue(v2t + t2v, v2t, t2v), g_S, I, T


def loss_value(batch: EmbeddingBatch, cfg: LossConfig) -> LossValue:
    value, _, _, _ = _evaluate(batch, cfg)
    if not np.isfinite(value.total):
        raise FloatingPointError("loss is not finite")
    return value


def loss_gradient(batch: EmbeddingBatch, cfg: LossConfig):
    """``(dL/dI, dL/dT)`` with respect to the embedding matrices as given."""
    _, g_S, I, T = _evaluate(batch, cfg)
    return g_S @ T, g_S.T @ I


def loss_and_gradient(batch: EmbeddingBatch, cfg: LossConfig):
    value, g_S, I, T = _evaluate(batch, cfg)
    if not np.isfinite(value.total):
        raise FloatingPointError("loss is not finite")
    return value, (g_S @ T, g_S.T @ I)
