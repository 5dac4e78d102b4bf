"""BPR ranking loss and the cross-view InfoNCE invariance loss, with analytic gradients."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit, logsumexp, softmax

log = logging.getLogger(__name__)


def bpr_loss(scores_pos: np.ndarray, scores_neg: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed ``-log sigmoid(pos - neg)``.

    Returns the loss and its gradients with respect to the positive and
    negative scores.
    """
    scores_pos = np.asarray(scores_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    if scores_pos.shape != scores_neg.shape:
        raise ValueError("positive and negative scores must have equal length")
    diff = scores_pos - scores_neg
    loss = float(np.logaddexp(0.0, -diff).sum())
    g = -expit(-diff)
    return loss, g, -g


def _normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0.0
    if zero.any():
        log.warning("%d zero-norm representation(s) in InfoNCE; cosine set to 0", int(zero.sum()))
    safe = np.where(zero, 1.0, norms)
    return x / safe[:, None], safe


def _normalize_backward(x_hat: np.ndarray, norms: np.ndarray, grad_hat: np.ndarray) -> np.ndarray:
    proj = np.sum(x_hat * grad_hat, axis=1, keepdims=True)
    return (grad_hat - x_hat * proj) / norms[:, None]


def infonce_loss(view_plus: np.ndarray, view_minus: np.ndarray, tau: float
                 ) -> tuple[float, np.ndarray, np.ndarray]:
    """InfoNCE between row-aligned representations of the same nodes in two views.

    Anchor ``a`` in ``view_plus`` is positive with row ``a`` of ``view_minus``
    and negative with every other row. Similarity is cosine, every logit is
    divided by ``tau``. Summed over anchors.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if view_plus.shape != view_minus.shape:
        raise ValueError("views must represent the same node set")
    n = view_plus.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(view_plus), np.zeros_like(view_minus)
    p_hat, p_norm = _normalize_rows(view_plus)
    m_hat, m_norm = _normalize_rows(view_minus)
    logits = p_hat @ m_hat.T / tau
    loss = float(np.sum(logsumexp(logits, axis=1) - np.diag(logits)))
    g_logits = softmax(logits, axis=1)
    g_logits[np.diag_indices(n)] -= 1.0
    g_p_hat = g_logits @ m_hat / tau
    g_m_hat = g_logits.T @ p_hat / tau
    return (loss,
            _normalize_backward(p_hat, p_norm, g_p_hat),
            _normalize_backward(m_hat, m_norm, g_m_hat))


def invariance_loss(z_plus: np.ndarray, z_minus: np.ndarray, n_users: int,
                    users: np.ndarray, items: np.ndarray, tau: float
                    ) -> tuple[float, np.ndarray, np.ndarray]:
    """User-side plus item-side InfoNCE on sampled node sets.

    ``z_plus``/``z_minus`` hold all nodes (users first). Gradients come back
    as full node-by-dim arrays.
    """
    grad_plus = np.zeros_like(z_plus)
    grad_minus = np.zeros_like(z_minus)
    total = 0.0
    for nodes in (np.asarray(users), n_users + np.asarray(items)):
        loss, gp, gm = infonce_loss(z_plus[nodes], z_minus[nodes], tau)
        total += loss
        grad_plus[nodes] += gp
        grad_minus[nodes] += gm
    return total, grad_plus, grad_minus


def combined_objective(rec_plus: float, rec_minus: float, inv: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return (rec_plus + rec_minus) + lam * inv
