"""Compatibility losses with analytic gradients.

Embedding-space term: weighted multi-positive contrastive loss of a new anchor
against frozen old embeddings, weighted by the cosine consensus of the old
anchor and each old positive. Discriminative-space term: the same form over
logits of the frozen new classifier. Plus softmax cross-entropy, the weighted
total and the L2-regression baseline.

Single-anchor functions are thin wrappers over the batched kernels that the
trainer uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, EmptySetError, ParameterError
from .numeric import as_vec, softmax

DEFAULT_ALPHA = 0.01
DEFAULT_BETA = 0.01
DEFAULT_TAU = 1.0


@dataclass
class LossWithGrad:
    value: float
    grad: np.ndarray
    skipped: bool = False


def consensus_weight(old_i, old_p) -> float:
    old_i, old_p = as_vec(old_i), as_vec(old_p)
    ni, np_ = np.linalg.norm(old_i), np.linalg.norm(old_p)
    if ni == 0.0 or np_ == 0.0:
        raise DegenerateInputError("consensus weight undefined for a zero vector")
    cos = float(old_i @ old_p) / (ni * np_)
    return min(1.0, max(0.0, 0.5 * (cos + 1.0)))


def consensus_weights(old_anchors, old_bank) -> np.ndarray:
    """Pairwise weights, shape (n_anchors, n_bank)."""
    A, B = np.atleast_2d(as_vec(old_anchors)), np.atleast_2d(as_vec(old_bank))
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("consensus weight undefined for a zero vector")
    cos = (A / na) @ (B / nb).T
    return np.clip(0.5 * (cos + 1.0), 0.0, 1.0)


def affinity_scores(anchor, candidates, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Softmax of anchor·candidate/tau across the candidate set.

    Vectors are used as given; callers apply the normalization policy.
    """
    candidates = np.atleast_2d(as_vec(candidates))
    if candidates.shape[0] == 0 or candidates.size == 0:
        raise EmptySetError("affinity scores need at least one candidate")
    return softmax(candidates @ as_vec(anchor), tau)


def _normalize_rows(x):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalize a zero vector")
    return x / norm, norm


def contrastive_batch(anchors, bank, cand_mask, pos_mask, weights, tau=DEFAULT_TAU, normalize=True):
    """Weighted contrastive loss for a batch of anchors against a fixed bank.

    anchors: (b, d) raw anchor vectors; bank: (n, d) fixed vectors.
    cand_mask / pos_mask: (b, n) booleans for A(i) and P(i) (pos must be within cand).
    weights: (b, n) consensus weights, read only where pos_mask is set.

    Returns per-anchor losses (b,), gradients w.r.t. the raw anchors (b, d) and
    a boolean mask of anchors skipped for having no positive.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    anchors = np.atleast_2d(as_vec(anchors))
    bank = np.atleast_2d(as_vec(bank))
    if anchors.shape[1] != bank.shape[1]:
        raise DimensionError(f"anchor dim {anchors.shape[1]} != bank dim {bank.shape[1]}")
    cand_mask = np.asarray(cand_mask, dtype=bool)
    pos_mask = np.asarray(pos_mask, dtype=bool) & cand_mask
    if normalize:
        a_hat, a_norm = _normalize_rows(anchors)
        # rows outside every candidate set may be placeholders (e.g. zeros)
        used = cand_mask.any(axis=0)
        o_hat = np.zeros_like(bank)
        o_hat[used], _ = _normalize_rows(bank[used])
    else:
        a_hat, o_hat = anchors, bank

    skipped = ~pos_mask.any(axis=1)
    logits = np.where(cand_mask, (a_hat @ o_hat.T) / tau, -np.inf)
    no_cand = ~cand_mask.any(axis=1)
    row_max = np.max(logits, axis=1, keepdims=True)
    row_max[no_cand] = 0.0
    shifted = np.where(cand_mask, logits - row_max, -np.inf)
    log_z = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True) + no_cand[:, None])
    log_s = np.where(cand_mask, shifted - log_z, 0.0)
    s = np.where(cand_mask, np.exp(log_s), 0.0)

    w = np.where(pos_mask, as_vec(weights), 0.0)
    values = -np.sum(w * log_s, axis=1)
    values[skipped] = 0.0
    # d/d a_hat: (1/tau) * sum_p w_p (sum_a s_a o_a - o_p)
    g_hat = (w.sum(axis=1, keepdims=True) * (s @ o_hat) - w @ o_hat) / tau
    g_hat[skipped] = 0.0
    if normalize:
        radial = np.sum(g_hat * a_hat, axis=1, keepdims=True)
        grads = (g_hat - a_hat * radial) / a_norm
    else:
        grads = g_hat
    return values, grads, skipped


def _single(anchor, candidates, positive_idx, weights, tau, normalize):
    anchor = as_vec(anchor)
    candidates = np.atleast_2d(as_vec(candidates))
    if candidates.size == 0:
        raise EmptySetError("candidate set A(i) is empty")
    n = candidates.shape[0]
    pos = np.zeros((1, n), dtype=bool)
    w = np.zeros((1, n))
    positive_idx = list(positive_idx)
    if positive_idx:
        pos[0, positive_idx] = True
        w[0, positive_idx] = as_vec(weights)
    values, grads, skipped = contrastive_batch(
        anchor[None, :], candidates, np.ones((1, n), dtype=bool), pos, w, tau, normalize)
    return LossWithGrad(float(values[0]), grads[0], bool(skipped[0]))


def loss_l1(anchor_new, candidates, positive_idx, weights, tau=DEFAULT_TAU, normalize=True) -> LossWithGrad:
    """Embedding-space loss for one anchor.

    candidates: old embeddings of A(i); positive_idx: rows of ``candidates``
    forming P(i); weights: one consensus weight per positive. The gradient is
    w.r.t. the raw (unnormalized) new anchor embedding. An empty P(i) returns
    zero loss with ``skipped=True``.
    """
    return _single(anchor_new, candidates, positive_idx, weights, tau, normalize)


def loss_l2_discriminative(anchor_logits, candidate_logits, positive_idx, weights, tau=DEFAULT_TAU,
                           normalize=False) -> LossWithGrad:
    """Discriminative-space loss on logit vectors.

    By default logits enter as-is; ``normalize=True`` compares unit logit
    vectors instead (what the trainer uses by default, see
    ``TrainingConfig.normalize_logits``). The gradient is w.r.t. the raw
    ``anchor_logits``; callers chain it through the frozen classifier.
    """
    return _single(anchor_logits, candidate_logits, positive_idx, weights, tau, normalize)


def cross_entropy_batch(logits, labels):
    logits = np.atleast_2d(as_vec(logits))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    K = logits.shape[1]
    if np.any(labels < 0) or np.any(labels >= K):
        raise IndexError(f"label out of range for {K} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    values = -log_p[rows, labels]
    grads = np.exp(log_p)
    grads[rows, labels] -= 1.0
    return values, grads


def loss_classification(logits, label: int) -> LossWithGrad:
    values, grads = cross_entropy_batch(as_vec(logits)[None, :], [label])
    return LossWithGrad(float(values[0]), grads[0])


def loss_total(l_new: float, l1: float, l2: float, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA) -> float:
    if alpha < 0 or beta < 0:
        raise ParameterError("loss coefficients must be non-negative")
    return l_new + alpha * l1 + beta * l2


def loss_l2_regression(new_emb, old_emb) -> LossWithGrad:
    new_emb, old_emb = as_vec(new_emb), as_vec(old_emb)
    if new_emb.shape != old_emb.shape:
        raise DimensionError(f"shape mismatch {new_emb.shape} vs {old_emb.shape}; pad the old embedding first")
    diff = new_emb - old_emb
    return LossWithGrad(float(np.sum(diff * diff)), 2.0 * diff)
