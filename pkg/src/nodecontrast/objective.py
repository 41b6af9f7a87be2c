"""Node-wise contrastive loss with negative weighting and exact gradients.

Per anchor: -log( e^{s+/t} / (e^{s+/t} + sum_j w_j e^{s_j/t}) ) with
dot-product scores, computed with max-score subtraction for stability.
Weights are inputs here (see `negative_weights`); gradients treat them as
constants, and negatives are table embeddings whose gradients the batch
reduction discards (stop-gradient negatives).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LossTerms:
    """One anchor's loss value and the gradients of every participant."""

    anchor: int
    pos_score: float
    neg_scores: np.ndarray
    weights: np.ndarray
    tau: float
    loss: float
    grad_hq: np.ndarray
    grad_hk: np.ndarray
    grad_negs: np.ndarray
    tau_w: float | None = None


def score(h_a: np.ndarray, h_b: np.ndarray) -> float:
    """Agreement score: plain dot product."""
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_a.shape != h_b.shape:
        raise ValueError("score needs vectors of equal dimension")
    return float(h_a @ h_b)


def negative_weights(h_q: np.ndarray, negs: np.ndarray, tau_w: float) -> np.ndarray:
    """Hardness weights for a set of negatives.

    Raw w_j = (h_q . h_j) / tau_w, clamped below at 0, then rescaled so the
    weights average to 1 over the set. If everything clamps to zero the
    weights all become 1 (uniform). Invariant to positive scaling of tau_w.
    """
    if tau_w <= 0:
        raise ValueError("tau_w must be positive")
    negs = np.atleast_2d(np.asarray(negs, dtype=np.float64))
    if negs.shape[0] == 0:
        return np.zeros(0)
    raw = (negs @ np.asarray(h_q, dtype=np.float64)) / tau_w
    clamped = np.maximum(raw, 0.0)
    mean = clamped.mean()
    if mean == 0.0:
        return np.ones_like(clamped)
    return clamped / mean


def contrastive_loss(h_q, h_k, negs, weights, tau: float,
                     anchor: int = -1) -> LossTerms:
    """Per-anchor weighted contrastive term with exact gradients.

    Empty negatives give loss 0 with zero gradients. Non-finite scores are
    an error. Gradients are returned for h_q, h_k and every negative; the
    caller decides which to apply.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    h_q = np.asarray(h_q, dtype=np.float64)
    h_k = np.asarray(h_k, dtype=np.float64)
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, h_q.shape[0])
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != negs.shape[0]:
        raise ValueError("one weight per negative required")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")

    pos = float(h_q @ h_k)
    neg_scores = negs @ h_q if negs.shape[0] else np.zeros(0)
    if not np.isfinite(pos) or not np.all(np.isfinite(neg_scores)):
        raise ValueError("non-finite contrastive scores")

    a_pos = pos / tau
    a_neg = neg_scores / tau
    shift = max(a_pos, a_neg.max()) if a_neg.size else a_pos
    e_pos = np.exp(a_pos - shift)
    e_neg = weights * np.exp(a_neg - shift) if a_neg.size else np.zeros(0)
    denom = e_pos + e_neg.sum()
    loss = float(np.log(denom) - (a_pos - shift))

    p_pos = e_pos / denom
    p_neg = e_neg / denom
    grad_hq = ((p_pos - 1.0) * h_k + (p_neg[:, None] * negs).sum(axis=0)
               if negs.shape[0] else (p_pos - 1.0) * h_k) / tau
    grad_hk = (p_pos - 1.0) * h_q / tau
    grad_negs = p_neg[:, None] * h_q[None, :] / tau
    return LossTerms(
        anchor=anchor, pos_score=pos, neg_scores=neg_scores, weights=weights,
        tau=tau, loss=loss, grad_hq=grad_hq, grad_hk=grad_hk,
        grad_negs=grad_negs)


def contrastive_loss_multi(h_q, h_k, extra_positives, negs, weights,
                           tau: float):
    """Experimental variant: extra positive terms join the numerator.

    ``extra_positives`` are treated as constants (table snapshots); only the
    anchor's own views carry gradients. With no extras this reduces exactly
    to `contrastive_loss`. Returns (loss, grad_hq, grad_hk).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    h_q = np.asarray(h_q, dtype=np.float64)
    h_k = np.asarray(h_k, dtype=np.float64)
    extra = np.asarray(extra_positives, dtype=np.float64).reshape(-1, h_q.shape[0])
    negs = np.asarray(negs, dtype=np.float64).reshape(-1, h_q.shape[0])
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)

    pos_vecs = np.concatenate([h_k[None, :], extra], axis=0)
    a_pos = (pos_vecs @ h_q) / tau
    a_neg = (negs @ h_q) / tau if negs.shape[0] else np.zeros(0)
    if not (np.all(np.isfinite(a_pos)) and np.all(np.isfinite(a_neg))):
        raise ValueError("non-finite contrastive scores")
    shift = max(a_pos.max(), a_neg.max()) if a_neg.size else a_pos.max()
    c_pos = np.exp(a_pos - shift)
    c_neg = weights * np.exp(a_neg - shift) if a_neg.size else np.zeros(0)
    num = c_pos.sum()
    den = num + c_neg.sum()
    loss = float(np.log(den) - np.log(num))

    d_a_pos = c_pos / den - c_pos / num
    d_a_neg = c_neg / den
    grad_hq = (d_a_pos @ pos_vecs + (d_a_neg @ negs if negs.shape[0] else 0.0)) / tau
    grad_hk = d_a_pos[0] * h_q / tau
    return loss, grad_hq, grad_hk


def batch_loss(anchors, h_q_list, h_k_list, negs_list, tau: float,
               tau_w: float, use_weights: bool = True):
    """Sum of per-anchor terms plus accumulated view gradients.

    Weights come from `negative_weights` (or are unit when disabled).
    Gradients of the negatives are discarded: negatives are snapshots from
    the embedding table and are treated as constants.
    """
    total = 0.0
    grads_q, grads_k, terms = [], [], []
    for anchor, h_q, h_k, negs in zip(anchors, h_q_list, h_k_list, negs_list):
        negs = np.asarray(negs, dtype=np.float64).reshape(-1, np.asarray(h_q).shape[0])
        if use_weights and negs.shape[0]:
            weights = negative_weights(h_q, negs, tau_w)
        else:
            weights = np.ones(negs.shape[0])
        term = contrastive_loss(h_q, h_k, negs, weights, tau, anchor=anchor)
        term.tau_w = tau_w
        total += term.loss
        grads_q.append(term.grad_hq)
        grads_k.append(term.grad_hk)
        terms.append(term)
    return total, np.asarray(grads_q), np.asarray(grads_k), terms


def batch_loss_dense(h_q, h_k, negs, neg_mask, tau: float, tau_w: float,
                     use_weights: bool = True):
    """Vectorized batch loss over equal-size padded negative sets.

    ``negs`` is (B, m, d) with padded rows zeroed and ``neg_mask`` (B, m)
    flagging real entries. Returns (losses, grad_hq, grad_hk); negatives'
    gradients are dropped here by design.
    """
    if tau <= 0 or tau_w <= 0:
        raise ValueError("temperatures must be positive")
    pos = np.einsum("bd,bd->b", h_q, h_k)
    neg_scores = np.einsum("bd,bmd->bm", h_q, negs)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg_scores))):
        raise ValueError("non-finite contrastive scores")

    if use_weights:
        raw = np.maximum(neg_scores / tau_w, 0.0) * neg_mask
        counts = neg_mask.sum(axis=1)
        safe = np.maximum(counts, 1)
        mean = raw.sum(axis=1) / safe
        weights = np.where(mean[:, None] > 0, raw / np.where(mean > 0, mean, 1.0)[:, None],
                           1.0)
        weights = weights * neg_mask
    else:
        weights = neg_mask.astype(np.float64)

    a_pos = pos / tau
    a_neg = neg_scores / tau
    masked = np.where(neg_mask > 0, a_neg, -np.inf)
    shift = np.maximum(a_pos, masked.max(axis=1, initial=-np.inf))
    e_pos = np.exp(a_pos - shift)
    # padded exponents forced to 0 so exp stays finite before masking
    exponent = np.where(neg_mask > 0, a_neg - shift[:, None], 0.0)
    e_neg = weights * np.exp(exponent) * neg_mask
    denom = e_pos + e_neg.sum(axis=1)
    losses = np.log(denom) - (a_pos - shift)

    p_pos = e_pos / denom
    p_neg = e_neg / denom[:, None]
    grad_hq = ((p_pos - 1.0)[:, None] * h_k
               + np.einsum("bm,bmd->bd", p_neg, negs)) / tau
    grad_hk = (p_pos - 1.0)[:, None] * h_q / tau
    return losses, grad_hq, grad_hk
