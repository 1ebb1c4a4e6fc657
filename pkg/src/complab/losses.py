"""Loss terms of the joint objective, with closed-form gradients.

All target-side terms are defined on the softmax of bank similarities at
temperature tau; gradients are taken with respect to the input embedding
only (bank entries are constants within a step). Gradients here are for
the raw embedding argument; the normalization Jacobian of the model lives
in `l2_normalize_backward`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

# Term names used for stage gating and history logging.
TERM_SOFTMAX_SRC = "softmax_src"
TERM_TRIPLET_SRC = "triplet_src"
TERM_GPP = "gpp"
TERM_NEIGHBOR = "neighbor"
TERM_AGGREGATION = "aggregation"
TERM_TRIPLET_TGT = "triplet_tgt"
ALL_TERMS = (
    TERM_SOFTMAX_SRC,
    TERM_TRIPLET_SRC,
    TERM_GPP,
    TERM_NEIGHBOR,
    TERM_AGGREGATION,
    TERM_TRIPLET_TGT,
)


@dataclass
class TargetProbabilities:
    """Softmax over all bank entries of the scaled similarities."""

    probs: np.ndarray      # (n,) positive, sums to 1
    log_probs: np.ndarray  # (n,) kept separately: probs may underflow to 0
    temperature: float


@dataclass
class LossResult:
    value: float
    grad: np.ndarray       # dL/d(embedding); (d,) or (batch, d)
    active: bool = True    # False when the term contributed nothing


@dataclass
class HeadLossResult(LossResult):
    grad_weights: np.ndarray | None = None
    grad_bias: np.ndarray | None = None


def _scaled_logits(f, bank, temperature, sims=None):
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if sims is None:
        sims = bank.similarities(f)
    return np.asarray(sims, dtype=np.float64) / temperature


def _log_softmax(a):
    shift = a - a.max()
    lse = np.log(np.sum(np.exp(shift)))
    return shift - lse


def target_probs(f, bank, temperature, sims=None) -> TargetProbabilities:
    """Probability of recognizing embedding f as each bank entry."""
    a = _scaled_logits(f, bank, temperature, sims)
    logp = _log_softmax(a)
    return TargetProbabilities(np.exp(logp), logp, temperature)


def neighbor_loss(f, members, owner, bank, temperature, sims=None) -> LossResult:
    """Weighted cross-entropy recognizing f as each of its reliable neighbors.

    The owner carries weight 1, every other member 1/|members|; the gradient
    is the closed form C/tau * (sum_members (p_j - w_j/C) v_j + sum_rest p_k v_k),
    with C the weight total.
    """
    members = np.asarray(members, dtype=np.intp)
    if members.size == 0 or owner not in members:
        raise ValueError("neighbor set must contain its owner")
    a = _scaled_logits(f, bank, temperature, sims)
    logp = _log_softmax(a)
    p = np.exp(logp)

    w = np.full(members.size, 1.0 / members.size)
    w[members == owner] = 1.0
    c = w.sum()

    value = float(-(w * logp[members]).sum())
    coef = c * p
    coef[members] -= w
    grad = (bank.vectors.T @ coef) / temperature
    return LossResult(value, grad)


def aggregation_loss(f, members, owner, bank, temperature, sims=None) -> LossResult:
    """Negative log of the summed recognition probability of the other group members.

    The summation sits inside the log, so the gradient coefficient of each
    member, p_j * (1 - 1/sum_members p), is never positive: descent pulls f
    toward the most similar members rather than their mean. Singleton groups
    contribute nothing (active=False).
    """
    members = np.asarray(members, dtype=np.intp)
    others = members[members != owner]
    if others.size == 0:
        return LossResult(0.0, np.zeros(bank.dim), active=False)
    a = _scaled_logits(f, bank, temperature, sims)
    logp = _log_softmax(a)
    p = np.exp(logp)

    # value = LSE(all) - LSE(members); stable even when the group mass underflows
    shift = a.max()
    lse_all = shift + np.log(np.sum(np.exp(a - shift)))
    a_others = a[others]
    shift_o = a_others.max()
    lse_others = shift_o + np.log(np.sum(np.exp(a_others - shift_o)))
    value = float(lse_all - lse_others)

    restricted = np.exp(a_others - shift_o)
    restricted /= restricted.sum()
    coef = p.copy()
    coef[others] -= restricted
    grad = (bank.vectors.T @ coef) / temperature
    return LossResult(value, grad)


def batch_hard_triplet(embeddings, labels, margin: float = 0.3) -> LossResult:
    """Batch-hard triplet loss: hinge on hardest-positive minus hardest-negative
    L2 distance per anchor, averaged over anchors that have both a positive
    and a negative. Gradients flow to the anchor and its two chosen samples;
    an inactive or exactly-boundary hinge contributes zero.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    b = e.shape[0]
    sq = np.sum(e * e, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (e @ e.T), 0.0)
    dist = np.sqrt(d2)

    same = labels[:, None] == labels[None, :]
    eye = np.eye(b, dtype=bool)

    grad = np.zeros_like(e)
    total = 0.0
    n_valid = 0
    for a in range(b):
        pos = same[a] & ~eye[a]
        neg = ~same[a]
        if not pos.any() or not neg.any():
            warnings.warn(f"triplet anchor {a} skipped: no positive or no negative in batch")
            continue
        n_valid += 1
        pos_idx = np.flatnonzero(pos)
        neg_idx = np.flatnonzero(neg)
        p = pos_idx[np.argmax(dist[a, pos_idx])]
        n = neg_idx[np.argmin(dist[a, neg_idx])]
        hinge = margin + dist[a, p] - dist[a, n]
        if hinge <= 0.0:
            continue
        total += hinge
        if dist[a, p] > 0.0:
            dpos = (e[a] - e[p]) / dist[a, p]
            grad[a] += dpos
            grad[p] -= dpos
        if dist[a, n] > 0.0:
            dneg = (e[a] - e[n]) / dist[a, n]
            grad[a] -= dneg
            grad[n] += dneg
    if n_valid == 0:
        return LossResult(0.0, grad, active=False)
    return LossResult(float(total / n_valid), grad / n_valid)


class SoftmaxHead:
    """Linear M-way classifier over embeddings for the labeled source domain."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "SoftmaxHead":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def loss(self, embeddings, labels) -> HeadLossResult:
        """Mean cross-entropy over the batch, with gradients for embeddings,
        head weights, and bias."""
        e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValueError(f"label out of range [0, {self.num_classes})")
        b = e.shape[0]
        logits = e @ self.weights.T + self.bias
        shift = logits - logits.max(axis=1, keepdims=True)
        logp = shift - np.log(np.sum(np.exp(shift), axis=1, keepdims=True))
        value = float(-logp[np.arange(b), y].mean())
        dlogits = np.exp(logp)
        dlogits[np.arange(b), y] -= 1.0
        dlogits /= b
        grad_e = dlogits @ self.weights
        if np.asarray(embeddings).ndim == 1:
            grad_e = grad_e[0]
        return HeadLossResult(
            value,
            grad_e,
            grad_weights=dlogits.T @ e,
            grad_bias=dlogits.sum(axis=0),
        )


def source_softmax(head: SoftmaxHead, f, y) -> HeadLossResult:
    """Cross-entropy of a single labeled source embedding."""
    return head.loss(f, y)


def l2_normalize_backward(pre_norm, unit, grad_unit):
    """Pull a gradient back through y = x/||x||: (I - y y^T) g / ||x||.

    Accepts single vectors or batches (rows).
    """
    pre_norm = np.asarray(pre_norm, dtype=np.float64)
    unit = np.asarray(unit, dtype=np.float64)
    grad_unit = np.asarray(grad_unit, dtype=np.float64)
    if pre_norm.ndim == 1:
        norm = np.linalg.norm(pre_norm)
        return (grad_unit - unit * (unit @ grad_unit)) / norm
    norms = np.linalg.norm(pre_norm, axis=1, keepdims=True)
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norms


def active_terms(epoch: int, e1: int, e2: int) -> frozenset[str]:
    """Stage gating: source terms and the predictor objective always run;
    the neighbor term joins after e1, the group terms after e2."""
    terms = {TERM_SOFTMAX_SRC, TERM_TRIPLET_SRC, TERM_GPP}
    if epoch > e1:
        terms.add(TERM_NEIGHBOR)
    if epoch > e2:
        terms.add(TERM_AGGREGATION)
        terms.add(TERM_TRIPLET_TGT)
    return frozenset(terms)


def total_loss(term_values: dict, epoch: int, e1: int, e2: int) -> float:
    """Unweighted sum of the active terms present in term_values.

    The predictor term participates in the value but is optimized by its own
    parameters only; it never routes gradient into the embedding model.
    """
    active = active_terms(epoch, e1, e2)
    return float(sum(v for k, v in term_values.items() if k in active))
