"""Reliable-neighbor prediction for unlabeled target samples.

Two modes produce the per-sample neighbor set: a plain cosine threshold on
the candidate similarities, or a small logistic classifier over aggregated
neighborhood features trained with binary cross-entropy on labeled source
pairs. Predicted sets accumulate in a NeighborMemory for group building.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding_store import MemoryBank
from .errors import PredictorNotReadyError
from .optim import Adam

N_FEATURES = 4  # own sim, mean sim to other candidates, max sim, rank fraction


@dataclass
class CandidateSet:
    """k nearest bank entries of one query, self excluded, similarities descending."""

    owner: int
    members: np.ndarray       # (k,) bank indices
    similarities: np.ndarray  # (k,) cosine values, descending
    member_vectors: np.ndarray = field(repr=False, default=None)  # (k, d)


@dataclass
class NeighborSet:
    """Predicted same-identity set of one sample; always contains the owner."""

    owner: int
    members: np.ndarray  # includes owner
    scores: np.ndarray   # acceptance score per member; owner scores 1


def candidates(bank: MemoryBank, owner: int, k: int, query=None) -> CandidateSet:
    """Top-k bank neighbors of the query (default: the owner's bank entry),
    excluding the owner itself."""
    if not 0 <= owner < bank.size:
        raise IndexError(f"owner index {owner} out of range")
    if not 1 <= k < bank.size:
        raise ValueError(f"k must lie in [1, {bank.size - 1}], got {k}")
    if query is None:
        query = bank.vectors[owner]
    sims = bank.similarities(query)
    order = np.argsort(-sims, kind="stable")[: k + 1]
    order = order[order != owner][:k]
    return CandidateSet(
        owner=owner,
        members=order,
        similarities=sims[order],
        member_vectors=bank.vectors[order],
    )


def predict_threshold(cands: CandidateSet, threshold: float) -> NeighborSet:
    """Admit candidates whose raw cosine similarity reaches the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    keep = cands.similarities >= threshold
    members = np.concatenate(([cands.owner], cands.members[keep]))
    scores = np.concatenate(([1.0], cands.similarities[keep]))
    return NeighborSet(cands.owner, members, scores)


def candidate_features(cands: CandidateSet) -> np.ndarray:
    """Per-candidate aggregated features for the learned predictor."""
    sims = np.asarray(cands.similarities, dtype=np.float64)
    k = sims.size
    ranks = np.arange(k, dtype=np.float64) / k
    if k == 1:
        mean_other = np.zeros(1)
        max_other = np.zeros(1)
    else:
        cross = cands.member_vectors @ cands.member_vectors.T
        np.fill_diagonal(cross, 0.0)
        mean_other = cross.sum(axis=1) / (k - 1)
        cross_masked = cross.copy()
        np.fill_diagonal(cross_masked, -np.inf)
        max_other = cross_masked.max(axis=1)
    return np.column_stack([sims, mean_other, max_other, ranks])


class GppLiteModel:
    """Logistic classifier over candidate_features with its own Adam state.

    Trained by binary cross-entropy on labeled source pairs; its gradient
    never reaches the embedding model.
    """

    def __init__(self, lr: float = 0.05):
        self.w = np.zeros(N_FEATURES)
        self.b = 0.0
        self.steps = 0
        self.opt = Adam(lr)

    @property
    def ready(self) -> bool:
        return self.steps > 0

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = features @ self.w + self.b
        return 1.0 / (1.0 + np.exp(-z))

    def bce_with_grads(self, features, targets):
        """Mean binary cross-entropy and its gradient wrt (w, b)."""
        features = np.asarray(features, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        z = features @ self.w + self.b
        # log(1+e^z) computed stably on both branches
        value = float(np.mean(np.logaddexp(0.0, z) - targets * z))
        p = 1.0 / (1.0 + np.exp(-z))
        dz = (p - targets) / targets.size
        return value, features.T @ dz, float(dz.sum())

    def state_dict(self) -> dict:
        return {"w": self.w.copy(), "b": self.b, "steps": self.steps, "opt": self.opt.state_dict()}

    @classmethod
    def from_state(cls, state: dict) -> "GppLiteModel":
        model = cls()
        model.w = np.array(state["w"], dtype=np.float64)
        model.b = float(state["b"])
        model.steps = int(state["steps"])
        model.opt = Adam.from_state(state["opt"])
        return model


def predict_learned(model: GppLiteModel, cands: CandidateSet, threshold: float) -> NeighborSet:
    """Admit candidates whose predicted same-identity probability reaches the
    threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if not model.ready:
        raise PredictorNotReadyError("predictor not ready: no training step has run")
    probs = model.predict_proba(candidate_features(cands))
    keep = probs >= threshold
    members = np.concatenate(([cands.owner], cands.members[keep]))
    scores = np.concatenate(([1.0], probs[keep]))
    return NeighborSet(cands.owner, members, scores)


def train_gpp_step(model: GppLiteModel, embeddings, labels) -> float:
    """One cross-entropy step on (query, candidate) pairs of a labeled batch.

    Every batch member serves as a query against the others, ranked by cosine
    similarity; a pair is positive when the identities match. Returns the mean
    loss before the update.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    b = e.shape[0]
    if np.unique(labels).size < 2:
        raise ValueError("no negative pairs: batch holds a single identity")
    sims = e @ e.T

    feats = []
    targets = []
    for q in range(b):
        others = np.delete(np.arange(b), q)
        order = others[np.argsort(-sims[q, others], kind="stable")]
        cands = CandidateSet(
            owner=q,
            members=order,
            similarities=sims[q, order],
            member_vectors=e[order],
        )
        feats.append(candidate_features(cands))
        targets.append((labels[order] == labels[q]).astype(np.float64))
    feats = np.concatenate(feats)
    targets = np.concatenate(targets)

    value, gw, gb = model.bce_with_grads(feats, targets)
    params = {"w": model.w, "b": np.array([model.b])}
    bias = params["b"]
    model.opt.step(params, {"w": gw, "b": np.array([gb])})
    model.b = float(bias[0])
    model.steps += 1
    return value


class NeighborMemory:
    """Per-sample neighbor sets for the current epoch, entry i starting as {i}.

    When retain_previous is set, start_epoch() keeps a copy of the outgoing
    sets so the two-epoch vote policy can intersect them.
    """

    def __init__(self, n: int, retain_previous: bool = False):
        if n < 1:
            raise ValueError("memory needs at least one entry")
        self.n = n
        self.retain_previous = retain_previous
        self.members = [np.array([i], dtype=np.intp) for i in range(n)]
        self.scores = [np.array([1.0]) for _ in range(n)]
        self.prev_members: list[np.ndarray] | None = None
        self.prev_scores: list[np.ndarray] | None = None

    def record(self, neighbors: NeighborSet) -> None:
        """Replace (not union) the owner's entry for the current epoch."""
        i = neighbors.owner
        if not 0 <= i < self.n:
            raise IndexError(f"owner index {i} out of range")
        self.members[i] = np.asarray(neighbors.members, dtype=np.intp)
        self.scores[i] = np.asarray(neighbors.scores, dtype=np.float64)

    def start_epoch(self) -> None:
        if self.retain_previous:
            self.prev_members = [m.copy() for m in self.members]
            self.prev_scores = [s.copy() for s in self.scores]

    def voted_members(self, i: int) -> np.ndarray:
        """Current-and-previous intersection, with the owner always kept."""
        if self.prev_members is None:
            return self.members[i]
        keep = np.intersect1d(self.members[i], self.prev_members[i])
        if i not in keep:
            keep = np.concatenate(([i], keep))
        return np.asarray(np.sort(keep), dtype=np.intp)

    def score_of(self, i: int, member: int) -> float:
        hits = np.flatnonzero(self.members[i] == member)
        return float(self.scores[i][hits[0]]) if hits.size else 0.0
