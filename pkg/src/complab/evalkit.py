"""Retrieval metrics (CMC, mAP) and pseudo-label pair quality.

Single-query protocol: the gallery is ranked by cosine similarity per query,
entries sharing the query's sample id are dropped, and queries whose identity
is absent from the remaining gallery are excluded with a warning. Pair
metrics count unordered pairs once, self-pairs excluded.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .group_builder import GroupPartition
from .neighbor_predictor import NeighborMemory

DEFAULT_CMC_RANKS = (1, 5, 10)


@dataclass
class PairQuality:
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    map: float
    cmc: dict[int, float]
    cmc_curve: np.ndarray = field(repr=False, default=None)  # ranks 1..max
    num_queries: int = 0
    neighbor_quality: PairQuality | None = None
    group_quality: PairQuality | None = None

    def to_dict(self) -> dict:
        out = {
            "map": self.map,
            "cmc": {str(k): v for k, v in self.cmc.items()},
            "cmc_curve": None if self.cmc_curve is None else [float(x) for x in self.cmc_curve],
            "num_queries": self.num_queries,
        }
        for name, q in (("neighbor", self.neighbor_quality), ("group", self.group_quality)):
            if q is not None:
                out[f"{name}_precision"] = q.precision
                out[f"{name}_recall"] = q.recall
                out[f"{name}_f1"] = q.f1
        return out

    def csv_header_and_row(self) -> tuple[str, str]:
        d = self.to_dict()
        flat = {"map": d["map"], "num_queries": d["num_queries"]}
        for k in sorted(self.cmc):
            flat[f"cmc{k}"] = self.cmc[k]
        for name in ("neighbor", "group"):
            for metric in ("precision", "recall", "f1"):
                key = f"{name}_{metric}"
                if key in d:
                    flat[key] = d[key]
        header = ",".join(flat)
        row = ",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in flat.values())
        return header, row


def harmonic_f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def retrieval_eval(query_vecs, query_labels, gallery_vecs, gallery_labels,
                   query_ids=None, gallery_ids=None,
                   cmc_ranks=DEFAULT_CMC_RANKS) -> MetricsReport:
    """mAP and CMC of ranking the gallery by cosine similarity per query.

    AP per query is the mean of precision-at-r over the positive positions r;
    CMC rank-k is the fraction of queries with at least one positive in the
    top k. Pass ids to exclude same-sample gallery entries from a query's
    ranking.
    """
    q = np.asarray(query_vecs, dtype=np.float64)
    g = np.asarray(gallery_vecs, dtype=np.float64)
    q_labels = np.asarray(query_labels)
    g_labels = np.asarray(gallery_labels)
    q_ids = None if query_ids is None else np.asarray(query_ids)
    g_ids = None if gallery_ids is None else np.asarray(gallery_ids)

    max_rank = max(cmc_ranks)
    sims = q @ g.T
    aps = []
    cmc_hits = []
    for qi in range(q.shape[0]):
        keep = np.ones(g.shape[0], dtype=bool)
        if q_ids is not None and g_ids is not None:
            keep = g_ids != q_ids[qi]
        order = np.argsort(-sims[qi, keep], kind="stable")
        matches = (g_labels[keep][order] == q_labels[qi])
        num_rel = int(matches.sum())
        if num_rel == 0:
            warnings.warn(f"query {qi} excluded: identity absent from gallery")
            continue
        positions = np.flatnonzero(matches) + 1
        precision_at = np.arange(1, num_rel + 1) / positions
        aps.append(precision_at.mean())
        hits = np.zeros(max_rank)
        first = positions[0]
        if first <= max_rank:
            hits[first - 1:] = 1.0
        cmc_hits.append(hits)

    if not aps:
        raise ValueError("no valid queries: every identity is absent from the gallery")
    curve = np.mean(cmc_hits, axis=0)
    cmc = {k: float(curve[min(k, max_rank) - 1]) for k in cmc_ranks}
    return MetricsReport(
        map=float(np.mean(aps)),
        cmc=cmc,
        cmc_curve=curve,
        num_queries=len(aps),
    )


def _neighbor_pairs(memory: NeighborMemory) -> set[tuple[int, int]]:
    pairs = set()
    for i, members in enumerate(memory.members):
        for j in members:
            j = int(j)
            if j != i:
                pairs.add((i, j) if i < j else (j, i))
    return pairs


def _true_pair_count(truth: np.ndarray) -> int:
    _, counts = np.unique(truth, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def pair_quality(structure, truth) -> PairQuality:
    """Precision/recall/F1 of the same-identity pairs a structure implies.

    Accepts a NeighborMemory (pairs (i, j) with j in i's set), a
    GroupPartition or a plain label array (all within-group pairs).
    Empty implied or true pair sets score 0 by convention.
    """
    truth = np.asarray(truth)
    total_true = _true_pair_count(truth)

    if isinstance(structure, NeighborMemory):
        pairs = _neighbor_pairs(structure)
        implied = len(pairs)
        correct = sum(1 for i, j in pairs if truth[i] == truth[j])
    else:
        labels = structure.labels if isinstance(structure, GroupPartition) else np.asarray(structure)
        implied = 0
        correct = 0
        for g in np.unique(labels):
            members = np.flatnonzero(labels == g)
            implied += members.size * (members.size - 1) // 2
            _, counts = np.unique(truth[members], return_counts=True)
            correct += int((counts * (counts - 1) // 2).sum())

    precision = correct / implied if implied else 0.0
    recall = correct / total_true if total_true else 0.0
    return PairQuality(precision, recall, harmonic_f1(precision, recall))
