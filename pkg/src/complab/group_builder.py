"""Size-capped group construction from accumulated neighbor sets.

Samples whose neighbor sets share a common member are transitively merged
with union-find, processing candidate merges strongest-first so the size
cap (taken from the largest DBSCAN cluster) preferentially rejects weak,
likely cross-identity links.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .neighbor_predictor import NeighborMemory

POLICY_BASIC = "basic"
POLICY_MIN_COMMON = "min_common"
POLICY_VOTE = "two_epoch_vote"
POLICIES = (POLICY_BASIC, POLICY_MIN_COMMON, POLICY_VOTE)


@dataclass
class DbscanParams:
    eps: float
    min_pts: int = 4

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 2:
            raise ValueError("min_pts must be at least 2")


@dataclass
class DbscanResult:
    clusters: list[np.ndarray]
    noise: np.ndarray
    max_cluster_size: int  # falls back to n when no cluster forms


@dataclass
class MergePolicy:
    variant: str = POLICY_BASIC
    min_common: int = 1

    def __post_init__(self):
        if self.variant not in POLICIES:
            raise ValueError(f"unknown merge policy {self.variant!r}")
        if self.min_common < 1:
            raise ValueError("min_common must be at least 1")

    @classmethod
    def basic(cls) -> "MergePolicy":
        return cls(POLICY_BASIC)

    @classmethod
    def with_min_common(cls, c: int) -> "MergePolicy":
        return cls(POLICY_MIN_COMMON, min_common=c)

    @classmethod
    def vote(cls) -> "MergePolicy":
        return cls(POLICY_VOTE)

    @property
    def required_common(self) -> int:
        return self.min_common if self.variant == POLICY_MIN_COMMON else 1


@dataclass
class GroupPartition:
    labels: np.ndarray         # one contiguous group id per sample
    groups: list[np.ndarray]   # groups[g] = sorted member indices
    cap: int


def cosine_eps_heuristic(vectors, percentile: float = 1.6, max_points: int = 2000) -> float:
    """eps as a low percentile of the pairwise cosine-distance distribution.

    Large banks are thinned with an even index stride so the value is
    reproducible without an rng.
    """
    v = np.asarray(getattr(vectors, "vectors", vectors), dtype=np.float64)
    n = v.shape[0]
    if n > max_points:
        v = v[np.linspace(0, n - 1, max_points).astype(np.intp)]
        n = max_points
    dist = 1.0 - v @ v.T
    tri = dist[np.triu_indices(n, k=1)]
    eps = float(np.percentile(tri, percentile))
    return max(eps, 1e-12)


def dbscan(vectors, params: DbscanParams) -> DbscanResult:
    """Textbook DBSCAN over cosine distance (1 - dot of unit vectors).

    The eps-neighborhood is closed and includes the point itself; seeds are
    visited in ascending index order with FIFO expansion, which pins border
    point assignment deterministically.
    """
    v = np.asarray(getattr(vectors, "vectors", vectors), dtype=np.float64)
    n = v.shape[0]
    dist = 1.0 - v @ v.T
    neighborhoods = [np.flatnonzero(dist[i] <= params.eps) for i in range(n)]
    core = np.array([nb.size >= params.min_pts for nb in neighborhoods])

    labels = np.full(n, -1, dtype=np.intp)  # -1 = unassigned/noise
    cluster_id = 0
    for seed in range(n):
        if labels[seed] != -1 or not core[seed]:
            continue
        labels[seed] = cluster_id
        queue = deque(neighborhoods[seed])
        while queue:
            j = queue.popleft()
            if labels[j] != -1:
                continue
            labels[j] = cluster_id
            if core[j]:
                queue.extend(neighborhoods[j])
        cluster_id += 1

    clusters = [np.flatnonzero(labels == c) for c in range(cluster_id)]
    noise = np.flatnonzero(labels == -1)
    max_size = max((c.size for c in clusters), default=n)
    if not clusters:
        max_size = n
    return DbscanResult(clusters, noise, int(max_size))


class UnionFind:
    """Array union-find with path compression and component sizes."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.intp)
        self.size = np.ones(n, dtype=np.intp)

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return int(root)

    def union_capped(self, a: int, b: int, cap: int) -> bool:
        """Merge the components of a and b unless the union would exceed cap."""
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return True
        if self.size[ra] + self.size[rb] > cap:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True


def _effective_sets(memory: NeighborMemory, policy: MergePolicy):
    if policy.variant == POLICY_VOTE:
        return [memory.voted_members(i) for i in range(memory.n)]
    return memory.members


def merge_groups(memory: NeighborMemory, cap: int, policy: MergePolicy | None = None) -> GroupPartition:
    """Transitively merge samples whose neighbor sets share enough members.

    Candidate merges are applied in descending link strength (shared count,
    then summed membership scores, then pair order); a merge is skipped when
    it would push the component past the cap.
    """
    if cap < 1:
        raise ValueError("cap must be at least 1")
    policy = policy or MergePolicy.basic()
    n = memory.n
    sets = _effective_sets(memory, policy)

    owners_of = defaultdict(list)  # member -> owners whose set contains it
    for i, members in enumerate(sets):
        for m in members:
            owners_of[int(m)].append(i)

    shared_count: dict[tuple[int, int], int] = defaultdict(int)
    shared_score: dict[tuple[int, int], float] = defaultdict(float)
    for m, owners in owners_of.items():
        if len(owners) < 2:
            continue
        for ai in range(len(owners)):
            i = owners[ai]
            si = memory.score_of(i, m)
            for bi in range(ai + 1, len(owners)):
                j = owners[bi]
                pair = (i, j)
                shared_count[pair] += 1
                shared_score[pair] += si + memory.score_of(j, m)

    required = policy.required_common
    edges = [(-c, -shared_score[pair], pair[0], pair[1])
             for pair, c in shared_count.items() if c >= required]
    edges.sort()

    uf = UnionFind(n)
    for _, _, i, j in edges:
        uf.union_capped(i, j, cap)

    roots = np.fromiter((uf.find(i) for i in range(n)), dtype=np.intp, count=n)
    # contiguous ids in order of each group's smallest member
    order = {}
    for i in range(n):
        if roots[i] not in order:
            order[roots[i]] = len(order)
    labels = np.fromiter((order[r] for r in roots), dtype=np.intp, count=n)
    groups = [np.flatnonzero(labels == g) for g in range(len(order))]
    return GroupPartition(labels, groups, int(cap))


def assign_labels(partition: GroupPartition) -> np.ndarray:
    """Group pseudo label per sample; stable for a fixed partition."""
    return partition.labels.copy()
