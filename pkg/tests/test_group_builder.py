import numpy as np
import pytest

from complab.embedding_store import l2_normalize
from complab.group_builder import (
    DbscanParams,
    GroupPartition,
    MergePolicy,
    UnionFind,
    assign_labels,
    cosine_eps_heuristic,
    dbscan,
    merge_groups,
)
from complab.neighbor_predictor import NeighborMemory, NeighborSet


def dbscan_reference(vectors, eps, min_pts):
    """Textbook DBSCAN: noise marking with override, seed-list expansion."""
    n = len(vectors)
    dist = 1.0 - vectors @ vectors.T
    labels = [None] * n
    cid = 0
    for p in range(n):
        if labels[p] is not None:
            continue
        neighbors = [q for q in range(n) if dist[p][q] <= eps]
        if len(neighbors) < min_pts:
            labels[p] = -1
            continue
        labels[p] = cid
        seeds = list(neighbors)
        i = 0
        while i < len(seeds):
            q = seeds[i]
            i += 1
            if labels[q] == -1:
                labels[q] = cid
            if labels[q] is None:
                labels[q] = cid
                q_neighbors = [r for r in range(n) if dist[q][r] <= eps]
                if len(q_neighbors) >= min_pts:
                    seeds.extend(q_neighbors)
        cid += 1
    clusters = [sorted(i for i in range(n) if labels[i] == c) for c in range(cid)]
    noise = sorted(i for i in range(n) if labels[i] == -1)
    return clusters, noise


def components_oracle(member_sets):
    """Connected components of the shared-neighbor graph, by BFS."""
    n = len(member_sets)
    sets = [set(map(int, m)) for m in member_sets]
    adjacency = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if sets[i] & sets[j]:
                adjacency[i].append(j)
                adjacency[j].append(i)
    seen = [False] * n
    components = []
    for start in range(n):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        comp = []
        while queue:
            x = queue.pop()
            comp.append(x)
            for y in adjacency[x]:
                if not seen[y]:
                    seen[y] = True
                    queue.append(y)
        components.append(frozenset(comp))
    return set(components)


def memory_from_sets(member_lists, scores=None):
    mem = NeighborMemory(len(member_lists))
    for i, members in enumerate(member_lists):
        members = np.asarray(sorted(set(members) | {i}), dtype=np.intp)
        sc = np.ones(members.size) if scores is None else np.asarray(scores[i])
        mem.record(NeighborSet(i, members, sc))
    return mem


def random_memory(rng, n):
    lists = []
    for i in range(n):
        size = min(int(rng.integers(0, 4)), n)
        extra = rng.choice(n, size=size, replace=False)
        lists.append({i, *map(int, extra)})
    return memory_from_sets(lists)


def partition_sets(partition: GroupPartition):
    return {frozenset(g.tolist()) for g in partition.groups}


class TestDbscanParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            DbscanParams(eps=0.0)
        with pytest.raises(ValueError):
            DbscanParams(eps=0.1, min_pts=1)


class TestDbscan:
    def blob(self, rng, center, count, spread=0.01):
        return np.array([l2_normalize(center + spread * rng.normal(size=center.size)) for _ in range(count)])

    def test_two_separated_blobs(self):
        rng = np.random.default_rng(0)
        a = l2_normalize(np.array([1.0, 0, 0, 0]))
        b = l2_normalize(np.array([0, 1.0, 0, 0]))
        vectors = np.vstack([self.blob(rng, a, 10), self.blob(rng, b, 10)])
        result = dbscan(vectors, DbscanParams(eps=0.05, min_pts=4))
        assert len(result.clusters) == 2
        assert result.max_cluster_size == 10
        assert result.noise.size == 0
        ref_clusters, ref_noise = dbscan_reference(vectors, 0.05, 4)
        assert [c.tolist() for c in result.clusters] == ref_clusters

    def test_identical_points_form_one_cluster(self):
        v = l2_normalize(np.array([1.0, 2.0, 3.0]))
        vectors = np.tile(v, (7, 1))
        result = dbscan(vectors, DbscanParams(eps=1e-6, min_pts=4))
        assert len(result.clusters) == 1
        assert result.max_cluster_size == 7

    def test_all_noise_falls_back_to_n(self):
        vectors = np.eye(5)  # pairwise cosine distance 1
        result = dbscan(vectors, DbscanParams(eps=0.1, min_pts=2))
        assert len(result.clusters) == 0
        assert result.noise.tolist() == [0, 1, 2, 3, 4]
        assert result.max_cluster_size == 5

    def test_matches_naive_reference_on_random_sets(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            n = int(rng.integers(5, 80))
            d = int(rng.integers(2, 6))
            vectors = np.array([l2_normalize(v) for v in rng.normal(size=(n, d))])
            eps = float(rng.uniform(0.02, 0.8))
            min_pts = int(rng.integers(2, 6))
            got = dbscan(vectors, DbscanParams(eps, min_pts))
            ref_clusters, ref_noise = dbscan_reference(vectors, eps, min_pts)
            assert [c.tolist() for c in got.clusters] == ref_clusters
            assert got.noise.tolist() == ref_noise


class TestEpsHeuristic:
    def test_strided_subsample_is_deterministic(self):
        rng = np.random.default_rng(2)
        vectors = np.array([l2_normalize(v) for v in rng.normal(size=(50, 4))])
        assert cosine_eps_heuristic(vectors) == cosine_eps_heuristic(vectors)
        assert cosine_eps_heuristic(vectors, max_points=20) == cosine_eps_heuristic(vectors, max_points=20)

    def test_higher_percentile_never_shrinks_eps(self):
        rng = np.random.default_rng(3)
        vectors = np.array([l2_normalize(v) for v in rng.normal(size=(40, 4))])
        assert cosine_eps_heuristic(vectors, percentile=5.0) >= cosine_eps_heuristic(vectors, percentile=1.0)


class TestUnionFind:
    def test_cap_blocks_merge(self):
        uf = UnionFind(4)
        assert uf.union_capped(0, 1, 2)
        assert not uf.union_capped(0, 2, 2)
        assert uf.union_capped(2, 3, 2)
        assert uf.find(0) == uf.find(1)
        assert uf.find(0) != uf.find(2)


class TestMergeGroups:
    def test_transitive_closure_by_hand(self):
        # A={A,B}, B={B,C}, C={C}, D={D} -> {A,B,C} and {D}
        mem = memory_from_sets([{0, 1}, {1, 2}, {2}, {3}])
        partition = merge_groups(mem, cap=4)
        assert partition_sets(partition) == {frozenset({0, 1, 2}), frozenset({3})}

    def test_cap_two_keeps_exactly_one_pair(self):
        mem = memory_from_sets([{0, 1}, {1, 2}, {2}, {3}])
        partition = merge_groups(mem, cap=2)
        sizes = sorted(g.size for g in partition.groups)
        assert sizes == [1, 1, 2]
        assert max(g.size for g in partition.groups) <= 2
        # equal count and score: lexicographic pair order applies (0,1) first
        assert partition.labels[0] == partition.labels[1]

    def test_min_common_blocks_single_shared(self):
        mem = memory_from_sets([{0, 1}, {1, 2}, {2}, {3}])
        partition = merge_groups(mem, cap=4, policy=MergePolicy.with_min_common(2))
        assert all(g.size == 1 for g in partition.groups)

    def test_stronger_links_win_under_cap(self):
        # pair (0,1) shares two members, pair (1,2) shares one; cap 2 keeps (0,1)
        mem = memory_from_sets([{0, 1, 3}, {1, 3, 2}, {2}, {3}])
        partition = merge_groups(mem, cap=2)
        assert partition.labels[0] == partition.labels[1]
        assert partition.labels[2] != partition.labels[1]

    def test_matches_bfs_oracle_with_unbounded_cap(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            n = int(rng.integers(2, 64))
            mem = random_memory(rng, n)
            partition = merge_groups(mem, cap=n)
            assert partition_sets(partition) == components_oracle(mem.members)

    def test_cap_respected_on_random_memories(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(2, 48))
            cap = int(rng.integers(1, n + 1))
            policy = MergePolicy.with_min_common(int(rng.integers(1, 3)))
            partition = merge_groups(random_memory(rng, n), cap=cap, policy=policy)
            assert max(g.size for g in partition.groups) <= cap

    def test_min_common_refines_looser_policy(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(3, 40))
            mem = random_memory(rng, n)
            coarse = merge_groups(mem, cap=n, policy=MergePolicy.with_min_common(1))
            fine = merge_groups(mem, cap=n, policy=MergePolicy.with_min_common(2))
            for g in fine.groups:
                coarse_ids = np.unique(coarse.labels[g])
                assert coarse_ids.size == 1

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        mem = random_memory(rng, 30)
        a = merge_groups(mem, cap=10)
        b = merge_groups(mem, cap=10)
        assert np.array_equal(a.labels, b.labels)

    def test_vote_policy_uses_intersection(self):
        mem = NeighborMemory(3, retain_previous=True)
        mem.record(NeighborSet(0, np.array([0, 1]), np.ones(2)))
        mem.start_epoch()
        mem.record(NeighborSet(0, np.array([0, 2]), np.ones(2)))
        # voted set of 0 is {0}: the old link to 1 did not survive the vote
        partition = merge_groups(mem, cap=3, policy=MergePolicy.vote())
        assert all(g.size == 1 for g in partition.groups)

    def test_group_ids_contiguous_and_labels_partition(self):
        rng = np.random.default_rng(8)
        mem = random_memory(rng, 25)
        partition = merge_groups(mem, cap=25)
        assert sorted(np.unique(partition.labels).tolist()) == list(range(len(partition.groups)))
        assert sum(g.size for g in partition.groups) == 25

    def test_cap_validation(self):
        with pytest.raises(ValueError):
            merge_groups(memory_from_sets([{0}]), cap=0)


class TestAssignLabels:
    def test_singletons_get_distinct_labels(self):
        mem = NeighborMemory(5)
        partition = merge_groups(mem, cap=5)
        assert assign_labels(partition).tolist() == [0, 1, 2, 3, 4]

    def test_single_group_all_equal(self):
        mem = memory_from_sets([{0, 1, 2}, {1}, {2}])
        partition = merge_groups(mem, cap=3)
        labels = assign_labels(partition)
        assert np.unique(labels).size == 1

    def test_stable_across_calls(self):
        mem = memory_from_sets([{0, 1}, {1, 2}, {2}, {3}])
        partition = merge_groups(mem, cap=4)
        assert np.array_equal(assign_labels(partition), assign_labels(partition))
        assert assign_labels(partition)[3] != assign_labels(partition)[0]
