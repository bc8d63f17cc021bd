import numpy as np
import pytest

from vidlabel.clustering import NOISE, dbscan, hamming_distance


def reference_dbscan(items, eps, min_pts, metric=None):
    """Independent quadratic reference: connected components over core points.

    Border points join an arbitrary reaching core cluster, so only the core
    partition is comparable against the production implementation.
    """
    n = len(items)
    if metric is None:
        metric = hamming_distance
    dist = np.array([[metric(a, b) for b in items] for a in items], dtype=float)
    within = dist <= eps
    core = within.sum(axis=1) >= min_pts

    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(n):
            if core[i] and core[j] and within[i, j]:
                parent[find(i)] = find(j)

    labels = np.full(n, NOISE)
    roots = {}
    for i in range(n):
        if core[i]:
            root = find(i)
            labels[i] = roots.setdefault(root, len(roots))
    for i in range(n):
        if not core[i]:
            for j in range(n):
                if core[j] and within[i, j]:
                    labels[i] = labels[j]
                    break
    return labels, core


def core_partition(labels, core):
    groups = {}
    for i in np.flatnonzero(core):
        groups.setdefault(labels[i], set()).add(int(i))
    return frozenset(frozenset(g) for g in groups.values())


class TestHamming:
    def test_identical(self):
        assert hamming_distance([1, 0, 1], [1, 0, 1]) == 0

    def test_complementary(self):
        a = np.ones(8, bool)
        assert hamming_distance(a, ~a) == 8

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            hamming_distance([1, 0], [1, 0, 1])

    def test_matches_elementwise_recount(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.integers(0, 4, size=12)
            b = rng.integers(0, 4, size=12)
            assert hamming_distance(a, b) == sum(int(x != y) for x, y in zip(a, b))


class TestDbscan:
    def test_all_identical_one_cluster(self):
        items = [np.array([1, 1, 0])] * 3
        labels = dbscan(items, eps=0, min_pts=2)
        assert (labels == 0).all()

    def test_two_separated_groups(self):
        a = np.array([1, 1, 0, 0, 0, 0, 0, 0])
        b = np.array([0, 0, 0, 0, 0, 0, 1, 1])
        labels = dbscan([a, a, a, b, b, b], eps=1, min_pts=2)
        assert set(labels[:3]) == {0}
        assert set(labels[3:]) == {1}

    def test_empty_input(self):
        assert dbscan([], eps=1, min_pts=2).size == 0

    def test_singleton_is_noise(self):
        labels = dbscan([np.zeros(4, bool)], eps=1, min_pts=2)
        assert labels[0] == NOISE

    def test_noise_has_too_few_neighbors(self):
        rng = np.random.default_rng(1)
        items = [rng.integers(0, 2, size=10) for _ in range(40)]
        eps, min_pts = 2, 3
        labels = dbscan(items, eps=eps, min_pts=min_pts)
        for i in np.flatnonzero(labels == NOISE):
            neighbors = sum(
                1 for j in range(len(items)) if hamming_distance(items[i], items[j]) <= eps
            )
            assert neighbors < min_pts

    def test_matches_reference_on_random_instances(self):
        rng = np.random.default_rng(2)
        for trial in range(200):
            n = int(rng.integers(2, 65))
            length = int(rng.integers(4, 16))
            items = [rng.integers(0, 2, size=length) for _ in range(n)]
            eps = float(rng.integers(0, 4))
            min_pts = int(rng.integers(1, 5))
            labels = dbscan(items, eps=eps, min_pts=min_pts)
            ref_labels, core = reference_dbscan(items, eps, min_pts)
            assert core_partition(labels, core) == core_partition(ref_labels, core), trial
            # noise status must agree exactly (border points may change cluster)
            ref_is_noise = ref_labels == NOISE
            assert ((labels == NOISE) == ref_is_noise).all()

    def test_core_partition_order_independent(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            n = int(rng.integers(4, 40))
            items = [rng.integers(0, 2, size=8) for _ in range(n)]
            labels = dbscan(items, eps=1, min_pts=2)
            _, core = reference_dbscan(items, 1, 2)
            perm = rng.permutation(n)
            permuted_labels = dbscan([items[i] for i in perm], eps=1, min_pts=2)
            # map back: position k in permuted input is original index perm[k]
            back = np.empty(n, dtype=int)
            back[perm] = permuted_labels
            assert ((back == NOISE) == (labels == NOISE)).all()
            assert core_partition(back, core) == core_partition(labels, core)

    def test_custom_metric(self):
        items = [np.array([0.0]), np.array([0.5]), np.array([9.0])]
        labels = dbscan(items, eps=1.0, min_pts=2, metric=lambda a, b: abs(a[0] - b[0]))
        assert labels[0] == labels[1] != NOISE
        assert labels[2] == NOISE

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            dbscan([np.zeros(3)], eps=-1, min_pts=1)
        with pytest.raises(ValueError):
            dbscan([np.zeros(3)], eps=1, min_pts=0)
