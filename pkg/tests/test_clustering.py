import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from handpose.clustering import (
    NOISE,
    ClusterLabeling,
    DbscanConfig,
    cluster_cloud,
    dbscan,
    euclidean_cluster_extraction,
    extract_clusters,
    kmeans,
    lloyd,
)
from handpose.errors import HandPoseError
from handpose.geometry import make_rng


def partition(labels):
    """Clusters as a set of frozensets of point indices (noise excluded)."""
    labels = np.asarray(labels)
    return {frozenset(np.flatnonzero(labels == c).tolist()) for c in set(labels.tolist()) if c >= 0}


def union_find_components(pts, r, min_size=1):
    n = len(pts)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    d = cdist(pts, pts)
    for i, j in zip(*np.nonzero(np.triu(d <= r, 1))):
        ra, rb = find(i), find(j)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return {frozenset(g) for g in groups.values() if len(g) >= min_size}


def brute_dbscan(pts, eps, min_pts):
    """Reference DBSCAN from definitions: core components plus their border points.

    Returns (partition, noise set, ambiguous border count).
    """
    d = cdist(pts, pts)
    adj = d <= eps
    core = adj.sum(axis=1) >= min_pts
    core_idx = np.flatnonzero(core)
    comps = union_find_components(pts[core_idx], eps)
    comps = [frozenset(core_idx[list(c)].tolist()) for c in comps]
    owner = {}
    ambiguous = 0
    clusters = [set(c) for c in comps]
    for i in np.flatnonzero(~core):
        hits = {k for k, c in enumerate(comps) if any(adj[i, j] for j in c)}
        if len(hits) > 1:
            ambiguous += 1
        if hits:
            owner[i] = min(hits)
            clusters[min(hits)].add(int(i))
    noise = set(np.flatnonzero(~core).tolist()) - set(owner)
    return {frozenset(c) for c in clusters}, noise, ambiguous


def blobs(seed, n=500, k=4, spread=0.05):
    rng = make_rng(seed)
    centers = rng.uniform(0, 1, (k, 3))
    idx = rng.integers(0, k, n)
    return centers[idx] + rng.normal(0, spread, (n, 3))


def unambiguous_sets(count, eps, min_pts, n=300):
    """First ``count`` blob sets whose reference DBSCAN has no border point shared by two clusters."""
    out = []
    seed = 0
    while len(out) < count:
        pts = blobs(seed, n=n)
        ref, noise, ambiguous = brute_dbscan(pts, eps, min_pts)
        if not ambiguous:
            out.append((seed, pts, ref, noise))
        seed += 1
    return out


DB_EPS, DB_MIN_PTS = 0.04, 5
DB_SETS = unambiguous_sets(10, DB_EPS, DB_MIN_PTS)


class TestDbscan:
    def test_two_blobs_and_noise(self):
        rng = make_rng(0)
        a = rng.normal(0, 0.01, (50, 3))
        b = rng.normal(0, 0.01, (50, 3)) + [1, 0, 0]
        pts = np.concatenate([a, b, [[0.5, 0.5, 0.5]]])
        lab = dbscan(pts, DbscanConfig(eps=0.05, min_pts=5))
        assert lab.n_clusters == 2
        assert set(lab.labels[:50]) == {0} and set(lab.labels[50:100]) == {1}
        assert lab.labels[100] == NOISE

    def test_self_counts_as_neighbour(self):
        pts = np.array([[0, 0, 0], [0.1, 0, 0]], dtype=float)
        assert dbscan(pts, DbscanConfig(eps=0.2, min_pts=2)).n_clusters == 1
        assert dbscan(pts, DbscanConfig(eps=0.2, min_pts=3)).n_clusters == 0

    def test_noise_promoted_to_border(self):
        # Point 0 is visited first as noise, then reached from the core at index 1.
        pts = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.15, 0.05, 0]])
        lab = dbscan(pts, DbscanConfig(eps=0.11, min_pts=3))
        assert lab.labels.tolist() == [0, 0, 0, 0]

    @pytest.mark.parametrize("case", range(len(DB_SETS)))
    def test_matches_reference(self, case):
        _, pts, ref, noise = DB_SETS[case]
        lab = dbscan(pts, DbscanConfig(DB_EPS, DB_MIN_PTS))
        assert partition(lab.labels) == ref
        assert set(np.flatnonzero(lab.labels == NOISE).tolist()) == noise

    def test_core_points_never_noise(self):
        pts = blobs(11, n=400)
        lab = dbscan(pts, DbscanConfig(0.03, 6))
        counts = (cdist(pts, pts) <= 0.03).sum(axis=1)
        assert np.all(lab.labels[counts >= 6] >= 0)

    def test_permutation_invariance(self):
        _, pts, ref, _ = DB_SETS[0]
        perm = make_rng(1).permutation(len(pts))
        lab = dbscan(pts[perm], DbscanConfig(DB_EPS, DB_MIN_PTS))
        assert {frozenset(perm[list(c)].tolist()) for c in partition(lab.labels)} == ref

    def test_ids_in_discovery_order(self):
        lab = dbscan(blobs(13, n=300), DbscanConfig(0.04, 5))
        firsts = [np.flatnonzero(lab.labels == c)[0] for c in range(lab.n_clusters)]
        assert firsts == sorted(firsts)

    @pytest.mark.parametrize("kw", [{"eps": 0}, {"eps": -1}, {"min_pts": 0}])
    def test_invalid(self, kw):
        with pytest.raises(HandPoseError):
            DbscanConfig(**kw)


class TestEce:
    @pytest.mark.parametrize("seed", range(10))
    def test_union_find_oracle(self, seed):
        pts = blobs(100 + seed)
        lab = euclidean_cluster_extraction(pts, 0.03)
        assert partition(lab.labels) == union_find_components(pts, 0.03)
        assert np.all(lab.labels >= 0)

    def test_min_size(self):
        pts = np.array([[0, 0, 0], [0.01, 0, 0], [1, 1, 1]], dtype=float)
        lab = euclidean_cluster_extraction(pts, 0.05, min_size=2)
        assert lab.labels.tolist() == [0, 0, -1]
        assert lab.n_clusters == 1

    def test_chain_links_transitively(self):
        pts = np.c_[np.arange(10) * 0.01, np.zeros(10), np.zeros(10)]
        assert euclidean_cluster_extraction(pts, 0.0101).n_clusters == 1
        assert euclidean_cluster_extraction(pts, 0.0099).n_clusters == 10

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.floats(0.01, 0.2))
    def test_property_components(self, seed, r):
        pts = make_rng(seed).uniform(0, 1, (120, 3))
        assert partition(euclidean_cluster_extraction(pts, r).labels) == union_find_components(pts, r)

    def test_invalid(self):
        with pytest.raises(HandPoseError):
            euclidean_cluster_extraction(np.zeros((3, 3)), 0.0)
        with pytest.raises(HandPoseError):
            euclidean_cluster_extraction(np.zeros((3, 3)), 1.0, min_size=0)


class TestKmeans:
    def test_two_clear_groups(self):
        rng = make_rng(0)
        pts = np.concatenate([rng.normal(0, 0.01, (40, 3)), rng.normal(0, 0.01, (60, 3)) + 1])
        lab = kmeans(pts, 2, seed=3)
        assert partition(lab.labels) == {frozenset(range(40)), frozenset(range(40, 100))}
        assert lab.labels[0] == 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 6))
    def test_wcss_non_increasing(self, seed, k):
        pts = blobs(seed % 1000, n=200)
        _, _, hist = lloyd(pts, k, seed=seed)
        assert all(b <= a + 1e-12 * max(1.0, a) for a, b in zip(hist, hist[1:]))

    def test_empty_cluster_repair(self):
        # Duplicate points force an empty cluster when two centroids coincide.
        pts = np.array([[0, 0, 0]] * 5 + [[1, 0, 0]] * 5 + [[5, 0, 0]], dtype=float)
        labels, centroids, _ = lloyd(pts, 3, seed=0)
        assert len(set(labels.tolist())) == 3

    def test_deterministic(self):
        pts = blobs(4)
        np.testing.assert_array_equal(kmeans(pts, 3, seed=5).labels, kmeans(pts, 3, seed=5).labels)

    @pytest.mark.parametrize("k", [0, 11])
    def test_invalid_k(self, k):
        with pytest.raises(HandPoseError):
            kmeans(np.zeros((10, 3)), k)


def bar_and_blob(seed=0):
    """A dense 1 m bar and a small dense blob 3 cm past its end (ground truth: 2 groups)."""
    rng = make_rng(seed)
    bar = np.c_[rng.uniform(0.0, 1.0, 800), rng.normal(0, 0.003, 800), rng.normal(0, 0.003, 800)]
    blob_dir = rng.normal(size=(400, 3))
    blob_dir /= np.linalg.norm(blob_dir, axis=1, keepdims=True)
    blob = np.array([1.07, 0.0, 0.0]) + blob_dir * 0.04 * rng.uniform(0, 1, (400, 1)) ** (1 / 3)
    pts = np.concatenate([bar, blob])
    truth = np.r_[np.zeros(800, int), np.ones(400, int)]
    return pts, truth


class TestRegressionScenario:
    def test_dbscan_recovers_truth_kmeans_fails(self):
        pts, truth = bar_and_blob()
        gap = cdist(pts[truth == 0], pts[truth == 1]).min()
        assert 0.02 < gap < 0.05
        db = dbscan(pts, DbscanConfig(eps=0.02, min_pts=10))
        assert partition(db.labels) == partition(truth)
        km = kmeans(pts, 2, seed=0)
        # Best label matching between K-means output and truth.
        agree = max(np.mean(km.labels == truth), np.mean(km.labels == 1 - truth))
        assert 1 - agree >= 0.05

    def test_ece_recovers_truth(self):
        pts, truth = bar_and_blob()
        assert partition(euclidean_cluster_extraction(pts, 0.02).labels) == partition(truth)


class TestHelpers:
    def test_extract_clusters(self):
        pts = np.arange(15, dtype=float).reshape(5, 3)
        lab = ClusterLabeling(np.array([1, 0, -1, 1, 0]), 2)
        out = extract_clusters(pts, lab)
        np.testing.assert_array_equal(out[0], pts[[1, 4]])
        np.testing.assert_array_equal(out[1], pts[[0, 3]])

    def test_extract_size_mismatch(self):
        with pytest.raises(HandPoseError):
            extract_clusters(np.zeros((3, 3)), ClusterLabeling(np.zeros(2), 1))

    def test_sizes(self):
        assert ClusterLabeling(np.array([0, 0, 1, -1]), 2).sizes() == [2, 1]

    @pytest.mark.parametrize("algo", ["dbscan", "ece", "kmeans"])
    def test_dispatch(self, algo):
        lab = cluster_cloud(blobs(1, n=100), algo, eps=0.05, min_pts=3, radius=0.05, k=2)
        assert lab.labels.shape == (100,)

    def test_dispatch_unknown(self):
        with pytest.raises(HandPoseError):
            cluster_cloud(np.zeros((3, 3)), "hdbscan")
