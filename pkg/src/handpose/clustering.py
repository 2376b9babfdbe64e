"""Foreground segmentation: DBSCAN, Euclidean cluster extraction and K-means.

All three return a :class:`ClusterLabeling` whose ids are assigned in order of
first discovery; ``-1`` marks noise (DBSCAN) or undersized components (ECE).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from handpose.errors import HandPoseError
from handpose.geometry import NNIndex, as_cloud, make_rng

NOISE = -1
_UNSEEN = -2


@dataclass(frozen=True, eq=False)
class ClusterLabeling:
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.intp).copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def sizes(self) -> list[int]:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_clusters).tolist()


@dataclass(frozen=True)
class DbscanConfig:
    eps: float = 0.02
    min_pts: int = 10

    def __post_init__(self):
        if not self.eps > 0:
            raise HandPoseError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise HandPoseError(f"min_pts must be >= 1, got {self.min_pts}")


def dbscan(cloud, cfg: DbscanConfig = DbscanConfig()) -> ClusterLabeling:
    """Density-based clustering; a point's neighbour count includes itself.

    Points are visited in stored order. A border point takes the id of the
    first cluster that reaches it, including points earlier marked as noise.
    """
    pts = as_cloud(cloud, allow_empty=False)
    n = pts.shape[0]
    neighbours = NNIndex(pts).radius_search_many(pts, cfg.eps)
    core = np.fromiter((len(nb) >= cfg.min_pts for nb in neighbours), dtype=bool, count=n)

    labels = np.full(n, _UNSEEN, dtype=np.intp)
    cid = 0
    for i in range(n):
        if labels[i] != _UNSEEN:
            continue
        if not core[i]:
            labels[i] = NOISE
            continue
        labels[i] = cid
        queue = deque(neighbours[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cid
            if labels[j] != _UNSEEN:
                continue
            labels[j] = cid
            if core[j]:
                queue.extend(neighbours[j])
        cid += 1
    return ClusterLabeling(labels, cid)


def euclidean_cluster_extraction(cloud, r: float, min_size: int = 1) -> ClusterLabeling:
    """Connected components of the graph joining points at distance <= ``r``.

    Components with fewer than ``min_size`` points are labeled -1.
    """
    if not r > 0:
        raise HandPoseError(f"radius must be positive, got {r}")
    if min_size < 1:
        raise HandPoseError(f"min_size must be >= 1, got {min_size}")
    pts = as_cloud(cloud, allow_empty=False)
    n = pts.shape[0]
    neighbours = NNIndex(pts).radius_search_many(pts, r)

    labels = np.full(n, NOISE, dtype=np.intp)
    processed = np.zeros(n, dtype=bool)
    cid = 0
    for i in range(n):
        if processed[i]:
            continue
        processed[i] = True
        component = [i]
        k = 0
        while k < len(component):
            nb = neighbours[component[k]]
            fresh = nb[~processed[nb]]
            processed[fresh] = True
            component.extend(fresh.tolist())
            k += 1
        if len(component) >= min_size:
            labels[component] = cid
            cid += 1
    return ClusterLabeling(labels, cid)


def _wcss(pts, centroids, labels):
    diff = pts - centroids[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def lloyd(cloud, k: int, seed=0, max_iters: int = 100):
    """Lloyd iterations from a Forgy initialisation.

    Returns ``(labels, centroids, wcss_history)`` where ``wcss_history[i]`` is
    the within-cluster sum of squares after the i-th assignment step. A
    centroid left without points is moved onto the point farthest from its
    assigned centroid.
    """
    pts = as_cloud(cloud, allow_empty=False)
    n = pts.shape[0]
    if k < 1:
        raise HandPoseError(f"k must be >= 1, got {k}")
    if k > n:
        raise HandPoseError(f"k = {k} exceeds the number of points {n}")
    if max_iters < 1:
        raise HandPoseError("max_iters must be >= 1")
    rng = make_rng(seed)
    centroids = pts[rng.choice(n, size=k, replace=False)].copy()

    labels = None
    history = []
    for _ in range(max_iters):
        d2 = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        history.append(_wcss(pts, centroids, new_labels))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c]:
                centroids[c] = pts[labels == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            resid = ((pts - centroids[labels]) ** 2).sum(axis=1)
            far = int(np.argmax(resid))
            centroids[c] = pts[far]
            labels = labels.copy()
            labels[far] = c
    return labels, centroids, history


def _relabel_by_discovery(labels) -> ClusterLabeling:
    mapping = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return ClusterLabeling(out, len(mapping))


def kmeans(cloud, k: int, seed=0, max_iters: int = 100) -> ClusterLabeling:
    labels, _, _ = lloyd(cloud, k, seed, max_iters)
    return _relabel_by_discovery(labels)


def extract_clusters(cloud, labeling: ClusterLabeling) -> list[np.ndarray]:
    """One cloud per cluster id in ascending order; noise dropped, order kept."""
    pts = as_cloud(cloud)
    if pts.shape[0] != labeling.labels.shape[0]:
        raise HandPoseError(
            f"labeling has {labeling.labels.shape[0]} labels for a cloud of {pts.shape[0]} points"
        )
    return [as_cloud(pts[labeling.labels == c]) for c in range(labeling.n_clusters)]


def cluster_cloud(cloud, algorithm="dbscan", *, eps=0.02, min_pts=10, radius=0.02, min_size=1,
                  k=2, seed=0, max_iters=100) -> ClusterLabeling:
    """Dispatch by algorithm name (``dbscan``, ``ece`` or ``kmeans``)."""
    if algorithm == "dbscan":
        return dbscan(cloud, DbscanConfig(eps, min_pts))
    if algorithm == "ece":
        return euclidean_cluster_extraction(cloud, radius, min_size)
    if algorithm == "kmeans":
        return kmeans(cloud, k, seed, max_iters)
    raise HandPoseError(f"unknown clustering algorithm {algorithm!r}")
