"""RANSAC background-plane fitting and removal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from handpose.errors import DegenerateError, HandPoseError, NoPlaneFoundError
from handpose.geometry import as_cloud, as_point, make_rng


@dataclass(frozen=True, eq=False)
class PlaneModel:
    """Plane ``{p : n . p + d = 0}`` with unit normal ``n``."""

    n: np.ndarray
    d: float

    def __post_init__(self):
        n = np.array(self.n, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(n)
        if n.shape != (3,) or not np.isfinite(norm) or norm == 0.0:
            raise HandPoseError("plane normal must be a nonzero finite 3-vector")
        n = n / norm
        n.flags.writeable = False
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "d", float(self.d) / norm)

    def distances(self, cloud) -> np.ndarray:
        pts = as_cloud(cloud)
        return np.abs(pts @ self.n + self.d)


@dataclass(frozen=True)
class RansacConfig:
    tau: float = 0.1
    max_iterations: int = 1000
    min_consensus: int | None = None  # None -> N // 2
    seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise HandPoseError(f"tau must be positive, got {self.tau}")
        if self.max_iterations < 1:
            raise HandPoseError("max_iterations must be >= 1")
        if self.min_consensus is not None and self.min_consensus < 3:
            raise HandPoseError("min_consensus must be >= 3")


def plane_from_points(a, b, c) -> PlaneModel:
    a, b, c = as_point(a), as_point(b), as_point(c)
    u, v = b - a, c - a
    cross = np.cross(u, v)
    scale = np.linalg.norm(u) * np.linalg.norm(v)
    norm = np.linalg.norm(cross)
    if scale == 0.0 or norm <= 1e-12 * scale:
        raise DegenerateError("degenerate sample")
    n = cross / norm
    return PlaneModel(n, -float(n @ a))


def point_plane_distance(p, plane: PlaneModel) -> float:
    return float(abs(plane.n @ as_point(p) + plane.d))


def fit_plane_lsq(points) -> PlaneModel:
    """Total-least-squares plane: normal is the smallest-eigenvalue direction of the scatter."""
    pts = as_cloud(points)
    if pts.shape[0] < 3:
        raise DegenerateError("need at least 3 points to fit a plane")
    mu = pts.mean(axis=0)
    X = pts - mu
    _, evecs = np.linalg.eigh(X.T @ X)
    n = evecs[:, 0]
    return PlaneModel(n, -float(n @ mu))


def fit_plane_ransac(cloud, cfg: RansacConfig = RansacConfig()) -> tuple[PlaneModel, np.ndarray]:
    """Fit the dominant plane.

    Each iteration draws 3 distinct points; collinear draws are redrawn without
    consuming an iteration. After ``max_iterations`` hypotheses the largest
    consensus set is refined by total least squares, and the returned mask
    marks points within ``tau`` of the refined plane.

    Raises:
        HandPoseError: fewer than 3 points.
        NoPlaneFoundError: best consensus smaller than ``min_consensus``.
    """
    pts = as_cloud(cloud)
    n = pts.shape[0]
    if n < 3:
        raise HandPoseError(f"RANSAC needs at least 3 points, got {n}")
    min_consensus = cfg.min_consensus if cfg.min_consensus is not None else max(3, n // 2)
    # Every triple of a collinear (or coincident) cloud is degenerate; fail fast.
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise NoPlaneFoundError("no plane found: all points are collinear")
    rng = make_rng(cfg.seed)

    best_count, best_mask = 0, None
    done, draws = 0, 0
    max_draws = 100 * cfg.max_iterations
    while done < cfg.max_iterations and draws < max_draws:
        draws += 1
        i, j, k = rng.choice(n, size=3, replace=False)
        try:
            plane = plane_from_points(pts[i], pts[j], pts[k])
        except DegenerateError:
            continue
        done += 1
        mask = np.abs(pts @ plane.n + plane.d) <= cfg.tau
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask

    if best_mask is None or best_count < min_consensus:
        raise NoPlaneFoundError(
            f"no plane found: best consensus {best_count} < required {min_consensus}"
        )
    plane = fit_plane_lsq(pts[best_mask])
    return plane, plane.distances(pts) <= cfg.tau


def remove_background(cloud, plane: PlaneModel, tau: float) -> np.ndarray:
    """Points farther than ``tau`` from ``plane``, in original order."""
    pts = as_cloud(cloud)
    return as_cloud(pts[plane.distances(pts) > tau])
