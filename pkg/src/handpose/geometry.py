"""Core geometry: point clouds, rigid transforms, nearest-neighbour index, RMS metric.

Point clouds are plain ``(N, 3)`` float64 numpy arrays in meters. Functions
accept anything array-like and validate it through :func:`as_cloud`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from handpose.errors import EmptyCloudError, HandPoseError

ORTHO_TOL = 1e-9
LEAF_SIZE = 16


def as_cloud(points, *, allow_empty=True) -> np.ndarray:
    """Return ``points`` as a read-only ``(N, 3)`` float64 array.

    Raises:
        HandPoseError: wrong shape or non-finite coordinates.
        EmptyCloudError: ``N == 0`` and ``allow_empty`` is False.
    """
    if isinstance(points, np.ndarray) and points.dtype == np.float64 and not points.flags.writeable:
        arr = points
    else:
        arr = np.array(points, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise HandPoseError(f"expected an (N, 3) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise HandPoseError("point cloud contains non-finite coordinates")
    if not allow_empty and arr.shape[0] == 0:
        raise EmptyCloudError()
    if arr.flags.writeable:
        arr.flags.writeable = False
    return arr


def as_point(q) -> np.ndarray:
    p = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise HandPoseError(f"expected a finite 3-vector, got {q!r}")
    return p


def centroid(cloud) -> np.ndarray:
    pts = as_cloud(cloud, allow_empty=False)
    return pts.mean(axis=0)


def demean(cloud) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the centroid. Returns ``(centered_cloud, centroid)``."""
    pts = as_cloud(cloud, allow_empty=False)
    mu = pts.mean(axis=0)
    return pts - mu, mu


def _check_rotation(R: np.ndarray) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise HandPoseError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
        raise HandPoseError("rotation matrix is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise HandPoseError("rotation matrix must have determinant +1")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> R @ x + t``. Validated at construction; never re-orthonormalized."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64)
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        _check_rotation(R)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise HandPoseError("translation must be a finite 3-vector")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, H) -> "RigidTransform":
        H = np.asarray(H, dtype=np.float64)
        return cls(H[:3, :3], H[:3, 3])

    def matrix(self) -> np.ndarray:
        H = np.eye(4)
        H[:3, :3] = self.R
        H[:3, 3] = self.t
        return H

    def apply(self, cloud) -> np.ndarray:
        return apply_transform(cloud, self)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def rotation_angle_deg(self) -> float:
        return rotation_angle_deg(self.R)

    def __repr__(self):
        return f"RigidTransform(R={self.R.tolist()}, t={self.t.tolist()})"


def apply_transform(cloud, T: RigidTransform) -> np.ndarray:
    pts = as_cloud(cloud)
    out = pts @ T.R.T + T.t
    return out


def compose(T2: RigidTransform, T1: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``T1`` first, then ``T2``."""
    return RigidTransform(T2.R @ T1.R, T2.R @ T1.t + T2.t)


def rotation_angle_deg(R) -> float:
    """Geodesic angle of a rotation matrix, in degrees."""
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def axis_angle(axis, angle_deg) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` by ``angle_deg`` degrees."""
    k = as_point(axis)
    k = k / np.linalg.norm(k)
    a = np.radians(angle_deg)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)


def rot_x(deg):
    return axis_angle((1, 0, 0), deg)


def rot_y(deg):
    return axis_angle((0, 1, 0), deg)


def rot_z(deg):
    return axis_angle((0, 0, 1), deg)


def make_rng(seed) -> np.random.Generator:
    """Generator from a 64-bit unsigned seed (or pass-through an existing Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_seed(seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent stream derived from ``seed`` and a path of integer keys."""
    return np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in keys))


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed rotation matrix (Arvo's fast construction).

    A random rotation about the z axis followed by a Householder reflection
    through a random unit vector, negated so that det = +1.
    """
    rng = make_rng(rng)
    x1, x2, x3 = rng.random(3)
    theta = 2.0 * np.pi * x1
    phi = 2.0 * np.pi * x2
    c, s = np.cos(theta), np.sin(theta)
    Rz = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    r = np.sqrt(x3)
    v = np.array([np.cos(phi) * r, np.sin(phi) * r, np.sqrt(1.0 - x3)])
    M = (2.0 * np.outer(v, v) - np.eye(3)) @ Rz
    return M


class NNIndex:
    """Exact kd-tree index over a fixed cloud.

    Nearest queries break distance ties by the smallest stored index; radius
    queries return ascending indices with ``distance <= r``. Both agree with a
    linear scan exactly.
    """

    def __init__(self, cloud):
        self.points = as_cloud(cloud, allow_empty=False)
        self._tree = cKDTree(self.points, leafsize=LEAF_SIZE, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return self.points.shape[0]

    def _sqdist(self, idx, q):
        diff = self.points[idx] - q
        return np.einsum("ij,ij->i", diff, diff)

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Batch nearest neighbour. Returns ``(indices, distances)``."""
        Q = as_cloud(queries)
        n = len(self)
        if Q.shape[0] == 0:
            return np.zeros(0, dtype=np.intp), np.zeros(0)
        if n == 1:
            idx = np.zeros(Q.shape[0], dtype=np.intp)
        else:
            d, i = self._tree.query(Q, k=2)
            idx = i[:, 0].astype(np.intp)
            near_tie = d[:, 1] <= d[:, 0] * (1.0 + 1e-9) + 1e-300
            for row in np.flatnonzero(near_tie):
                idx[row] = self._resolve_tie(Q[row], d[row, 0])
        diff = self.points[idx] - Q
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        return idx, dist

    def _resolve_tie(self, q, d0):
        cand = np.asarray(self._tree.query_ball_point(q, d0 * (1.0 + 1e-6) + 1e-300), dtype=np.intp)
        sq = self._sqdist(cand, q)
        best = sq.min()
        return int(cand[sq == best].min())

    def nearest(self, q) -> tuple[int, float]:
        idx, dist = self.query(as_point(q).reshape(1, 3))
        return int(idx[0]), float(dist[0])

    def radius_search(self, q, r) -> list[int]:
        return self.radius_search_many(as_point(q).reshape(1, 3), r)[0].tolist()

    def radius_search_many(self, queries, r) -> list[np.ndarray]:
        """Ascending neighbour indices within ``r`` for every query row."""
        if not r > 0:
            raise HandPoseError(f"radius must be positive, got {r}")
        Q = as_cloud(queries)
        if Q.shape[0] == 0:
            return []
        r_big = r * (1.0 + 1e-9) + 1e-300
        raw = self._tree.query_ball_point(Q, r_big, return_sorted=True)
        r2 = r * r
        out = []
        for q, cand in zip(Q, raw):
            cand = np.asarray(cand, dtype=np.intp)
            if cand.size:
                cand = cand[self._sqdist(cand, q) <= r2]
            out.append(cand)
        return out


def build_index(cloud) -> NNIndex:
    return NNIndex(cloud)


def nearest(index: NNIndex, q) -> tuple[int, float]:
    return index.nearest(q)


def radius_search(index: NNIndex, q, r) -> list[int]:
    return index.radius_search(q, r)


def rms_nearest(model, data, data_index: NNIndex | None = None) -> float:
    """RMS of the distance from each model point to its nearest data point.

    Directed model -> data: extra data points (arm, other body parts) do not
    penalize a model that fits the part it covers.
    """
    A = as_cloud(model, allow_empty=False)
    if data_index is None:
        data_index = NNIndex(as_cloud(data, allow_empty=False))
    _, dist = data_index.query(A)
    return float(np.sqrt(np.mean(dist * dist)))


def rms_symmetric(a, b) -> float:
    """RMS over the union of both directed nearest-neighbour distance sets."""
    A = as_cloud(a, allow_empty=False)
    B = as_cloud(b, allow_empty=False)
    _, dab = NNIndex(B).query(A)
    _, dba = NNIndex(A).query(B)
    d = np.concatenate([dab, dba])
    return float(np.sqrt(np.mean(d * d)))


def euler_deg(rx=0.0, ry=0.0, rz=0.0) -> np.ndarray:
    """``Rz(rz) @ Ry(ry) @ Rx(rx)``, angles in degrees."""
    return rot_z(rz) @ rot_y(ry) @ rot_x(rx)
