"""Synthetic depth-sensor frames: a background plane plus placed model clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from handpose.errors import HandPoseError
from handpose.geometry import RigidTransform, apply_transform, as_cloud, as_point, child_seed, make_rng
from handpose.handmodel.generate import DEPTH_MARGIN, DepthBuffer
from handpose.ransac import PlaneModel

PLANE_LABEL = -1
# Splat radius in median nearest-neighbour spacings; smaller values leave holes
# in the shadow that model clouds cast on the plane.
SHADOW_SPLAT = 3.0


@dataclass(frozen=True, eq=False)
class PlacedModel:
    name: str
    cloud: np.ndarray
    pose: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Background plane (a rectangle of ``extent`` meters centred on ``plane_center``) and models.

    ``plane`` may be None for a model-only scene. Plane points hidden behind a
    model (seen from ``viewpoint``) are dropped when ``occlude`` is set.
    """

    plane: PlaneModel | None = None
    plane_center: tuple = (0.0, 0.0, 0.0)
    extent: tuple = (1.0, 1.0)
    plane_density: float = 20000.0
    models: tuple = ()
    noise_sigma: float = 0.0
    viewpoint: tuple = (0.0, 0.0, 0.0)
    seed: int = 0
    occlude: bool = True

    def __post_init__(self):
        if not self.noise_sigma >= 0:
            raise HandPoseError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.plane is not None:
            if len(self.extent) != 2 or not all(e > 0 for e in self.extent):
                raise HandPoseError("plane extent must be two positive lengths")
            if not self.plane_density > 0:
                raise HandPoseError("plane density must be positive")
        object.__setattr__(self, "models", tuple(self.models))


@dataclass(frozen=True, eq=False)
class Scene:
    cloud: np.ndarray
    labels: np.ndarray  # -1 plane, i for spec.models[i]
    names: tuple
    poses: tuple

    def model_points(self, i: int) -> np.ndarray:
        return self.cloud[self.labels == i]


def sample_plane(plane: PlaneModel, center, extent, density, rng) -> np.ndarray:
    """Uniform samples on a rectangle of the plane; centre is projected onto it."""
    c = as_point(center)
    c = c - (plane.n @ c + plane.d) * plane.n
    helper = np.array([1.0, 0.0, 0.0]) if abs(plane.n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(plane.n, helper)
    u /= np.linalg.norm(u)
    v = np.cross(plane.n, u)
    w, h = extent
    n = int(rng.poisson(density * w * h))
    a = rng.uniform(-w / 2.0, w / 2.0, n)
    b = rng.uniform(-h / 2.0, h / 2.0, n)
    return c + a[:, None] * u + b[:, None] * v


def _spacing(cloud) -> float:
    """Median distance from a point to its nearest other point."""
    if cloud.shape[0] < 2:
        return 0.005
    sample = cloud[: min(2000, cloud.shape[0])]
    d = [np.partition(np.linalg.norm(cloud - p, axis=1), 1)[1] for p in sample[:200]]
    return float(np.median(d))


def generate_scene(spec: SceneSpec) -> Scene:
    """Union of plane samples and posed model clouds with isotropic Gaussian noise.

    Points are ordered plane first, then models in ``spec.models`` order with
    their own point order preserved.
    """
    rng = make_rng(child_seed(spec.seed, 0))
    noise_rng = make_rng(child_seed(spec.seed, 1))
    parts, labels = [], []
    placed = [as_cloud(apply_transform(m.cloud, m.pose)) for m in spec.models]

    if spec.plane is not None:
        plane_pts = sample_plane(spec.plane, spec.plane_center, spec.extent, spec.plane_density, rng)
        occluders = [p for p in placed if p.shape[0]]
        if spec.occlude and occluders and plane_pts.shape[0]:
            occ = np.concatenate(occluders)
            vp = as_point(spec.viewpoint)
            axis = occ.mean(axis=0) - vp
            zb = DepthBuffer(vp, axis, np.linalg.norm(axis))
            zb.splat(occ, SHADOW_SPLAT * _spacing(occ))
            hidden = zb.front_depth(plane_pts) + DEPTH_MARGIN < zb.depth(plane_pts)
            plane_pts = plane_pts[~hidden]
        parts.append(plane_pts)
        labels.append(np.full(plane_pts.shape[0], PLANE_LABEL))

    for i, pts in enumerate(placed):
        parts.append(pts)
        labels.append(np.full(pts.shape[0], i))

    cloud = np.concatenate(parts) if parts else np.zeros((0, 3))
    if spec.noise_sigma > 0 and cloud.shape[0]:
        cloud = cloud + noise_rng.normal(0.0, spec.noise_sigma, cloud.shape)
    lab = np.concatenate(labels) if labels else np.zeros(0, dtype=np.intp)
    return Scene(as_cloud(cloud), lab.astype(np.intp), tuple(m.name for m in spec.models),
                 tuple(m.pose for m in spec.models))
