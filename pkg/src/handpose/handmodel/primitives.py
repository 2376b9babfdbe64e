"""Geometric primitives and uniform surface sampling.

Local frames: spheres and ellipsoids are centred at the origin; a cylinder's
axis is the local z axis, spanning ``[-half_length, half_length]``. Only the
lateral surface of a cylinder is sampled (caps are hidden by neighbouring
primitives in every model we build).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ellipeinc, ellipkinc

from handpose.errors import HandPoseError
from handpose.geometry import RigidTransform, make_rng

KINDS = ("cylinder", "sphere", "ellipsoid")


@dataclass(frozen=True, eq=False)
class Primitive:
    kind: str
    radius: float = 0.0
    half_length: float = 0.0
    radii: tuple = ()
    pose: RigidTransform = field(default_factory=RigidTransform.identity)
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise HandPoseError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "sphere" and not self.radius > 0:
            raise HandPoseError("sphere radius must be positive")
        if self.kind == "cylinder" and not (self.radius > 0 and self.half_length > 0):
            raise HandPoseError("cylinder radius and half_length must be positive")
        if self.kind == "ellipsoid":
            radii = tuple(float(r) for r in self.radii)
            if len(radii) != 3 or not all(r > 0 for r in radii):
                raise HandPoseError("ellipsoid needs three positive radii")
            object.__setattr__(self, "radii", radii)

    def with_pose(self, pose: RigidTransform, name: str | None = None) -> "Primitive":
        return Primitive(self.kind, self.radius, self.half_length, self.radii, pose,
                         self.name if name is None else name)


def ellipsoid_area(a: float, b: float, c: float) -> float:
    """Surface area via Legendre's incomplete elliptic integrals."""
    a, b, c = sorted((float(a), float(b), float(c)), reverse=True)
    if a == c:
        return 4.0 * np.pi * a * a
    phi = np.arccos(c / a)
    m = (a * a * (b * b - c * c)) / (b * b * (a * a - c * c))
    s = np.sin(phi)
    return float(2.0 * np.pi * c * c
                 + 2.0 * np.pi * a * b / s * (ellipeinc(phi, m) * s * s + ellipkinc(phi, m) * (1.0 - s * s)))


def surface_area(prim: Primitive) -> float:
    if prim.kind == "sphere":
        return 4.0 * np.pi * prim.radius ** 2
    if prim.kind == "cylinder":
        return 2.0 * np.pi * prim.radius * 2.0 * prim.half_length
    return ellipsoid_area(*prim.radii)


def _unit_vectors(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_local(prim: Primitive, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """``n`` uniform surface samples and outward unit normals in the local frame."""
    if prim.kind == "sphere":
        u = _unit_vectors(rng, n)
        return prim.radius * u, u
    if prim.kind == "cylinder":
        phi = rng.uniform(0.0, 2.0 * np.pi, n)
        z = rng.uniform(-prim.half_length, prim.half_length, n)
        nrm = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(n)])
        pts = np.column_stack([prim.radius * nrm[:, 0], prim.radius * nrm[:, 1], z])
        return pts, nrm
    # Ellipsoid: map unit-sphere samples and thin by the local area stretch.
    a, b, c = prim.radii
    gmax = max(b * c, a * c, a * b)
    chunks = []
    have = 0
    while have < n:
        u = _unit_vectors(rng, max(64, 2 * (n - have)))
        g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        keep = u[rng.random(u.shape[0]) * gmax < g]
        chunks.append(keep)
        have += keep.shape[0]
    u = np.concatenate(chunks)[:n]
    pts = u * np.array([a, b, c])
    nrm = u / np.array([a, b, c])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


def sample_primitive(prim: Primitive, density: float, seed=0, return_normals=False):
    """Uniform surface samples in the primitive's parent frame.

    The point count is Poisson with mean ``density * surface_area``.
    """
    if not density > 0:
        raise HandPoseError(f"density must be positive, got {density}")
    rng = make_rng(seed)
    n = int(rng.poisson(density * surface_area(prim)))
    pts, nrm = sample_local(prim, n, rng)
    pts = pts @ prim.pose.R.T + prim.pose.t
    nrm = nrm @ prim.pose.R.T
    if return_normals:
        return pts, nrm
    return pts
