"""Prototype clouds: sample posed primitives, then cull what a viewer cannot see.

Visibility is approximated in two passes: back-face culling with the analytic
normals, then a splatted depth buffer on a 2 mm grid in the viewpoint's image
plane that hides surfaces behind nearer parts of the model.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import numpy as np

from handpose.errors import HandPoseError
from handpose.geometry import RigidTransform, as_cloud, as_point, child_seed, euler_deg
from handpose.handmodel.kinematics import HandSkeleton, JointAngles, forward_kinematics
from handpose.handmodel.primitives import Primitive, sample_primitive

DEFAULT_VIEWPOINT = (0.0, 0.0, 1.8)
DEFAULT_DENSITY = 20000.0
GRID = 0.002
DEPTH_MARGIN = 0.008
OCCLUDER_SPACING = 0.0015
OCCLUDER_SEED = 0x0CC1


def _image_basis(axis):
    w = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(w, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(w, u), w


class DepthBuffer:
    """Min-depth raster of splatted points, seen from ``viewpoint``.

    Image coordinates are perspective projections scaled to meters at
    ``ref_depth``; each occluder covers a disc of radius ``splat`` meters.
    """

    def __init__(self, viewpoint, axis, ref_depth, grid=GRID):
        self.viewpoint = as_point(viewpoint)
        self.u, self.v, self.w = _image_basis(np.asarray(axis, dtype=float))
        self.ref_depth = float(ref_depth)
        self.grid = float(grid)
        self._cells = {}

    def project(self, points):
        rel = np.asarray(points) - self.viewpoint
        depth = rel @ self.w
        safe = np.where(depth > 1e-9, depth, np.nan)
        x = rel @ self.u / safe * self.ref_depth
        y = rel @ self.v / safe * self.ref_depth
        return np.floor(x / self.grid), np.floor(y / self.grid), depth

    def splat(self, points, splat: float):
        ix, iy, depth = self.project(points)
        ok = np.isfinite(ix) & np.isfinite(iy)
        ix, iy, depth = ix[ok].astype(np.int64), iy[ok].astype(np.int64), depth[ok]
        rad = int(np.ceil(splat / self.grid))
        offs = [(dx, dy) for dx in range(-rad, rad + 1) for dy in range(-rad, rad + 1)
                if (dx * dx + dy * dy) * self.grid ** 2 <= splat ** 2 + 1e-18]
        offs = np.array(offs, dtype=np.int64)
        cx = (ix[:, None] + offs[None, :, 0]).ravel()
        cy = (iy[:, None] + offs[None, :, 1]).ravel()
        dd = np.repeat(depth, offs.shape[0])
        keys = cx * 1_000_003 + cy
        order = np.lexsort((dd, keys))
        keys, dd = keys[order], dd[order]
        first = np.ones(keys.shape[0], dtype=bool)
        first[1:] = keys[1:] != keys[:-1]
        for k, d in zip(keys[first].tolist(), dd[first].tolist()):
            prev = self._cells.get(k)
            if prev is None or d < prev:
                self._cells[k] = d

    def front_depth(self, points) -> np.ndarray:
        ix, iy, _ = self.project(points)
        out = np.full(ix.shape[0], np.inf)
        ok = np.isfinite(ix) & np.isfinite(iy)
        keys = ix[ok].astype(np.int64) * 1_000_003 + iy[ok].astype(np.int64)
        out[ok] = [self._cells.get(k, np.inf) for k in keys.tolist()]
        return out

    def depth(self, points) -> np.ndarray:
        return (np.asarray(points) - self.viewpoint) @ self.w


def visible_mask(points, normals, viewpoint, spacing, grid=GRID, margin=DEPTH_MARGIN,
                 occluders=None) -> np.ndarray:
    """Back-face culling followed by a splatted depth-buffer occlusion test.

    Args:
        points, normals: (N, 3) surface samples and outward unit normals.
        viewpoint: sensor position.
        spacing: typical sample spacing (m); sets the splat radius.
        occluders: optional ``(points, normals, spacing)`` of a denser sample of
            the same surfaces used to build the depth buffer. Splats wider than a
            few grid cells make steep surfaces hide themselves, so a dense
            occluder sample keeps thin, tilted parts visible.
    """
    pts = np.asarray(points, dtype=float)
    vp = as_point(viewpoint)
    facing = np.einsum("ij,ij->i", np.asarray(normals), vp - pts) > 0
    mask = facing.copy()
    idx = np.flatnonzero(facing)
    if idx.size == 0:
        return mask
    front = pts[idx]
    if occluders is None:
        occ, occ_spacing = front, spacing
    else:
        o_pts, o_nrm, occ_spacing = occluders
        o_pts = np.asarray(o_pts, dtype=float)
        occ = o_pts[np.einsum("ij,ij->i", np.asarray(o_nrm), vp - o_pts) > 0]
        if occ.shape[0] == 0:
            occ = front
    axis = front.mean(axis=0) - vp
    if np.linalg.norm(axis) < 1e-9:
        raise HandPoseError("viewpoint coincides with the model")
    zb = DepthBuffer(vp, axis, np.linalg.norm(axis), grid)
    zb.splat(occ, max(grid, occ_spacing))
    mask[idx] = zb.depth(front) <= zb.front_depth(front) + margin
    return mask


def sample_scene_primitives(prims, density, seed):
    pts, nrms = [], []
    for k, prim in enumerate(prims):
        p, n = sample_primitive(prim, density, child_seed(seed, k), return_normals=True)
        pts.append(p)
        nrms.append(n)
    return np.concatenate(pts), np.concatenate(nrms)


def render_primitives(prims, viewpoint=DEFAULT_VIEWPOINT, density=DEFAULT_DENSITY, seed=0,
                      return_normals=False):
    """Sample every primitive and keep the points visible from ``viewpoint``.

    The depth buffer is built from a fixed dense sample (spacing
    ``OCCLUDER_SPACING``) so visibility does not depend on ``density``.
    """
    if not density > 0:
        raise HandPoseError(f"density must be positive, got {density}")
    pts, nrm = sample_scene_primitives(prims, density, seed)
    occ_pts, occ_nrm = sample_scene_primitives(prims, OCCLUDER_SPACING ** -2, OCCLUDER_SEED)
    keep = visible_mask(pts, nrm, viewpoint, spacing=1.0 / np.sqrt(density),
                        occluders=(occ_pts, occ_nrm, OCCLUDER_SPACING))
    cloud = as_cloud(pts[keep])
    if return_normals:
        return cloud, nrm[keep]
    return cloud


def generate_model(skeleton: HandSkeleton, angles: JointAngles, viewpoint=DEFAULT_VIEWPOINT,
                   density=DEFAULT_DENSITY, seed=0, extra=(), return_normals=False):
    """Visible surface of a posed hand in the canonical frame (palm centre at the origin).

    ``extra`` primitives (e.g. a grasped object) are rendered together with the
    hand so that each occludes the other.

    Raises:
        JointLimitError: propagated from forward kinematics.
    """
    prims = forward_kinematics(skeleton, angles) + list(extra)
    return render_primitives(prims, viewpoint, density, seed, return_normals)


def primitive_from_dict(d: dict) -> Primitive:
    d = dict(d)
    kind = d.pop("kind")
    R = euler_deg(*d.pop("rotation_deg", (0.0, 0.0, 0.0)))
    t = d.pop("translation", (0.0, 0.0, 0.0))
    radii = tuple(d.pop("radii", ()))
    radius = float(d.pop("radius", 0.0))
    half_length = float(d.pop("half_length", 0.0))
    if d:
        raise HandPoseError(f"unknown primitive key(s) {sorted(d)}")
    return Primitive(kind, radius=radius, half_length=half_length, radii=radii,
                     pose=RigidTransform(R, t), name=kind)


@lru_cache(maxsize=1)
def _pose_table():
    text = resources.files("handpose.handmodel").joinpath("data/poses.json").read_text()
    return json.loads(text)


def pose_names() -> list[str]:
    return list(_pose_table())


def pose_category(name: str) -> str:
    kind = _pose_table()[name]["kind"]
    return {"hand": "gesture", "object": "object", "interaction": "interaction"}[kind]


def pose_angles(name: str) -> JointAngles:
    entry = _pose_table()[name]
    return JointAngles.from_nested(entry.get("angles", {}))


def model_primitives(name: str, skeleton: HandSkeleton | None = None) -> list[Primitive]:
    """World primitives of a shipped pose (hand gesture, object or interaction)."""
    table = _pose_table()
    if name not in table:
        raise HandPoseError(f"unknown pose {name!r}; known poses: {', '.join(table)}")
    entry = table[name]
    skeleton = skeleton or HandSkeleton.default()
    if entry["kind"] == "object":
        return [primitive_from_dict(entry["primitive"])]
    prims = forward_kinematics(skeleton, JointAngles.from_nested(entry.get("angles", {})))
    if entry["kind"] == "interaction":
        prims.append(primitive_from_dict(entry["object"]))
    return prims


def generate_named_model(name: str, viewpoint=DEFAULT_VIEWPOINT, density=DEFAULT_DENSITY, seed=0,
                         skeleton: HandSkeleton | None = None):
    """Prototype cloud for one of :func:`pose_names`."""
    return render_primitives(model_primitives(name, skeleton), viewpoint, density, seed)
