"""26-DoF articulated hand: joint angles, limits and forward kinematics.

Canonical frame: palm centre at the origin, palm in the xy plane with the
palmar side facing +z, fingers pointing along +x and the thumb on the +y side.
Positive flexion curls a finger towards +z. Angles are in degrees.

Degrees of freedom: 4 per finger (MCP flexion, MCP abduction, PIP, DIP),
7 for the thumb (trapeziometacarpal flexion/abduction, two base-orientation
angles, MCP flexion/abduction, IP) and 3 for the palm orientation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from types import MappingProxyType

import numpy as np

from handpose.errors import HandPoseError, JointLimitError
from handpose.geometry import RigidTransform, compose, rot_x, rot_y, rot_z
from handpose.handmodel.primitives import Primitive

FINGERS = ("index", "middle", "ring", "pinky")
FINGER_JOINTS = ("mcp_f", "mcp_aa", "pip", "dip")
THUMB_JOINTS = ("tm_f", "tm_aa", "base_roll", "base_yaw", "mcp_f", "mcp_aa", "ip")
PALM_JOINTS = ("roll", "pitch", "yaw")

JOINT_NAMES = tuple(
    [f"{f}.{j}" for f in FINGERS for j in FINGER_JOINTS]
    + [f"thumb.{j}" for j in THUMB_JOINTS]
    + [f"palm.{j}" for j in PALM_JOINTS]
)
assert len(JOINT_NAMES) == 26

FINGER_LIMITS = {"mcp_f": (0.0, 90.0), "pip": (0.0, 110.0), "dip": (0.0, 90.0), "mcp_aa": (-15.0, 15.0)}


class JointAngles:
    """Immutable mapping of the 26 joint names to degrees; missing joints are 0."""

    __slots__ = ("_values",)

    def __init__(self, values=None):
        vals = dict.fromkeys(JOINT_NAMES, 0.0)
        for k, v in (values or {}).items():
            if k not in vals:
                raise HandPoseError(f"unknown joint {k!r}")
            v = float(v)
            if not np.isfinite(v):
                raise HandPoseError(f"joint {k!r} is not finite")
            vals[k] = v
        self._values = MappingProxyType(vals)

    @classmethod
    def from_nested(cls, d: dict) -> "JointAngles":
        """From ``{"index": {"pip": 30}, "thumb": {...}, "palm": {...}}``."""
        flat = {}
        for group, joints in (d or {}).items():
            if not isinstance(joints, dict):
                raise HandPoseError(f"joint group {group!r} must map joint names to degrees")
            for j, v in joints.items():
                flat[f"{group}.{j}"] = v
        return cls(flat)

    def __getitem__(self, name) -> float:
        return self._values[name]

    def items(self):
        return self._values.items()

    def vector(self) -> np.ndarray:
        return np.array([self._values[k] for k in JOINT_NAMES])

    def replace(self, **changes) -> "JointAngles":
        vals = dict(self._values)
        vals.update({k.replace("__", "."): v for k, v in changes.items()})
        return JointAngles(vals)

    def __eq__(self, other):
        return isinstance(other, JointAngles) and dict(self._values) == dict(other._values)

    def __repr__(self):
        nz = {k: v for k, v in self._values.items() if v}
        return f"JointAngles({nz})"


@dataclass(frozen=True)
class Violation:
    joint: str
    value: float
    lower: float
    upper: float

    def __str__(self):
        return f"{self.joint} = {self.value:g} outside [{self.lower:g}, {self.upper:g}]"


@dataclass(frozen=True)
class FingerSpec:
    base: tuple
    splay_deg: float
    lengths: tuple
    radius: float


@dataclass(frozen=True)
class HandSkeleton:
    palm_radii: tuple
    fingers: dict
    thumb: FingerSpec
    thumb_rest_yaw_deg: float
    thumb_limits: tuple = (-15.0, 90.0)
    palm_limits: tuple = (-15.0, 90.0)

    @classmethod
    def from_dict(cls, d: dict) -> "HandSkeleton":
        def finger(spec):
            lengths = tuple(float(x) for x in spec["lengths"])
            if len(lengths) != 3 or not all(x > 0 for x in lengths):
                raise HandPoseError("each chain needs three positive link lengths")
            return FingerSpec(tuple(float(x) for x in spec["base"]), float(spec.get("splay_deg", 0.0)),
                              lengths, float(spec["radius"]))

        fingers = {name: finger(d["fingers"][name]) for name in FINGERS}
        return cls(
            palm_radii=tuple(float(r) for r in d["palm"]["radii"]),
            fingers=fingers,
            thumb=finger(d["thumb"]),
            thumb_rest_yaw_deg=float(d["thumb"].get("rest_yaw_deg", 0.0)),
            thumb_limits=tuple(d.get("thumb_limits_deg", (-15.0, 90.0))),
            palm_limits=tuple(d.get("palm_limits_deg", (-15.0, 90.0))),
        )

    @classmethod
    def default(cls) -> "HandSkeleton":
        text = resources.files("handpose.handmodel").joinpath("data/hand.json").read_text()
        return cls.from_dict(json.loads(text))

    def limits(self, joint: str) -> tuple[float, float]:
        group, j = joint.split(".")
        if group in FINGERS:
            return FINGER_LIMITS[j]
        if group == "thumb":
            return self.thumb_limits
        return self.palm_limits


def validate_joint_limits(angles: JointAngles, skeleton: HandSkeleton | None = None) -> list[Violation]:
    """Closed-interval limit check; returns an empty list when every joint is valid."""
    skeleton = skeleton or _default_skeleton()
    out = []
    for name in JOINT_NAMES:
        lo, hi = skeleton.limits(name)
        v = angles[name]
        if not (lo <= v <= hi):
            out.append(Violation(name, v, lo, hi))
    return out


_DEFAULT = None


def _default_skeleton():
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = HandSkeleton.default()
    return _DEFAULT


def _tr(x=0.0, y=0.0, z=0.0, R=None):
    return RigidTransform(np.eye(3) if R is None else R, (x, y, z))


def _flex(deg):
    # Rotation about local y that tips the +x link towards +z.
    return rot_y(-deg)


def palm_frame(angles: JointAngles) -> RigidTransform:
    R = rot_z(angles["palm.yaw"]) @ rot_y(angles["palm.pitch"]) @ rot_x(angles["palm.roll"])
    return RigidTransform(R, np.zeros(3))


def joint_frames(skeleton: HandSkeleton, angles: JointAngles) -> dict[str, RigidTransform]:
    """World frames of every joint and fingertip.

    Keys are ``"<chain>.<joint>"`` with joints ``mcp, pip, dip, tip`` for the
    fingers and ``tm, mcp, ip, tip`` for the thumb, plus ``"palm"``. Each frame's
    +x axis points along the link that leaves the joint.
    """
    palm = palm_frame(angles)
    frames = {"palm": palm}
    for f in FINGERS:
        spec = skeleton.fingers[f]
        L1, L2, L3 = spec.lengths
        base = compose(palm, _tr(*spec.base, R=rot_z(spec.splay_deg)))
        mcp = compose(base, _tr(R=rot_z(angles[f"{f}.mcp_aa"]) @ _flex(angles[f"{f}.mcp_f"])))
        pip = compose(mcp, _tr(L1, R=_flex(angles[f"{f}.pip"])))
        dip = compose(pip, _tr(L2, R=_flex(angles[f"{f}.dip"])))
        tip = compose(dip, _tr(L3))
        frames.update({f"{f}.mcp": mcp, f"{f}.pip": pip, f"{f}.dip": dip, f"{f}.tip": tip})

    spec = skeleton.thumb
    L1, L2, L3 = spec.lengths
    # Positive thumb angles move towards opposition (across the palm, towards -y).
    base = compose(palm, _tr(*spec.base, R=rot_z(skeleton.thumb_rest_yaw_deg)
                             @ rot_x(angles["thumb.base_roll"]) @ rot_z(-angles["thumb.base_yaw"])))
    tm = compose(base, _tr(R=rot_z(-angles["thumb.tm_aa"]) @ _flex(angles["thumb.tm_f"])))
    mcp = compose(tm, _tr(L1, R=rot_z(-angles["thumb.mcp_aa"]) @ _flex(angles["thumb.mcp_f"])))
    ip = compose(mcp, _tr(L2, R=_flex(angles["thumb.ip"])))
    tip = compose(ip, _tr(L3))
    frames.update({"thumb.tm": tm, "thumb.mcp": mcp, "thumb.ip": ip, "thumb.tip": tip})
    return frames


_CHAIN_JOINTS = {f: ("mcp", "pip", "dip", "tip") for f in FINGERS}
_CHAIN_JOINTS["thumb"] = ("tm", "mcp", "ip", "tip")
_LINK_NAMES = ("proximal", "middle", "distal")

# Maps local z (cylinder axis) onto the link's +x direction.
_Z_TO_X = rot_y(90.0)


def forward_kinematics(skeleton: HandSkeleton, angles: JointAngles) -> list[Primitive]:
    """World-frame primitives for a posed hand.

    One ellipsoid for the palm, one cylinder per phalanx and one sphere per
    joint and fingertip (rounding the capsule ends).

    Raises:
        JointLimitError: any angle outside its limits.
    """
    violations = validate_joint_limits(angles, skeleton)
    if violations:
        raise JointLimitError(violations)
    frames = joint_frames(skeleton, angles)
    prims = [Primitive("ellipsoid", radii=skeleton.palm_radii, pose=frames["palm"], name="palm")]
    chains = [(f, skeleton.fingers[f]) for f in FINGERS] + [("thumb", skeleton.thumb)]
    for chain, spec in chains:
        joints = _CHAIN_JOINTS[chain]
        for k, L in enumerate(spec.lengths):
            frame = frames[f"{chain}.{joints[k]}"]
            pose = compose(frame, _tr(L / 2.0, R=_Z_TO_X))
            prims.append(Primitive("cylinder", radius=spec.radius, half_length=L / 2.0, pose=pose,
                                   name=f"{chain}.{_LINK_NAMES[k]}"))
        for j in joints:
            prims.append(Primitive("sphere", radius=spec.radius, pose=frames[f"{chain}.{j}"],
                                   name=f"{chain}.{j}.cap"))
    return prims
