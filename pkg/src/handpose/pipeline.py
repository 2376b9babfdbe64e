"""Frame-sequence matching: background removal, clustering, and model matching per frame.

Two strategies:

* ``static``: the first frame runs stochastic ICP for every gesture model;
  later frames start each model from the previous frame's pose and run
  standard ICP. The best model's increment is applied to all models.
* ``grasping``: the first frame (two clusters) finds which cluster is the
  object and which gesture the hand cluster shows; while the clusters stay
  apart both are tracked with standard ICP; once they merge, stochastic ICP
  with the interaction models only.

Every prototype shares one canonical frame, so a single cumulative pose per
model suffices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from handpose.clustering import cluster_cloud, extract_clusters
from handpose.errors import ConfigError, HandPoseError
from handpose.fileio import (
    ModelLibrary,
    check_keys,
    load_model_library,
    read_cloud,
    read_json,
    transform_to_dict,
    write_json,
)
from handpose.geometry import NNIndex, RigidTransform, apply_transform, as_cloud, child_seed, compose, rms_nearest
from handpose.ransac import RansacConfig, fit_plane_ransac, remove_background
from handpose.registration import IcpConfig, StochasticIcpConfig, icp, stochastic_icp

log = logging.getLogger(__name__)

RMSE_FLOOR = 1e-9
STRATEGIES = ("static", "grasping")
PHASES = ("static", "detection", "separate", "merged")


def probabilities(rmse) -> np.ndarray:
    """Inverse-RMSE weights normalised to sum to 1; RMSE floored at 1e-9 m."""
    r = np.asarray(rmse, dtype=float).reshape(-1)
    if r.size == 0:
        raise HandPoseError("empty rmse list")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise HandPoseError("rmse values must be finite and non-negative")
    inv = 1.0 / np.maximum(r, RMSE_FLOOR)
    return inv / inv.sum()


def detect_merge(counts) -> int | None:
    """Frame index where the cluster count first drops from 2 to 1 (None if never).

    Raises:
        HandPoseError: the sequence does not start with two clusters.
    """
    counts = list(counts)
    if not counts or counts[0] != 2:
        raise HandPoseError("expected two clusters at start")
    for k in range(1, len(counts)):
        if counts[k] == 1 and counts[k - 1] == 2:
            return k
    return None


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class ClusteringConfig:
    algorithm: str = "dbscan"
    eps: float = 0.02
    min_pts: int = 10
    radius: float = 0.02
    min_size: int = 1
    k: int = 2
    max_iters: int = 100

    def __post_init__(self):
        if self.algorithm not in ("dbscan", "ece", "kmeans"):
            raise ConfigError(f"unknown clustering algorithm {self.algorithm!r}")


@dataclass(frozen=True)
class PipelineConfig:
    strategy: str = "static"
    manifest: str | None = None
    seed: int = 0
    ransac: RansacConfig = field(default_factory=RansacConfig)
    remove_background: bool = True
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    min_cluster_points: int = 30
    icp: IcpConfig = field(default_factory=IcpConfig)
    stochastic: StochasticIcpConfig = field(default_factory=StochasticIcpConfig)
    hand_models: tuple | None = None  # restricts the competing hand set; default: every gesture

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.min_cluster_points < 1:
            raise ConfigError("min_cluster_points must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "PipelineConfig":
        check_keys(d, ("strategy", "manifest", "seed", "ransac", "remove_background", "clustering",
                       "min_cluster_points", "icp", "stochastic", "hand_models"), "config")
        kw = {k: d[k] for k in ("strategy", "seed", "remove_background", "min_cluster_points") if k in d}
        if "manifest" in d:
            p = Path(d["manifest"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            kw["manifest"] = str(p)
        sections = {
            "ransac": (RansacConfig, ("tau", "max_iterations", "min_consensus")),
            "clustering": (ClusteringConfig, ("algorithm", "eps", "min_pts", "radius", "min_size", "k",
                                              "max_iters")),
            "icp": (IcpConfig, ("max_iter", "err")),
            "stochastic": (StochasticIcpConfig, ("n", "sigma", "inner_max_it", "final_max_iter", "err",
                                                 "per_point_noise", "align_centroids")),
        }
        for key, (klass, allowed) in sections.items():
            if key in d:
                check_keys(d[key], allowed, f"config.{key}")
                try:
                    kw[key] = klass(**d[key])
                except HandPoseError as exc:
                    raise ConfigError(f"config.{key}: {exc}") from None
        if "hand_models" in d and d["hand_models"] is not None:
            kw["hand_models"] = tuple(str(x) for x in d["hand_models"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(read_json(path), Path(path).parent)

    def check_library(self, library: ModelLibrary) -> None:
        need = ("gesture",) if self.strategy == "static" else ("gesture", "object", "interaction")
        for cat in need:
            if not library.by_category(cat):
                raise ConfigError(f"strategy {self.strategy!r} needs at least one {cat!r} model")
        for name in self.hand_models or ():
            if name not in library or library[name].category != "gesture":
                raise ConfigError(f"hand model {name!r} is not a gesture in the library")


def derive_seed(seed: int, *keys: int) -> int:
    return int(child_seed(seed, *keys).generate_state(1, np.uint64)[0])


# -- state ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelState:
    """A library prototype and its cumulative pose; ``cloud`` is always the posed prototype."""

    name: str
    category: str
    canonical: np.ndarray
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    @property
    def cloud(self) -> np.ndarray:
        return apply_transform(self.canonical, self.pose)

    def moved(self, increment: RigidTransform) -> "ModelState":
        return replace(self, pose=compose(increment, self.pose))


def initial_states(library: ModelLibrary) -> dict[str, ModelState]:
    return {e.name: ModelState(e.name, e.category, e.cloud) for e in library}


@dataclass(frozen=True)
class TrackContext:
    """Grasping-strategy bookkeeping carried between frames."""

    phase: str | None = None  # None until detection succeeds
    object_name: str | None = None
    object_centroid: tuple | None = None


@dataclass(frozen=True, eq=False)
class ModelScore:
    name: str
    rmse: float
    probability: float
    pose: RigidTransform  # cumulative pose estimated for this model in this frame
    increment: RigidTransform


@dataclass(frozen=True, eq=False)
class ObjectTrack:
    name: str
    rmse: float
    pose: RigidTransform
    cluster: int


@dataclass(frozen=True, eq=False)
class FrameResult:
    frame: int
    phase: str | None = None
    scores: tuple = ()
    selected: str | None = None
    best_increment: RigidTransform | None = None
    states: dict | None = None
    context: TrackContext = field(default_factory=TrackContext)
    object: ObjectTrack | None = None
    hand_cluster: int | None = None
    cluster_count: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def score(self, name) -> ModelScore:
        return next(s for s in self.scores if s.name == name)

    @property
    def rmse(self) -> dict:
        return {s.name: s.rmse for s in self.scores}


# -- matching ------------------------------------------------------------------------

def _stochastic_cfg(cfg: PipelineConfig, *keys) -> StochasticIcpConfig:
    return replace(cfg.stochastic, seed=derive_seed(cfg.seed, *keys))


def _fit_models(models, data, index, cfg, stochastic, seed_keys):
    """Register each model state onto ``data``; returns [(increment, rmse)]."""
    out = []
    for j, st in enumerate(models):
        start = st.cloud
        if stochastic:
            inc = stochastic_icp(start, data, _stochastic_cfg(cfg, *seed_keys, j), index).transform
        else:
            inc = icp(start, data, cfg.icp, index).transform
        out.append((inc, rms_nearest(apply_transform(start, inc), data, index)))
    return out


def _score(models, fits):
    rmse = [r for _, r in fits]
    probs = probabilities(rmse)
    best = int(np.argmin(rmse))
    scores = tuple(
        ModelScore(st.name, r, float(p), compose(inc, st.pose), inc)
        for st, (inc, r), p in zip(models, fits, probs)
    )
    return scores, best


def _hand_models(states, cfg):
    names = cfg.hand_models
    out = [s for s in states.values() if s.category == "gesture" and (names is None or s.name in names)]
    if not out:
        raise HandPoseError("no gesture models")
    return out


def match_static(frame_cloud, states: dict, first_frame: bool, cfg: PipelineConfig,
                 frame: int = 0) -> FrameResult:
    """Select the gesture best explaining ``frame_cloud`` and update every model pose."""
    P = as_cloud(frame_cloud)
    if P.shape[0] == 0:
        raise HandPoseError("empty frame cloud")
    models = _hand_models(states, cfg)
    index = NNIndex(P)
    fits = _fit_models(models, P, index, cfg, first_frame, (frame, 1))
    scores, best = _score(models, fits)
    inc = fits[best][0]
    new_states = {name: st.moved(inc) for name, st in states.items()}
    return FrameResult(frame, "static", scores, scores[best].name, inc, new_states, TrackContext("static"))


def _centroid(c):
    return np.asarray(c).mean(axis=0)


def match_grasp(clusters, states: dict, context: TrackContext, cfg: PipelineConfig,
                frame: int = 0) -> FrameResult:
    """One frame of the grasping strategy.

    ``clusters`` holds one or two clouds. ``context.phase`` is None before the
    detection frame, then ``separate`` until the clusters merge; ``merged`` is
    kept for the rest of the sequence.
    """
    clusters = [as_cloud(c) for c in clusters]
    n = len(clusters)
    if n == 0 or n > 2:
        raise HandPoseError(f"unsupported cluster count {n}")
    hands = _hand_models(states, cfg)
    objects = [s for s in states.values() if s.category == "object"]
    interactions = [s for s in states.values() if s.category == "interaction"]
    hand_like = {s.name for s in states.values() if s.category in ("gesture", "interaction")}

    if context.phase is None:
        if n != 2:
            raise HandPoseError("expected two clusters at start")
        if not objects:
            raise HandPoseError("no object models")
        # Object detection: every object model against both clusters.
        best = None
        for c, cloud in enumerate(clusters):
            index = NNIndex(cloud)
            fits = _fit_models(objects, cloud, index, cfg, True, (frame, 2, c))
            for st, (inc, r) in zip(objects, fits):
                if best is None or r < best[0]:
                    best = (r, c, st, inc)
        r_obj, c_obj, obj_state, obj_inc = best
        c_hand = 1 - c_obj
        hand = clusters[c_hand]
        fits = _fit_models(hands, hand, NNIndex(hand), cfg, True, (frame, 3))
        scores, b = _score(hands, fits)
        inc = fits[b][0]
        new_states = {}
        for name, st in states.items():
            if name == obj_state.name:
                new_states[name] = st.moved(obj_inc)
            elif name in hand_like:
                new_states[name] = st.moved(inc)
            else:
                new_states[name] = st
        obj = ObjectTrack(obj_state.name, r_obj, new_states[obj_state.name].pose, c_obj)
        ctx = TrackContext("separate", obj_state.name, tuple(_centroid(clusters[c_obj])))
        return FrameResult(frame, "detection", scores, scores[b].name, inc, new_states, ctx, obj, c_hand, n)

    if context.phase == "separate" and n == 2:
        prev = np.asarray(context.object_centroid)
        d = [np.linalg.norm(_centroid(c) - prev) for c in clusters]
        c_obj = int(np.argmin(d))
        c_hand = 1 - c_obj
        obj_state = states[context.object_name]
        obj_cloud = clusters[c_obj]
        obj_index = NNIndex(obj_cloud)
        obj_inc = icp(obj_state.cloud, obj_cloud, cfg.icp, obj_index).transform
        r_obj = rms_nearest(apply_transform(obj_state.cloud, obj_inc), obj_cloud, obj_index)
        hand = clusters[c_hand]
        fits = _fit_models(hands, hand, NNIndex(hand), cfg, False, (frame, 4))
        scores, b = _score(hands, fits)
        inc = fits[b][0]
        new_states = {}
        for name, st in states.items():
            if name == obj_state.name:
                new_states[name] = st.moved(obj_inc)
            elif name in hand_like:
                new_states[name] = st.moved(inc)
            else:
                new_states[name] = st
        obj = ObjectTrack(obj_state.name, r_obj, new_states[obj_state.name].pose, c_obj)
        ctx = replace(context, object_centroid=tuple(_centroid(obj_cloud)))
        return FrameResult(frame, "separate", scores, scores[b].name, inc, new_states, ctx, obj, c_hand, n)

    # Merged (sticky): stochastic ICP with the interaction models on the whole foreground.
    if not interactions:
        raise HandPoseError("no interaction models")
    P = as_cloud(np.concatenate(clusters))
    fits = _fit_models(interactions, P, NNIndex(P), cfg, True, (frame, 5))
    scores, b = _score(interactions, fits)
    inc = fits[b][0]
    new_states = {name: st.moved(inc) for name, st in states.items()}
    ctx = replace(context, phase="merged")
    return FrameResult(frame, "merged", scores, scores[b].name, inc, new_states, ctx, None, None, n)


# -- sequence ---------------------------------------------------------------------------

def segment_frame(cloud, cfg: PipelineConfig, frame: int = 0) -> list[np.ndarray]:
    """Background removal and clustering; clusters below ``min_cluster_points`` are dropped."""
    pts = as_cloud(cloud, allow_empty=False)
    if cfg.remove_background:
        rc = replace(cfg.ransac, seed=derive_seed(cfg.seed, frame, 0))
        plane, _ = fit_plane_ransac(pts, rc)
        pts = remove_background(pts, plane, rc.tau)
    if pts.shape[0] == 0:
        raise HandPoseError("no foreground points after background removal")
    c = cfg.clustering
    labeling = cluster_cloud(pts, c.algorithm, eps=c.eps, min_pts=c.min_pts, radius=c.radius,
                             min_size=c.min_size, k=c.k, seed=derive_seed(cfg.seed, frame, 6),
                             max_iters=c.max_iters)
    clusters = [cl for cl in extract_clusters(pts, labeling) if cl.shape[0] >= cfg.min_cluster_points]
    if not clusters:
        raise HandPoseError("no clusters in frame")
    return clusters


class Sequence:
    """Stateful frame-by-frame runner; ``process`` never raises on per-frame failures."""

    def __init__(self, library: ModelLibrary, cfg: PipelineConfig):
        cfg.check_library(library)
        self.library = library
        self.cfg = cfg
        self.states = initial_states(library)
        self.context = TrackContext()
        self.frame = 0
        self.results: list[FrameResult] = []

    def process(self, cloud) -> FrameResult:
        """Match one frame; ``cloud`` is an array or a cloud file path."""
        k = self.frame
        self.frame += 1
        try:
            if isinstance(cloud, (str, Path)):
                cloud = read_cloud(cloud)
            clusters = segment_frame(cloud, self.cfg, k)
            if self.cfg.strategy == "static":
                P = np.concatenate(clusters)
                res = match_static(P, self.states, self.context.phase is None, self.cfg, k)
                res = replace(res, cluster_count=len(clusters))
            else:
                res = match_grasp(clusters, self.states, self.context, self.cfg, k)
        except (HandPoseError, OSError) as exc:
            log.warning("frame %d skipped: %s", k, exc)
            res = FrameResult(k, error=str(exc), context=self.context)
        else:
            self.states = res.states
            self.context = res.context
        self.results.append(res)
        return res


def run_sequence(frames, cfg: PipelineConfig, library: ModelLibrary | None = None) -> list[FrameResult]:
    """Process frames in order; each item is a cloud array or a cloud file path."""
    frames = list(frames)
    if not frames:
        raise HandPoseError("empty frame list")
    if library is None:
        if cfg.manifest is None:
            raise ConfigError("config has no model manifest")
        library = load_model_library(cfg.manifest)
    seq = Sequence(library, cfg)
    for f in frames:
        seq.process(f)
    return seq.results


def poses_document(results) -> dict:
    frames = []
    for r in results:
        entry = {"frame": r.frame, "phase": r.phase, "selected": r.selected}
        if r.error is not None:
            entry["error"] = r.error
        if r.states:
            entry["models"] = {n: transform_to_dict(s.pose) for n, s in r.states.items()}
        if r.object is not None:
            entry["object"] = {"name": r.object.name, "cluster": r.object.cluster,
                               "rmse_mm": r.object.rmse * 1000.0}
        frames.append(entry)
    return {"frames": frames}


def write_poses(results, path) -> None:
    write_json(poses_document(results), path)
