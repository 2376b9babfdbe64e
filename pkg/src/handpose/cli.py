"""``handpose`` command line: one subcommand per pipeline stage plus end-to-end ``run``.

Exit codes: 0 success, 1 usage error (nothing written), 2 runtime failure
(outputs written by the failing command are removed). Lengths are meters,
angles degrees.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from handpose import __version__
from handpose.clustering import cluster_cloud, extract_clusters
from handpose.errors import HandPoseError
from handpose.fileio import (
    check_keys,
    read_cloud,
    read_json,
    remove_quietly,
    transform_to_dict,
    write_cloud,
    write_frame_metrics,
    write_json,
    write_transform,
)
from handpose.geometry import RigidTransform, apply_transform, euler_deg
from handpose.handmodel import (
    HandSkeleton,
    JointAngles,
    PlacedModel,
    SceneSpec,
    generate_model,
    generate_named_model,
    generate_scene,
    pose_names,
    primitive_from_dict,
)
from handpose.pipeline import PipelineConfig, run_sequence, write_poses
from handpose.ransac import PlaneModel, RansacConfig, fit_plane_ransac, remove_background
from handpose.registration import IcpConfig, StochasticIcpConfig, icp, stochastic_icp

log = logging.getLogger("handpose")

CLOUD_SUFFIXES = (".xyz", ".ply")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive(kind=float):
    def check(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return check


def _non_negative(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _seed(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _vec3(text):
    parts = text.split(",")
    try:
        v = [float(p) for p in parts]
    except ValueError:
        v = []
    if len(v) != 3 or not all(np.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return tuple(v)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="handpose", description="Hand-pose estimation from xyz point clouds.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("segment-plane", help="remove the dominant plane with RANSAC")
    s.add_argument("--input", required=True, help="input cloud (.xyz or .ply)")
    s.add_argument("--tau", type=_positive(), default=0.1, help="inlier distance threshold (m)")
    s.add_argument("--max-iters", type=_positive(int), default=1000, help="RANSAC iterations")
    s.add_argument("--min-consensus", type=_positive(int), default=None,
                   help="minimum inlier count (default: half the points)")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--output", required=True, help="foreground cloud file")
    s.add_argument("--plane-out", required=True, help="plane file (JSON: n, d; meters)")

    s = sub.add_parser("cluster", help="split a foreground cloud into clusters")
    s.add_argument("--input", required=True)
    s.add_argument("--algo", choices=("dbscan", "ece", "kmeans"), default="dbscan")
    s.add_argument("--eps", type=_positive(), default=0.02, help="DBSCAN neighbourhood radius (m)")
    s.add_argument("--min-pts", type=_positive(int), default=10, help="DBSCAN core threshold (self included)")
    s.add_argument("--radius", type=_positive(), default=0.02, help="ECE linking radius (m)")
    s.add_argument("--min-size", type=_positive(int), default=1, help="ECE smallest kept component")
    s.add_argument("--k", type=_positive(int), default=2, help="K-means cluster count")
    s.add_argument("--max-iters", type=_positive(int), default=100, help="K-means Lloyd iterations")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--format", choices=("ply", "xyz"), default="ply", help="cluster file format")
    s.add_argument("--output-prefix", required=True,
                   help="writes PREFIX_<id>.<format> per cluster and PREFIX_labels.txt")

    s = sub.add_parser("gen-model", help="render a hand/object prototype cloud")
    s.add_argument("--pose", required=True,
                   help=f"shipped pose name ({', '.join(pose_names())}) or a JSON angles file (degrees)")
    s.add_argument("--viewpoint", type=_vec3, default=(0.0, 0.0, 1.8), help="sensor position x,y,z (m)")
    s.add_argument("--density", type=_positive(), default=20000.0, help="surface samples per m^2")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--output", required=True)

    s = sub.add_parser("gen-scene", help="compose a synthetic frame from a JSON scene spec")
    s.add_argument("--spec", required=True, help="scene spec (JSON; see README)")
    s.add_argument("--seed", type=_seed, default=None, help="overrides the seed in the scene file")
    s.add_argument("--output", required=True, help="scene cloud")
    s.add_argument("--truth", required=True, help="ground truth JSON (poses, labels)")

    s = sub.add_parser("register", help="align a model cloud onto a data cloud with ICP")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("standard", "stochastic"), default="standard")
    s.add_argument("--max-iter", type=_positive(int), default=30, help="ICP (final refinement) iterations")
    s.add_argument("--inner-max-it", type=_positive(int), default=10, help="iterations per stochastic trial")
    s.add_argument("--err", type=_positive(), default=1e-5, help="relative MSE change stopping threshold")
    s.add_argument("--trials", type=_positive(int), default=50, help="stochastic trials")
    s.add_argument("--sigma", type=_non_negative, default=0.1, help="trial offset std dev (m)")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out-transform", required=True, help="transform JSON (R row-major, t in m)")
    s.add_argument("--out-cloud", default=None, help="aligned model cloud")

    s = sub.add_parser("run", help="process a frame sequence end to end")
    s.add_argument("--config", required=True, help="pipeline config (JSON)")
    s.add_argument("--frames", required=True, nargs="+", help="frame directory or frame files")
    s.add_argument("--metrics", required=True, help="per-frame, per-model CSV (rmse in mm)")
    s.add_argument("--poses", default=None, help="per-frame cumulative model poses (JSON)")
    s.add_argument("--seed", type=_seed, default=None, help="overrides the config seed")
    return p


# -- commands -------------------------------------------------------------------


def cmd_segment_plane(a, out):
    cloud = read_cloud(a.input)
    cfg = RansacConfig(tau=a.tau, max_iterations=a.max_iters, min_consensus=a.min_consensus, seed=a.seed)
    plane, mask = fit_plane_ransac(cloud, cfg)
    fg = remove_background(cloud, plane, a.tau)
    log.info("plane inliers %d / %d", int(mask.sum()), cloud.shape[0])
    out(a.output, lambda p: write_cloud(fg, p))
    out(a.plane_out, lambda p: write_json({"n": plane.n.tolist(), "d": float(plane.d),
                                           "inliers": int(mask.sum())}, p))


def cmd_cluster(a, out):
    cloud = read_cloud(a.input)
    lab = cluster_cloud(cloud, a.algo, eps=a.eps, min_pts=a.min_pts, radius=a.radius,
                        min_size=a.min_size, k=a.k, seed=a.seed, max_iters=a.max_iters)
    for i, c in enumerate(extract_clusters(cloud, lab)):
        out(f"{a.output_prefix}_{i}.{a.format}", lambda p, c=c: write_cloud(c, p))

    def labels(p):
        with open(p, "w", encoding="ascii", newline="\n") as fh:
            fh.write("".join(f"{int(v)}\n" for v in lab.labels))
    out(f"{a.output_prefix}_labels.txt", labels)
    log.info("%d clusters", lab.n_clusters)


def _angles_file(path):
    doc = read_json(path)
    check_keys(doc, ("angles", "object"), str(path))
    angles = JointAngles.from_nested(doc.get("angles", {}))
    extra = [primitive_from_dict(doc["object"])] if "object" in doc else []
    return angles, extra


def cmd_gen_model(a, out):
    if a.pose in pose_names():
        cloud = generate_named_model(a.pose, a.viewpoint, a.density, a.seed)
    elif Path(a.pose).suffix == ".json" or Path(a.pose).is_file():
        angles, extra = _angles_file(a.pose)
        cloud = generate_model(HandSkeleton.default(), angles, a.viewpoint, a.density, a.seed, extra)
    else:
        raise HandPoseError(f"unknown pose {a.pose!r}: not a shipped pose name nor a file")
    out(a.output, lambda p: write_cloud(cloud, p))


SCENE_KEYS = ("plane", "models", "noise_sigma", "viewpoint", "seed", "occlude")
PLANE_KEYS = ("normal", "d", "center", "extent", "density")
MODEL_KEYS = ("name", "pose", "cloud", "seed", "density", "viewpoint", "rotation_deg", "translation")


def scene_from_dict(doc: dict, base_dir=None, seed=None) -> SceneSpec:
    """Build a :class:`SceneSpec` from the JSON scene format (see README)."""
    check_keys(doc, SCENE_KEYS, "scene")
    seed = int(doc.get("seed", 0)) if seed is None else seed
    plane_kw = {}
    if doc.get("plane") is not None:
        pd = doc["plane"]
        check_keys(pd, PLANE_KEYS, "scene.plane", required=("normal", "d"))
        plane_kw = {"plane": PlaneModel(np.asarray(pd["normal"], dtype=float), float(pd["d"])),
                    "plane_center": tuple(pd.get("center", (0.0, 0.0, 0.0))),
                    "extent": tuple(pd.get("extent", (1.0, 1.0))),
                    "plane_density": float(pd.get("density", 20000.0))}
    models = []
    for k, md in enumerate(doc.get("models", [])):
        where = f"scene.models[{k}]"
        check_keys(md, MODEL_KEYS, where)
        if ("pose" in md) == ("cloud" in md):
            raise HandPoseError(f"{where}: give exactly one of 'pose' or 'cloud'")
        if "cloud" in md:
            p = Path(md["cloud"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            cloud = read_cloud(p)
            name = md.get("name", p.stem)
        else:
            cloud = generate_named_model(md["pose"], tuple(md.get("viewpoint", (0.0, 0.0, 1.8))),
                                         float(md.get("density", 20000.0)), int(md.get("seed", seed)))
            name = md.get("name", md["pose"])
        pose = RigidTransform(euler_deg(*md.get("rotation_deg", (0.0, 0.0, 0.0))),
                              md.get("translation", (0.0, 0.0, 0.0)))
        models.append(PlacedModel(str(name), cloud, pose))
    return SceneSpec(models=tuple(models), noise_sigma=float(doc.get("noise_sigma", 0.0)),
                     viewpoint=tuple(doc.get("viewpoint", (0.0, 0.0, 0.0))), seed=seed,
                     occlude=bool(doc.get("occlude", True)), **plane_kw)


def cmd_gen_scene(a, out):
    spec = scene_from_dict(read_json(a.spec), Path(a.spec).parent, a.seed)
    scene = generate_scene(spec)
    truth = {
        "models": [{"name": n, "points": int(np.sum(scene.labels == i)), **transform_to_dict(T)}
                   for i, (n, T) in enumerate(zip(scene.names, scene.poses))],
        "labels": scene.labels.tolist(),
    }
    out(a.output, lambda p: write_cloud(scene.cloud, p))
    out(a.truth, lambda p: write_json(truth, p))


def cmd_register(a, out):
    model = read_cloud(a.model)
    data = read_cloud(a.data)
    if a.mode == "standard":
        res = icp(model, data, IcpConfig(a.max_iter, a.err))
        log.info("icp: %d iterations, rmse %.6g m", res.iterations, res.rmse)
    else:
        cfg = StochasticIcpConfig(n=a.trials, sigma=a.sigma, inner_max_it=a.inner_max_it,
                                  final_max_iter=a.max_iter, err=a.err, seed=a.seed)
        res = stochastic_icp(model, data, cfg)
        log.info("stochastic icp: best trial %d, rmse %.6g m", res.best_trial, res.rmse)
    out(a.out_transform, lambda p: write_transform(res.transform, p))
    if a.out_cloud:
        out(a.out_cloud, lambda p: write_cloud(apply_transform(model, res.transform), p))


def frame_files(items) -> list[Path]:
    """A single directory expands to its cloud files; the result is sorted by file name."""
    paths = [Path(x) for x in items]
    if len(paths) == 1 and paths[0].is_dir():
        paths = [p for p in paths[0].iterdir() if p.suffix.lower() in CLOUD_SUFFIXES]
        if not paths:
            raise HandPoseError(f"no .xyz/.ply frames in {items[0]}")
    return sorted(paths, key=lambda p: p.name)


def cmd_run(a, out):
    cfg = PipelineConfig.load(a.config)
    if a.seed is not None:
        cfg = replace(cfg, seed=a.seed)
    results = run_sequence(frame_files(a.frames), cfg)
    for r in results:
        if r.error:
            log.warning("frame %d: %s", r.frame, r.error)
        else:
            log.info("frame %d (%s): %s", r.frame, r.phase, r.selected)
    out(a.metrics, lambda p: write_frame_metrics(results, p))
    if a.poses:
        out(a.poses, lambda p: write_poses(results, p))


COMMANDS = {
    "segment-plane": cmd_segment_plane,
    "cluster": cmd_cluster,
    "gen-model": cmd_gen_model,
    "gen-scene": cmd_gen_scene,
    "register": cmd_register,
    "run": cmd_run,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    written = []

    def out(path, writer):
        written.append(path)
        writer(path)

    try:
        COMMANDS[args.command](args, out)
    except (HandPoseError, OSError) as exc:
        remove_quietly(written)
        print(f"handpose {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
