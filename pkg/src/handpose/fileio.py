"""Readers and writers for clouds, model manifests, transforms and per-frame metrics.

Cloud formats:

* XYZ text: one ``x y z`` line per point (meters); blank and ``#`` lines skipped.
* PLY ascii: ``vertex`` element with ``x``, ``y``, ``z`` properties. Other
  vertex properties and trailing elements are ignored. Binary PLY is rejected.

Every float is written with 9 significant digits so that identical inputs give
byte-identical files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from handpose.errors import ConfigError, HandPoseError, ParseError
from handpose.geometry import RigidTransform, as_cloud

CATEGORIES = ("gesture", "object", "interaction")
FORMATS = ("xyz", "ply")


def fmt(x) -> str:
    """Fixed 9-significant-digit float text; negative zero printed as 0."""
    v = float(x) + 0.0
    return f"{v:.9g}"


def round9(x) -> float:
    return float(fmt(x))


def infer_format(path) -> str:
    return "ply" if str(path).lower().endswith(".ply") else "xyz"


def _check_format(fmt_name):
    if fmt_name not in FORMATS:
        raise HandPoseError(f"unknown cloud format {fmt_name!r}; expected one of {FORMATS}")


def _parse_finite(tokens, path, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(path, f"non-numeric value in {' '.join(tokens)!r}", lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError(path, "non-finite coordinate", lineno)
    return vals


def read_cloud(path, format: str | None = None) -> np.ndarray:
    """Read a cloud in file order.

    Raises:
        FileNotFoundError: missing file.
        ParseError: malformed line (with its 1-based number) or non-finite value.
    """
    path = Path(path)
    fmt_name = format or infer_format(path)
    _check_format(fmt_name)
    if not path.is_file():
        raise FileNotFoundError(f"no such cloud file: {path}")
    if fmt_name == "ply":
        return _read_ply(path)
    pts = []
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            tokens = s.split()
            if len(tokens) != 3:
                raise ParseError(path, f"expected 3 fields, found {len(tokens)}", lineno)
            pts.append(_parse_finite(tokens, path, lineno))
    return as_cloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


def _read_ply(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        text = None
    head_end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or head_end < 0:
        raise ParseError(path, "not a PLY file (missing 'ply' magic or 'end_header')", 1)
    header = raw[:head_end].decode("ascii", errors="replace").splitlines()
    elements = []  # [name, count, [props]]
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(path, f"unsupported PLY format {' '.join(tok[1:])!r}; only ascii is supported", lineno)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(path, "malformed element line", lineno)
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise ParseError(path, "property before any element", lineno)
            elements[-1][2].append(tok[-1])
    if text is None:
        raise ParseError(path, "PLY body is not ascii")
    header_lines = len(header) + 1
    body = text[text.find("end_header") + len("end_header"):].splitlines()[1:]
    pts = []
    cursor = 0
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        try:
            ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
        except ValueError:
            raise ParseError(path, "vertex element lacks x/y/z properties") from None
        for k in range(count):
            lineno = header_lines + cursor + k + 1
            if cursor + k >= len(body):
                raise ParseError(path, f"expected {count} vertices, file ended early", lineno)
            tok = body[cursor + k].split()
            if len(tok) < len(props):
                raise ParseError(path, f"expected {len(props)} fields, found {len(tok)}", lineno)
            pts.append(_parse_finite([tok[ix], tok[iy], tok[iz]], path, lineno))
        break
    return as_cloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


def write_cloud(cloud, path, format: str | None = None) -> None:
    pts = as_cloud(cloud)
    fmt_name = format or infer_format(path)
    _check_format(fmt_name)
    lines = [" ".join(fmt(v) for v in p) for p in pts]
    if fmt_name == "ply":
        header = [
            "ply",
            "format ascii 1.0",
            f"element vertex {len(lines)}",
            "property float x",
            "property float y",
            "property float z",
            "end_header",
        ]
        lines = header + lines
    text = "\n".join(lines) + ("\n" if lines else "")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


# -- structured text (JSON) helpers ------------------------------------------

def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.msg, exc.lineno) from None


def _rounded(obj):
    if isinstance(obj, float):
        return round9(obj)
    if isinstance(obj, (np.floating,)):
        return round9(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _rounded(obj.tolist())
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def write_json(obj, path) -> None:
    text = json.dumps(_rounded(obj), indent=2, sort_keys=False) + "\n"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def check_keys(d: dict, allowed, where: str, required=()) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ConfigError(f"{where}: missing required key(s) {', '.join(missing)}")


def transform_to_dict(T: RigidTransform) -> dict:
    return {"R": T.R.reshape(-1).tolist(), "t": T.t.tolist()}


def transform_from_dict(d: dict, where="transform") -> RigidTransform:
    check_keys(d, ("R", "t"), where, required=("R", "t"))
    return RigidTransform(np.asarray(d["R"], dtype=float).reshape(3, 3), np.asarray(d["t"], dtype=float))


def write_transform(T: RigidTransform, path) -> None:
    """Transform file: ``{"R": [9 values, row-major], "t": [3 values]}``."""
    write_json(transform_to_dict(T), path)


def read_transform(path) -> RigidTransform:
    return transform_from_dict(read_json(path), str(path))


# -- model library --------------------------------------------------------------

@dataclass(frozen=True)
class ModelEntry:
    name: str
    category: str
    cloud: np.ndarray
    path: str | None = None


class ModelLibrary:
    """Named prototype clouds, all expressed in the same canonical hand frame."""

    def __init__(self, entries):
        entries = list(entries)
        if not entries:
            raise ConfigError("no models")
        self._entries = {}
        for e in entries:
            if e.category not in CATEGORIES:
                raise ConfigError(f"model {e.name!r}: unknown category {e.category!r}")
            if e.name in self._entries:
                raise ConfigError(f"duplicate model name {e.name!r}")
            if as_cloud(e.cloud).shape[0] == 0:
                raise ConfigError(f"model {e.name!r} has an empty cloud")
            self._entries[e.name] = ModelEntry(e.name, e.category, as_cloud(e.cloud), e.path)

    @classmethod
    def from_clouds(cls, models: dict) -> "ModelLibrary":
        """``models`` maps name -> (category, cloud)."""
        return cls(ModelEntry(name, cat, cloud) for name, (cat, cloud) in models.items())

    def __getitem__(self, name) -> ModelEntry:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def by_category(self, category) -> list[ModelEntry]:
        return [e for e in self._entries.values() if e.category == category]


def load_model_library(manifest_path) -> ModelLibrary:
    """Load ``{"models": [{"name", "category", "path"}, ...]}``.

    Relative cloud paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    doc = read_json(manifest_path)
    check_keys(doc, ("models",), str(manifest_path), required=("models",))
    items = doc["models"]
    if not isinstance(items, list) or not items:
        raise ConfigError("no models")
    entries = []
    seen = set()
    for k, item in enumerate(items):
        where = f"{manifest_path}: models[{k}]"
        check_keys(item, ("name", "category", "path"), where, required=("name", "category", "path"))
        name, cat = str(item["name"]), str(item["category"])
        if name in seen:
            raise ConfigError(f"duplicate model name {name!r}")
        seen.add(name)
        if cat not in CATEGORIES:
            raise ConfigError(f"{where}: unknown category {cat!r}")
        p = Path(item["path"])
        if not p.is_absolute():
            p = manifest_path.parent / p
        entries.append(ModelEntry(name, cat, read_cloud(p), str(p)))
    return ModelLibrary(entries)


def write_manifest(entries, path) -> None:
    """``entries``: iterable of (name, category, cloud path)."""
    doc = {"models": [{"name": n, "category": c, "path": str(p)} for n, c, p in entries]}
    write_json(doc, path)


# -- per-frame metrics ------------------------------------------------------------

METRICS_HEADER = ["frame", "model", "rmse_mm", "probability", "selected"] + [
    f"r{i}{j}" for i in range(3) for j in range(3)
] + ["tx", "ty", "tz"]


def metrics_rows(results) -> list[str]:
    rows = [",".join(METRICS_HEADER)]
    for res in results:
        for s in res.scores:
            fields = [
                str(res.frame),
                s.name,
                fmt(s.rmse * 1000.0),
                fmt(s.probability),
                "true" if s.name == res.selected else "false",
            ]
            fields += [fmt(v) for v in s.pose.R.reshape(-1)]
            fields += [fmt(v) for v in s.pose.t]
            rows.append(",".join(fields))
    return rows


def write_frame_metrics(results, path) -> None:
    """CSV with one row per (frame, competing model); frames that failed are omitted."""
    results = [r for r in results if r.scores]
    if not results:
        raise HandPoseError("no frame results to write")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(metrics_rows(results)) + "\n")


def remove_quietly(paths) -> None:
    for p in paths:
        try:
            os.remove(p)
        except OSError:
            pass
