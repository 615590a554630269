"""File formats: point clouds, camera trajectories, run configs, trees,
depth images (PFM) and wireframe export (OBJ).

Every writer goes through :func:`atomic_write` so a failed command never
leaves a partial file behind.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .binoctree import Binoctree, BuildConfig
from .errors import (
    EmptyCloud,
    EmptyTrajectory,
    InvalidConfig,
    SphoxelError,
    UnreadableFile,
    UnsupportedFormat,
    WriteFailure,
)
from .evaluation import DepthImage
from .geom import Ray
from .intersect import prism_of

log = logging.getLogger(__name__)

PFM_INVALID = 0.0

# Corner pairs differing in exactly one of the (r, theta, phi) bits.
_BOX_EDGES = [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)]


@dataclass
class PointCloud:
    points: np.ndarray
    confidence: Optional[np.ndarray] = None
    skipped: int = 0

    def __len__(self):
        return len(self.points)


@dataclass
class RunConfig:
    alpha_min: float = 1e-3
    elongation_ratio: float = 1.0
    root_theta_divs: int = 2
    root_phi_divs: int = 4
    max_depth: int = 24
    far_margin: float = 1.0
    prune_threshold: int = 3
    min_angular_size: float = 1e-3
    n_sphere: int = 32
    n_coarse: int = 32
    n_fine: int = 32
    n_importance: int = 32
    importance_steps: int = 1
    sharpness: float = 64.0
    trace_tol: float = 1e-5
    seed: int = 0

    def validate(self) -> "RunConfig":
        for name in ("alpha_min", "elongation_ratio", "min_angular_size", "sharpness", "trace_tol"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InvalidConfig(f"{name} must be a positive number, got {v!r}")
        if not 0 <= self.prune_threshold <= 10**6:
            raise InvalidConfig(f"prune_threshold must lie in [0, 1e6], got {self.prune_threshold}")
        if self.far_margin < 1:
            raise InvalidConfig("far_margin must be >= 1")
        counts = (self.n_sphere, self.n_coarse, self.n_fine, self.n_importance)
        if min(counts) < 0 or sum(counts) == 0:
            raise InvalidConfig("sample counts must be non-negative with a positive total")
        if self.importance_steps < 1:
            raise InvalidConfig("importance_steps must be >= 1")
        return self

    def build_config(self) -> BuildConfig:
        return BuildConfig(
            alpha_min=self.alpha_min,
            elongation_ratio=self.elongation_ratio,
            root_theta_divs=self.root_theta_divs,
            root_phi_divs=self.root_phi_divs,
            max_depth=self.max_depth,
        )


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UnreadableFile(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfig("config must be a JSON object")
    known = {f.name: f.type for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise InvalidConfig(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**raw)
    return cfg.validate()


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)


# -- point clouds ------------------------------------------------------------

def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise UnsupportedFormat(f"{path} is not a text file (binary PLY is not supported)") from exc
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc


def _parse_ply_ascii(path) -> tuple[list[list[str]], list[str]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    head_end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or head_end < 0:
        raise UnsupportedFormat(f"{path} is not a PLY file")
    header = raw[:head_end].decode("ascii", errors="replace").splitlines()
    fmt = next((ln.split()[1] for ln in header if ln.startswith("format")), None)
    if fmt != "ascii":
        raise UnsupportedFormat(f"PLY format {fmt!r} is not supported (ascii only)")
    elements = []  # (name, count, [props])
    for ln in header:
        tok = ln.split()
        if not tok:
            continue
        if tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property" and elements:
            if tok[1] == "list":
                elements[-1][2].append(("list", tok[-1]))
            else:
                elements[-1][2].append(("scalar", tok[-1]))
    body = raw[head_end + len(b"end_header") :].decode("ascii", errors="replace").splitlines()
    if body and not body[0].strip():
        body = body[1:]
    skip = 0
    for name, count, props in elements:
        if name == "vertex":
            if any(kind == "list" for kind, _ in props):
                raise UnsupportedFormat("list properties on vertices are not supported")
            rows = [ln.split() for ln in body[skip : skip + count]]
            return rows, [p for _, p in props]
        skip += count
    raise UnsupportedFormat(f"{path} has no vertex element")


def load_point_cloud(path, format: Optional[str] = None) -> PointCloud:
    """Read an ASCII PLY or CSV point cloud; malformed or non-finite rows are skipped and counted."""
    path = Path(path)
    if format is None:
        format = {".ply": "ascii-ply", ".csv": "csv"}.get(path.suffix.lower())
    if format == "ascii-ply":
        rows, names = _parse_ply_ascii(path)
        try:
            cols = [names.index(c) for c in ("x", "y", "z")]
        except ValueError as exc:
            raise UnsupportedFormat("PLY vertices need x, y, z properties") from exc
        conf_col = names.index("confidence") if "confidence" in names else None
        width = len(names)
    elif format == "csv":
        rows, cols, conf_col, width = _csv_rows(_read_text(path), ("x", "y", "z"))
    else:
        raise UnsupportedFormat(f"unsupported point cloud format {format!r}")
    pts, conf, skipped = [], [], 0
    for row in rows:
        try:
            if len(row) < width:
                raise ValueError
            xyz = [float(row[c]) for c in cols]
            cf = float(row[conf_col]) if conf_col is not None else None
        except (ValueError, IndexError):
            skipped += 1
            continue
        if not all(math.isfinite(v) for v in xyz):
            skipped += 1
            continue
        pts.append(xyz)
        conf.append(cf)
    if skipped:
        log.warning("%s: skipped %d malformed or non-finite rows", path, skipped)
    if not pts:
        raise EmptyCloud(f"{path} contains no valid points")
    confidence = np.asarray(conf, dtype=np.float64) if conf_col is not None else None
    return PointCloud(np.asarray(pts, dtype=np.float64), confidence, skipped)


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _csv_rows(text: str, wanted: tuple[str, ...]):
    rows = [r for r in csv.reader(text.splitlines()) if r and any(c.strip() for c in r)]
    if not rows:
        return [], list(range(len(wanted))), None, len(wanted)
    first = [c.strip().lower() for c in rows[0]]
    if not all(_is_number(c) for c in first):
        missing = [w for w in wanted if w not in first]
        if missing:
            raise UnsupportedFormat(f"CSV header lacks columns {missing}")
        cols = [first.index(w) for w in wanted]
        conf = first.index("confidence") if "confidence" in first else None
        return rows[1:], cols, conf, max(cols + ([conf] if conf is not None else [])) + 1
    return rows, list(range(len(wanted))), None, len(wanted)


def load_cameras(path) -> np.ndarray:
    """Camera positions from a ``frame,x,y,z`` CSV, in file order."""
    rows, cols, _, width = _csv_rows(_read_text(path), ("frame", "x", "y", "z"))
    out = []
    for row in rows:
        try:
            out.append([float(row[c]) for c in cols[1:]])
        except (ValueError, IndexError) as exc:
            raise SphoxelError(f"{path}: malformed camera row {row}") from exc
    if not out:
        raise EmptyTrajectory(f"{path} contains no cameras")
    cams = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(cams)):
        raise SphoxelError(f"{path}: non-finite camera position")
    return cams


def load_rays(path) -> list[Ray]:
    rows, cols, _, _ = _csv_rows(_read_text(path), ("ox", "oy", "oz", "dx", "dy", "dz"))
    if not rows:
        raise SphoxelError(f"{path} contains no rays")
    rays = []
    for row in rows:
        try:
            v = [float(row[c]) for c in cols]
            rays.append(Ray(v[:3], v[3:]))
        except (ValueError, IndexError) as exc:
            raise SphoxelError(f"{path}: malformed ray row {row}") from exc
    return rays


def write_ply_ascii(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z", "end_header"]
    lines += [" ".join(repr(float(v)) for v in p) for p in pts]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def write_cameras_csv(path, cams) -> None:
    lines = ["frame,x,y,z"] + [f"{i},{x!r},{y!r},{z!r}" for i, (x, y, z) in enumerate(np.asarray(cams, float).tolist())]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


# -- generic writers -----------------------------------------------------------

def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise WriteFailure(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise WriteFailure(f"cannot write {path}: {exc}") from exc


def save_tree(tree: Binoctree, path) -> None:
    atomic_write(path, tree.to_bytes())


def load_tree(path) -> Binoctree:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    return Binoctree.from_bytes(data)


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


# -- depth images ----------------------------------------------------------------

def pfm_bytes(img: DepthImage) -> bytes:
    h, w = img.depth.shape
    data = np.where(img.mask, img.depth, PFM_INVALID).astype("<f4")
    # PFM stores scanlines bottom-to-top; a negative scale marks little-endian.
    return f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(data[::-1]).tobytes()


def write_pfm(path, img: DepthImage) -> None:
    path = Path(path)
    atomic_write(path, pfm_bytes(img))
    side = {"width": img.width, "height": img.height, "invalid_value": PFM_INVALID}
    atomic_write(path.with_name(path.name + ".json"), (json.dumps(side, sort_keys=True) + "\n").encode())


def read_pfm(path) -> DepthImage:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise UnreadableFile(f"cannot read {path}: {exc}") from exc
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"Pf", b"PF"):
        raise UnsupportedFormat(f"{path} is not a PFM file")
    channels = 1 if parts[0].strip() == b"Pf" else 3
    try:
        w, h = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise UnsupportedFormat(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    arr = np.frombuffer(parts[3], dtype=dtype, count=n) if len(parts[3]) >= 4 * n else None
    if arr is None:
        raise UnsupportedFormat(f"{path}: truncated PFM data")
    depth = arr.reshape(h, w, channels)[..., 0][::-1].astype(np.float64)
    invalid = PFM_INVALID
    side = path.with_name(path.name + ".json")
    if side.exists():
        invalid = float(json.loads(side.read_text()).get("invalid_value", PFM_INVALID))
    mask = np.isfinite(depth) & (depth > 0) & (depth != invalid)
    return DepthImage(np.where(mask, depth, 0.0), mask)


# -- wireframes ---------------------------------------------------------------------

def wireframe_of(bounds) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Distinct prism vertices and frustum edges (no triangle diagonals)."""
    prism = prism_of(bounds)
    b = np.asarray(bounds, dtype=np.float64)
    keep = np.ones(8, dtype=bool)
    if b[2] == 0.0:
        keep[[1, 5]] = False
    if b[3] == math.pi:
        keep[[3, 7]] = False
    remap = np.cumsum(keep) - 1
    for i in range(8):
        if not keep[i]:
            remap[i] = remap[i - 1]
    edges = sorted({(min(remap[a], remap[b_]), max(remap[a], remap[b_])) for a, b_ in _BOX_EDGES if remap[a] != remap[b_]})
    return prism.vertices, [(int(a), int(b_)) for a, b_ in edges]


def wireframe_obj(tree: Binoctree, membership_filter=None) -> str:
    ids = np.flatnonzero(tree.member_mask(membership_filter))
    lines = [f"# sphoxel wireframe: filter={membership_filter} cells={len(ids)}"]
    base = 1
    for i in ids:
        verts, edges = wireframe_of(tree.bounds[i])
        lines.append(f"o sphoxel_{int(i)}")
        lines += ["v %.17g %.17g %.17g" % tuple(v) for v in verts]
        lines += [f"l {a + base} {b + base}" for a, b in edges]
        base += len(verts)
    return "\n".join(lines) + "\n"


def export_wireframe(tree: Binoctree, membership_filter, path) -> None:
    atomic_write(path, wireframe_obj(tree, membership_filter).encode())
