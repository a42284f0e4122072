"""Point clouds, PCD/PLY I/O, voxel filtering, normals and the k-d tree index."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .lie import Pose

log = logging.getLogger(__name__)

# PCD field name -> (PointCloud attribute, column)
_NORMAL_FIELDS = ("normal_x", "normal_y", "normal_z")


class CloudFormatError(ValueError):
    """Raised for malformed PCD/PLY files."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points with optional normals, timestamps and extra per-point scalars.

    ``normal_valid`` marks normals that came out of a well-conditioned
    neighbourhood; rows flagged False hold zeros and are skipped by ICP.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    normal_valid: np.ndarray | None = None
    timestamps: np.ndarray | None = None
    scalars: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != n:
                raise ValueError("normals and points differ in length")
            object.__setattr__(self, "normals", nrm)
            valid = self.normal_valid
            if valid is None:
                valid = np.ones(n, dtype=bool)
            object.__setattr__(self, "normal_valid", np.asarray(valid, dtype=bool).reshape(n))
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=float).reshape(n)
            object.__setattr__(self, "timestamps", ts)
        for key, val in self.scalars.items():
            if len(val) != n:
                raise ValueError(f"scalar field {key!r} has wrong length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, mask_or_idx) -> "PointCloud":
        return PointCloud(
            self.points[mask_or_idx],
            None if self.normals is None else self.normals[mask_or_idx],
            None if self.normal_valid is None else self.normal_valid[mask_or_idx],
            None if self.timestamps is None else self.timestamps[mask_or_idx],
            {k: np.asarray(v)[mask_or_idx] for k, v in self.scalars.items()},
        )

    def with_scalar(self, name: str, values) -> "PointCloud":
        scalars = dict(self.scalars)
        scalars[name] = np.asarray(values, dtype=float)
        return replace(self, scalars=scalars)


def concatenate(clouds) -> PointCloud:
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.vstack([c.points for c in clouds]))


def transform_cloud(cloud: PointCloud, X: Pose) -> PointCloud:
    """Map points by X; normals are rotated only."""
    normals = None if cloud.normals is None else cloud.normals @ X.R.T
    return replace(cloud, points=X.act(cloud.points), normals=normals)


@dataclass(frozen=True)
class VoxelFilterConfig:
    leaf_size: float = 0.1

    def __post_init__(self):
        if not self.leaf_size > 0:
            raise ValueError("leaf_size must be positive")


def voxel_ids(points: np.ndarray, leaf_size: float) -> np.ndarray:
    return np.floor(points / leaf_size).astype(np.int64)


def voxel_downsample(cloud: PointCloud, cfg: VoxelFilterConfig | float) -> PointCloud:
    """One centroid per occupied voxel. Normals and extra fields are dropped.

    Output order follows the lexicographic order of the voxel index, so the
    result is deterministic for a given input set.
    """
    leaf = cfg.leaf_size if isinstance(cfg, VoxelFilterConfig) else float(cfg)
    if leaf <= 0:
        raise ValueError("leaf_size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)))
    ids = voxel_ids(cloud.points, leaf)
    ids -= ids.min(axis=0)
    ext = ids.max(axis=0) + 1
    if float(ext[0]) * float(ext[1]) * float(ext[2]) < 2.0**62:
        # mixed-radix key keeps the lexicographic order of the index triples
        key = (ids[:, 0] * ext[1] + ids[:, 1]) * ext[2] + ids[:, 2]
        _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    else:
        _, inverse, counts = np.unique(ids, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None])


class SpatialIndex:
    """Exact nearest-neighbour queries over a frozen cloud (k-d tree)."""

    def __init__(self, cloud: PointCloud, leafsize: int = 16):
        self.cloud = cloud
        self._tree = cKDTree(cloud.points, leafsize=leafsize, balanced_tree=True) if len(cloud) else None

    def __len__(self) -> int:
        return len(self.cloud)

    def query(self, queries, max_dist: float = np.inf, k: int = 1):
        """Vectorised nearest neighbour(s). Missing matches get index -1 and distance inf."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        if self._tree is None:
            shape = (len(q),) if k == 1 else (len(q), k)
            return np.full(shape, np.inf), np.full(shape, -1, dtype=np.int64)
        bound = np.inf if not np.isfinite(max_dist) else float(max_dist) * (1 + 1e-12) + 1e-300
        d, idx = self._tree.query(q, k=k, distance_upper_bound=bound)
        idx = np.where(np.isfinite(d), idx, -1).astype(np.int64)
        if np.isfinite(max_dist):
            far = d > max_dist
            d = np.where(far, np.inf, d)
            idx = np.where(far, -1, idx)
        return d, idx

    def nearest(self, q, max_dist: float = np.inf):
        """Closest point id and distance, or None when nothing lies within ``max_dist``."""
        d, idx = self.query(np.asarray(q, dtype=float)[None], max_dist)
        if idx[0] < 0:
            return None
        return int(idx[0]), float(d[0])

    def radius(self, q, r: float) -> np.ndarray:
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        return np.asarray(sorted(self._tree.query_ball_point(np.asarray(q, dtype=float), r)), dtype=np.int64)

    def knn(self, queries, k: int):
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        d, idx = self._tree.query(q, k=k)
        return d.reshape(len(q), k), idx.reshape(len(q), k)


def estimate_normals(cloud: PointCloud, k: int = 20, viewpoint=(0.0, 0.0, 0.0), planarity_tol: float = 1e-6) -> PointCloud:
    """k-NN PCA normals oriented towards ``viewpoint``.

    A neighbourhood whose two largest covariance eigenvalues are not both
    significant (rank < 2) yields an invalid normal.
    """
    n = len(cloud)
    if k < 3 or n < k:
        raise ValueError(f"need at least k >= 3 points (k={k}, n={n})")
    index = SpatialIndex(cloud)
    _, nbr = index.knn(cloud.points, k)
    nb = cloud.points[nbr]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 1e-300)
    valid = (evals[:, 1] / scale > planarity_tol) & (evals[:, 2] > 1e-20)
    to_view = np.asarray(viewpoint, dtype=float) - cloud.points
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~valid] = 0.0
    return replace(cloud, normals=normals, normal_valid=valid)


# --------------------------------------------------------------------------- I/O

_PCD_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA")
_PCD_DTYPES = {("F", 4): "<f4", ("F", 8): "<f8", ("I", 1): "<i1", ("I", 2): "<i2", ("I", 4): "<i4",
               ("I", 8): "<i8", ("U", 1): "<u1", ("U", 2): "<u2", ("U", 4): "<u4", ("U", 8): "<u8"}


def _cloud_from_columns(cols: dict, path) -> PointCloud:
    for key in "xyz":
        if key not in cols:
            raise CloudFormatError(f"{path}: missing field {key!r}")
    pts = np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(float)
    normals = None
    if all(f in cols for f in _NORMAL_FIELDS):
        normals = np.column_stack([cols[f] for f in _NORMAL_FIELDS]).astype(float)
    extra = {k: np.asarray(v, dtype=float) for k, v in cols.items()
             if k not in ("x", "y", "z", "timestamp", *_NORMAL_FIELDS)}
    ts = np.asarray(cols["timestamp"], dtype=float) if "timestamp" in cols else None

    bad = ~np.all(np.isfinite(pts), axis=1)
    ndrop = int(bad.sum())
    if ndrop:
        msg = f"{path}: dropped {ndrop} NaN point(s)"
        log.warning(msg)
        warnings.warn(msg, stacklevel=3)
        keep = ~bad
        pts = pts[keep]
        normals = None if normals is None else normals[keep]
        ts = None if ts is None else ts[keep]
        extra = {k: v[keep] for k, v in extra.items()}
    valid = None
    if normals is not None:
        norm = np.linalg.norm(normals, axis=1)
        valid = np.isfinite(norm) & (np.abs(norm - 1.0) < 1e-3)
        normals = np.where(valid[:, None], normals / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    return PointCloud(pts, normals, valid, ts, extra)


def _read_pcd(path: Path) -> PointCloud:
    raw = path.read_bytes()
    header = {}
    pos = 0
    lineno = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CloudFormatError(f"{path}: header ended before DATA line")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        lineno += 1
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        if key not in _PCD_KEYS:
            raise CloudFormatError(f"{path}: line {lineno}: unexpected header entry {line!r}")
        header[key] = vals
        if key == "DATA":
            break

    try:
        fields = header["FIELDS"]
        npts = int(header["POINTS"][0])
        sizes = [int(s) for s in header.get("SIZE", ["4"] * len(fields))]
        types = header.get("TYPE", ["F"] * len(fields))
        counts = [int(c) for c in header.get("COUNT", ["1"] * len(fields))]
        mode = header["DATA"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise CloudFormatError(f"{path}: incomplete header ({exc})") from None
    if not (len(fields) == len(sizes) == len(types) == len(counts)):
        raise CloudFormatError(f"{path}: FIELDS/SIZE/TYPE/COUNT lengths disagree")
    if any(c != 1 for c in counts):
        raise CloudFormatError(f"{path}: COUNT != 1 is not supported")

    if mode == "ascii":
        text = raw[pos:].decode("ascii").split("\n")
        rows = [r.split() for r in text if r.strip()]
        if len(rows) != npts:
            raise CloudFormatError(f"{path}: expected {npts} rows, found {len(rows)}")
        for i, r in enumerate(rows):
            if len(r) != len(fields):
                raise CloudFormatError(f"{path}: data row {i + 1} has {len(r)} values, expected {len(fields)}")
        arr = np.array(rows, dtype=float).reshape(npts, len(fields))
        cols = {f: arr[:, i] for i, f in enumerate(fields)}
    elif mode == "binary":
        try:
            dt = np.dtype([(f, _PCD_DTYPES[(t, s)]) for f, t, s in zip(fields, types, sizes)])
        except KeyError as exc:
            raise CloudFormatError(f"{path}: unsupported TYPE/SIZE {exc}") from None
        need = dt.itemsize * npts
        if len(raw) - pos < need:
            raise CloudFormatError(f"{path}: binary payload truncated")
        rec = np.frombuffer(raw, dtype=dt, count=npts, offset=pos)
        cols = {f: rec[f] for f in fields}
    else:
        raise CloudFormatError(f"{path}: unsupported DATA mode {mode!r}")
    return _cloud_from_columns(cols, path)


def _read_ply(path: Path) -> PointCloud:
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}: line 1: missing 'ply' magic")
    nvert = None
    props = []
    in_vertex = False
    body = None
    for i, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise CloudFormatError(f"{path}: line {i}: only ASCII PLY is supported")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                nvert = int(tok[2])
        elif tok[0] == "property":
            if in_vertex:
                props.append(tok[-1])
        elif tok[0] == "end_header":
            body = lines[i:]
            break
        else:
            raise CloudFormatError(f"{path}: line {i}: unexpected header entry {line!r}")
    if body is None or nvert is None:
        raise CloudFormatError(f"{path}: incomplete PLY header")
    if nvert == 0:
        return PointCloud(np.zeros((0, 3)))
    rows = [r.split() for r in body[:nvert]]
    arr = np.array(rows, dtype=float).reshape(nvert, -1)[:, : len(props)]
    names = {"nx": "normal_x", "ny": "normal_y", "nz": "normal_z"}
    cols = {names.get(p, p): arr[:, j] for j, p in enumerate(props)}
    return _cloud_from_columns(cols, path)


def load_cloud(path) -> PointCloud:
    """Read a PCD (ascii/binary) or ASCII PLY file. NaN points are dropped with a warning."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pcd":
        return _read_pcd(path)
    if suffix == ".ply":
        return _read_ply(path)
    raise CloudFormatError(f"{path}: unknown cloud format {suffix!r}")


def save_cloud(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write PCD v0.7 (float64 fields, little-endian binary by default)."""
    path = Path(path)
    if path.suffix.lower() != ".pcd":
        raise CloudFormatError(f"{path}: only PCD output is supported")
    cols = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2]}
    if cloud.normals is not None:
        for j, f in enumerate(_NORMAL_FIELDS):
            cols[f] = cloud.normals[:, j]
    if cloud.timestamps is not None:
        cols["timestamp"] = cloud.timestamps
    for key, val in cloud.scalars.items():
        cols[key] = np.asarray(val, dtype=float)
    names = list(cols)
    n = len(cloud)
    head = [
        "# .PCD v0.7 - Point Cloud Data file format",
        "VERSION 0.7",
        "FIELDS " + " ".join(names),
        "SIZE " + " ".join(["8"] * len(names)),
        "TYPE " + " ".join(["F"] * len(names)),
        "COUNT " + " ".join(["1"] * len(names)),
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        f"DATA {'binary' if binary else 'ascii'}",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[(f, "<f8") for f in names])
            for f in names:
                rec[f] = cols[f]
            fh.write(rec.tobytes())
        else:
            arr = np.column_stack([cols[f] for f in names]) if n else np.zeros((0, len(names)))
            for row in arr:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
