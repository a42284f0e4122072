"""Dataset container and the on-disk formats it is read from and written to.

Layout of a dataset directory::

    prior_map.pcd        prior map
    frames.csv           index,t,file   (one scan per row, paths relative to the csv)
    scans/*.pcd          scans in the sensor frame
    imu.csv              t,ax,ay,az,wx,wy,wz (specific force in m/s^2, rates in rad/s)
    odometry.txt         TUM rows, optionally followed by 21 covariance values
    ground_truth.txt     TUM rows (optional)
    gt_map.pcd           dense reference map (optional)

The odometry covariance on row k is that of the increment from row k-1 to
row k, as a right perturbation in the body frame of row k (row 0 ignored).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cloud import CloudFormatError, PointCloud, load_cloud, save_cloud
from ..lie import Pose

IMU_HEADER = ("t", "ax", "ay", "az", "wx", "wy", "wz")
_IU = np.triu_indices(6)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    frame_times: np.ndarray
    frames: list  # PointCloud per frame, sensor frame
    imu: np.ndarray  # (M, 7)
    odom_times: np.ndarray
    odom_poses: list
    odom_covs: np.ndarray  # (K, 6, 6)
    prior_map: PointCloud
    gt_times: np.ndarray | None = None
    gt_poses: list | None = None
    gt_map: PointCloud | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frame_times = np.asarray(self.frame_times, dtype=float)
        self.odom_times = np.asarray(self.odom_times, dtype=float)
        if len(self.frames) != len(self.frame_times):
            raise DataError("frame count and timestamp count differ")
        for name, t in (("frame", self.frame_times), ("odometry", self.odom_times), ("imu", self.imu[:, 0])):
            if len(t) > 1 and np.any(np.diff(t) <= 0):
                raise DataError(f"{name} timestamps are not strictly increasing")
        if len(self.odom_poses) != len(self.odom_times) or len(self.odom_covs) != len(self.odom_times):
            raise DataError("odometry poses, covariances and timestamps differ in length")
        for k, C in enumerate(self.odom_covs):
            if np.min(np.linalg.eigvalsh(0.5 * (C + C.T))) < -1e-12 * max(1.0, np.abs(C).max()):
                raise DataError(f"odometry covariance on row {k} is not PSD")

    def __len__(self) -> int:
        return len(self.frames)

    def frame_odometry(self, max_diff: float = 0.01) -> np.ndarray:
        """Odometry row index for every frame (nearest timestamp within ``max_diff``)."""
        t = self.odom_times
        pos = np.clip(np.searchsorted(t, self.frame_times), 1, max(1, len(t) - 1))
        left = np.maximum(pos - 1, 0)
        pos = np.minimum(pos, len(t) - 1)
        best = np.where(np.abs(t[left] - self.frame_times) <= np.abs(t[pos] - self.frame_times), left, pos)
        bad = np.abs(t[best] - self.frame_times) > max_diff
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise DataError(f"frame {k} (t={self.frame_times[k]:.6f}) has no odometry within {max_diff} s")
        return best


# ------------------------------------------------------------------ TUM files


def _cov_from_upper(vals) -> np.ndarray:
    C = np.zeros((6, 6))
    C[_IU] = vals
    return C + np.triu(C, 1).T


def read_tum(path, with_cov: bool = False):
    """Rows ``t tx ty tz qx qy qz qw [21 covariance values]``; '#' lines are skipped."""
    path = Path(path)
    times, poses, covs = [], [], []
    try:
        fh = open(path)
    except OSError as e:
        raise DataError(f"cannot open {path}: {e.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) not in (8, 29):
                raise DataError(f"{path}:{lineno}: expected 8 or 29 columns, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            q = np.array(vals[4:8])
            if not np.isfinite(vals).all() or abs(np.linalg.norm(q) - 1.0) > 1e-3:
                raise DataError(f"{path}:{lineno}: invalid pose (non-finite or non-unit quaternion)")
            times.append(vals[0])
            poses.append(Pose.from_quat(vals[1:4], q))
            covs.append(_cov_from_upper(vals[8:]) if len(vals) == 29 else np.zeros((6, 6)))
    times = np.array(times)
    if with_cov:
        return times, poses, np.array(covs).reshape(-1, 6, 6)
    return times, poses


def _fmt(v: float) -> str:
    return repr(float(v))


def write_tum(path, times, poses, covs=None) -> None:
    with open(path, "w") as fh:
        for k, (t, X) in enumerate(zip(times, poses)):
            vals = [t, *X.t, *X.quat()]
            if covs is not None:
                vals += list(np.asarray(covs[k])[_IU])
            fh.write(" ".join(_fmt(v) for v in vals) + "\n")


def write_covariances(path, covs, ids=None) -> None:
    """CSV ``pose_id,c00,c01,...`` with the 21 upper-triangular entries row-major."""
    names = [f"c{i}{j}" for i, j in zip(*_IU)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pose_id", *names])
        for k, C in enumerate(covs):
            w.writerow([k if ids is None else ids[k], *(_fmt(v) for v in np.asarray(C)[_IU])])


def read_covariances(path):
    ids, covs = [], []
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        next(rows, None)
        for row in rows:
            ids.append(int(row[0]))
            covs.append(_cov_from_upper([float(v) for v in row[1:22]]))
    return ids, np.array(covs).reshape(-1, 6, 6)


# ------------------------------------------------------------------------ IMU


def read_imu(path) -> np.ndarray:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError(f"cannot open {path}: {e.strerror}") from None
    if not rows or tuple(c.strip() for c in rows[0]) != IMU_HEADER:
        raise DataError(f"{path}: header must be {','.join(IMU_HEADER)}")
    try:
        arr = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float).reshape(-1, 7)
    except ValueError:
        raise DataError(f"{path}: non-numeric or short row") from None
    return arr


def write_imu(path, imu: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMU_HEADER)
        for row in imu:
            w.writerow([_fmt(v) for v in row])


# -------------------------------------------------------------------- frames


def read_frames(path):
    path = Path(path)
    times, clouds = [], []
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise DataError(f"cannot open {path}: {e.strerror}") from None
    for row in rows:
        try:
            times.append(float(row["t"]))
            clouds.append(load_cloud(path.parent / row["file"]))
        except (KeyError, TypeError):
            raise DataError(f"{path}: expected columns index,t,file") from None
        except (OSError, CloudFormatError) as e:
            raise DataError(str(e)) from None
    return np.array(times), clouds


def write_frames(path, times, clouds, subdir: str = "scans") -> None:
    path = Path(path)
    (path.parent / subdir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "t", "file"])
        for k, (t, c) in enumerate(zip(times, clouds)):
            name = f"{subdir}/{k:06d}.pcd"
            save_cloud(c, path.parent / name)
            w.writerow([k, _fmt(t), name])


# ------------------------------------------------------------------ datasets


def load_dataset(cfg) -> Dataset:
    """Read every stream named in ``cfg.data`` (a PipelineConfig)."""
    def need(name):
        p = cfg.path(name)
        if p is None:
            raise DataError(f"config [data] {name} is not set")
        return p

    try:
        prior = load_cloud(need("prior_map"))
    except (OSError, CloudFormatError) as e:
        raise DataError(f"prior map: {e}") from None
    times, clouds = read_frames(need("frames"))
    imu = read_imu(need("imu"))
    ot, op, oc = read_tum(need("odometry"), with_cov=True)
    ds = Dataset(times, clouds, imu, ot, op, oc, prior)
    gt = cfg.path("ground_truth")
    if gt is not None and gt.exists():
        ds.gt_times, ds.gt_poses = read_tum(gt)
    gm = cfg.path("gt_map")
    if gm is not None and gm.exists():
        ds.gt_map = load_cloud(gm)
    return ds


def save_dataset(ds: Dataset, out_dir) -> dict:
    """Write ``ds`` in the directory layout above; returns the [data] entries."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(ds.prior_map, out / "prior_map.pcd")
    write_frames(out / "frames.csv", ds.frame_times, ds.frames)
    write_imu(out / "imu.csv", ds.imu)
    write_tum(out / "odometry.txt", ds.odom_times, ds.odom_poses, ds.odom_covs)
    data = {"prior_map": "prior_map.pcd", "frames": "frames.csv", "imu": "imu.csv", "odometry": "odometry.txt"}
    if ds.gt_poses is not None:
        write_tum(out / "ground_truth.txt", ds.gt_times, ds.gt_poses)
        data["ground_truth"] = "ground_truth.txt"
    if ds.gt_map is not None:
        save_cloud(ds.gt_map, out / "gt_map.pcd")
        data["gt_map"] = "gt_map.pcd"
    return data
