"""Synthetic scenes built from rectangles, a ray-cast spinning LiDAR, IMU and drifting odometry.

Scene coordinates put the floor at ``z = -sensor_height`` so the sensor starts
near the map origin, which is what the automatic initializer assumes.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cloud import PointCloud
from ..lie import Pose, between, se3_exp, so3_exp
from ..zupt import G
from .config import _format, _parse
from .dataset import Dataset


SCENES = ("room", "corridor", "parkinglot")
# used when ``length`` is left at 0
DEFAULT_LENGTH = {"room": 12.0, "corridor": 40.0, "parkinglot": 40.0}


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "corridor"  # room | corridor | parkinglot
    length: float = 0.0  # corridor length, room x extent, lot side; 0 = kind default
    width: float = 2.4
    height: float = 3.0
    hall_size: float = 8.0
    sensor_height: float = 1.0
    # lidar
    n_beams: int = 32
    vfov_deg: float = 45.0
    azimuth_step_deg: float = 2.0
    max_range: float = 12.0
    min_range: float = 0.3
    scan_noise: float = 0.01
    frame_rate: float = 10.0
    # motion
    speed: float = 1.5  # peak linear speed, m/s
    yaw_rate: float = 0.6  # peak yaw rate, rad/s
    pause: float = 5.0  # length of each stationary segment, s
    # imu
    imu_rate: float = 100.0
    imu_noise_a: float = 0.02
    imu_noise_w: float = 0.001
    # odometry
    odom_drift: float = 0.01  # systematic translation error per metre travelled
    odom_yaw_drift: float = 5e-4  # systematic yaw error, rad per metre
    odom_noise: float = 0.002  # random translation noise per metre
    odom_noise_rot: float = 0.001  # random rotation noise per metre
    odom_floor: float = 1e-5  # random noise floor per step (m and rad)
    # maps
    map_spacing: float = 0.1
    gt_map_spacing: float = 0.05
    seed: int = 7

    def __post_init__(self):
        if self.kind not in SCENES:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {sorted(SCENES)}")
        if self.length == 0:
            object.__setattr__(self, "length", DEFAULT_LENGTH[self.kind])
        for name in ("length", "width", "height", "hall_size", "sensor_height", "max_range", "frame_rate",
                     "imu_rate", "speed", "yaw_rate", "map_spacing", "gt_map_spacing", "azimuth_step_deg",
                     "vfov_deg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("scan_noise", "imu_noise_a", "imu_noise_w", "odom_drift", "odom_yaw_drift",
                     "odom_noise", "odom_noise_rot", "odom_floor", "pause", "min_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_beams < 1:
            raise ValueError("n_beams must be >= 1")


def load_scene_spec(path) -> SceneSpec:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names
    if not parser.read(path):
        raise FileNotFoundError(f"cannot read scene spec {path}")
    if not parser.has_section("scene"):
        raise ValueError(f"{path}: missing [scene] section")
    base = SceneSpec()
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    kwargs = {}
    for key, raw in parser.items("scene"):
        if key not in known:
            raise ValueError(f"{path}: unknown key {key!r} in [scene]")
        kwargs[key] = _parse(raw, known[key])
    return dataclasses.replace(base, **kwargs)


def save_scene_spec(spec: SceneSpec, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names
    parser["scene"] = {f.name: _format(getattr(spec, f.name)) for f in dataclasses.fields(spec)}
    with open(path, "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------- geometry


@dataclass
class Scene:
    """Rectangles given by centre, two in-plane unit axes and half extents."""

    centers: list = field(default_factory=list)
    u: list = field(default_factory=list)
    v: list = field(default_factory=list)
    half: list = field(default_factory=list)

    def add_rect(self, center, u, v, hu, hv):
        self.centers.append(np.asarray(center, float))
        self.u.append(np.asarray(u, float))
        self.v.append(np.asarray(v, float))
        self.half.append((float(hu), float(hv)))

    def add_aligned(self, lo, hi):
        """Axis-aligned rectangle between two corners that share one coordinate."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        flat = np.flatnonzero(np.isclose(lo, hi))
        if len(flat) != 1:
            raise ValueError("corners must differ in exactly two coordinates")
        a, b = [i for i in range(3) if i != flat[0]]
        eu, ev = np.eye(3)[a], np.eye(3)[b]
        self.add_rect(0.5 * (lo + hi), eu, ev, 0.5 * abs(hi[a] - lo[a]), 0.5 * abs(hi[b] - lo[b]))

    def add_box(self, lo, hi):
        """Five visible faces of a box standing on the floor (bottom face omitted)."""
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        self.add_aligned((x0, y0, z0), (x0, y1, z1))
        self.add_aligned((x1, y0, z0), (x1, y1, z1))
        self.add_aligned((x0, y0, z0), (x1, y0, z1))
        self.add_aligned((x0, y1, z0), (x1, y1, z1))
        self.add_aligned((x0, y0, z1), (x1, y1, z1))

    def arrays(self):
        C = np.array(self.centers)
        U = np.array(self.u)
        V = np.array(self.v)
        N = np.cross(U, V)
        H = np.array(self.half)
        return C, U, V, N, H

    def sample(self, spacing: float) -> PointCloud:
        """Grid samples over every rectangle, with the rectangle normal."""
        pts, nrm = [], []
        for c, u, v, (hu, hv) in zip(self.centers, self.u, self.v, self.half):
            su = np.arange(-hu, hu + 1e-9, spacing)
            sv = np.arange(-hv, hv + 1e-9, spacing)
            gu, gv = np.meshgrid(su, sv, indexing="ij")
            p = c + gu.reshape(-1, 1) * u + gv.reshape(-1, 1) * v
            pts.append(p)
            nrm.append(np.repeat(np.cross(u, v)[None], len(p), axis=0))
        return PointCloud(np.vstack(pts), np.vstack(nrm))

    def raycast(self, origin, dirs, max_range: float) -> np.ndarray:
        """Distance to the first hit along each unit direction (inf when nothing within range)."""
        C, U, V, N, H = self.arrays()
        origin = np.asarray(origin, float)
        rel = origin - C
        # skip rectangles that cannot be reached within max_range
        near = np.abs(np.einsum("pj,pj->p", rel, N)) <= max_range
        near &= np.linalg.norm(rel, axis=1) <= max_range + np.hypot(H[:, 0], H[:, 1])
        C, U, V, N, H, rel = C[near], U[near], V[near], N[near], H[near], rel[near]
        if len(C) == 0:
            return np.full(len(dirs), np.inf)
        denom = dirs @ N.T
        num = -np.einsum("pj,pj->p", rel, N)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num[None, :] / denom
        t[~((np.abs(denom) > 1e-12) & (t > 1e-9) & (t <= max_range))] = np.inf
        fin = np.isfinite(t)
        tz = np.where(fin, t, 0.0)
        cu = np.einsum("pj,pj->p", rel, U) + tz * (dirs @ U.T)
        cv = np.einsum("pj,pj->p", rel, V) + tz * (dirs @ V.T)
        inside = (np.abs(cu) <= H[:, 0] + 1e-9) & (np.abs(cv) <= H[:, 1] + 1e-9)
        t[~(inside & fin)] = np.inf
        return t.min(axis=1)


def _room_shell(scene: Scene, x0, x1, y0, y1, z0, z1, openings=()):
    """Floor, ceiling and four walls; ``openings`` lists (side, a, b) gaps on the x=x0/x=x1 walls."""
    scene.add_aligned((x0, y0, z0), (x1, y1, z0))
    scene.add_aligned((x0, y0, z1), (x1, y1, z1))
    scene.add_aligned((x0, y0, z0), (x1, y0, z1))
    scene.add_aligned((x0, y1, z0), (x1, y1, z1))
    for side, x in (("x0", x0), ("x1", x1)):
        gaps = sorted((a, b) for s, a, b in openings if s == side)
        ys = [y0]
        for a, b in gaps:
            ys += [a, b]
        ys.append(y1)
        for a, b in zip(ys[0::2], ys[1::2]):
            if b - a > 1e-9:
                scene.add_aligned((x, a, z0), (x, b, z1))


def build_scene(spec: SceneSpec) -> Scene:
    z0 = -spec.sensor_height
    z1 = z0 + spec.height
    s = Scene()
    if spec.kind == "room":
        L, W = spec.length, spec.hall_size
        _room_shell(s, -L / 2, L / 2, -W / 2, W / 2, z0, z1)
        s.add_box((L / 2 - 2.0, W / 2 - 1.5, z0), (L / 2 - 1.0, W / 2 - 0.5, z0 + 1.0))
        s.add_box((-L / 2 + 0.5, -W / 2 + 0.5, z0), (-L / 2 + 2.5, -W / 2 + 1.3, z0 + 0.8))
    elif spec.kind == "corridor":
        hs, L, w = spec.hall_size, spec.length, spec.width / 2
        xa0, xa1 = -hs + 2.0, 2.0
        xb0, xb1 = xa1 + L, xa1 + L + hs
        _room_shell(s, xa0, xa1, -hs / 2, hs / 2, z0, z1, [("x1", -w, w)])
        _room_shell(s, xb0, xb1, -hs / 2, hs / 2, z0, z1, [("x0", -w, w)])
        # corridor: floor, ceiling, side walls
        s.add_aligned((xa1, -w, z0), (xb0, w, z0))
        s.add_aligned((xa1, -w, z1), (xb0, w, z1))
        s.add_aligned((xa1, -w, z0), (xb0, -w, z1))
        s.add_aligned((xa1, w, z0), (xb0, w, z1))
        # furniture so the halls are well constrained and asymmetric
        s.add_box((xa0 + 1.0, 1.5, z0), (xa0 + 1.6, 2.1, z1))
        s.add_box((xa0 + 1.5, -hs / 2 + 0.5, z0), (xa0 + 2.7, -hs / 2 + 1.3, z0 + 1.0))
        s.add_box((xb1 - 2.0, -1.8, z0), (xb1 - 1.4, -1.2, z1))
        s.add_box((xb0 + 2.0, hs / 2 - 1.2, z0), (xb0 + 3.5, hs / 2 - 0.4, z0 + 1.2))
    else:  # parkinglot: open garage floor with a pillar grid
        L = spec.length
        _room_shell(s, -L / 2, L / 2, -L / 2, L / 2, z0, z1)
        for px in np.arange(-L / 2 + 6.0, L / 2 - 3.0, 8.0):
            for py in np.arange(-L / 2 + 6.0, L / 2 - 3.0, 8.0):
                s.add_box((px - 0.3, py - 0.3, z0), (px + 0.3, py + 0.3, z1))
    return s


# -------------------------------------------------------------- trajectory


def _smooth(tau):
    """Quintic smoothstep and its first two derivatives in ``tau``."""
    s = tau**3 * (10 - 15 * tau + 6 * tau**2)
    ds = 30 * tau**2 * (1 - tau) ** 2
    dds = 60 * tau * (1 - tau) * (1 - 2 * tau)
    return s, ds, dds


@dataclass(frozen=True)
class Segment:
    t0: float
    t1: float
    p0: np.ndarray
    p1: np.ndarray
    yaw0: float
    yaw1: float

    @property
    def static(self) -> bool:
        return bool(np.allclose(self.p0, self.p1) and self.yaw0 == self.yaw1)


@dataclass
class Trajectory:
    segments: list

    @property
    def duration(self) -> float:
        return self.segments[-1].t1

    def _eval(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        starts = np.array([s.t0 for s in self.segments])
        idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(self.segments) - 1)
        pos = np.zeros((len(t), 3))
        vel = np.zeros((len(t), 3))
        acc = np.zeros((len(t), 3))
        yaw = np.zeros(len(t))
        yawd = np.zeros(len(t))
        for k, seg in enumerate(self.segments):
            m = idx == k
            if not m.any():
                continue
            T = seg.t1 - seg.t0
            tau = np.clip((t[m] - seg.t0) / T, 0.0, 1.0)
            s, ds, dds = _smooth(tau)
            dp = seg.p1 - seg.p0
            dy = seg.yaw1 - seg.yaw0
            pos[m] = seg.p0 + s[:, None] * dp
            vel[m] = (ds / T)[:, None] * dp
            acc[m] = (dds / T**2)[:, None] * dp
            yaw[m] = seg.yaw0 + s * dy
            yawd[m] = ds / T * dy
        return pos, vel, acc, yaw, yawd

    def poses(self, t) -> list:
        pos, _, _, yaw, _ = self._eval(t)
        return [Pose(so3_exp([0.0, 0.0, y]), p) for p, y in zip(pos, yaw)]

    def speed(self, t) -> np.ndarray:
        _, vel, _, _, yawd = self._eval(t)
        return np.linalg.norm(vel, axis=1)

    def static_mask(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, float))
        out = np.zeros(len(t), dtype=bool)
        for seg in self.segments:
            if seg.static:
                out |= (t >= seg.t0) & (t <= seg.t1)
        return out

    def static_intervals(self) -> list:
        return [(s.t0, s.t1) for s in self.segments if s.static]

    def imu(self, t) -> np.ndarray:
        """(M, 7) noiseless specific force and body rate: ``f = R^T (a + g e_z)``, ``w = (0, 0, yaw')``."""
        _, _, acc, yaw, yawd = self._eval(t)
        f_world = acc + np.array([0.0, 0.0, G])
        c, s = np.cos(yaw), np.sin(yaw)
        f_body = np.column_stack([c * f_world[:, 0] + s * f_world[:, 1],
                                  -s * f_world[:, 0] + c * f_world[:, 1],
                                  f_world[:, 2]])
        w = np.column_stack([np.zeros(len(yaw)), np.zeros(len(yaw)), yawd])
        return np.column_stack([np.atleast_1d(t), f_body, w])


def build_trajectory(waypoints, spec: SceneSpec) -> Trajectory:
    """``waypoints``: list of (x, y, yaw, pause_after). Each leg is a quintic blend."""
    segs = []
    t = 0.0
    x, y, yaw, pause = waypoints[0]
    p = np.array([x, y, 0.0])
    if pause > 0:
        segs.append(Segment(t, t + pause, p, p, yaw, yaw))
        t += pause
    for x, y, yaw1, pause in waypoints[1:]:
        q = np.array([x, y, 0.0])
        dist = float(np.linalg.norm(q - p))
        T = max(1.875 * dist / spec.speed, 1.875 * abs(yaw1 - yaw) / spec.yaw_rate, 1.0)
        segs.append(Segment(t, t + T, p, q, yaw, yaw1))
        t += T
        p, yaw = q, yaw1
        if pause > 0:
            segs.append(Segment(t, t + pause, p, p, yaw, yaw))
            t += pause
    return Trajectory(segs)


def default_waypoints(spec: SceneSpec) -> list:
    P = spec.pause
    if spec.kind == "corridor":
        xb = 2.0 + spec.length + spec.hall_size / 2
        return [(0.0, 0.0, 0.0, P), (xb, 0.0, 0.0, P), (xb, 0.0, math.pi, 0.0), (0.0, 0.5, math.pi, P)]
    if spec.kind == "room":
        a, b = spec.length / 2 - 2.0, spec.hall_size / 2 - 1.5
        return [(0.0, 0.0, 0.0, P), (a, -b, -0.4, 0.0), (a, b, 1.2, P), (-a, b, 2.6, 0.0),
                (-a, -b, 3.8, 0.0), (0.0, 0.0, 2 * math.pi, P)]
    h = spec.length / 2 - 8.0
    return [(0.0, 0.0, 0.0, P), (h, 0.0, 0.0, 0.0), (h, h, math.pi / 2, P), (0.0, h, math.pi, 0.0),
            (0.0, 0.0, 3 * math.pi / 2, P)]


# ------------------------------------------------------------------- sensors


def beam_directions(spec: SceneSpec) -> np.ndarray:
    half = math.radians(spec.vfov_deg) / 2
    el = np.linspace(-half, half, spec.n_beams) if spec.n_beams > 1 else np.zeros(1)
    az = np.radians(np.arange(0.0, 360.0, spec.azimuth_step_deg))
    E, A = np.meshgrid(el, az, indexing="ij")
    return np.column_stack([(np.cos(E) * np.cos(A)).ravel(), (np.cos(E) * np.sin(A)).ravel(), np.sin(E).ravel()])


def scan_at(scene: Scene, X: Pose, spec: SceneSpec, rng: np.random.Generator | None = None,
            dirs: np.ndarray | None = None) -> PointCloud:
    """Sensor-frame points seen from pose X; Gaussian range noise when ``rng`` is given."""
    dirs = beam_directions(spec) if dirs is None else dirs
    rng_ = scene.raycast(X.t, dirs @ X.R.T, spec.max_range)
    ok = np.isfinite(rng_) & (rng_ >= spec.min_range)
    r = rng_[ok]
    if rng is not None and spec.scan_noise > 0:
        r = r + rng.normal(0.0, spec.scan_noise, len(r))
    return PointCloud(dirs[ok] * r[:, None])


@dataclass
class Simulation:
    dataset: Dataset
    scene: Scene
    trajectory: Trajectory
    spec: SceneSpec


def simulate(spec: SceneSpec, waypoints=None) -> Simulation:
    """Deterministic synthetic dataset (prior map, scans, IMU, odometry, ground truth)."""
    rng = np.random.default_rng(spec.seed)
    scene = build_scene(spec)
    traj = build_trajectory(waypoints or default_waypoints(spec), spec)
    n_frames = int(math.floor(traj.duration * spec.frame_rate)) + 1
    t_frames = np.arange(n_frames) / spec.frame_rate
    gt = traj.poses(t_frames)

    dirs = beam_directions(spec)
    scans = [scan_at(scene, X, spec, rng, dirs) for X in gt]

    t_imu = np.arange(int(math.floor(traj.duration * spec.imu_rate)) + 1) / spec.imu_rate
    imu = traj.imu(t_imu)
    imu[:, 1:4] += rng.normal(0.0, spec.imu_noise_a, (len(t_imu), 3))
    imu[:, 4:7] += rng.normal(0.0, spec.imu_noise_w, (len(t_imu), 3))

    # odometry: systematic drift plus white noise whose covariance is reported
    bias_dir = np.array([0.6, 0.3, 0.74])
    bias_dir /= np.linalg.norm(bias_dir)
    odom = [Pose()]
    covs = [np.zeros((6, 6))]
    for k in range(1, n_frames):
        Z = between(gt[k - 1], gt[k])
        d = float(np.linalg.norm(Z.t))
        sr = spec.odom_noise_rot * d + spec.odom_floor
        st = spec.odom_noise * d + spec.odom_floor
        sig = np.array([sr, sr, sr, st, st, st])
        bias = np.concatenate([[0.0, 0.0, spec.odom_yaw_drift * d], spec.odom_drift * d * bias_dir])
        eps = bias + rng.normal(0.0, 1.0, 6) * sig
        odom.append(odom[-1] @ (Z @ se3_exp(eps)))
        covs.append(np.diag(sig**2))

    ds = Dataset(
        frame_times=t_frames,
        frames=scans,
        imu=imu,
        odom_times=t_frames.copy(),
        odom_poses=odom,
        odom_covs=np.array(covs),
        prior_map=scene.sample(spec.map_spacing),
        gt_times=t_frames.copy(),
        gt_poses=gt,
        gt_map=scene.sample(spec.gt_map_spacing),
        meta={"kind": spec.kind, "static_intervals": traj.static_intervals()},
    )
    return Simulation(ds, scene, traj, spec)


def write_simulation(sim: Simulation, out_dir, config_overrides: dict | None = None) -> Path:
    """Dataset files, the scene spec and a ready-to-run ``config.ini``; returns the config path."""
    from .config import DataPaths, PipelineConfig, save_config
    from .dataset import save_dataset

    out = Path(out_dir)
    data = save_dataset(sim.dataset, out)
    save_scene_spec(sim.spec, out / "scene.ini")
    cfg = PipelineConfig(data=DataPaths(**data))
    if config_overrides:
        cfg = dataclasses.replace(cfg, **config_overrides)
    save_config(cfg, out / "config.ini")
    return out / "config.ini"
