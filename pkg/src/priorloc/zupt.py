"""Stationary detection, gravity factor and no-motion factor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import Pose, between, se3_log, skew, so3_log

G = 9.81


class ZuptError(ValueError):
    pass


@dataclass(frozen=True)
class ImuSample:
    t: float
    a: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class ZuptConfig:
    window_size: int = 50
    eps_a: float = 0.15
    eps_w: float = 0.01
    eps_t: float = 0.005
    eps_R: float = 0.005
    gravity_dir: tuple = (0.0, 0.0, 1.0)
    imu_sigma_a: float = 0.03
    nm_sigma_rot: float = 1e-3
    nm_sigma_trans: float = 1e-3

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        for name in ("eps_a", "eps_w", "eps_t", "eps_R", "imu_sigma_a", "nm_sigma_rot", "nm_sigma_trans"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if abs(np.linalg.norm(self.gravity_dir) - 1.0) > 1e-9:
            raise ValueError("gravity_dir must be a unit vector")

    @property
    def g(self) -> np.ndarray:
        return np.asarray(self.gravity_dir, dtype=float)


@dataclass(frozen=True)
class StationaryVerdict:
    is_static: bool
    imu_static: bool
    delta_a: float
    delta_w: float
    trans: float
    angle: float


def _as_arrays(window):
    if isinstance(window, np.ndarray):
        return window[:, 1:4], window[:, 4:7]
    a = np.array([s.a for s in window], dtype=float)
    w = np.array([s.w for s in window], dtype=float)
    return a, w


def detect_stationary(window, rel_pose: Pose, cfg: ZuptConfig = ZuptConfig()) -> StationaryVerdict:
    """Two-stage test: IMU spread below thresholds, then odometry increment below thresholds.

    ``window`` is a sequence of ImuSample or an (N, 7) array ``t, ax, ay, az, wx, wy, wz``.
    """
    if len(window) < cfg.window_size:
        raise ZuptError(f"insufficient samples: {len(window)} < {cfg.window_size}")
    a, w = _as_arrays(window)
    a = a[-cfg.window_size:]
    w = w[-cfg.window_size:]
    delta_a = float(np.max(np.linalg.norm(a - a.mean(axis=0), axis=1)))
    delta_w = float(np.max(np.linalg.norm(w - w.mean(axis=0), axis=1)))
    trans = float(np.linalg.norm(rel_pose.t))
    angle = float(np.linalg.norm(so3_log(rel_pose.R)))
    imu_static = delta_a < cfg.eps_a and delta_w < cfg.eps_w
    odom_static = trans < cfg.eps_t and angle < cfg.eps_R
    return StationaryVerdict(bool(imu_static and odom_static), bool(imu_static), delta_a, delta_w, trans, angle)


def _world_accel(X: Pose, a_m) -> np.ndarray:
    a_m = np.asarray(a_m, dtype=float)
    if np.linalg.norm(a_m) <= 0.1 * G:
        raise ZuptError("invalid accelerometer magnitude")
    return X.R @ a_m


def gravity_residual(X: Pose, a_m, g=(0.0, 0.0, 1.0)) -> np.ndarray:
    aw = _world_accel(X, a_m)
    return aw / np.linalg.norm(aw) - np.asarray(g, dtype=float)


def gravity_jacobian(X: Pose, a_m) -> np.ndarray:
    """3x6 Jacobian of the gravity residual under ``X <- exp(delta) X``.

    Rotating the world-frame direction ``u`` by ``dtheta`` moves it by
    ``dtheta x u = -[u]x dtheta``; the norm is unchanged, so the rotation block
    is ``-[u]x`` and the translation block is zero.
    """
    aw = _world_accel(X, a_m)
    u = aw / np.linalg.norm(aw)
    J = np.zeros((3, 6))
    J[:, :3] = -skew(u)
    return J


def gravity_information(J_gf: np.ndarray, sigma_a: float) -> np.ndarray:
    """6x6 information ``J^T (I / sigma^2) J``; rank <= 2, never inverted."""
    J = np.asarray(J_gf, dtype=float)
    return (J.T @ J) / sigma_a**2


def no_motion_residual(X_t: Pose, X_prev: Pose) -> np.ndarray:
    """``Log(X_t^-1 X_prev)``."""
    return se3_log(between(X_t, X_prev))


def no_motion_information(cfg: ZuptConfig = ZuptConfig()) -> np.ndarray:
    sig = np.array([cfg.nm_sigma_rot] * 3 + [cfg.nm_sigma_trans] * 3)
    return np.diag(1.0 / sig**2)


def imu_window(imu: np.ndarray, t: float, n: int) -> np.ndarray:
    """Last ``n`` rows of an (M, 7) IMU array with timestamp <= t (may be shorter)."""
    end = int(np.searchsorted(imu[:, 0], t, side="right"))
    return imu[max(0, end - n):end]
