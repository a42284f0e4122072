"""SO(3)/SE(3) helpers.

Conventions used throughout the package:

* tangent vectors are ordered ``[rotation; translation]`` (``xi = [theta, rho]``),
* perturbations are applied on the left: ``X <- exp(delta) * X``,
* ``Pose`` maps body coordinates into the world frame: ``p_w = R p_b + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

_SMALL = 1e-8
# below this angle the (theta - sin theta) style coefficients lose all precision
_SERIES = 1e-2  # three-term series are exact to ~1e-17 below this
_REORTHO_EVERY = 100
_REORTHO_TOL = 1e-7


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) * 0.5


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def _coeffs(theta: float):
    """A = sin/th, B = (1-cos)/th^2, C = (th - sin)/th^3."""
    if theta < _SERIES:
        t2 = theta * theta
        A = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        B = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        C = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        return A, B, C
    s = np.sin(theta)
    half = np.sin(0.5 * theta)
    A = s / theta
    B = 2.0 * half * half / (theta * theta)
    C = (theta - s) / theta**3
    return A, B, C


def _jinv_coeff(angle: np.ndarray) -> np.ndarray:
    """D in ``J_l^-1 = I - K/2 + D K^2``, half-angle form to avoid cancellation."""
    small = angle < _SERIES
    a = np.where(small, 1.0, angle)
    t2 = angle * angle
    h = 0.5 * a
    closed = (1.0 - h * np.cos(h) / np.sin(h)) / (a * a)
    return np.where(small, 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0, closed)


def _q_coeffs(angle: np.ndarray):
    """Coefficients of the SE(3) left-Jacobian coupling block."""
    small = angle < _SERIES
    a = np.where(small, 1.0, angle)
    a2 = angle * angle
    s, c = np.sin(a), np.cos(a)
    hs = np.sin(0.5 * a)
    c1 = np.where(small, 1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0, (a - s) / a**3)
    c2 = np.where(small, 1.0 / 24.0 - a2 / 720.0 + a2 * a2 / 40320.0, (a * a - 4.0 * hs * hs) / (2.0 * a**4))
    c3 = np.where(small, 1.0 / 120.0 - a2 / 2520.0 + a2 * a2 / 120960.0, (2.0 * a - 3.0 * s + a * c) / (2.0 * a**5))
    return c1, c2, c3


def so3_exp(theta) -> np.ndarray:
    w = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(w))
    K = skew(w)
    if angle < _SMALL:
        return np.eye(3) + K + 0.5 * K @ K
    A, B, _ = _coeffs(angle)
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    axis2s = 2.0 * vee(R)  # = 2 sin(theta) * axis
    s = 0.5 * np.linalg.norm(axis2s)
    c = 0.5 * (np.trace(R) - 1.0)
    angle = np.arctan2(s, c)
    if angle < _SMALL:
        # first order: R ~ I + skew(w)
        return vee(R)
    if np.pi - angle > 1e-4:
        return angle / (2.0 * np.sin(angle)) * axis2s
    # near pi: sin(theta) carries no precision; read the axis off the symmetric part
    S = 0.5 * (R + R.T) - c * np.eye(3)  # = (1 - cos) a a^T
    k = int(np.argmax(np.diag(S)))
    a = S[:, k] / np.sqrt(max(S[k, k], 1e-300))
    a /= np.linalg.norm(a)
    if a @ axis2s < 0:
        a = -a
    return angle * a


def so3_left_jacobian(theta) -> np.ndarray:
    w = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(w))
    K = skew(w)
    _, B, C = _coeffs(angle)
    return np.eye(3) + B * K + C * (K @ K)


def so3_left_jacobian_inv(theta) -> np.ndarray:
    w = np.asarray(theta, dtype=float)
    angle = float(np.linalg.norm(w))
    K = skew(w)
    D = float(_jinv_coeff(np.array(angle)))
    return np.eye(3) - 0.5 * K + D * (K @ K)


def _q_matrix(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # translation/rotation coupling block of the SE(3) left Jacobian
    P = skew(rho)
    T = skew(theta)
    c1, c2, c3 = (float(c) for c in _q_coeffs(np.array(np.linalg.norm(theta))))
    TP = T @ P
    PT = P @ T
    TPT = TP @ T
    return (
        0.5 * P
        + c1 * (TP + PT + TPT)
        + c2 * (T @ TP + PT @ T - 3.0 * TPT)
        + c3 * (TPT @ T + T @ TPT)
    )


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    theta, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(theta)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _q_matrix(rho, theta)
    return out


def se3_left_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    theta, rho = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(theta)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[3:, :3] = -Ji @ _q_matrix(rho, theta) @ Ji
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform (R, t). Immutable; compose with ``@``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # compositions since the rotation was last projected back onto SO(3)
    _chain: int = 0

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(R)):
            raise ValueError("pose contains non-finite values")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quat(cls, t, q_xyzw) -> "Pose":
        R = _ScipyRotation.from_quat(np.asarray(q_xyzw, dtype=float)).as_matrix()
        return cls(R, t)

    def quat(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = _ScipyRotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t, self._chain)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def act(self, points) -> np.ndarray:
        """Apply the transform to an (N, 3) array or a single 3-vector."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def log(self) -> np.ndarray:
        return se3_log(self)

    def __repr__(self) -> str:
        rv = so3_log(self.R)
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.t, 6).tolist()})"


def compose(A: Pose, B: Pose) -> Pose:
    R = A.R @ B.R
    chain = max(A._chain, B._chain) + 1
    if chain >= _REORTHO_EVERY or np.abs(R.T @ R - np.eye(3)).max() > _REORTHO_TOL:
        R = orthonormalize(R)
        chain = 0
    return Pose(R, A.R @ B.t + A.t, chain)


def inverse(A: Pose) -> Pose:
    return A.inverse()


def between(A: Pose, B: Pose) -> Pose:
    """Relative pose ``A^-1 * B``."""
    return compose(A.inverse(), B)


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float)
    theta, rho = xi[:3], xi[3:]
    return Pose(so3_exp(theta), so3_left_jacobian(theta) @ rho)


def se3_log(X: Pose) -> np.ndarray:
    theta = so3_log(X.R)
    rho = so3_left_jacobian_inv(theta) @ X.t
    return np.concatenate([theta, rho])


def adjoint(X: Pose) -> np.ndarray:
    """6x6 adjoint in [rotation; translation] ordering."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = X.R
    Ad[3:, 3:] = X.R
    Ad[3:, :3] = skew(X.t) @ X.R
    return Ad


def transport_covariance(X: Pose, cov: np.ndarray) -> np.ndarray:
    """``Ad(X) cov Ad(X)^T``, symmetrised."""
    Ad = adjoint(X)
    out = Ad @ cov @ Ad.T
    return 0.5 * (out + out.T)


def random_pose(rng: np.random.Generator, max_angle: float = np.pi, max_trans: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return Pose(so3_exp(axis * angle), rng.uniform(-max_trans, max_trans, size=3))


# ----------------------------------------------------------------- batched ops
# Same formulas as above on stacks: rotations (N, 3, 3), vectors (N, 3).


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _vee_batch(M: np.ndarray) -> np.ndarray:
    return 0.5 * np.stack([M[:, 2, 1] - M[:, 1, 2], M[:, 0, 2] - M[:, 2, 0], M[:, 1, 0] - M[:, 0, 1]], axis=1)


def _coeffs_batch(theta: np.ndarray):
    small = theta < _SERIES
    t2 = theta * theta
    th = np.where(small, 1.0, theta)
    s = np.sin(th)
    half = np.sin(0.5 * th)
    A = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, s / th)
    B = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * half * half / (th * th))
    C = np.where(small, 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0, (th - s) / th**3)
    return A, B, C


def so3_exp_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    angle = np.linalg.norm(w, axis=1)
    K = skew_batch(w)
    K2 = K @ K
    A, B, _ = _coeffs_batch(angle)
    tiny = angle < _SMALL
    A = np.where(tiny, 1.0, A)
    B = np.where(tiny, 0.5, B)
    return np.eye(3) + A[:, None, None] * K + B[:, None, None] * K2


def so3_log_batch(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    v = _vee_batch(R)
    s = np.linalg.norm(v, axis=1)
    c = 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0)
    angle = np.arctan2(s, c)
    generic = (angle >= _SMALL) & (np.pi - angle > 1e-4)
    scale = np.where(generic, angle / np.where(generic, np.sin(angle), 1.0), 1.0)
    out = scale[:, None] * v
    for i in np.flatnonzero(np.pi - angle <= 1e-4):
        out[i] = so3_log(R[i])
    return out


def so3_left_jacobian_inv_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    angle = np.linalg.norm(w, axis=1)
    K = skew_batch(w)
    D = _jinv_coeff(angle)
    return np.eye(3) - 0.5 * K + D[:, None, None] * (K @ K)


def _q_matrix_batch(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
    P = skew_batch(rho)
    T = skew_batch(theta)
    c1, c2, c3 = (c[:, None, None] for c in _q_coeffs(np.linalg.norm(theta, axis=1)))
    TP = T @ P
    PT = P @ T
    TPT = TP @ T
    return 0.5 * P + c1 * (TP + PT + TPT) + c2 * (T @ TP + PT @ T - 3.0 * TPT) + c3 * (TPT @ T + T @ TPT)


def se3_exp_batch(xi: np.ndarray):
    """Returns (R, t) stacks."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    theta, rho = xi[:, :3], xi[:, 3:]
    R = so3_exp_batch(theta)
    K = skew_batch(theta)
    _, B, C = _coeffs_batch(np.linalg.norm(theta, axis=1))
    Jl = np.eye(3) + B[:, None, None] * K + C[:, None, None] * (K @ K)
    return R, np.einsum("nij,nj->ni", Jl, rho)


def se3_log_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    theta = so3_log_batch(R)
    rho = np.einsum("nij,nj->ni", so3_left_jacobian_inv_batch(theta), t)
    return np.concatenate([theta, rho], axis=1)


def se3_left_jacobian_inv_batch(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    theta, rho = xi[:, :3], xi[:, 3:]
    Ji = so3_left_jacobian_inv_batch(theta)
    out = np.zeros((len(xi), 6, 6))
    out[:, :3, :3] = Ji
    out[:, 3:, 3:] = Ji
    out[:, 3:, :3] = -Ji @ _q_matrix_batch(rho, theta) @ Ji
    return out


def adjoint_batch(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    out = np.zeros((len(R), 6, 6))
    out[:, :3, :3] = R
    out[:, 3:, 3:] = R
    out[:, 3:, :3] = skew_batch(t) @ R
    return out


def stack_poses(poses):
    """(R, t) stacks from a sequence of Pose."""
    if len(poses) == 0:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.stack([X.R for X in poses]), np.stack([X.t for X in poses])


def unstack_poses(R: np.ndarray, t: np.ndarray) -> list:
    """Pose list; rotations that drifted off SO(3) are projected back."""
    drift = np.abs(np.swapaxes(R, 1, 2) @ R - np.eye(3)).max(axis=(1, 2)) if len(R) else np.zeros(0)
    out = []
    for k in range(len(R)):
        Rk = orthonormalize(R[k]) if drift[k] > _REORTHO_TOL else R[k]
        out.append(Pose(Rk, t[k]))
    return out
