"""Point-to-plane ICP against a prior map with Gauss-Newton updates.

Residual for a scan point ``p`` matched to map point ``q`` with normal ``n``::

    r = (R p + t - q) . n

With the left update ``X <- exp(delta) X`` the transformed point moves as
``y + dtheta x y + drho`` (``y = R p + t``), so the Jacobian row is
``[(y x n)^T, n^T]``.  Re-expressing the rotation about the sensor origin
instead of the map origin (``Ad`` of the pure translation ``t``) gives the
familiar ``[((R p) x n)^T, n^T]`` rows, which is the form used for degeneracy
analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import degeneracy as dg
from .cloud import PointCloud, SpatialIndex
from .lie import Pose, adjoint, compose, se3_exp

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


class InsufficientOverlap(RegistrationError):
    pass


class DegenerateSystem(RegistrationError):
    pass


@dataclass(frozen=True)
class IcpConfig:
    max_corr_dist: float = 0.2
    max_iterations: int = 30
    rotation_eps: float = 1e-5
    translation_eps: float = 1e-5
    min_correspondences: int = 50
    lidar_sigma: float = 0.01
    rmse_eps: float = 1e-8

    @property
    def weight(self) -> float:
        return 1.0 / self.lidar_sigma**2

    def __post_init__(self):
        for name in ("max_corr_dist", "max_iterations", "rotation_eps", "translation_eps",
                     "min_correspondences", "lidar_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Correspondence:
    source_id: int
    target_id: int
    normal: np.ndarray
    residual: float


@dataclass
class Correspondences:
    """Matched pairs stored column-wise."""

    source_ids: np.ndarray
    target_ids: np.ndarray
    p: np.ndarray  # scan points, scan frame
    q: np.ndarray  # map points
    normals: np.ndarray
    residuals: np.ndarray
    n_scan: int

    def __len__(self) -> int:
        return len(self.source_ids)

    def __iter__(self):
        for i in range(len(self)):
            yield Correspondence(int(self.source_ids[i]), int(self.target_ids[i]), self.normals[i], float(self.residuals[i]))

    @property
    def overlap(self) -> float:
        return len(self) / self.n_scan if self.n_scan else 0.0


@dataclass
class LinearSystem:
    J: np.ndarray
    r: np.ndarray
    H: np.ndarray
    g: np.ndarray


@dataclass
class RegistrationResult:
    pose: Pose
    H: np.ndarray
    cov: np.ndarray
    iterations: int
    rmse: float
    overlap: float
    converged: bool
    degeneracy: dg.DegeneracyReport | None = None
    H_first_local: np.ndarray | None = field(default=None, repr=False)

    def local_covariance(self) -> np.ndarray:
        """Covariance re-expressed about the sensor origin (see module docstring)."""
        M = np.linalg.inv(_recentre(self.pose))
        out = M @ self.cov @ M.T
        return 0.5 * (out + out.T)


def _recentre(X: Pose) -> np.ndarray:
    # maps sensor-centred perturbations to map-origin (left) perturbations
    return adjoint(Pose(np.eye(3), X.t))


def to_local_hessian(H: np.ndarray, X: Pose) -> np.ndarray:
    M = _recentre(X)
    return M.T @ H @ M


def find_correspondences(scan: PointCloud, map_index: SpatialIndex, X: Pose, cfg: IcpConfig = IcpConfig(),
                         check: bool = True) -> Correspondences:
    target = map_index.cloud
    if target.normals is None:
        raise ValueError("map cloud has no normals; run estimate_normals first")
    y = X.act(scan.points)
    _, idx = map_index.query(y, cfg.max_corr_dist)
    src = np.flatnonzero(idx >= 0)
    tgt = idx[src]
    ok = target.normal_valid[tgt]
    src, tgt = src[ok], tgt[ok]
    normals = target.normals[tgt]
    q = target.points[tgt]
    res = np.einsum("ij,ij->i", y[src] - q, normals)
    corrs = Correspondences(src, tgt, scan.points[src], q, normals, res, len(scan))
    if check and len(corrs) < cfg.min_correspondences:
        raise InsufficientOverlap(f"insufficient overlap: {len(corrs)} correspondences (< {cfg.min_correspondences})")
    return corrs


def build_linear_system(corrs: Correspondences, X: Pose, weight: float = 1.0) -> LinearSystem:
    if len(corrs) == 0:
        raise ValueError("need at least one correspondence")
    y = X.act(corrs.p)
    n = corrs.normals
    r = np.einsum("ij,ij->i", y - corrs.q, n)
    J = np.hstack([np.cross(y, n), n])
    H = weight * (J.T @ J)
    g = -weight * (J.T @ r)
    return LinearSystem(J, r, 0.5 * (H + H.T), g)


def residuals(corrs: Correspondences, X: Pose) -> np.ndarray:
    return np.einsum("ij,ij->i", X.act(corrs.p) - corrs.q, corrs.normals)


def damping(H: np.ndarray) -> float:
    return 1e-6 * float(np.trace(H)) / 6.0


def solve_update(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``(H + lam I) delta = g`` with the Tikhonov floor ``lam = 1e-6 tr(H) / 6``."""
    H = np.asarray(H, dtype=float)
    lam = damping(H)
    A = H + lam * np.eye(6)
    if not np.all(np.isfinite(A)) or lam <= 0.0:
        raise DegenerateSystem("degenerate system: Hessian has no curvature")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise DegenerateSystem("degenerate system: damped Hessian not positive definite") from None
    return np.linalg.solve(L.T, np.linalg.solve(L, np.asarray(g, dtype=float)))


def damped_inverse(H: np.ndarray) -> np.ndarray:
    lam = damping(H)
    if lam <= 0.0:
        raise DegenerateSystem("degenerate system: Hessian has no curvature")
    out = np.linalg.inv(H + lam * np.eye(6))
    return 0.5 * (out + out.T)


def register(scan: PointCloud, map_index: SpatialIndex, X0: Pose, cfg: IcpConfig = IcpConfig(),
             deg_cfg: dg.DegeneracyConfig = dg.DegeneracyConfig()) -> RegistrationResult:
    """Iterate match / linearise / solve until the update is below the epsilons.

    Degeneracy is assessed on the first iteration's system only.
    """
    X = X0
    first = None
    prev_rmse = None
    converged = False
    sys = None
    it = 0
    rmse = np.inf
    corrs = None
    seen = {}  # correspondence set -> position in ``visited``
    visited = []
    for it in range(1, cfg.max_iterations + 1):
        corrs = find_correspondences(scan, map_index, X, cfg)
        sys = build_linear_system(corrs, X, cfg.weight)
        rmse = float(np.sqrt(np.mean(sys.r**2)))
        if first is None:
            J_local = np.hstack([np.cross(X.R @ corrs.p.T, corrs.normals.T, axis=0).T, corrs.normals])
            first = (to_local_hessian(sys.H, X), J_local, sys.r.copy())
        key = corrs.source_ids.tobytes() + corrs.target_ids.tobytes()
        if key in seen:
            # the matching is cycling between a few sets; keep the best pose of the cycle
            X, corrs, sys, rmse = min(visited[seen[key]:], key=lambda v: v[3])
            converged = True
            break
        seen[key] = len(visited)
        visited.append((X, corrs, sys, rmse))
        if prev_rmse is not None and abs(prev_rmse - rmse) < cfg.rmse_eps:
            converged = True
            break
        delta = solve_update(sys.H, sys.g)
        X = compose(se3_exp(delta), X)
        prev_rmse = rmse
        if np.linalg.norm(delta[:3]) < cfg.rotation_eps and np.linalg.norm(delta[3:]) < cfg.translation_eps:
            converged = True
            # statistics at the final pose
            corrs = find_correspondences(scan, map_index, X, cfg)
            sys = build_linear_system(corrs, X, cfg.weight)
            rmse = float(np.sqrt(np.mean(sys.r**2)))
            break

    cov = damped_inverse(sys.H)
    report = dg.assess(first[0], first[1], first[2], deg_cfg, converged)
    if not converged:
        log.debug("ICP hit max_iterations=%d (rmse %.4g)", cfg.max_iterations, rmse)
    return RegistrationResult(
        pose=X,
        H=sys.H,
        cov=cov,
        iterations=it,
        rmse=rmse,
        overlap=corrs.overlap,
        converged=converged,
        degeneracy=report,
        H_first_local=first[0],
    )


def inflated_covariance(result: RegistrationResult, deg_cfg: dg.DegeneracyConfig = dg.DegeneracyConfig()) -> np.ndarray:
    """``result.cov`` stretched along the degenerate directions found on the first iteration.

    Inflation happens about the sensor origin, then maps back to left coordinates.
    """
    M = _recentre(result.pose)
    local = result.local_covariance()
    local = dg.inflate_covariance(local, result.degeneracy, deg_cfg)
    out = M @ local @ M.T
    return 0.5 * (out + out.T)
