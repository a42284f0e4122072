"""Trajectory (ATE/RPE) and map (accuracy, Chamfer) metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cloud import PointCloud, SpatialIndex
from .lie import Pose, between, compose, so3_log

ERROR_SENTINEL = -1.0


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    max_corr: float = 0.2
    tau: float = 0.1
    rpe_delta: int = 10
    align: str = "umeyama"  # or "none"
    max_time_diff: float = 0.01
    histogram_bins: int = 20

    def __post_init__(self):
        if not 0 < self.tau <= self.max_corr:
            raise ValueError("need 0 < tau <= max_corr")
        if self.align not in ("none", "umeyama"):
            raise ValueError("align must be 'none' or 'umeyama'")


@dataclass
class EvalReport:
    ac: float | None = None
    cd: float | None = None
    inlier_ratio: float | None = None
    ate_rmse: float | None = None
    rpe_trans: float | None = None
    rpe_rot: float | None = None
    histogram: dict = field(default_factory=dict)

    def to_json(self, **kw) -> str:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        return json.dumps(clean(asdict(self)), **kw)


def _index(M) -> SpatialIndex:
    return M if isinstance(M, SpatialIndex) else SpatialIndex(M)


def pair_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Euclidean distance, row-wise."""
    d = p - q
    return np.sqrt(np.sum(d * d, axis=-1))


def nn_distances(P: PointCloud, M, max_dist: float = np.inf):
    """Nearest-neighbour distance from every point of P to M (inf beyond ``max_dist``)."""
    index = _index(M)
    if len(index) == 0:
        raise EvaluationError("map is empty")
    _, idx = index.query(P.points, max_dist)
    d = np.full(len(P), np.inf)
    hit = idx >= 0
    d[hit] = pair_distance(P.points[hit], index.cloud.points[idx[hit]])
    return d, idx


def point_to_map_distance(p, M) -> float:
    d, _ = nn_distances(PointCloud(np.asarray(p, dtype=float)[None]), M)
    return float(d[0])


def accuracy(P: PointCloud, M, cfg: EvalConfig = EvalConfig()):
    """Mean inlier distance (d < tau) and the inlier ratio. ac is NaN without inliers."""
    if len(P) == 0:
        raise EvaluationError("estimated cloud is empty")
    d, _ = nn_distances(P, M, cfg.max_corr)
    inl = d < cfg.tau
    ratio = float(np.mean(inl))
    ac = float(np.mean(d[inl])) if inl.any() else math.nan
    return ac, ratio


def chamfer(P: PointCloud, M: PointCloud, cfg: EvalConfig = EvalConfig(), index_p=None, index_m=None) -> float:
    """Symmetric mean squared NN distance, distances clamped at ``max_corr``."""
    if len(P) == 0 or len(M) == 0:
        raise EvaluationError("chamfer needs two non-empty clouds")
    dp, _ = nn_distances(P, index_m if index_m is not None else M, cfg.max_corr)
    dm, _ = nn_distances(M, index_p if index_p is not None else P, cfg.max_corr)
    dp = np.minimum(dp, cfg.max_corr)
    dm = np.minimum(dm, cfg.max_corr)
    return 0.5 * float(np.mean(dp * dp)) + 0.5 * float(np.mean(dm * dm))


def error_map(P: PointCloud, M, cfg: EvalConfig = EvalConfig()) -> PointCloud:
    """Copy of P with an ``error`` field; points with no match within max_corr get -1."""
    d, _ = nn_distances(P, M, cfg.max_corr)
    err = np.where(np.isfinite(d), d, ERROR_SENTINEL)
    return PointCloud(P.points.copy(), scalars={"error": err})


def histogram(P: PointCloud, M, cfg: EvalConfig = EvalConfig()) -> dict:
    d, _ = nn_distances(P, M, cfg.max_corr)
    counts, edges = np.histogram(d[np.isfinite(d)], bins=cfg.histogram_bins, range=(0.0, cfg.max_corr))
    return {"edges": edges.tolist(), "counts": counts.tolist(), "unmatched": int(np.sum(~np.isfinite(d)))}


# ----------------------------------------------------------------- trajectories


def associate(t_est, t_gt, max_diff: float = 0.01):
    """Index pairs matching each estimate to the nearest ground-truth timestamp."""
    t_est = np.asarray(t_est, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    order = np.argsort(t_gt)
    ts = t_gt[order]
    pos = np.clip(np.searchsorted(ts, t_est), 1, len(ts) - 1) if len(ts) > 1 else np.zeros(len(t_est), int)
    left = ts[pos - 1] if len(ts) > 1 else ts[pos]
    right = ts[pos]
    use_left = np.abs(t_est - left) <= np.abs(t_est - right)
    best = np.where(use_left, pos - 1, pos) if len(ts) > 1 else pos
    ok = np.abs(ts[best] - t_est) <= max_diff
    return np.flatnonzero(ok), order[best[ok]]


def umeyama(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid transform T (no scale) minimising sum |dst - T src|^2."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    return Pose(R, mu_d - R @ mu_s)


def _pairs(est, gt, cfg: EvalConfig):
    """est, gt: (times, list[Pose]). Returns matched pose lists."""
    te, Pe = est
    tg, Pg = gt
    ie, ig = associate(te, tg, cfg.max_time_diff)
    if len(ie) < 2:
        raise EvaluationError(f"only {len(ie)} associated poses (need >= 2)")
    return [Pe[i] for i in ie], [Pg[i] for i in ig]


def ate(est, gt, cfg: EvalConfig = EvalConfig()):
    """RMSE of translation errors after optional rigid alignment; also per-pose errors."""
    Pe, Pg = _pairs(est, gt, cfg)
    pe = np.array([X.t for X in Pe])
    pg = np.array([X.t for X in Pg])
    if cfg.align == "umeyama":
        T = umeyama(pe, pg)
        pe = T.act(pe)
    err = pair_distance(pe, pg)
    return float(np.sqrt(np.mean(err**2))), err


def rpe(est, gt, cfg: EvalConfig = EvalConfig()):
    """RMSE translation (m) and rotation (rad) of relative-pose errors at ``rpe_delta`` spacing."""
    Pe, Pg = _pairs(est, gt, cfg)
    d = cfg.rpe_delta
    if len(Pe) <= d:
        raise EvaluationError(f"trajectory shorter than rpe_delta={d}")
    et, er = [], []
    for i in range(len(Pe) - d):
        E = between(between(Pg[i], Pg[i + d]), between(Pe[i], Pe[i + d]))
        et.append(np.linalg.norm(E.t))
        er.append(np.linalg.norm(so3_log(E.R)))
    et, er = np.array(et), np.array(er)
    return float(np.sqrt(np.mean(et**2))), float(np.sqrt(np.mean(er**2)))


def evaluate_map(P: PointCloud, M: PointCloud, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    iM = SpatialIndex(M)
    ac, ratio = accuracy(P, iM, cfg)
    cd = chamfer(P, M, cfg, index_m=iM)
    return EvalReport(ac=ac, cd=cd, inlier_ratio=ratio, histogram=histogram(P, iM, cfg))


def evaluate_trajectory(est, gt, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    rmse, _ = ate(est, gt, cfg)
    out = EvalReport(ate_rmse=rmse)
    try:
        out.rpe_trans, out.rpe_rot = rpe(est, gt, cfg)
    except EvaluationError:
        pass
    return out


def compose_all(start: Pose, increments) -> list:
    out = [start]
    for Z in increments:
        out.append(compose(out[-1], Z))
    return out
