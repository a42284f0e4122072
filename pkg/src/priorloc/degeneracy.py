"""Degeneracy analysis of point-to-plane registration Hessians.

The Hessian handed to these functions is expected in the sensor-centred
parameterisation (rotation about the sensor origin, world-aligned axes), where
rows of the Jacobian read ``[(R p) x n, n]``.  ``icp.register`` takes care of
the change of reference point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

AXES = ("roll", "pitch", "yaw", "x", "y", "z")


@dataclass(frozen=True)
class DegeneracyConfig:
    kappa_threshold: float = 30.0
    kappa_reject: float = 1e5
    # |cos| between a weak singular vector and a world axis for the axis to be flagged
    axis_alignment: float = 0.8

    def __post_init__(self):
        if not 1.0 < self.kappa_threshold < self.kappa_reject:
            raise ValueError("need 1 < kappa_threshold < kappa_reject")


@dataclass
class DegeneracyReport:
    sv_rot: np.ndarray
    sv_trans: np.ndarray
    kappa_rot: float
    kappa_trans: float
    contrib_counts: np.ndarray
    contrib_ratios: np.ndarray
    degenerate_axes: np.ndarray
    accepted: bool
    ratios_informative: bool = True
    # weakest singular directions per block, columns ordered weakest first
    vec_rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    vec_trans: np.ndarray = field(default_factory=lambda: np.eye(3))

    def to_dict(self) -> dict:
        def num(x):
            x = float(x)
            return x if math.isfinite(x) else None

        return {
            "sv_rot": [num(v) for v in self.sv_rot],
            "sv_trans": [num(v) for v in self.sv_trans],
            "kappa_rot": num(self.kappa_rot),
            "kappa_trans": num(self.kappa_trans),
            "contrib_counts": [int(c) for c in self.contrib_counts],
            "contrib_ratios": [float(r) for r in self.contrib_ratios],
            "degenerate_axes": {a: bool(f) for a, f in zip(AXES, self.degenerate_axes)},
            "accepted": bool(self.accepted),
            "ratios_informative": bool(self.ratios_informative),
        }


def _block_svd(B: np.ndarray):
    U, s, _ = np.linalg.svd(0.5 * (B + B.T))
    smax, smin = s[0], s[-1]
    if smin <= smax * 1e-15 or smin <= 0.0:
        kappa = math.inf
    else:
        kappa = float(smax / smin)
    return s, kappa, U


def condition_numbers(H: np.ndarray):
    """Singular values (descending) and condition numbers of the rotation and translation blocks."""
    H = np.asarray(H, dtype=float)
    sv_rot, k_rot, _ = _block_svd(H[:3, :3])
    sv_trans, k_trans, _ = _block_svd(H[3:, 3:])
    return sv_rot, sv_trans, k_rot, k_trans


def contribution_ratios(J: np.ndarray, r: np.ndarray):
    """Per-dimension counts of correspondences whose ``-J_i^T r_i`` peaks in that dimension."""
    J = np.asarray(J, dtype=float).reshape(-1, 6)
    r = np.asarray(r, dtype=float).reshape(-1)
    if len(r) == 0:
        raise ValueError("need at least one correspondence")
    c = -J * r[:, None]
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    winner = np.argmax(np.abs(c), axis=1)
    counts = np.bincount(winner, minlength=6)
    return counts, counts / len(r)


def _flag_axes(U: np.ndarray, s: np.ndarray, kappa: float, cfg: DegeneracyConfig) -> np.ndarray:
    flags = np.zeros(3, dtype=bool)
    if not kappa > cfg.kappa_threshold:
        return flags
    smax = s[0]
    for j in range(3):
        if s[j] == 0.0 or smax / s[j] > cfg.kappa_threshold:
            flags |= np.abs(U[:, j]) > cfg.axis_alignment
    return flags


def assess(H, J, r, cfg: DegeneracyConfig = DegeneracyConfig(), converged: bool = True) -> DegeneracyReport:
    H = np.asarray(H, dtype=float)
    sv_rot, k_rot, U_rot = _block_svd(H[:3, :3])
    sv_trans, k_trans, U_trans = _block_svd(H[3:, 3:])
    counts, ratios = contribution_ratios(J, r)
    informative = bool(np.any(np.asarray(r) != 0.0))
    axes = np.concatenate([_flag_axes(U_rot, sv_rot, k_rot, cfg), _flag_axes(U_trans, sv_trans, k_trans, cfg)])
    accepted = bool(k_rot < cfg.kappa_reject and k_trans < cfg.kappa_reject and converged)
    return DegeneracyReport(
        sv_rot=sv_rot,
        sv_trans=sv_trans,
        kappa_rot=k_rot,
        kappa_trans=k_trans,
        contrib_counts=counts,
        contrib_ratios=ratios,
        degenerate_axes=axes,
        accepted=accepted,
        ratios_informative=informative,
        vec_rot=U_rot[:, ::-1],
        vec_trans=U_trans[:, ::-1],
    )


def inflate_covariance(cov: np.ndarray, report: DegeneracyReport, cfg: DegeneracyConfig = DegeneracyConfig()) -> np.ndarray:
    """Stretch a sensor-centred 6x6 covariance along the weak singular directions.

    Each direction whose singular value is more than ``kappa_threshold`` below
    the block maximum has its variance scaled by ``max(1, kappa / kappa_threshold)``.
    """
    S = np.eye(6)
    for off, sv, vecs in ((0, report.sv_rot, report.vec_rot), (3, report.sv_trans, report.vec_trans)):
        smax = sv[0]
        weak = sv[::-1]  # matches the weakest-first column order of vecs
        for j in range(3):
            if weak[j] > 0 and smax / weak[j] <= cfg.kappa_threshold:
                continue
            ratio = math.inf if weak[j] <= 0 else smax / weak[j]
            factor = max(1.0, min(ratio, cfg.kappa_reject) / cfg.kappa_threshold)
            v = np.zeros(6)
            v[off : off + 3] = vecs[:, j]
            S += (math.sqrt(factor) - 1.0) * np.outer(v, v)
    out = S @ cov @ S.T
    return 0.5 * (out + out.T)
