"""Pose-only factor graph with batch Gauss-Newton and marginal covariance recovery.

Factor residuals (left perturbation ``X <- exp(delta) X`` on every state):

========  =========================  ==========================================
kind      residual                   notes
========  =========================  ==========================================
LO, LC    Log(Z^-1 Xi^-1 Xj)         relative measurement Z, 6x6 information
NM        Log(Xj^-1 Xi)              identity measurement, diagonal information
DM, PRIOR Log(Z^-1 X)                unary, 6x6 information
GF        R a / |R a| - g            unary, 3x3 information
========  =========================  ==========================================

The information stored on a factor always lives in its residual space, so the
global system is ``Lambda = J^T W J`` with ``W`` block-diagonal.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import zupt
from .lie import (
    Pose,
    adjoint,
    adjoint_batch,
    between,
    compose,
    se3_exp_batch,
    se3_left_jacobian_inv,
    se3_left_jacobian_inv_batch,
    se3_log,
    se3_log_batch,
    skew_batch,
    stack_poses,
    unstack_poses,
)

log = logging.getLogger(__name__)

DENSE_BELOW = 20
GAUGE_STRONG = 1e6
GAUGE_WEAK = 1e-2


class GraphError(RuntimeError):
    pass


class FactorKind(str, Enum):
    LO = "LO"
    LC = "LC"
    NM = "NM"
    GF = "GF"
    DM = "DM"
    PRIOR = "PRIOR"

    @property
    def binary(self) -> bool:
        return self in (FactorKind.LO, FactorKind.LC, FactorKind.NM)


@dataclass
class Factor:
    kind: FactorKind
    keys: tuple
    measurement: object
    information: np.ndarray

    def __post_init__(self):
        self.kind = FactorKind(self.kind)
        self.keys = tuple(int(k) for k in self.keys)
        if self.kind.binary:
            if len(self.keys) != 2 or self.keys[0] == self.keys[1]:
                raise ValueError(f"{self.kind.value} factor needs two distinct keys")
        elif len(self.keys) != 1:
            raise ValueError(f"{self.kind.value} factor needs one key")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (self.dim, self.dim):
            raise ValueError(f"{self.kind.value} information must be {self.dim}x{self.dim}")
        self.information = 0.5 * (info + info.T)

    @property
    def dim(self) -> int:
        return 3 if self.kind is FactorKind.GF else 6

    def residual(self, states) -> np.ndarray:
        return self.linearize(states, jacobians=False)[0]

    def jacobians(self, states) -> list:
        return self.linearize(states)[1]

    def linearize(self, states, jacobians: bool = True):
        k = self.kind
        if k is FactorKind.GF:
            X = states[self.keys[0]]
            a_m, g = self.measurement
            r = zupt.gravity_residual(X, a_m, g)
            return r, ([zupt.gravity_jacobian(X, a_m)] if jacobians else None)
        if k in (FactorKind.DM, FactorKind.PRIOR):
            Zinv = self.measurement.inverse()
            r = se3_log(compose(Zinv, states[self.keys[0]]))
            if not jacobians:
                return r, None
            return r, [se3_left_jacobian_inv(r) @ adjoint(Zinv)]
        i, j = self.keys
        Xi, Xj = states[i], states[j]
        if k is FactorKind.NM:
            Xj_inv = Xj.inverse()
            r = se3_log(compose(Xj_inv, Xi))
            if not jacobians:
                return r, None
            Ji = se3_left_jacobian_inv(r) @ adjoint(Xj_inv)
            return r, [Ji, -Ji]
        # LO / LC
        A = compose(Xi, self.measurement).inverse()
        r = se3_log(compose(A, Xj))
        if not jacobians:
            return r, None
        Jj = se3_left_jacobian_inv(r) @ adjoint(A)
        return r, [-Jj, Jj]


def between_factor(kind, i: int, j: int, Z: Pose, cov=None, information=None) -> Factor:
    if information is None:
        information = _inv_spd(cov)
    return Factor(kind, (i, j), Z, information)


def unary_factor(kind, k: int, Z: Pose, cov=None, information=None) -> Factor:
    if information is None:
        information = _inv_spd(cov)
    return Factor(kind, (k,), Z, information)


def map_factor(k: int, Z: Pose, cov_left: np.ndarray) -> Factor:
    """DM factor from a registration covariance expressed as a left perturbation of ``Z``.

    ``Log(Z^-1 X)`` sees that noise through ``Ad(Z^-1)``.
    """
    Ad = adjoint(Z.inverse())
    cov = Ad @ cov_left @ Ad.T
    return unary_factor(FactorKind.DM, k, Z, cov=0.5 * (cov + cov.T))


def loop_factor(i: int, j: int, Z: Pose, cov_left: np.ndarray) -> Factor:
    """LC factor from a registration covariance (left perturbation of ``Z = Xi^-1 Xj``)."""
    Ad = adjoint(Z.inverse())
    cov = Ad @ cov_left @ Ad.T
    return between_factor(FactorKind.LC, i, j, Z, cov=0.5 * (cov + cov.T))


def gravity_factor(k: int, a_m, g=(0.0, 0.0, 1.0), sigma: float = 0.01) -> Factor:
    info = np.eye(3) / sigma**2
    return Factor(FactorKind.GF, (k,), (np.asarray(a_m, dtype=float), np.asarray(g, dtype=float)), info)


def no_motion_factor(i: int, j: int, cfg: zupt.ZuptConfig = zupt.ZuptConfig()) -> Factor:
    return Factor(FactorKind.NM, (i, j), Pose(), zupt.no_motion_information(cfg))


def _inv_spd(cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    cov = 0.5 * (cov + cov.T)
    try:
        c = sla.cho_factor(cov, lower=True)
    except np.linalg.LinAlgError:
        raise GraphError("covariance is not positive definite") from None
    out = sla.cho_solve(c, np.eye(len(cov)))
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------- covariances


def propagate_odom_covariance(cov1: np.ndarray, cov2: np.ndarray, X12: Pose) -> np.ndarray:
    """Covariance of ``Log(X12^-1 X12_noisy)`` for independent body-frame noise on both poses.

    ``X12 = X1^-1 X2`` and each pose is perturbed on the right
    (``X exp(xi)``); the first pose's noise is carried into the second frame
    with the adjoint of the relative pose's inverse. Composing consecutive
    odometry increments with this function accumulates their covariance.
    """
    Ad = adjoint(X12.inverse())
    out = Ad @ np.asarray(cov1, dtype=float) @ Ad.T + np.asarray(cov2, dtype=float)
    return 0.5 * (out + out.T)


def schur_relative_covariance(joint: np.ndarray) -> np.ndarray:
    """``S1 - S12 S2^-1 S12^T`` for a 12x12 joint covariance ``[[S1, S12], [S12^T, S2]]``."""
    joint = np.asarray(joint, dtype=float)
    if joint.shape != (12, 12):
        raise ValueError("joint covariance must be 12x12")
    S1, S12, S2 = joint[:6, :6], joint[:6, 6:], joint[6:, 6:]
    try:
        c = sla.cho_factor(0.5 * (S2 + S2.T), lower=True)
    except np.linalg.LinAlgError:
        raise GraphError("second covariance block is singular") from None
    if np.linalg.cond(S2) > 1e14:
        raise GraphError("second covariance block is singular")
    out = S1 - S12 @ sla.cho_solve(c, S12.T)
    return 0.5 * (out + out.T)


# ---------------------------------------------------------------------- graph


@dataclass
class Graph:
    states: list = field(default_factory=list)
    factors: list = field(default_factory=list)
    gauge: Factor | None = None

    def add_state(self, pose: Pose) -> int:
        self.states.append(pose)
        return len(self.states) - 1

    def add_factor(self, factor: Factor) -> Factor:
        for k in factor.keys:
            if not 0 <= k < len(self.states):
                raise GraphError(f"factor key {k} out of range (have {len(self.states)} states)")
        self.factors.append(factor)
        return factor

    def all_factors(self) -> list:
        return self.factors + ([self.gauge] if self.gauge is not None else [])

    def check_connected(self) -> None:
        n = len(self.states)
        if n == 0:
            raise GraphError("graph has no states")
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in self.factors:
            if f.kind.binary:
                a, b = find(f.keys[0]), find(f.keys[1])
                if a != b:
                    parent[max(a, b)] = min(a, b)
        root = find(0)
        lost = [k for k in range(n) if find(k) != root]
        if lost:
            shown = ", ".join(map(str, lost[:20])) + (" ..." if len(lost) > 20 else "")
            raise GraphError(f"graph is disconnected; unreachable poses: {shown}")

    def ensure_gauge(self) -> Factor:
        """Prior on pose 0: strong without unary factors, weak when unary factors anchor the graph."""
        if self.gauge is None:
            anchored = any(not f.kind.binary for f in self.factors)
            w = GAUGE_WEAK if anchored else GAUGE_STRONG
            self.gauge = Factor(FactorKind.PRIOR, (0,), self.states[0], w * np.eye(6))
        return self.gauge


def _offsets(factors):
    rows = np.cumsum([0] + [f.dim for f in factors])
    return rows


def assemble(graph: Graph, states=None):
    """Stacked ``J`` (sparse), ``r`` and block-diagonal ``W`` in factor insertion order.

    The gauge prior, when set, is appended last.
    """
    states = graph.states if states is None else states
    factors = graph.all_factors()
    if not factors:
        raise GraphError("graph has no factors")
    graph.check_connected()
    rows = _offsets(factors)
    m, n = int(rows[-1]), 6 * len(states)
    r = np.zeros(m)
    Jr, Jc, Jv = [], [], []
    Wblocks = []
    for f, r0 in zip(factors, rows[:-1]):
        rf, blocks = f.linearize(states)
        r[r0 : r0 + f.dim] = rf
        for key, B in zip(f.keys, blocks):
            ii, jj = np.meshgrid(np.arange(r0, r0 + f.dim), np.arange(6 * key, 6 * key + 6), indexing="ij")
            Jr.append(ii.ravel())
            Jc.append(jj.ravel())
            Jv.append(B.ravel())
        Wblocks.append(f.information)
    J = sp.csr_matrix((np.concatenate(Jv), (np.concatenate(Jr), np.concatenate(Jc))), shape=(m, n))
    W = sp.block_diag(Wblocks, format="csr")
    return J, r, W


def _linearize_groups(factors, states, jacobians: bool = True):
    """Residuals (and Jacobians) of all factors, evaluated kind by kind on stacked arrays.

    Yields ``(index, keys, r, Js, W)`` per kind where ``index`` are positions in
    ``factors``, ``keys`` is (G, arity), ``r`` is (G, d), ``Js`` a list of
    (G, d, 6) blocks per key and ``W`` (G, d, d).
    """
    SR, St = states if isinstance(states, tuple) else stack_poses(states)
    groups = {}
    for n, f in enumerate(factors):
        groups.setdefault(f.kind, []).append(n)
    for kind, idx in groups.items():
        fs = [factors[n] for n in idx]
        keys = np.array([f.keys for f in fs], dtype=np.int64)
        W = np.stack([f.information for f in fs])
        Js = None
        if kind is FactorKind.GF:
            a = np.stack([f.measurement[0] for f in fs])
            g = np.stack([f.measurement[1] for f in fs])
            aw = np.einsum("nij,nj->ni", SR[keys[:, 0]], a)
            norm = np.linalg.norm(aw, axis=1)
            if np.any(np.linalg.norm(a, axis=1) <= 0.1 * zupt.G):
                raise zupt.ZuptError("invalid accelerometer magnitude")
            u = aw / norm[:, None]
            r = u - g
            if jacobians:
                J = np.zeros((len(fs), 3, 6))
                J[:, :, :3] = -skew_batch(u)
                Js = [J]
        elif kind in (FactorKind.DM, FactorKind.PRIOR):
            ZR, Zt = stack_poses([f.measurement for f in fs])
            AR = np.swapaxes(ZR, 1, 2)
            At = -np.einsum("nij,nj->ni", AR, Zt)
            XR, Xt = SR[keys[:, 0]], St[keys[:, 0]]
            r = se3_log_batch(AR @ XR, np.einsum("nij,nj->ni", AR, Xt) + At)
            if jacobians:
                Js = [se3_left_jacobian_inv_batch(r) @ adjoint_batch(AR, At)]
        elif kind is FactorKind.NM:
            iR, it = SR[keys[:, 0]], St[keys[:, 0]]
            AR = np.swapaxes(SR[keys[:, 1]], 1, 2)
            At = -np.einsum("nij,nj->ni", AR, St[keys[:, 1]])
            r = se3_log_batch(AR @ iR, np.einsum("nij,nj->ni", AR, it) + At)
            if jacobians:
                Ji = se3_left_jacobian_inv_batch(r) @ adjoint_batch(AR, At)
                Js = [Ji, -Ji]
        else:  # LO / LC
            ZR, Zt = stack_poses([f.measurement for f in fs])
            iR, it = SR[keys[:, 0]], St[keys[:, 0]]
            BR = iR @ ZR
            Bt = np.einsum("nij,nj->ni", iR, Zt) + it
            AR = np.swapaxes(BR, 1, 2)
            At = -np.einsum("nij,nj->ni", AR, Bt)
            jR, jt = SR[keys[:, 1]], St[keys[:, 1]]
            r = se3_log_batch(AR @ jR, np.einsum("nij,nj->ni", AR, jt) + At)
            if jacobians:
                Jj = se3_left_jacobian_inv_batch(r) @ adjoint_batch(AR, At)
                Js = [-Jj, Jj]
        yield idx, keys, r, Js, W


def _normal_equations(factors, states, n_states):
    """``Lambda = J^T W J`` as merged upper blocks, ``b = J^T W r`` and the cost.

    Blocks are returned as ``(pairs, values)``: (P, 2) key pairs with
    ``a <= c`` and the (P, 6, 6) block for row key ``a``, column key ``c``.
    """
    b = np.zeros((n_states, 6))
    cost = 0.0
    pair_list, val_list = [], []
    for _, keys, r, Js, W in _linearize_groups(factors, states):
        Wr = np.einsum("nij,nj->ni", W, r)
        cost += float(np.sum(r * Wr))
        WJ = [W @ J for J in Js]
        for a, Ja in enumerate(Js):
            JaT = np.swapaxes(Ja, 1, 2)
            np.add.at(b, keys[:, a], np.einsum("nji,nj->ni", Ja, Wr))
            for c in range(a, len(Js)):
                blk = JaT @ WJ[c]
                ka, kc = keys[:, a], keys[:, c]
                swap = ka > kc
                if swap.any():
                    blk[swap] = np.swapaxes(blk[swap], 1, 2)
                pair_list.append(np.stack([np.minimum(ka, kc), np.maximum(ka, kc)], axis=1))
                val_list.append(blk)
    pairs = np.concatenate(pair_list)
    vals = np.concatenate(val_list)
    code = pairs[:, 0] * n_states + pairs[:, 1]
    uniq, inv = np.unique(code, return_inverse=True)
    merged = np.zeros((len(uniq), 6, 6))
    np.add.at(merged, inv.reshape(-1), vals)
    upairs = np.stack([uniq // n_states, uniq % n_states], axis=1)
    return (upairs, merged), b.reshape(-1), cost


def _cost(factors, states) -> float:
    total = 0.0
    for _, _, r, _, W in _linearize_groups(factors, states, jacobians=False):
        total += float(np.einsum("ni,nij,nj->", r, W, r))
    return total


_UU, _VV = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")


def _blocks_to_dense(blocks, n_states) -> np.ndarray:
    pairs, vals = blocks
    L = np.zeros((6 * n_states, 6 * n_states))
    rows = 6 * pairs[:, 0, None, None] + _UU
    cols = 6 * pairs[:, 1, None, None] + _VV
    L[rows, cols] = vals
    off = pairs[:, 0] != pairs[:, 1]
    L[cols[off], rows[off]] = vals[off]
    return L


def _solve_dense(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    c = sla.cho_factor(L, lower=True, check_finite=False)
    return sla.cho_solve(c, rhs, check_finite=False)


def _solve_banded(blocks, n_states: int, damping: float, rhs: np.ndarray) -> np.ndarray:
    """Cholesky on the RCM-reordered (block-banded) information matrix."""
    pairs, vals = blocks
    pattern = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n_states, n_states))
    pattern = (pattern + pattern.T).tocsr()
    order = reverse_cuthill_mckee(pattern, symmetric_mode=True)
    pos = np.empty(n_states, dtype=np.int64)
    pos[order] = np.arange(n_states)
    pa, pc = pos[pairs[:, 0]], pos[pairs[:, 1]]
    bw = 6 * int(np.max(np.abs(pa - pc))) + 5
    n = 6 * n_states
    # orient every block so that its row key precedes its column key in the new order
    flip = pa > pc
    vals = np.where(flip[:, None, None], np.swapaxes(vals, 1, 2), vals)
    lo, hi = np.minimum(pa, pc), np.maximum(pa, pc)
    i = 6 * lo[:, None, None] + _UU
    j = 6 * hi[:, None, None] + _VV
    upper = i <= j
    ab = np.zeros((bw + 1, n))
    ab[bw + i[upper] - j[upper], j[upper]] = vals[upper]
    ab[bw] += damping
    perm = (6 * order[:, None] + np.arange(6)).ravel()
    c = sla.cholesky_banded(ab, lower=False, check_finite=False)
    x = sla.cho_solve_banded((c, False), rhs[perm], check_finite=False)
    out = np.empty(n)
    out[perm] = x
    return out


def _solve(blocks, n_states: int, damping: float, rhs: np.ndarray) -> np.ndarray:
    if n_states < DENSE_BELOW:
        L = _blocks_to_dense(blocks, n_states)
        L[np.diag_indices_from(L)] += damping
        return _solve_dense(L, rhs)
    return _solve_banded(blocks, n_states, damping, rhs)


def _retract(states, delta):
    SR, St = states
    ER, Et = se3_exp_batch(delta.reshape(-1, 6))
    return ER @ SR, np.einsum("nij,nj->ni", ER, St) + Et


@dataclass
class OptimizationResult:
    states: list
    total_cost: float
    iterations: int
    converged: bool
    marginals: list | None = None
    gradient_norm: float = np.nan
    cost_history: list = field(default_factory=list)


def optimize(graph: Graph, max_iters: int = 20, tol: float = 1e-8, cost_tol: float = 1e-10,
             lam0: float = 1e-9, marginals: bool = False) -> OptimizationResult:
    """Levenberg-damped Gauss-Newton over all poses, warm-started from ``graph.states``.

    An update with ``|delta|_inf < tol`` counts as convergence and is not applied.
    """
    graph.ensure_gauge()
    graph.check_connected()
    factors = graph.all_factors()
    states = stack_poses(graph.states)
    n = len(graph.states)
    moved = False
    lam = lam0
    blocks, b, cost = _normal_equations(factors, states, n)
    history = [cost]
    converged = False
    it = 0
    while it < max_iters:
        it += 1
        try:
            delta = _solve(blocks, n, lam, -b)
        except np.linalg.LinAlgError:
            lam *= 10.0
            if lam > 1e12:
                raise GraphError("information matrix not positive definite; gauge not fixed or graph degenerate")
            continue
        if np.max(np.abs(delta)) < tol:
            converged = True
            break
        trial = _retract(states, delta)
        trial_cost = _cost(factors, trial)
        if trial_cost <= cost:
            change = cost - trial_cost
            states = trial
            moved = True
            lam = max(lam / 10.0, 1e-15)
            blocks, b, cost = _normal_equations(factors, states, n)
            history.append(cost)
            if change < cost_tol:
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    poses = unstack_poses(*states) if moved else list(graph.states)
    result = OptimizationResult(poses, cost, it, converged, gradient_norm=float(np.max(np.abs(b))),
                                cost_history=history)
    if marginals:
        result.marginals = marginal_covariances(graph, poses)
    return result


def information_matrix(graph: Graph, states=None) -> np.ndarray:
    states = graph.states if states is None else states
    graph.check_connected()
    blocks, _, _ = _normal_equations(graph.all_factors(), states, len(states))
    return _blocks_to_dense(blocks, len(states))


def marginal_covariances(graph: Graph, states=None, full: bool = False):
    """Per-pose 6x6 blocks of ``Lambda^-1`` via ``Lambda = L L^T``, ``Sigma = L^-T L^-1``.

    With ``full=True`` the whole covariance matrix is returned as well.
    """
    Lam = information_matrix(graph, states)
    try:
        L = sla.cholesky(Lam, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise GraphError("information matrix not positive definite: gauge not fixed or graph degenerate") from None
    Linv = sla.solve_triangular(L, np.eye(len(L)), lower=True, check_finite=False)
    n = len(Lam) // 6
    marg = []
    for k in range(n):
        cols = Linv[:, 6 * k : 6 * k + 6]
        blk = cols.T @ cols
        marg.append(0.5 * (blk + blk.T))
    if full:
        Sigma = Linv.T @ Linv
        return marg, 0.5 * (Sigma + Sigma.T)
    return marg


# ------------------------------------------------------------------ graph I/O

_IU = np.triu_indices(6)
_IU3 = np.triu_indices(3)


def _pose_to_list(X: Pose) -> list:
    return [float(v) for v in X.t] + [float(v) for v in X.quat()]


def _pose_from_list(v) -> Pose:
    return Pose.from_quat(v[:3], v[3:])


def factor_to_dict(f: Factor) -> dict:
    iu = _IU3 if f.dim == 3 else _IU
    if f.kind is FactorKind.GF:
        meas = {"accel": [float(x) for x in f.measurement[0]], "gravity": [float(x) for x in f.measurement[1]]}
    else:
        meas = _pose_to_list(f.measurement)
    return {"kind": f.kind.value, "keys": list(f.keys), "measurement": meas,
            "information": [float(x) for x in f.information[iu]]}


def factor_from_dict(d: dict) -> Factor:
    kind = FactorKind(d["kind"])
    dim = 3 if kind is FactorKind.GF else 6
    iu = _IU3 if dim == 3 else _IU
    info = np.zeros((dim, dim))
    info[iu] = d["information"]
    info = info + np.triu(info, 1).T
    if kind is FactorKind.GF:
        meas = (np.asarray(d["measurement"]["accel"], float), np.asarray(d["measurement"]["gravity"], float))
    else:
        meas = _pose_from_list(d["measurement"])
    return Factor(kind, tuple(d["keys"]), meas, info)


def dump_factors(graph: Graph, path) -> None:
    """JSON lines, one factor per line; poses as ``tx ty tz qx qy qz qw``."""
    with open(path, "w") as fh:
        for f in graph.factors:
            fh.write(json.dumps(factor_to_dict(f)) + "\n")


def load_factors(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(factor_from_dict(json.loads(line)))
    return out


def relative_poses(states) -> list:
    return [between(a, b) for a, b in zip(states[:-1], states[1:])]
