"""Keyframe loop: odometry, map registration, stationary constraints, loop closures, batch optimisation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import graph as gr
from ..cloud import PointCloud, SpatialIndex, concatenate, estimate_normals, save_cloud, transform_cloud, voxel_downsample
from ..degeneracy import DegeneracyConfig
from ..icp import IcpConfig, RegistrationError, RegistrationResult, inflated_covariance, register
from ..lie import Pose, between, compose, so3_log
from ..zupt import ZuptError, detect_stationary, imu_window
from .config import PipelineConfig
from .dataset import Dataset, write_covariances, write_tum

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


@dataclass
class KeyframeRecord:
    state: int
    frame: int
    t: float
    scan: PointCloud  # voxel-filtered, sensor frame
    static: bool = False


@dataclass
class RunResult:
    times: np.ndarray
    poses: list
    marginals: list
    map_cloud: PointCloud
    reports: list
    graph: gr.Graph
    keyframes: list
    odometry_poses: list
    init: RegistrationResult | None = None
    runtime: float = 0.0
    summary: dict = field(default_factory=dict)


def prepare_map(cloud: PointCloud, cfg: PipelineConfig) -> SpatialIndex:
    m = voxel_downsample(cloud, cfg.pipeline.map_voxel) if cfg.pipeline.map_voxel > 0 else PointCloud(cloud.points)
    if len(m) < cfg.pipeline.normal_k:
        raise InitializationError(f"prior map too small ({len(m)} points)")
    return SpatialIndex(estimate_normals(m, cfg.pipeline.normal_k))


def _scan(cloud: PointCloud, cfg: PipelineConfig) -> PointCloud:
    return voxel_downsample(cloud, cfg.pipeline.frame_voxel) if cfg.pipeline.frame_voxel > 0 else cloud


def initialize(dataset: Dataset, cfg: PipelineConfig, map_index: SpatialIndex | None = None):
    """Pose of the first frame in the map. Returns ``(pose, registration result)``."""
    map_index = map_index or prepare_map(dataset.prior_map, cfg)
    if len(dataset) == 0:
        raise InitializationError("dataset has no frames")
    # the final refinement runs at full resolution: map decimation biases the pose by ~1 cm
    fine = SpatialIndex(estimate_normals(dataset.prior_map, cfg.pipeline.normal_k))
    scan = dataset.frames[0]
    guess = cfg.pipeline.initial_pose()
    try:
        if guess is None:
            coarse = voxel_downsample(dataset.frames[0], 1.0)
            guess = Pose()
            for radius in (1.0, 0.5):
                ccfg = IcpConfig(max_corr_dist=radius, max_iterations=cfg.icp.max_iterations,
                                 min_correspondences=min(cfg.icp.min_correspondences, max(3, len(coarse) // 4)),
                                 lidar_sigma=cfg.icp.lidar_sigma)
                guess = register(coarse, map_index, guess, ccfg, cfg.degeneracy).pose
        res = register(scan, fine, guess, cfg.icp, cfg.degeneracy)
    except RegistrationError as e:
        raise InitializationError(f"initialization failed: {e}") from None
    if res.overlap < cfg.pipeline.init_min_overlap:
        raise InitializationError(
            f"initialization failed: overlap {res.overlap:.1%} < {cfg.pipeline.init_min_overlap:.0%} (rmse {res.rmse:.4f} m)")
    return res.pose, res


def odometry_trajectory(X0: Pose, odom_poses, frames) -> list:
    """Odometry chained from X0 through the given frame indices (the LO-only baseline)."""
    out = [X0]
    for a, b in zip(frames[:-1], frames[1:]):
        out.append(compose(out[-1], between(odom_poses[a], odom_poses[b])))
    return out


def _submap(history: list, center: int, states: list, cfg: PipelineConfig, before=None) -> PointCloud:
    """Scans around keyframe ``center`` expressed in that keyframe's sensor frame.

    Keyframes with ``frame > before`` are skipped so a loop check never
    verifies against the current scan's own recent neighbours.
    """
    w = cfg.loop.submap_half_width
    Xc_inv = states[history[center].state].inverse()
    parts = []
    for rec in history[max(0, center - w): center + w + 1]:
        if before is not None and rec.frame > before:
            continue
        parts.append(transform_cloud(rec.scan, compose(Xc_inv, states[rec.state])))
    return voxel_downsample(concatenate(parts), cfg.pipeline.frame_voxel)


def detect_loop(graph: gr.Graph, current: KeyframeRecord, history: list, cfg: PipelineConfig):
    """Loop factor to the nearest old keyframe, or None.

    Candidates are at least ``min_temporal_gap`` frames older and within
    ``search_radius``; the closure is kept only if ICP against the candidate's
    submap converges with enough overlap and passes the degeneracy gate.
    """
    states = graph.states
    Xk = states[current.state]
    best, best_d = None, np.inf
    for h, rec in enumerate(history):
        if current.frame - rec.frame < cfg.loop.min_temporal_gap or rec.state == current.state:
            continue
        d = float(np.linalg.norm(states[rec.state].t - Xk.t))
        if d <= cfg.loop.search_radius and d < best_d:
            best, best_d = h, d
    if best is None:
        return None, None
    cand = history[best]
    sub = _submap(history, best, states, cfg, before=current.frame - cfg.loop.min_temporal_gap)
    if len(sub) < cfg.pipeline.normal_k:
        return None, None
    index = SpatialIndex(estimate_normals(sub, cfg.pipeline.normal_k))
    Z0 = between(states[cand.state], Xk)
    try:
        res = register(current.scan, index, Z0, cfg.icp, cfg.degeneracy)
    except RegistrationError as e:
        return None, {"candidate": cand.state, "overlap": 0.0, "converged": False,
                      "accepted": False, "rmse": None, "error": str(e)}
    info = {"candidate": cand.state, "overlap": res.overlap, "converged": res.converged,
            "accepted": bool(res.degeneracy.accepted), "rmse": res.rmse}
    if not (res.converged and res.overlap >= cfg.loop.fitness_threshold and res.degeneracy.accepted):
        return None, info
    try:
        f = gr.loop_factor(cand.state, current.state, res.pose, inflated_covariance(res, cfg.degeneracy))
    except gr.GraphError:
        return None, info
    return f, info


def _gauge(graph: gr.Graph, X0: Pose) -> gr.Factor:
    anchored = any(not f.kind.binary for f in graph.factors)
    w = gr.GAUGE_WEAK if anchored else gr.GAUGE_STRONG
    return gr.Factor(gr.FactorKind.PRIOR, (0,), X0, w * np.eye(6))


def _dm_factor(scan, map_index, guess, state, cfg: PipelineConfig, report: dict):
    try:
        res = register(scan, map_index, guess, cfg.icp, cfg.degeneracy)
    except RegistrationError as e:
        log.info("frame %d: registration failed (%s); odometry only", report["frame"], e)
        report["dm"] = {"status": "failed", "reason": str(e)}
        return None
    report["degeneracy"] = res.degeneracy.to_dict()
    report["dm"] = {"status": "rejected", "overlap": res.overlap, "rmse": res.rmse,
                    "iterations": res.iterations, "converged": res.converged}
    if not (res.converged and res.degeneracy.accepted and res.overlap >= cfg.pipeline.dm_min_overlap):
        return None
    try:
        f = gr.map_factor(state, res.pose, inflated_covariance(res, cfg.degeneracy))
    except gr.GraphError as e:
        report["dm"]["reason"] = str(e)
        return None
    report["dm"]["status"] = "added"
    return f


def run(dataset: Dataset, cfg: PipelineConfig) -> RunResult:
    t_start = time.perf_counter()
    sw = cfg.factors
    map_index = prepare_map(dataset.prior_map, cfg)
    X0, init = initialize(dataset, cfg, map_index)
    odo_idx = dataset.frame_odometry()
    odom = [dataset.odom_poses[i] for i in odo_idx]
    odom_cov = dataset.odom_covs[odo_idx]
    use_zupt = sw.nm or sw.gf
    fc = cfg.pipeline
    zc = cfg.zupt

    graph = gr.Graph()
    graph.add_state(X0)
    history = [KeyframeRecord(0, 0, float(dataset.frame_times[0]), _scan(dataset.frames[0], cfg))]
    reports = []
    rep0 = {"frame": 0, "t": float(dataset.frame_times[0]), "state": 0, "static": False}
    if sw.dm:
        rep0["degeneracy"] = init.degeneracy.to_dict()
        rep0["dm"] = {"status": "rejected", "overlap": init.overlap, "rmse": init.rmse,
                      "iterations": init.iterations, "converged": init.converged}
        if init.converged and init.degeneracy.accepted:
            try:
                graph.add_factor(gr.map_factor(0, init.pose, inflated_covariance(init, cfg.degeneracy)))
                rep0["dm"]["status"] = "added"
            except gr.GraphError:
                pass
    reports.append(rep0)

    last = 0  # frame index of the last keyframe
    acc_cov = np.zeros((6, 6))
    n_loops = 0
    static_run = 0  # consecutive static frames up to the current one
    since_loop = cfg.loop.check_every
    for k in range(1, len(dataset)):
        t = float(dataset.frame_times[k])
        step = between(odom[k - 1], odom[k])
        acc_cov = gr.propagate_odom_covariance(acc_cov, odom_cov[k], step)
        acc = between(odom[last], odom[k])

        static = False
        if use_zupt:
            window = imu_window(dataset.imu, t, zc.window_size)
            if len(window) >= zc.window_size:
                try:
                    static = detect_stationary(window, step, zc).is_static
                except ZuptError:
                    static = False
        static_run = static_run + 1 if static else 0

        moved = float(np.linalg.norm(acc.t)) >= fc.keyframe_trans or float(np.linalg.norm(so3_log(acc.R))) >= fc.keyframe_rot
        if not (moved or (static and (static_run - 1) % fc.static_stride == 0)):
            continue

        prev = graph.states[-1]
        guess = compose(prev, acc)
        s = graph.add_state(guess)
        rec = KeyframeRecord(s, k, t, _scan(dataset.frames[k], cfg), static)
        report = {"frame": k, "t": t, "state": s, "static": static}
        graph.add_factor(gr.between_factor(gr.FactorKind.LO, s - 1, s, acc, cov=acc_cov + 1e-12 * np.eye(6)))
        acc_cov = np.zeros((6, 6))

        if sw.dm:
            f = _dm_factor(rec.scan, map_index, guess, s, cfg, report)
            if f is not None:
                graph.add_factor(f)
        if static:
            # every frame since the previous keyframe was static
            if sw.nm and history[-1].static and static_run > k - last:
                graph.add_factor(gr.no_motion_factor(s - 1, s, zc))
                report["nm"] = True
            if sw.gf:
                a = window[:, 1:4].mean(axis=0)
                sigma = zc.imu_sigma_a / (np.linalg.norm(a) * np.sqrt(len(window)))
                try:
                    graph.add_factor(gr.gravity_factor(s, a, zc.g, sigma))
                    report["gf"] = True
                except ZuptError:
                    pass
        since_loop += 1
        if sw.lc and not static and since_loop >= cfg.loop.check_every:
            since_loop = 0
            f, info = detect_loop(graph, rec, history, cfg)
            if info is not None:
                report["loop"] = {**info, "added": f is not None}
            if f is not None:
                graph.add_factor(f)
                n_loops += 1

        history.append(rec)
        reports.append(report)
        last = k

        graph.gauge = _gauge(graph, X0)
        if len(graph.factors) > len(graph.states) - 1:  # something beyond the odometry chain
            graph.states = gr.optimize(graph, max_iters=fc.frame_iterations).states

    graph.gauge = _gauge(graph, X0)
    opt = gr.optimize(graph, max_iters=fc.final_iterations, marginals=True)
    graph.states = opt.states
    marg = opt.marginals

    scans = [transform_cloud(rec.scan, X) for rec, X in zip(history, graph.states)]
    est_map = voxel_downsample(concatenate(scans), fc.map_export_voxel)
    for rep, C in zip(reports, marg):
        rep["marginal_trace"] = float(np.trace(C))

    frames = [r.frame for r in history]
    res = RunResult(
        times=np.array([r.t for r in history]),
        poses=list(graph.states),
        marginals=marg,
        map_cloud=est_map,
        reports=reports,
        graph=graph,
        keyframes=history,
        odometry_poses=odometry_trajectory(X0, odom, frames),
        init=init,
    )
    res.runtime = time.perf_counter() - t_start
    res.summary = {
        "keyframes": len(history),
        "frames": len(dataset),
        "factors": {kind.value: sum(f.kind is kind for f in graph.factors) for kind in gr.FactorKind},
        "loops": n_loops,
        "final_cost": opt.total_cost,
        "converged": opt.converged,
        "runtime_s": res.runtime,
        "switches": {"dm": sw.dm, "gf": sw.gf, "nm": sw.nm, "lc": sw.lc},
    }
    return res


def odometry_map(dataset: Dataset, result: RunResult, cfg: PipelineConfig) -> PointCloud:
    scans = [transform_cloud(rec.scan, X) for rec, X in zip(result.keyframes, result.odometry_poses)]
    return voxel_downsample(concatenate(scans), cfg.pipeline.map_export_voxel)


def write_outputs(result: RunResult, out_dir) -> None:
    """trajectory.txt, odometry.txt (TUM), covariances.csv, map.pcd, frames.json, summary.json, factors.jsonl."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.txt", result.times, result.poses)
    write_tum(out / "odometry.txt", result.times, result.odometry_poses)
    write_covariances(out / "covariances.csv", result.marginals)
    save_cloud(result.map_cloud, out / "map.pcd")
    gr.dump_factors(result.graph, out / "factors.jsonl")
    with open(out / "frames.json", "w") as fh:
        json.dump(result.reports, fh, indent=1, sort_keys=True)
    summary = dict(result.summary)
    summary.pop("runtime_s", None)  # keep the outputs byte-reproducible
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
