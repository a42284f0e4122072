"""Plots and a summary for a finished run directory."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..degeneracy import AXES


def load_frames(run_dir) -> list:
    path = Path(run_dir) / "frames.json"
    with open(path) as fh:
        return json.load(fh)


def degeneracy_series(frames: list) -> dict:
    """Time series of condition numbers, flagged axes and DM status per keyframe."""
    t, kr, kt, flags, status = [], [], [], [], []
    for fr in frames:
        deg = fr.get("degeneracy")
        if deg is None:
            continue
        t.append(fr["t"])
        kr.append(math.inf if deg["kappa_rot"] is None else deg["kappa_rot"])
        kt.append(math.inf if deg["kappa_trans"] is None else deg["kappa_trans"])
        flags.append([deg["degenerate_axes"][a] for a in AXES])
        status.append(fr.get("dm", {}).get("status", "none"))
    return {"t": np.array(t), "kappa_rot": np.array(kr), "kappa_trans": np.array(kt),
            "flags": np.array(flags, dtype=bool).reshape(-1, 6), "status": status}


def summarize(frames: list, kappa_threshold: float = 30.0) -> dict:
    s = degeneracy_series(frames)
    n = len(s["t"])
    counts = {}
    for st in s["status"]:
        counts[st] = counts.get(st, 0) + 1
    finite = s["kappa_trans"][np.isfinite(s["kappa_trans"])]
    return {
        "keyframes": len(frames),
        "registered": n,
        "dm_status": counts,
        "degenerate_trans_frames": int(np.sum(s["kappa_trans"] > kappa_threshold)),
        "kappa_trans_median": float(np.median(finite)) if len(finite) else None,
        "kappa_trans_max": float(np.max(finite)) if len(finite) else None,
        "axis_flag_counts": {a: int(c) for a, c in zip(AXES, s["flags"].sum(axis=0))} if n else {},
        "static_keyframes": int(sum(bool(f.get("static")) for f in frames)),
        "loop_closures": int(sum(bool(f.get("loop", {}).get("added")) for f in frames)),
    }


def plot_degeneracy(frames: list, path, kappa_threshold: float = 30.0) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s = degeneracy_series(frames)
    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    big = 1e8  # infinite condition numbers are drawn at the top of the axis
    ax = axes[0]
    ax.semilogy(s["t"], np.minimum(s["kappa_rot"], big), label="rotation")
    ax.semilogy(s["t"], np.minimum(s["kappa_trans"], big), label="translation")
    ax.axhline(kappa_threshold, color="k", ls="--", lw=0.8, label="threshold")
    ax.set_ylabel("condition number")
    ax.legend(loc="upper right")
    ax = axes[1]
    for j, name in enumerate(AXES):
        hit = s["flags"][:, j] if len(s["t"]) else np.zeros(0, bool)
        ax.plot(s["t"][hit], np.full(hit.sum(), j), "|", ms=10)
    ax.set_yticks(range(6))
    ax.set_yticklabels(AXES)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("flagged axis")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_trajectory(run_dir, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .dataset import read_tum

    run_dir = Path(run_dir)
    fig, ax = plt.subplots(figsize=(7, 6))
    for name, style in (("odometry.txt", "--"), ("trajectory.txt", "-")):
        p = run_dir / name
        if p.exists():
            _, poses = read_tum(p)
            xy = np.array([X.t[:2] for X in poses]).reshape(-1, 2)
            ax.plot(xy[:, 0], xy[:, 1], style, label=name.split(".")[0])
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def report(run_dir, kappa_threshold: float = 30.0) -> dict:
    """Writes degeneracy.svg, trajectory.svg and report.json into ``run_dir``."""
    run_dir = Path(run_dir)
    frames = load_frames(run_dir)
    summary = summarize(frames, kappa_threshold)
    plot_degeneracy(frames, run_dir / "degeneracy.svg", kappa_threshold)
    plot_trajectory(run_dir, run_dir / "trajectory.svg")
    with open(run_dir / "report.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary
