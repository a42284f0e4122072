"""Flat INI configuration: one section per module, one key per config field."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..degeneracy import DegeneracyConfig
from ..evaluation import EvalConfig
from ..icp import IcpConfig
from ..lie import Pose
from ..zupt import ZuptConfig


@dataclass(frozen=True)
class LoopConfig:
    search_radius: float = 5.0
    min_temporal_gap: int = 50
    fitness_threshold: float = 0.6
    submap_half_width: int = 5
    check_every: int = 5  # keyframes between loop-closure attempts

    def __post_init__(self):
        if not (self.search_radius > 0 and self.min_temporal_gap > 0 and 0 < self.fitness_threshold <= 1
                and self.check_every >= 1):
            raise ValueError("invalid loop configuration")


@dataclass(frozen=True)
class FrontConfig:
    init_pose: str = "auto"
    keyframe_trans: float = 0.5
    keyframe_rot: float = 0.2
    static_stride: int = 5  # keyframe every n-th frame while stationary
    frame_voxel: float = 0.1
    map_voxel: float = 0.5
    normal_k: int = 20
    init_min_overlap: float = 0.3
    dm_min_overlap: float = 0.3
    map_export_voxel: float = 0.1
    frame_iterations: int = 3
    final_iterations: int = 30

    def __post_init__(self):
        if self.keyframe_trans < 0 or self.keyframe_rot < 0:
            raise ValueError("keyframe spacings must be non-negative")
        if self.static_stride < 1:
            raise ValueError("static_stride must be >= 1")

    def initial_pose(self) -> Pose | None:
        if self.init_pose.strip().lower() == "auto":
            return None
        vals = [float(v) for v in self.init_pose.replace(",", " ").split()]
        if len(vals) != 7:
            raise ValueError("init_pose must be 'auto' or 'tx ty tz qx qy qz qw'")
        return Pose.from_quat(vals[:3], vals[3:])


@dataclass(frozen=True)
class FactorSwitches:
    dm: bool = True
    gf: bool = True
    nm: bool = True
    lc: bool = True


@dataclass(frozen=True)
class DataPaths:
    prior_map: str = "prior_map.pcd"
    frames: str = "frames.csv"
    imu: str = "imu.csv"
    odometry: str = "odometry.txt"
    ground_truth: str = ""
    gt_map: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    data: DataPaths = field(default_factory=DataPaths)
    pipeline: FrontConfig = field(default_factory=FrontConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    degeneracy: DegeneracyConfig = field(default_factory=DegeneracyConfig)
    zupt: ZuptConfig = field(default_factory=ZuptConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    factors: FactorSwitches = field(default_factory=FactorSwitches)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # directory that relative data paths are resolved against
    base_dir: str = "."

    def path(self, name: str) -> Path | None:
        value = getattr(self.data, name)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def replace(self, **sections) -> "PipelineConfig":
        return dataclasses.replace(self, **sections)

    def with_factors(self, **flags) -> "PipelineConfig":
        return dataclasses.replace(self, factors=dataclasses.replace(self.factors, **flags))


_SECTIONS = ("data", "pipeline", "icp", "degeneracy", "zupt", "loop", "factors", "eval")


def _parse(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.replace(",", " ").split())
    return value.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return " ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names
    if not parser.read(path):
        raise FileNotFoundError(f"cannot read config {path}")
    base = PipelineConfig()
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ValueError(f"{path}: unknown section [{name}]")
    for name in _SECTIONS:
        current = getattr(base, name)
        if not parser.has_section(name):
            continue
        known = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
        kwargs = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ValueError(f"{path}: unknown key {key!r} in [{name}]")
            kwargs[key] = _parse(raw, known[key])
        sections[name] = dataclasses.replace(current, **kwargs)
    return dataclasses.replace(base, base_dir=str(path.parent.resolve()), **sections)


def save_config(cfg: PipelineConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names
    for name in _SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    with open(path, "w") as fh:
        parser.write(fh)


def pose_to_string(X: Pose) -> str:
    return " ".join(repr(float(v)) for v in np.concatenate([X.t, X.quat()]))
