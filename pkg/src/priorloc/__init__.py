"""Pose-graph localisation of LiDAR scans against a prior map.

Submodules: ``lie`` (SE(3) algebra), ``cloud`` (point clouds, k-d tree,
normals, PCD/PLY), ``icp`` (point-to-plane registration), ``degeneracy``,
``zupt`` (stationary detection, gravity and no-motion factors), ``graph``
(factors, optimisation, marginals), ``evaluation`` (ATE/RPE, map metrics)
and ``pipeline`` (dataset I/O, simulator, runner, CLI).
"""

from .cloud import PointCloud, SpatialIndex
from .lie import Pose

__all__ = ["Pose", "PointCloud", "SpatialIndex"]
__version__ = "0.1.0"
