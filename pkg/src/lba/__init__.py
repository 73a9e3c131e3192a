"""LiDAR bundle adjustment with polynomial surface smoothing, optimality-aware
graph sparsification, stochastic clustering, and Schur-complement staging."""

from .geometry import (
    LidarFrame,
    Pose,
    PoseCorrection,
    apply_pose,
    exp_map,
    log_map,
    perturb_normal,
    perturb_pose,
)
from .graph import (
    ClusterAssignment,
    RelationEdge,
    RelationGraph,
    SparsifyConfig,
    build_relation_graph,
    optimality,
    sparsify,
    stochastic_cluster,
)
from .metrics import ape
from .smoothing import SmoothingConfig, SmoothingKernel, SurfaceFactor
from .solver import SolverConfig, run_pipeline
from .synthetic import SceneSpec, generate_scene

__all__ = [
    "LidarFrame", "Pose", "PoseCorrection", "apply_pose", "exp_map", "log_map",
    "perturb_normal", "perturb_pose", "ClusterAssignment", "RelationEdge",
    "RelationGraph", "SparsifyConfig", "build_relation_graph", "optimality",
    "sparsify", "stochastic_cluster", "ape", "SmoothingConfig",
    "SmoothingKernel", "SurfaceFactor", "SolverConfig", "run_pipeline",
    "SceneSpec", "generate_scene",
]

__version__ = "0.1.0"
