"""Map-centric continuous-time LiDAR SLAM with elastic surfel maps.

Dense surfel fusion, continuous-time sweep registration, and globally
consistent loop closure by non-rigid map deformation over an embedded
deformation graph sampled along the trajectory.
"""

from .deformation import (
    Binding,
    DeformationGraph,
    DeformationNode,
    EnergyBreakdown,
    EnergyWeights,
    GraphOptimParams,
    KIND_PIN,
    KIND_SURFEL,
    LoopConstraint,
    apply_deformation,
    bind_constraints,
    bind_point,
    build_graph,
    deform_normal,
    deform_point,
    deform_trajectory,
    energy,
    optimize_graph,
)
from .geometry import (
    Pose,
    SpatialIndex,
    SymEig3,
    eigen_symmetric3,
    knn_query,
    se3_interpolate,
)
from .loops import (
    LoopCandidate,
    LoopParams,
    VerifiedLoop,
    build_constraints,
    detect_candidates,
    verify_candidate,
)
from .registration import (
    RegistrationParams,
    RegistrationResult,
    Sweep,
    point_to_plane_residual,
    register_rigid,
    register_sweep,
    transform_sweep,
)
from .simulate import (
    EvaluationMetrics,
    Patch,
    ScannerSpec,
    World,
    evaluate,
    inject_drift,
    path_trajectory,
    preset_scanner,
    preset_trajectory,
    preset_world,
    simulate_sweeps,
)
from .surfels import PointSample, Surfel, SurfelMap, extract_surfels, fuse_surfels, radius_query
from .trajectory import ContinuousTrajectory, TimedPose, append_control, sample_pose

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
