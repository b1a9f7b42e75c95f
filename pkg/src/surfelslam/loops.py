"""Loop closure: revisit detection by trajectory proximity, verification by
rigid submap registration, and constraint generation for the deformation
solver (pin the old pass, deform the new geometry onto it)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .deformation import KIND_PIN, KIND_SURFEL, DeformationGraph, LoopConstraint
from .errors import EmptySubmapError, LoopRejected, NoCorrespondencesError
from .geometry import Pose
from .registration import RegistrationParams, register_rigid
from .surfels import SurfelMap
from .trajectory import ContinuousTrajectory


@dataclass(frozen=True)
class LoopCandidate:
    time_a: float  # earlier pass
    time_b: float  # later pass
    separation: float


@dataclass(frozen=True)
class VerifiedLoop:
    candidate: LoopCandidate
    relative: Pose  # maps the later submap onto the earlier one
    fitness: float  # inlier RMS, meters
    inlier_fraction: float


@dataclass
class LoopParams:
    min_time_gap: float = 20.0
    max_detect_dist: float = 3.0
    submap_halfwidth: float = 5.0
    max_fitness: float = 0.1
    min_inliers: float = 0.3
    n_samples: int = 50
    verify_max_corr_dist: float = 3.0
    verify_max_iters: int = 60
    verify_huber_delta: float = 0.3
    verify_min_matches: int = 10


def detect_candidates(
    traj: ContinuousTrajectory, min_time_gap: float, max_detect_dist: float
) -> list[LoopCandidate]:
    """Control-pose pairs with time gap >= min_time_gap and spatial distance
    <= max_detect_dist, suppressed to the locally closest pair per revisit
    event (non-max suppression with radius min_time_gap/2 on both times)."""
    times = traj.times
    if len(times) == 0:
        return []
    positions = traj.translations()
    tree = cKDTree(positions)
    pairs: list[tuple[float, float, float]] = []
    for i in range(len(times)):
        for j in tree.query_ball_point(positions[i], max_detect_dist * (1 + 1e-12)):
            if times[j] - times[i] < min_time_gap:
                continue
            sep = float(np.linalg.norm(positions[j] - positions[i]))
            if sep <= max_detect_dist:
                pairs.append((sep, float(times[i]), float(times[j])))
    pairs.sort()
    half = min_time_gap / 2.0
    kept: list[tuple[float, float, float]] = []
    for sep, ta, tb in pairs:
        if any(abs(ta - ka) <= half and abs(tb - kb) <= half for _, ka, kb in kept):
            continue
        kept.append((sep, ta, tb))
    kept.sort(key=lambda p: (p[1], p[2]))
    return [LoopCandidate(ta, tb, sep) for sep, ta, tb in kept]


def verify_candidate(
    map_: SurfelMap,
    traj: ContinuousTrajectory,
    cand: LoopCandidate,
    params: LoopParams | None = None,
) -> VerifiedLoop:
    """Align the later submap onto the earlier one with rigid point-to-plane
    ICP from identity (both submaps already live in the world frame).
    Raises LoopRejected('fitness' | 'inliers' | 'empty submap')."""
    params = params or LoopParams()
    rows_a = map_.rows_in_time_window(cand.time_a, params.submap_halfwidth)
    rows_b = map_.rows_in_time_window(cand.time_b, params.submap_halfwidth)
    if rows_a.size == 0 or rows_b.size == 0:
        raise LoopRejected("empty submap")
    icp = RegistrationParams(
        max_corr_dist=params.verify_max_corr_dist,
        huber_delta=params.verify_huber_delta,
        tol=1e-8,
        max_iters=params.verify_max_iters,
        min_matches=params.verify_min_matches,
    )
    try:
        relative, _, rms, inlier_fraction, _ = register_rigid(
            map_.positions[rows_a],
            map_.normals[rows_a],
            map_.positions[rows_b],
            init=Pose.identity(),
            params=icp,
            source_normals=map_.normals[rows_b],
        )
    except NoCorrespondencesError:
        raise LoopRejected("inliers") from None
    if not rms < params.max_fitness:
        raise LoopRejected("fitness")
    if not inlier_fraction > params.min_inliers:
        raise LoopRejected("inliers")
    return VerifiedLoop(cand, relative, rms, inlier_fraction)


def build_constraints(
    loop: VerifiedLoop,
    map_: SurfelMap,
    graph: DeformationGraph,
    n_samples: int,
    submap_halfwidth: float,
    rng: np.random.Generator | None = None,
) -> list[LoopConstraint]:
    """Surfel constraints snapping the later pass onto the earlier one, plus
    node pins anchoring every graph node inside the earlier pass's window."""
    rows_b = map_.rows_in_time_window(loop.candidate.time_b, submap_halfwidth)
    if rows_b.size == 0:
        raise EmptySubmapError("no surfels in the later submap window")
    if rows_b.size > n_samples:
        rng = rng or np.random.default_rng(0)
        rows_b = np.sort(rng.choice(rows_b, size=n_samples, replace=False))
    constraints = []
    for i in rows_b:
        src = map_.positions[i].copy()
        constraints.append(
            LoopConstraint(
                source=src,
                target=loop.relative.transform(src),
                kind=KIND_SURFEL,
                source_time=float(map_.times[i]),
            )
        )
    pinned = np.nonzero(np.abs(graph.node_times - loop.candidate.time_a) <= submap_halfwidth)[0]
    for j in pinned:
        g = graph.node_positions[j].copy()
        constraints.append(LoopConstraint(source=g, target=g.copy(), kind=KIND_PIN, node=int(j)))
    return constraints
