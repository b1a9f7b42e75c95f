"""End-to-end run: simulate or load sweeps, continuous-time odometry with
surfel fusion, loop detection and verification, elastic map deformation, and
before/after evaluation. The map is corrected by deforming it, never by
re-integrating raw scans."""

from __future__ import annotations

import glob
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .deformation import (
    DeformationGraph,
    IterationRecord,
    LoopConstraint,
    apply_deformation,
    bind_constraints,
    build_graph,
    optimize_graph,
)
from .errors import LoopRejected, StageError
from .fileio import (
    ensure_dir,
    read_points,
    read_trajectory_tum,
    write_json,
    write_points,
    write_surfel_map,
    write_trajectory_tum,
)
from .geometry import se3_interpolate
from .loops import VerifiedLoop, build_constraints, detect_candidates, verify_candidate
from .registration import Sweep, register_sweep, transform_sweep
from .simulate import World, evaluate, inject_drift, preset_trajectory, simulate_sweeps
from .surfels import SurfelMap, extract_surfels
from .trajectory import ContinuousTrajectory, TimedPose


@dataclass
class RunReport:
    seed: int
    preset: str | None
    counts: dict
    timings_ms: dict
    metrics_before: dict | None
    metrics_after: dict | None
    energy_log: list[dict] | None
    loops: list[dict]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "preset": self.preset,
            "counts": self.counts,
            "timings_ms": self.timings_ms,
            "metrics_before": self.metrics_before,
            "metrics_after": self.metrics_after,
            "energy_log": self.energy_log,
            "loops": self.loops,
        }


@dataclass
class PipelineResult:
    report: RunReport
    world: World | None
    gt: ContinuousTrajectory | None
    prior: ContinuousTrajectory
    sweeps: list[Sweep]
    map_odometry: SurfelMap
    traj_odometry: ContinuousTrajectory
    map_final: SurfelMap
    traj_final: ContinuousTrajectory
    graph: DeformationGraph | None
    constraints: list[LoopConstraint] = field(default_factory=list)
    verified: list[VerifiedLoop] = field(default_factory=list)
    energy_records: list[IterationRecord] = field(default_factory=list)

    @property
    def deformed(self) -> bool:
        return self.graph is not None


@contextmanager
def _stage(name: str, timings: dict, verbose: bool):
    if verbose:
        print(f"[{name}] ...", flush=True)
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = (time.perf_counter() - t0) * 1000.0


def _load_sweeps(sweeps_dir: str) -> list[Sweep]:
    paths = sorted(glob.glob(os.path.join(sweeps_dir, "sweep_*.ply")))
    if not paths:
        raise FileNotFoundError(f"no sweep_*.ply files in {sweeps_dir}")
    sweeps = []
    for p in paths:
        pts, times, comments = read_points(p)
        t0 = float(comments.get("sweep_begin", times.min() if len(times) else 0.0))
        t1 = float(comments.get("sweep_end", times.max() if len(times) else 1.0))
        sweeps.append(Sweep(points=pts, times=times, t_begin=t0, t_end=t1))
    return sweeps


def run_pipeline(config: PipelineConfig, out_dir: str | None = None,
                 verbose: bool = False) -> PipelineResult:
    timings: dict[str, float] = {}
    out_dir = out_dir or config.out

    world = None
    gt = None
    with _stage("simulate", timings, verbose):
        if config.input.sweeps_dir:
            sweeps = _load_sweeps(config.input.sweeps_dir)
            prior = read_trajectory_tum(config.input.prior_trajectory)
            if config.input.gt_trajectory:
                gt = read_trajectory_tum(config.input.gt_trajectory)
                world = config.build_world()
        else:
            world = config.build_world()
            gt = preset_trajectory(config.trajectory_preset(), speed=config.sim.speed,
                                   control_spacing=config.sim.control_spacing)
            sweeps = simulate_sweeps(world, gt, config.build_scanner(), config.seed)
            prior = inject_drift(gt, config.drift.rate, config.drift.yaw_rate, config.seed)

    with _stage("odometry", timings, verbose):
        sc = config.surfel
        reg_params = config.odometry.params()
        map_ = SurfelMap.empty(sc.voxel)
        times = [sweeps[0].t_begin]
        poses = [prior.sample_pose(sweeps[0].t_begin)]
        for k, sweep in enumerate(sweeps):
            if abs(sweep.t_begin - times[-1]) > 1e-9:
                raise ValueError(f"sweep {k} does not start at the previous sweep's end")
            rel = prior.sample_pose(sweep.t_begin).inverse().compose(
                prior.sample_pose(sweep.t_end))
            pose_a = poses[-1]
            pose_b = pose_a.compose(rel)
            if k > 0 and len(map_) > 0:
                res = register_sweep(map_, sweep, TimedPose(sweep.t_begin, pose_a),
                                     TimedPose(sweep.t_end, pose_b), reg_params)
                pose_a = res.pose_begin.pose
                pose_b = res.pose_end.pose
                poses[-1] = pose_a
            world_pts = transform_sweep(sweep, pose_a, pose_b)
            origin = se3_interpolate(pose_a, pose_b, 0.5).t
            surfels = extract_surfels(world_pts, sweep.times, sc.voxel, sc.min_points,
                                      sc.planarity_eps, origin, sensor_points=sweep.points)
            map_ = map_.fuse(surfels, sc.merge_radius, sc.max_normal_angle)
            times.append(sweep.t_end)
            poses.append(pose_b)
        traj = ContinuousTrajectory.from_poses(times, poses)

    with _stage("loop_closure", timings, verbose):
        lp = config.loop.params()
        candidates = detect_candidates(traj, lp.min_time_gap, lp.max_detect_dist)
        verified: list[VerifiedLoop] = []
        rejected = 0
        for cand in candidates:
            try:
                verified.append(verify_candidate(map_, traj, cand, lp))
            except LoopRejected as exc:
                rejected += 1
                if verbose:
                    print(f"  loop ({cand.time_a:.1f}, {cand.time_b:.1f}) "
                          f"rejected: {exc.reason}")

    graph = None
    constraints: list[LoopConstraint] = []
    opt_log: list[IterationRecord] = []
    map_final, traj_final = map_, traj
    with _stage("deformation", timings, verbose):
        if verified:
            dc = config.deformation
            graph0 = build_graph(traj, dc.node_spacing, dc.k_edge, dc.k_bind, dc.weights())
            rng = np.random.default_rng([config.seed, 1])
            for loop in verified:
                constraints.extend(build_constraints(loop, map_, graph0, lp.n_samples,
                                                     lp.submap_halfwidth, rng))
            bindings = bind_constraints(graph0, constraints, dc.time_window)
            graph, opt_log = optimize_graph(graph0, constraints, dc.optim_params(), bindings)
            map_final, traj_final = apply_deformation(map_, traj, graph, dc.time_window)

    metrics_before = None
    metrics_after = None
    with _stage("evaluation", timings, verbose):
        if gt is not None:
            metrics_before = evaluate(traj, gt, map_, world).as_dict()
            if verified:
                metrics_after = evaluate(traj_final, gt, map_final, world).as_dict()

    report = RunReport(
        seed=config.seed,
        preset=world.name if world is not None else None,
        counts={
            "sweeps": len(sweeps),
            "surfels": len(map_final),
            "controls": len(traj_final),
            "nodes": len(graph) if graph is not None else 0,
            "constraints": len(constraints),
            "loops_detected": len(candidates),
            "loops_verified": len(verified),
            "loops_rejected": rejected,
        },
        timings_ms=timings,
        metrics_before=metrics_before,
        metrics_after=metrics_after,
        energy_log=[
            {"e_rot": r.breakdown.e_rot, "e_reg": r.breakdown.e_reg,
             "e_con": r.breakdown.e_con, "e_pin": r.breakdown.e_pin,
             "total": r.breakdown.total, "lambda": r.lam}
            for r in opt_log
        ] if opt_log else None,
        loops=[
            {"time_a": v.candidate.time_a, "time_b": v.candidate.time_b,
             "separation": v.candidate.separation, "fitness": v.fitness,
             "inlier_fraction": v.inlier_fraction}
            for v in verified
        ],
    )

    result = PipelineResult(
        report=report, world=world, gt=gt, prior=prior, sweeps=sweeps,
        map_odometry=map_, traj_odometry=traj, map_final=map_final,
        traj_final=traj_final, graph=graph, constraints=constraints,
        verified=verified, energy_records=opt_log,
    )

    if out_dir:
        with _stage("io", timings, verbose):
            write_outputs(result, out_dir)
        report.timings_ms = timings
    return result


def write_outputs(result: PipelineResult, out_dir: str) -> None:
    ensure_dir(out_dir)
    write_surfel_map(result.map_final, os.path.join(out_dir, "map.ply"))
    write_trajectory_tum(result.traj_final, os.path.join(out_dir, "trajectory.txt"))
    if result.deformed:
        write_surfel_map(result.map_odometry, os.path.join(out_dir, "map_odometry.ply"))
        write_trajectory_tum(result.traj_odometry,
                             os.path.join(out_dir, "trajectory_odometry.txt"))
    if result.gt is not None:
        write_trajectory_tum(result.gt, os.path.join(out_dir, "gt_trajectory.txt"))
    write_json(os.path.join(out_dir, "report.json"), result.report.to_dict())


def write_simulation(config: PipelineConfig, out_dir: str) -> dict:
    """`simulate` subcommand: sweeps, ground truth, and drifted prior on disk."""
    from .config import world_to_dict

    world = config.build_world()
    gt = preset_trajectory(config.trajectory_preset(), speed=config.sim.speed,
                           control_spacing=config.sim.control_spacing)
    sweeps = simulate_sweeps(world, gt, config.build_scanner(), config.seed)
    prior = inject_drift(gt, config.drift.rate, config.drift.yaw_rate, config.seed)
    ensure_dir(out_dir)
    sweep_dir = ensure_dir(os.path.join(out_dir, "sweeps"))
    for k, sweep in enumerate(sweeps):
        write_points(os.path.join(sweep_dir, f"sweep_{k:04d}.ply"), sweep.points, sweep.times,
                     {"sweep_begin": repr(sweep.t_begin), "sweep_end": repr(sweep.t_end)})
    write_trajectory_tum(gt, os.path.join(out_dir, "gt_trajectory.txt"))
    write_trajectory_tum(prior, os.path.join(out_dir, "prior_trajectory.txt"))
    write_json(os.path.join(out_dir, "world.json"), world_to_dict(world))
    return {"sweeps": len(sweeps), "out": out_dir}
