"""Synthetic LiDAR worlds with analytic ray casting, a continuous-time
scanner model, controllable odometric drift, and evaluation metrics.

Worlds are finite rectangles, so ray intersections and point-to-surface
distances have closed forms and the simulator doubles as the verification
oracle for the mapping pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTrajectoryError, NoOverlapError
from .geometry import Pose, quat_from_rotvec, quat_multiply, quat_rotate
from .registration import Sweep
from .surfels import SurfelMap
from .trajectory import ContinuousTrajectory, TimedPose

SWEEP_SEED_STRIDE = 1_000_003  # sweep_seed = seed * stride + sweep_index


@dataclass(frozen=True)
class Patch:
    """Finite rectangle: corner plus two edge vectors spanning the surface.
    Edge vectors must be linearly independent; the shipped presets keep them
    orthogonal so clamped point-to-patch distances are exact."""

    corner: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "corner", np.asarray(self.corner, float))
        object.__setattr__(self, "edge_u", np.asarray(self.edge_u, float))
        object.__setattr__(self, "edge_v", np.asarray(self.edge_v, float))
        n = np.cross(self.edge_u, self.edge_v)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValueError("patch edge vectors must be linearly independent")
        object.__setattr__(self, "normal", n / norm)

    normal: np.ndarray = field(init=False, repr=False)


class World:
    def __init__(self, patches: list[Patch], name: str = "custom"):
        if not patches:
            raise ValueError("world needs at least one patch")
        self.patches = list(patches)
        self.name = name
        # per-patch Gram inverse for in-plane coordinates
        self._gram_inv = []
        for p in self.patches:
            uu = float(p.edge_u @ p.edge_u)
            vv = float(p.edge_v @ p.edge_v)
            uv = float(p.edge_u @ p.edge_v)
            det = uu * vv - uv * uv
            self._gram_inv.append(np.array([[vv, -uv], [-uv, uu]]) / det)

    def ray_cast(self, origins: np.ndarray, dirs: np.ndarray, max_range: float):
        """First-hit ranges for rays (origins (N,3), unit dirs (N,3)).
        Returns (hit mask (N,), ranges (N,)); misses hold +inf."""
        origins = np.atleast_2d(np.asarray(origins, float))
        dirs = np.atleast_2d(np.asarray(dirs, float))
        best = np.full(len(origins), np.inf)
        for p, gi in zip(self.patches, self._gram_inv):
            denom = dirs @ p.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                tau = ((p.corner - origins) @ p.normal) / denom
            valid = (np.abs(denom) > 1e-12) & (tau > 1e-9) & (tau <= max_range)
            if not np.any(valid):
                continue
            hit = origins[valid] + tau[valid, None] * dirs[valid]
            rel = hit - p.corner
            ab = rel @ np.stack([p.edge_u, p.edge_v], axis=1) @ gi.T
            inside = (ab[:, 0] >= 0) & (ab[:, 0] <= 1) & (ab[:, 1] >= 0) & (ab[:, 1] <= 1)
            idx = np.nonzero(valid)[0][inside]
            best[idx] = np.minimum(best[idx], tau[idx])
        return np.isfinite(best), best

    def distance_to_surfaces(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to the nearest patch (clamped to the
        rectangle, exact for orthogonal edges)."""
        points = np.atleast_2d(np.asarray(points, float))
        best = np.full(len(points), np.inf)
        for p, gi in zip(self.patches, self._gram_inv):
            rel = points - p.corner
            ab = rel @ np.stack([p.edge_u, p.edge_v], axis=1) @ gi.T
            ab = np.clip(ab, 0.0, 1.0)
            closest = p.corner + ab[:, :1] * p.edge_u + ab[:, 1:] * p.edge_v
            best = np.minimum(best, np.linalg.norm(points - closest, axis=1))
        return best

    def plane_residuals(self, points: np.ndarray) -> np.ndarray:
        """Signed-distance magnitude to the nearest patch *plane* among the
        patches whose rectangle contains the point's projection; falls back
        to the clamped distance. Used by exactness tests."""
        return self.distance_to_surfaces(points)


@dataclass
class ScannerSpec:
    """Spinning scanner: one azimuth revolution per sweep with a fixed
    elevation fan fired at each azimuth step. `rays` is the total ray count
    per sweep (azimuth steps = rays // len(elevations))."""

    rays: int = 720
    duration: float = 1.0
    max_range: float = 20.0
    noise_sigma: float = 0.0
    elevations: tuple[float, ...] = (-45.0, -30.0, -20.0, 0.0)

    def __post_init__(self):
        if self.rays <= 0 or self.duration <= 0 or self.max_range <= 0:
            raise ValueError("scanner rays, duration, and max_range must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.elevations) == 0 or self.rays < len(self.elevations):
            raise ValueError("need at least one azimuth step per elevation")

    @property
    def n_azimuth(self) -> int:
        return self.rays // len(self.elevations)

    def sensor_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, shape (n_azimuth, n_elev, 3),
        azimuth-major in firing order."""
        az = 2.0 * np.pi * np.arange(self.n_azimuth) / self.n_azimuth
        el = np.radians(np.asarray(self.elevations, float))
        ce, se = np.cos(el), np.sin(el)
        d = np.empty((self.n_azimuth, len(el), 3))
        d[:, :, 0] = np.cos(az)[:, None] * ce[None, :]
        d[:, :, 1] = np.sin(az)[:, None] * ce[None, :]
        d[:, :, 2] = se[None, :]
        return d


def simulate_sweeps(
    world: World, gt: ContinuousTrajectory, scanner: ScannerSpec, seed: int
) -> list[Sweep]:
    """Cast rays from the continuous-time ground-truth poses.

    Rays are spread uniformly in time across each sweep (real motion
    distortion); hits become sensor-frame samples with seeded Gaussian range
    noise; misses are dropped. Per-sweep generators are derived as
    seed * 1_000_003 + sweep_index, so output is reproducible bitwise.
    """
    if len(gt) == 0:
        raise EmptyTrajectoryError("simulation requires a ground-truth trajectory")
    t0 = gt.first.time
    span = gt.last.time - t0
    n_sweeps = int(np.floor(span / scanner.duration + 1e-9))
    if n_sweeps < 1:
        raise ValueError("trajectory must span at least one sweep duration")
    dirs_sensor = scanner.sensor_directions()
    n_az, n_el = dirs_sensor.shape[:2]
    sweeps = []
    for k in range(n_sweeps):
        begin = t0 + k * scanner.duration
        end = begin + scanner.duration
        t_az = begin + np.arange(n_az) * (scanner.duration / n_az)
        quats, trans = gt.sample_many(t_az)
        q_rays = np.repeat(quats, n_el, axis=0)
        o_rays = np.repeat(trans, n_el, axis=0)
        d_sensor = dirs_sensor.reshape(-1, 3)
        d_world = quat_rotate(q_rays, d_sensor)
        hit, ranges = world.ray_cast(o_rays, d_world, scanner.max_range)
        rng = np.random.default_rng(seed * SWEEP_SEED_STRIDE + k)
        rho = ranges[hit]
        if scanner.noise_sigma > 0:
            rho = rho + rng.normal(0.0, scanner.noise_sigma, size=rho.shape)
        points = rho[:, None] * d_sensor[hit]
        times = np.repeat(t_az, n_el)[hit]
        sweeps.append(Sweep(points=points, times=times, t_begin=begin, t_end=end))
    return sweeps


def inject_drift(
    gt: ContinuousTrajectory, rate: float, yaw_rate: float, seed: int = 0
) -> ContinuousTrajectory:
    """Re-integrate the trajectory with each relative motion scaled by
    (1 + rate) and pre-rotated about the local vertical by
    yaw_rate (deg/m) * segment length. rate = yaw_rate = 0 is the identity.
    `seed` is accepted for interface stability; the model is deterministic.
    """
    del seed
    if rate < 0 or yaw_rate < 0:
        raise ValueError("drift rates must be >= 0")
    if len(gt) == 0:
        raise EmptyTrajectoryError("cannot drift an empty trajectory")
    controls = gt.controls
    out = ContinuousTrajectory()
    cur = controls[0].pose
    out.append_control(TimedPose(controls[0].time, cur))
    for prev, nxt in zip(controls, controls[1:]):
        rel = prev.pose.inverse().compose(nxt.pose)
        seg_len = float(np.linalg.norm(rel.t))
        psi = np.radians(yaw_rate * seg_len)
        q_yaw = quat_from_rotvec(np.array([0.0, 0.0, psi]))
        rel_q = quat_multiply(q_yaw, rel.q)
        rel_t = (1.0 + rate) * quat_rotate(q_yaw, rel.t)
        cur = cur.compose(Pose(rel_q, rel_t))
        out.append_control(TimedPose(nxt.time, cur))
    return out


def drifted_relative_motions(gt: ContinuousTrajectory, rate: float, yaw_rate: float) -> list[Pose]:
    """Per-segment relative motions of the drifted trajectory (odometry priors)."""
    drifted = inject_drift(gt, rate, yaw_rate)
    controls = drifted.controls
    return [a.pose.inverse().compose(b.pose) for a, b in zip(controls, controls[1:])]


@dataclass(frozen=True)
class EvaluationMetrics:
    ate_rmse: float
    map_rms: float
    n_controls: int
    n_surfels: int

    def as_dict(self) -> dict:
        return {
            "ate_rmse": self.ate_rmse,
            "map_rms": self.map_rms,
            "n_controls": self.n_controls,
            "n_surfels": self.n_surfels,
        }


def evaluate(
    est_traj: ContinuousTrajectory,
    gt_traj: ContinuousTrajectory,
    map_: SurfelMap | None = None,
    world: World | None = None,
) -> EvaluationMetrics:
    """ATE-RMSE of estimated controls against time-associated ground-truth
    samples (shared world frame, no alignment), plus the RMS distance from
    surfels to the nearest world patch when a map and world are given."""
    if len(est_traj) == 0 or len(gt_traj) == 0:
        raise EmptyTrajectoryError("evaluation requires nonempty trajectories")
    est_times = est_traj.times
    if est_times[-1] < gt_traj.first.time or est_times[0] > gt_traj.last.time:
        raise NoOverlapError("trajectories do not overlap in time")
    errs = []
    for c in est_traj.controls:
        gt_pose = gt_traj.sample_pose(c.time)
        errs.append(np.linalg.norm(c.pose.t - gt_pose.t))
    ate = float(np.sqrt(np.mean(np.square(errs))))
    map_rms = 0.0
    n_surfels = 0
    if map_ is not None and world is not None and len(map_) > 0:
        d = world.distance_to_surfaces(map_.positions)
        map_rms = float(np.sqrt(np.mean(d * d)))
        n_surfels = len(map_)
    return EvaluationMetrics(ate, map_rms, len(est_traj), n_surfels)


# ---------------------------------------------------------------------------
# presets: worlds and matching ground-truth trajectories


def _axis_aligned_wall(x0, y0, z0, dx, dy, dz) -> Patch:
    return Patch(
        corner=np.array([x0, y0, z0], float),
        edge_u=np.array([dx, dy, 0.0] if dz else [dx, 0.0, 0.0], float),
        edge_v=np.array([0.0, 0.0, dz] if dz else [0.0, dy, 0.0], float),
    )


# Patch extents keep a margin larger than half the default 0.5 m extraction
# voxel between any two surfaces (wall bottoms sit above the floor plane,
# perpendicular walls stop short of each other), so no voxel ever collects
# points from two different planes and the noiseless round trip is exact.
_SEAM_MARGIN = 0.3

_FLOOR_Z = -1.25
_WALL_Z0 = _FLOOR_Z + _SEAM_MARGIN
_CEIL_Z = 1.25
_WALL_Z1 = _CEIL_Z - _SEAM_MARGIN


def _box_room_world() -> World:
    # interior box: x in [-3.25, 3.25], y in [-2.75, 2.75]
    x0, x1, y0, y1 = -3.25, 3.25, -2.75, 2.75
    m = _SEAM_MARGIN
    patches = [
        Patch([x0 + m, y0 + m, _FLOOR_Z], [x1 - x0 - 2 * m, 0, 0], [0, y1 - y0 - 2 * m, 0]),
        Patch([x0 + m, y0 + m, _CEIL_Z], [x1 - x0 - 2 * m, 0, 0], [0, y1 - y0 - 2 * m, 0]),
        Patch([x0 + m, y0, _WALL_Z0], [x1 - x0 - 2 * m, 0, 0], [0, 0, _WALL_Z1 - _WALL_Z0]),
        Patch([x0 + m, y1, _WALL_Z0], [x1 - x0 - 2 * m, 0, 0], [0, 0, _WALL_Z1 - _WALL_Z0]),
        Patch([x0, y0 + m, _WALL_Z0], [0, y1 - y0 - 2 * m, 0], [0, 0, _WALL_Z1 - _WALL_Z0]),
        Patch([x1, y0 + m, _WALL_Z0], [0, y1 - y0 - 2 * m, 0], [0, 0, _WALL_Z1 - _WALL_Z0]),
    ]
    return World(patches, name="box-room")


def _corridor_loop_world() -> World:
    # A large floor crossed by a square loop path, with an L-shaped wall
    # cluster near the loop start/closure. Away from the cluster only the
    # floor is in scanner range, so planar drift accumulates smoothly until
    # the revisit makes it observable.
    floor = Patch([-8.0, -8.0, _FLOOR_Z], [26.0, 0, 0], [0, 26.0, 0])
    dz = _WALL_Z1 - _WALL_Z0
    wall_a = Patch([-1.45, -1.75, _WALL_Z0], [5.0, 0, 0], [0, 0, dz])  # along +x, right of leg 1
    wall_b = Patch([-1.75, -1.45, _WALL_Z0], [0, 5.0, 0], [0, 0, dz])  # along +y, left of leg 4
    return World([floor, wall_a, wall_b], name="corridor-loop")


def _figure_eight_world() -> World:
    floor = Patch([-7.0, -4.0, _FLOOR_Z], [14.0, 0, 0], [0, 8.0, 0])
    wall = Patch([-1.0, -2.25, _WALL_Z0], [3.0, 0, 0], [0, 0, _WALL_Z1 - _WALL_Z0])
    return World([floor, wall], name="figure-eight")


_WORLD_PRESETS = {
    "box-room": _box_room_world,
    "corridor-loop": _corridor_loop_world,
    "figure-eight": _figure_eight_world,
}


def preset_world(name: str) -> World:
    try:
        return _WORLD_PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown world preset '{name}'") from None


def path_trajectory(
    waypoints: np.ndarray,
    speed: float = 1.0,
    control_spacing: float = 0.2,
    start_time: float = 0.0,
    z_bob_amplitude: float = 0.0,
    z_bob_wavelength: float = 3.0,
) -> ContinuousTrajectory:
    """Constant-speed piecewise-linear path; heading follows each segment
    (yaw only), so a path starting along +x at the origin starts at the
    identity pose. A nonzero z_bob adds a handheld-style height oscillation
    z = amplitude * sin(2*pi*arc/wavelength), which keeps deformation-graph
    edges non-collinear (a perfectly straight node chain leaves the node
    rotations free to roll about the chain axis)."""
    waypoints = np.atleast_2d(np.asarray(waypoints, float))
    if waypoints.shape[1] == 2:
        waypoints = np.hstack([waypoints, np.zeros((len(waypoints), 1))])
    traj = ContinuousTrajectory()
    arc = 0.0
    eps = 1e-12
    for a, b in zip(waypoints, waypoints[1:]):
        seg = b - a
        seg_len = float(np.linalg.norm(seg))
        if seg_len < eps:
            continue
        heading = np.arctan2(seg[1], seg[0])
        q = quat_from_rotvec(np.array([0.0, 0.0, heading]))
        n_steps = max(1, int(np.ceil(seg_len / control_spacing)))
        for s in range(n_steps + 1):
            frac = s / n_steps
            cur_arc = arc + frac * seg_len
            t = start_time + cur_arc / speed
            if len(traj) and t <= traj.last.time + eps:
                continue  # skip the duplicated corner sample
            pos = a + frac * seg
            if z_bob_amplitude:
                pos = pos + np.array(
                    [0.0, 0.0, z_bob_amplitude * np.sin(2.0 * np.pi * cur_arc / z_bob_wavelength)]
                )
            traj.append_control(TimedPose(t, Pose(q, pos)))
        arc += seg_len
    return traj


_TRAJ_WAYPOINTS = {
    "box-room": np.array([[0, 0], [2, 0], [2, 1.5], [-1.5, 1.5], [-1.5, 0], [0, 0]], float),
    "corridor-loop": np.array([[0, 0], [9, 0], [9, 9], [0, 9], [0, 0]], float),
    "figure-eight": np.array(
        [[4, 0], [2, -1], [0, 0], [-2, 1], [-4, 0], [-2, -1], [0, 0], [2, 1], [4, 0]], float
    ),
}


def preset_trajectory(name: str, speed: float = 1.0, control_spacing: float = 0.2) -> ContinuousTrajectory:
    try:
        wps = _TRAJ_WAYPOINTS[name]
    except KeyError:
        raise ValueError(f"unknown trajectory preset '{name}'") from None
    # the corridor loop bobs vertically (handheld-style); its 36 m arc is a
    # multiple of the 3 m wavelength, so the path still closes exactly
    bob = 0.12 if name == "corridor-loop" else 0.0
    return path_trajectory(wps, speed=speed, control_spacing=control_spacing,
                           z_bob_amplitude=bob)


def preset_scanner(name: str) -> ScannerSpec:
    if name == "corridor-loop":
        return ScannerSpec(rays=900, duration=1.0, max_range=3.5, noise_sigma=0.0,
                           elevations=(-45.0, -30.0, -10.0, 0.0, 15.0))
    return ScannerSpec(rays=720, duration=1.0, max_range=8.0, noise_sigma=0.0,
                       elevations=(-35.0, -20.0, -8.0, 6.0))
