"""Continuous-time point-to-plane registration.

A sweep is aligned to the surfel map by optimizing its two bracketing control
poses with damped Gauss-Newton. Each point is placed at its own timestamp by
interpolating the control poses at alpha = (t - t_begin)/(t_end - t_begin),
so the solve undoes motion distortion inside the sweep. The linearization
perturbs the interpolated pose with the blended twist
(1-alpha)*delta_a + alpha*delta_b applied on the left, which chains each
point's 6-DoF pose Jacobian onto both controls with weights (1-alpha), alpha.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMapError, NoCorrespondencesError
from .geometry import Pose, SpatialIndex, quat_from_rotvec, quat_multiply, quat_rotate, quat_slerp_batch
from .surfels import PointSample, Surfel, SurfelMap
from .trajectory import TimedPose

_MAX_HALVINGS = 12
_DAMPING_RATIO = 1e-3  # Levenberg floor relative to the largest Hessian diagonal


@dataclass
class Sweep:
    """One scan interval: sensor-frame points with per-point timestamps."""

    points: np.ndarray
    times: np.ndarray
    t_begin: float
    t_end: float

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, float)).reshape(-1, 3)
        self.times = np.asarray(self.times, float).reshape(-1)
        if len(self.points) != len(self.times):
            raise ValueError("points and times must have matching length")
        if not self.t_begin < self.t_end:
            raise ValueError("sweep requires t_begin < t_end")
        if len(self.times) and (
            self.times.min() < self.t_begin - 1e-9 or self.times.max() > self.t_end + 1e-9
        ):
            raise ValueError("sample times must lie within [t_begin, t_end]")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def samples(self) -> list[PointSample]:
        return [PointSample(p.copy(), float(t)) for p, t in zip(self.points, self.times)]

    def alphas(self) -> np.ndarray:
        return (self.times - self.t_begin) / (self.t_end - self.t_begin)


@dataclass
class RegistrationParams:
    max_corr_dist: float = 1.0
    huber_delta: float = 0.1
    tol: float = 1e-6
    max_iters: int = 30
    min_matches: int = 10


@dataclass
class RegistrationResult:
    pose_begin: TimedPose
    pose_end: TimedPose
    iterations: int
    rms: float
    inlier_fraction: float
    converged: bool
    objective_trace: list[float]


def point_to_plane_residual(p: PointSample, pose_at_time: Pose, s: Surfel) -> float:
    """Signed distance of the transformed point to the surfel's tangent plane."""
    w = pose_at_time.transform(p.position)
    return float(s.normal @ (w - s.position))


def _huber_rho(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, r * r, 2.0 * delta * a - delta * delta)


def _huber_weight(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    w = np.ones_like(a)
    big = a > delta
    w[big] = delta / a[big]
    return w


def _rotvec_rotate(omegas: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Rodrigues rotation of each vector by its own rotation vector."""
    omegas = np.atleast_2d(np.asarray(omegas, float))
    vecs = np.atleast_2d(np.asarray(vecs, float))
    theta2 = np.einsum("ij,ij->i", omegas, omegas)
    theta = np.sqrt(theta2)
    small = theta < 1e-4
    sinc = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / np.where(theta == 0, 1.0, theta))
    verc = np.where(
        small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(theta2 == 0, 1.0, theta2)
    )
    wxv = np.cross(omegas, vecs)
    wxwxv = np.cross(omegas, wxv)
    return vecs + sinc[:, None] * wxv + verc[:, None] * wxwxv


def _place(pts, alphas, q_a, t_a, q_b, t_b):
    n = len(pts)
    qi = quat_slerp_batch(np.broadcast_to(q_a, (n, 4)), np.broadcast_to(q_b, (n, 4)), alphas)
    ti = (1.0 - alphas)[:, None] * t_a + alphas[:, None] * t_b
    return quat_rotate(qi, pts) + ti


def _apply_twist(q, t, omega, nu):
    """Left-multiply exp([omega, nu]): x -> R_omega x + nu composed on the pose."""
    qd = quat_from_rotvec(omega)
    q_new = quat_multiply(qd, q)
    return q_new / np.linalg.norm(q_new), quat_rotate(qd, t) + nu


def residuals_and_jacobian(positions, normals, rows, pts, alphas, q_a, t_a, q_b, t_b, two_pose=True):
    """Point-to-plane residuals and analytic Jacobian at fixed correspondences.

    Column layout: [omega_a, nu_a, omega_b, nu_b] (12) or [omega, nu] (6).
    """
    w = _place(pts, alphas, q_a, t_a, q_b, t_b)
    nn = normals[rows]
    r = np.einsum("ij,ij->i", nn, w - positions[rows])
    jp = np.concatenate([np.cross(w, nn), nn], axis=1)
    if two_pose:
        jac = np.concatenate([(1.0 - alphas)[:, None] * jp, alphas[:, None] * jp], axis=1)
    else:
        jac = jp
    return r, jac


def perturbed_residuals(positions, normals, rows, pts, alphas, q_a, t_a, q_b, t_b, delta):
    """Residuals of the placement model under a twist perturbation.

    Each point's pose is perturbed on the left by the blended twist
    (1-alpha)*delta[:6] + alpha*delta[6:]; residuals keep the given
    correspondences. This is the function residuals_and_jacobian linearizes.
    """
    delta = np.asarray(delta, float)
    if delta.shape == (6,):
        delta = np.concatenate([delta, np.zeros(6)])
    w0 = _place(pts, alphas, q_a, t_a, q_b, t_b)
    om = (1.0 - alphas)[:, None] * delta[:3] + alphas[:, None] * delta[6:9]
    nu = (1.0 - alphas)[:, None] * delta[3:6] + alphas[:, None] * delta[9:12]
    w = _rotvec_rotate(om, w0) + nu
    nn = normals[rows]
    return np.einsum("ij,ij->i", nn, w - positions[rows])


def _gauss_newton_p2p(positions, normals, index, pts, alphas, q_a, t_a, q_b, t_b, params,
                      two_pose, source_normals=None, normal_gate_deg=60.0):
    n_pts = len(pts)
    delta = params.huber_delta
    trace: list[float] = []
    converged = False
    iterations = 0
    cos_gate = np.cos(np.radians(normal_gate_deg))

    def match(world, q_cur):
        d, rows = index.nearest_rows(world)
        mask = d <= params.max_corr_dist
        if source_normals is not None:
            # surfel-to-surfel mode: reject matches across differently
            # oriented surfaces (wall points must not pull against floors)
            rotated = quat_rotate(q_cur, source_normals)
            mask &= np.einsum("ij,ij->i", rotated, normals[rows]) >= cos_gate
        return mask, rows

    def objective(world, mask, rows):
        sel = rows[mask]
        r = np.einsum("ij,ij->i", normals[sel], world[mask] - positions[sel])
        return float(np.mean(_huber_rho(r, delta))), r

    state = (q_a.copy(), t_a.copy(), q_b.copy(), t_b.copy())
    for it in range(params.max_iters):
        iterations = it + 1
        world = _place(pts, alphas, *state)
        mask, rows = match(world, state[0])
        m = int(mask.sum())
        if m < params.min_matches:
            raise NoCorrespondencesError(
                f"{m} correspondences, fewer than min_matches={params.min_matches}"
            )
        f_cur, r = objective(world, mask, rows)
        if not trace:
            trace.append(f_cur)
        hw = _huber_weight(r, delta)
        nn = normals[rows[mask]]
        jp = np.concatenate([np.cross(world[mask], nn), nn], axis=1)
        if two_pose:
            am = alphas[mask]
            jac = np.concatenate([(1.0 - am)[:, None] * jp, am[:, None] * jp], axis=1)
        else:
            jac = jp
        jw = jac * hw[:, None]
        hess = jw.T @ jac
        grad = jac.T @ (hw * r)
        # small fixed Levenberg floor: weakly observed directions (degenerate
        # scenes, e.g. floor-only sweeps) stay at the prior instead of sliding
        # along numerically amplified gradients
        damping = _DAMPING_RATIO * float(np.max(np.diag(hess)))
        step = np.linalg.lstsq(hess + damping * np.eye(hess.shape[0]), -grad, rcond=1e-12)[0]
        if np.linalg.norm(step) < params.tol:
            converged = True
            break
        accepted = False
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            if two_pose:
                qa2, ta2 = _apply_twist(state[0], state[1], scale * step[:3], scale * step[3:6])
                qb2, tb2 = _apply_twist(state[2], state[3], scale * step[6:9], scale * step[9:12])
            else:
                qa2, ta2 = _apply_twist(state[0], state[1], scale * step[:3], scale * step[3:6])
                qb2, tb2 = qa2, ta2
            cand = (qa2, ta2, qb2, tb2)
            world_c = _place(pts, alphas, *cand)
            mask_c, rows_c = match(world_c, cand[0])
            if int(mask_c.sum()) >= params.min_matches:
                f_cand, _ = objective(world_c, mask_c, rows_c)
                if f_cand <= f_cur:
                    state = cand
                    trace.append(f_cand)
                    accepted = True
                    break
            scale *= 0.5
        if not accepted:
            break  # no decreasing step at any scale; keep current poses

    world = _place(pts, alphas, *state)
    mask, rows = match(world, state[0])
    sel = rows[mask]
    r = np.einsum("ij,ij->i", normals[sel], world[mask] - positions[sel])
    rms = float(np.sqrt(np.mean(r * r))) if len(r) else 0.0
    return state, iterations, rms, float(mask.sum()) / n_pts, converged, trace


def register_sweep(
    map_: SurfelMap,
    sweep: Sweep,
    init_a: TimedPose,
    init_b: TimedPose,
    params: RegistrationParams | None = None,
) -> RegistrationResult:
    """Align a sweep to the map by optimizing its two bracketing control poses."""
    params = params or RegistrationParams()
    if len(map_) == 0:
        raise EmptyMapError("cannot register against an empty map")
    if abs(init_a.time - sweep.t_begin) > 1e-9 or abs(init_b.time - sweep.t_end) > 1e-9:
        raise ValueError("initial control times must equal the sweep bounds")
    state, iterations, rms, inlier_fraction, converged, trace = _gauss_newton_p2p(
        map_.positions,
        map_.normals,
        map_.index,
        sweep.points,
        sweep.alphas(),
        init_a.pose.q,
        init_a.pose.t,
        init_b.pose.q,
        init_b.pose.t,
        params,
        two_pose=True,
    )
    qa, ta, qb, tb = state
    return RegistrationResult(
        pose_begin=TimedPose(sweep.t_begin, Pose(qa, ta)),
        pose_end=TimedPose(sweep.t_end, Pose(qb, tb)),
        iterations=iterations,
        rms=rms,
        inlier_fraction=inlier_fraction,
        converged=converged,
        objective_trace=trace,
    )


def register_rigid(
    target_positions: np.ndarray,
    target_normals: np.ndarray,
    points: np.ndarray,
    init: Pose | None = None,
    params: RegistrationParams | None = None,
    source_normals: np.ndarray | None = None,
    normal_gate_deg: float = 60.0,
) -> tuple[Pose, int, float, float, bool]:
    """Rigid point-to-plane ICP of world-frame points onto plane targets.

    Same machinery as register_sweep with the interpolation frozen (one pose).
    When the source points carry normals, matches across incompatible surface
    orientations (beyond normal_gate_deg) are discarded. Returns
    (pose, iterations, inlier RMS, inlier fraction, converged); the pose maps
    input points onto the targets.
    """
    params = params or RegistrationParams()
    init = init or Pose.identity()
    target_positions = np.atleast_2d(np.asarray(target_positions, float))
    if len(target_positions) == 0:
        raise EmptyMapError("cannot register against empty targets")
    index = SpatialIndex(target_positions)
    pts = np.atleast_2d(np.asarray(points, float))
    alphas = np.zeros(len(pts))
    state, iterations, rms, inlier_fraction, converged, _ = _gauss_newton_p2p(
        target_positions,
        np.atleast_2d(np.asarray(target_normals, float)),
        index,
        pts,
        alphas,
        init.q,
        init.t,
        init.q,
        init.t,
        params,
        two_pose=False,
        source_normals=source_normals,
        normal_gate_deg=normal_gate_deg,
    )
    qa, ta, _, _ = state
    return Pose(qa, ta), iterations, rms, inlier_fraction, converged


def transform_sweep(sweep: Sweep, pose_a: Pose, pose_b: Pose) -> np.ndarray:
    """World-frame positions of the sweep under interpolated control poses."""
    return _place(sweep.points, sweep.alphas(), pose_a.q, pose_a.t, pose_b.q, pose_b.t)
