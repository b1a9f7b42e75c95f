"""Continuous-time trajectory: timestamped SE(3) controls with interpolated
pose queries at arbitrary times."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyTrajectoryError, NonMonotonicTimeError
from .geometry import Pose, quat_rotate, quat_slerp_batch, se3_interpolate


@dataclass(frozen=True)
class TimedPose:
    time: float
    pose: Pose


class ContinuousTrajectory:
    """Ordered control poses at strictly increasing timestamps.

    Pose queries interpolate linearly in SE(3) between the bracketing
    controls (slerp + lerp) and clamp outside the covered interval.
    """

    def __init__(self, controls: Iterable[TimedPose] = ()):
        self._times: list[float] = []
        self._poses: list[Pose] = []
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
        for tp in controls:
            self.append_control(tp)

    @classmethod
    def from_poses(cls, times: Sequence[float], poses: Sequence[Pose]) -> "ContinuousTrajectory":
        return cls(TimedPose(float(t), p) for t, p in zip(times, poses))

    def __len__(self) -> int:
        return len(self._times)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self._times, float)

    @property
    def controls(self) -> list[TimedPose]:
        return [TimedPose(t, p) for t, p in zip(self._times, self._poses)]

    def control(self, i: int) -> TimedPose:
        return TimedPose(self._times[i], self._poses[i])

    @property
    def first(self) -> TimedPose:
        self._require_nonempty()
        return TimedPose(self._times[0], self._poses[0])

    @property
    def last(self) -> TimedPose:
        self._require_nonempty()
        return TimedPose(self._times[-1], self._poses[-1])

    def append_control(self, tp: TimedPose) -> None:
        if not np.isfinite(tp.time):
            raise ValueError("control time must be finite")
        if self._times and tp.time <= self._times[-1]:
            raise NonMonotonicTimeError(
                f"control time {tp.time} must exceed last control time {self._times[-1]}"
            )
        self._times.append(float(tp.time))
        self._poses.append(tp.pose)
        self._cache = None

    def _require_nonempty(self):
        if not self._times:
            raise EmptyTrajectoryError("trajectory has no controls")

    def _arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._cache is None:
            times = np.asarray(self._times, float)
            quats = np.stack([p.q for p in self._poses])
            trans = np.stack([p.t for p in self._poses])
            self._cache = (times, quats, trans)
        return self._cache

    def sample_pose(self, t: float) -> Pose:
        """Pose at time t; clamped to the endpoint poses outside the range.
        At a control timestamp the stored pose is returned exactly."""
        self._require_nonempty()
        times = self._times
        if t <= times[0]:
            return self._poses[0]
        if t >= times[-1]:
            return self._poses[-1]
        i = int(np.searchsorted(np.asarray(times), t, side="right")) - 1
        if times[i] == t:
            return self._poses[i]
        alpha = (t - times[i]) / (times[i + 1] - times[i])
        return se3_interpolate(self._poses[i], self._poses[i + 1], alpha)

    def sample_many(self, query_times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized pose sampling: returns (quaternions (N,4), translations (N,3))."""
        self._require_nonempty()
        times, quats, trans = self._arrays()
        qt = np.asarray(query_times, float)
        if len(times) == 1:
            n = len(qt)
            return np.repeat(quats, n, axis=0), np.repeat(trans, n, axis=0)
        idx = np.clip(np.searchsorted(times, qt, side="right") - 1, 0, len(times) - 2)
        t0 = times[idx]
        t1 = times[idx + 1]
        alpha = np.clip((qt - t0) / (t1 - t0), 0.0, 1.0)
        q = quat_slerp_batch(quats[idx], quats[idx + 1], alpha)
        tr = (1.0 - alpha)[:, None] * trans[idx] + alpha[:, None] * trans[idx + 1]
        return q, tr

    def transform_points(self, points: np.ndarray, point_times: np.ndarray) -> np.ndarray:
        """Map sensor-frame points through the pose at each point's own time."""
        q, tr = self.sample_many(point_times)
        return quat_rotate(q, np.asarray(points, float)) + tr

    def translations(self) -> np.ndarray:
        self._require_nonempty()
        return self._arrays()[2].copy()

    def copy(self) -> "ContinuousTrajectory":
        out = ContinuousTrajectory()
        out._times = list(self._times)
        out._poses = list(self._poses)
        return out


def sample_pose(traj: ContinuousTrajectory, t: float) -> Pose:
    return traj.sample_pose(t)


def append_control(traj: ContinuousTrajectory, tp: TimedPose) -> ContinuousTrajectory:
    traj.append_control(tp)
    return traj
