"""SE(3) poses, quaternion interpolation, 3x3 symmetric eigensolving, and an
exact nearest-neighbor index. Everything here is immutable after construction
and safe to share between threads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyIndexError, NonSymmetricError

_SLERP_LERP_ANGLE = 1e-6  # rad; below this, slerp degrades to normalized lerp


def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product of (w,x,y,z) quaternions. Broadcasts over leading axes."""
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1, float), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2, float), -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by quaternions q. Shapes broadcast: (...,4) with (...,3)."""
    q = np.asarray(q, float)
    v = np.asarray(v, float)
    qv = q[..., 1:]
    uv = np.cross(qv, v)
    uuv = np.cross(qv, uv)
    return v + 2.0 * (q[..., :1] * uv + uuv)


def quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (axis * angle) to unit quaternion."""
    w = np.asarray(w, float)
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        # first-order series; normalization absorbs the truncation
        q = np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]])
        return q / np.linalg.norm(q)
    axis = w / angle
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithm map: unit quaternion to rotation vector, angle in [0, pi]."""
    q = np.asarray(q, float)
    if q[0] < 0:
        q = -q
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-12:
        return 2.0 * q[1:]
    half = np.arctan2(sin_half, q[0])
    return (2.0 * half / sin_half) * q[1:]


def quat_rotation_angle(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic rotation angle in radians between two unit quaternions.
    Chord-based form stays accurate for near-identical rotations."""
    q1 = np.asarray(q1, float)
    q2 = np.asarray(q2, float)
    chord = min(float(np.linalg.norm(q1 - q2)), float(np.linalg.norm(q1 + q2)))
    return 4.0 * np.arcsin(min(0.5 * chord, 1.0))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, float)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method)."""
    m = np.asarray(m, float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return q / np.linalg.norm(q)


def quat_slerp(qa: np.ndarray, qb: np.ndarray, alpha: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    qa = np.asarray(qa, float)
    qb = np.asarray(qb, float)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    theta = np.arccos(min(dot, 1.0))
    if theta < _SLERP_LERP_ANGLE:
        q = (1.0 - alpha) * qa + alpha * qb
    else:
        s = np.sin(theta)
        q = (np.sin((1.0 - alpha) * theta) / s) * qa + (np.sin(alpha * theta) / s) * qb
    return q / np.linalg.norm(q)


def quat_slerp_batch(qa: np.ndarray, qb: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Vectorized shortest-arc slerp: (N,4) x (N,4) x (N,) -> (N,4)."""
    qa = np.asarray(qa, float)
    qb = np.asarray(qb, float)
    alpha = np.asarray(alpha, float)
    dot = np.sum(qa * qb, axis=1)
    qb = np.where(dot[:, None] < 0.0, -qb, qb)
    dot = np.abs(dot)
    theta = np.arccos(np.minimum(dot, 1.0))
    small = theta < _SLERP_LERP_ANGLE
    sin_theta = np.where(small, 1.0, np.sin(theta))
    w0 = np.where(small, 1.0 - alpha, np.sin((1.0 - alpha) * theta) / sin_theta)
    w1 = np.where(small, alpha, np.sin(alpha * theta) / sin_theta)
    q = w0[:, None] * qa + w1[:, None] * qb
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def polar_rotation(m: np.ndarray) -> np.ndarray:
    """Closest proper rotation to a 3x3 matrix (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


class Pose:
    """Rigid transform: unit quaternion (w,x,y,z) plus translation, meters.

    Acts on points as R*p + t. Arrays are copied and frozen on construction.
    """

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        q = np.array(q, dtype=float)
        t = np.array(t, dtype=float)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("Pose needs a (4,) quaternion and a (3,) translation")
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm is zero or non-finite")
        q = q / n
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, float)
        axis = axis / np.linalg.norm(axis)
        return cls(quat_from_rotvec(axis * angle), translation)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        return Pose(quat_multiply(self.q, other.q), quat_rotate(self.q, other.t) + self.t)

    def inverse(self) -> "Pose":
        qc = quat_conjugate(self.q)
        return Pose(qc, -quat_rotate(qc, self.t))

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(v, float))

    def transform(self, p: np.ndarray) -> np.ndarray:
        """Apply to a point (3,) or point array (N,3)."""
        return quat_rotate(self.q, np.asarray(p, float)) + self.t

    def rotation_angle_to(self, other: "Pose") -> float:
        return quat_rotation_angle(self.q, other.q)

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


def se3_interpolate(a: Pose, b: Pose, alpha: float) -> Pose:
    """Interpolate two poses: slerp on rotation, lerp on translation.

    alpha=0 returns `a` and alpha=1 returns `b` exactly (the same objects).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    if alpha == 0.0:
        return a
    if alpha == 1.0:
        return b
    q = quat_slerp(a.q, b.q, alpha)
    t = (1.0 - alpha) * a.t + alpha * b.t
    return Pose(q, t)


@dataclass(frozen=True)
class SymEig3:
    """Eigendecomposition of a symmetric 3x3 matrix, eigenvalues ascending,
    eigenvectors as matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def eigen_symmetric3(matrix: np.ndarray, sym_tol: float = 1e-12) -> SymEig3:
    """Decompose a symmetric 3x3 matrix. Raises NonSymmetricError when the
    asymmetry max|A - Aᵀ| exceeds sym_tol."""
    m = np.asarray(matrix, float)
    if m.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    asym = float(np.max(np.abs(m - m.T)))
    if asym > sym_tol:
        raise NonSymmetricError(f"asymmetry {asym:.3e} exceeds tolerance {sym_tol:.1e}")
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return SymEig3(vals, vecs)


class SpatialIndex:
    """Immutable snapshot index over 3D points with integer payload ids.

    Query results are contractually identical to a brute-force linear scan,
    with distance ties broken by the lower id.
    """

    def __init__(self, points: np.ndarray, ids: np.ndarray | None = None):
        points = np.atleast_2d(np.asarray(points, float))
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.shape[1] != 3:
            raise ValueError("points must be (N,3)")
        if ids is None:
            ids = np.arange(len(points))
        else:
            ids = np.asarray(ids, int)
            if ids.shape != (len(points),):
                raise ValueError("ids must match points")
        self._points = points.copy()
        self._ids = ids.copy()
        self._tree = cKDTree(self._points) if len(self._points) else None

    def __len__(self) -> int:
        return len(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def knn(self, query: np.ndarray, k: int) -> list[tuple[int, float]]:
        """k nearest payloads by Euclidean distance, ascending; ties broken by
        lower id. Returns all points when k exceeds the index size."""
        if self._tree is None:
            raise EmptyIndexError("knn query on empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        query = np.asarray(query, float)
        kk = min(k, len(self._points))
        d, _ = self._tree.query(query, k=kk)
        d_max = float(np.max(np.atleast_1d(d)))
        # re-select from the closed ball so exact ties resolve deterministically
        cand = np.asarray(self._tree.query_ball_point(query, d_max * (1.0 + 1e-12)), int)
        dists = np.linalg.norm(self._points[cand] - query, axis=1)
        order = np.lexsort((self._ids[cand], dists))[:kk]
        return [(int(self._ids[cand[i]]), float(dists[i])) for i in order]

    def ball(self, query: np.ndarray, radius: float) -> np.ndarray:
        """Row positions of all points with distance <= radius, ascending by row."""
        if radius < 0:
            raise ValueError("radius must be >= 0")
        if self._tree is None:
            return np.empty(0, dtype=int)
        query = np.asarray(query, float)
        cand = np.asarray(self._tree.query_ball_point(query, radius * (1.0 + 1e-12) + 1e-300), int)
        if cand.size == 0:
            return cand
        dists = np.linalg.norm(self._points[cand] - query, axis=1)
        keep = np.sort(cand[dists <= radius])
        return keep

    def nearest_rows(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Fast batched 1-NN: (distances, row positions) for an (M,3) array."""
        if self._tree is None:
            raise EmptyIndexError("nearest query on empty index")
        d, i = self._tree.query(np.asarray(queries, float), k=1)
        return np.atleast_1d(d), np.atleast_1d(i)


def knn_query(index: SpatialIndex, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    return index.knn(query, k)
