"""Surfel map: extraction of oriented disk elements from world-frame point
clouds, confidence-weighted fusion, and spatial queries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import SpatialIndex, eigen_symmetric3


@dataclass(frozen=True)
class PointSample:
    """One raw measurement: 3D point in the sensor frame, absolute timestamp."""

    position: np.ndarray
    time: float


@dataclass
class Surfel:
    """Oriented disk: world position, unit normal, radius, accumulated support
    weight, creation timestamp. `anchor` optionally records the sensor-frame
    generating sample (the median-time contributing point)."""

    position: np.ndarray
    normal: np.ndarray
    radius: float
    confidence: float
    time: float
    anchor: np.ndarray | None = field(default=None, repr=False)


def extract_surfels(
    points: np.ndarray,
    times: np.ndarray,
    voxel: float,
    min_points: int,
    planarity_eps: float,
    sensor_origin=(0.0, 0.0, 0.0),
    sensor_points: np.ndarray | None = None,
) -> list[Surfel]:
    """Bin world-frame points by voxel and fit one surfel per planar voxel.

    A voxel with at least `min_points` points is accepted when the smallest
    covariance eigenvalue satisfies lam_min <= planarity_eps * lam_mid. The
    surfel sits at the centroid with the smallest-eigenvalue direction as
    normal (sign flipped toward `sensor_origin`), radius 2*sqrt(lam_max),
    confidence = point count, and the lower-median timestamp as creation time.
    When `sensor_points` (the same points in the sensor frame) is given, each
    surfel records its median-time sample as `anchor`.
    """
    if voxel <= 0:
        raise ValueError("voxel must be > 0")
    if min_points < 3:
        raise ValueError("min_points must be >= 3")
    if planarity_eps < 0:
        raise ValueError("planarity_eps must be >= 0")
    pts = np.atleast_2d(np.asarray(points, float))
    ts = np.asarray(times, float)
    if pts.size == 0:
        return []
    if pts.shape[0] != ts.shape[0]:
        raise ValueError("points and times must have matching length")
    origin = np.asarray(sensor_origin, float)

    keys = np.floor(pts / voxel).astype(np.int64)
    # canonical order (voxel, then coordinates, then time) makes the result
    # bitwise independent of the input permutation
    order = np.lexsort((ts, pts[:, 2], pts[:, 1], pts[:, 0], keys[:, 2], keys[:, 1], keys[:, 0]))
    keys_s = keys[order]
    pts_s = pts[order]
    ts_s = ts[order]

    boundaries = np.nonzero(np.any(keys_s[1:] != keys_s[:-1], axis=1))[0] + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(pts_s)]])

    surfels: list[Surfel] = []
    for s, e in zip(starts, ends):
        n = e - s
        if n < min_points:
            continue
        group = pts_s[s:e]
        centroid = group.mean(axis=0)
        centered = group - centroid
        cov = centered.T @ centered / n
        eig = eigen_symmetric3(cov, sym_tol=1e-9)
        lam = eig.eigenvalues
        if lam[2] <= 0:
            continue  # all points coincident; no disk extent
        if lam[0] > planarity_eps * lam[1]:
            continue
        normal = eig.eigenvectors[:, 0]
        if float(normal @ (origin - centroid)) < 0:
            normal = -normal
        group_ts = ts_s[s:e]
        med = float(np.sort(group_ts)[(n - 1) // 2])
        anchor = None
        if sensor_points is not None:
            local = int(np.nonzero(group_ts == med)[0][0])
            anchor = np.asarray(sensor_points, float)[order[s + local]].copy()
        surfels.append(
            Surfel(
                position=centroid,
                normal=normal.copy(),
                radius=2.0 * float(np.sqrt(lam[2])),
                confidence=float(n),
                time=med,
                anchor=anchor,
            )
        )
    return surfels


class SurfelMap:
    """Committed snapshot of the dense map: parallel surfel arrays plus a
    spatial index over positions. Mutating operations return a new map."""

    def __init__(
        self,
        positions: np.ndarray,
        normals: np.ndarray,
        radii: np.ndarray,
        confidences: np.ndarray,
        times: np.ndarray,
        voxel_size: float,
        anchors: np.ndarray | None = None,
    ):
        self.positions = np.atleast_2d(np.asarray(positions, float)).reshape(-1, 3)
        self.normals = np.atleast_2d(np.asarray(normals, float)).reshape(-1, 3)
        self.radii = np.asarray(radii, float).reshape(-1)
        self.confidences = np.asarray(confidences, float).reshape(-1)
        self.times = np.asarray(times, float).reshape(-1)
        self.voxel_size = float(voxel_size)
        n = len(self.positions)
        if anchors is None:
            anchors = np.full((n, 3), np.nan)
        self.anchors = np.asarray(anchors, float).reshape(-1, 3)
        if not (len(self.normals) == len(self.radii) == len(self.confidences)
                == len(self.times) == len(self.anchors) == n):
            raise ValueError("surfel arrays must have matching length")
        self.index = SpatialIndex(self.positions)

    @classmethod
    def empty(cls, voxel_size: float) -> "SurfelMap":
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros(0), np.zeros(0), np.zeros(0), voxel_size)

    @classmethod
    def from_surfels(cls, surfels: list[Surfel], voxel_size: float) -> "SurfelMap":
        if not surfels:
            return cls.empty(voxel_size)
        anchors = np.array(
            [s.anchor if s.anchor is not None else [np.nan] * 3 for s in surfels], float
        )
        return cls(
            np.array([s.position for s in surfels]),
            np.array([s.normal for s in surfels]),
            np.array([s.radius for s in surfels]),
            np.array([s.confidence for s in surfels]),
            np.array([s.time for s in surfels]),
            voxel_size,
            anchors,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def surfel(self, i: int) -> Surfel:
        anchor = self.anchors[i]
        return Surfel(
            position=self.positions[i].copy(),
            normal=self.normals[i].copy(),
            radius=float(self.radii[i]),
            confidence=float(self.confidences[i]),
            time=float(self.times[i]),
            anchor=None if np.any(np.isnan(anchor)) else anchor.copy(),
        )

    @property
    def surfels(self) -> list[Surfel]:
        return [self.surfel(i) for i in range(len(self))]

    def fuse(self, incoming: list[Surfel], merge_radius: float, max_normal_angle: float) -> "SurfelMap":
        """Merge incoming surfels into the map: an incoming surfel joins its
        nearest neighbor when closer than merge_radius with a normal angle
        under max_normal_angle (degrees); otherwise it is inserted. Merged
        position/normal are confidence-weighted means, confidence sums,
        radius takes the max, and the earlier creation time wins."""
        if merge_radius <= 0:
            raise ValueError("merge_radius must be > 0")
        cos_max = np.cos(np.radians(max_normal_angle))
        cap = len(self) + len(incoming)
        pos = np.empty((cap, 3))
        nrm = np.empty((cap, 3))
        rad = np.empty(cap)
        conf = np.empty(cap)
        tim = np.empty(cap)
        anc = np.full((cap, 3), np.nan)
        n = len(self)
        pos[:n] = self.positions
        nrm[:n] = self.normals
        rad[:n] = self.radii
        conf[:n] = self.confidences
        tim[:n] = self.times
        anc[:n] = self.anchors

        for s in incoming:
            if n:
                d2 = np.einsum("ij,ij->i", pos[:n] - s.position, pos[:n] - s.position)
                j = int(np.argmin(d2))
                if np.sqrt(d2[j]) < merge_radius and float(nrm[j] @ s.normal) > cos_max:
                    w1 = conf[j]
                    w2 = s.confidence
                    tot = w1 + w2
                    pos[j] = (w1 * pos[j] + w2 * s.position) / tot
                    merged_n = w1 * nrm[j] + w2 * s.normal
                    nrm[j] = merged_n / np.linalg.norm(merged_n)
                    conf[j] = tot
                    rad[j] = max(rad[j], s.radius)
                    if s.time < tim[j]:
                        tim[j] = s.time
                        anc[j] = s.anchor if s.anchor is not None else np.nan
                    continue
            pos[n] = s.position
            nrm[n] = s.normal
            rad[n] = s.radius
            conf[n] = s.confidence
            tim[n] = s.time
            if s.anchor is not None:
                anc[n] = s.anchor
            n += 1
        return SurfelMap(pos[:n], nrm[:n], rad[:n], conf[:n], tim[:n], self.voxel_size, anc[:n])

    def radius_query(self, center: np.ndarray, r: float) -> list[Surfel]:
        """All surfels with position within distance r of center (inclusive)."""
        if r < 0:
            raise ValueError("radius must be >= 0")
        rows = self.index.ball(np.asarray(center, float), r)
        return [self.surfel(int(i)) for i in rows]

    def rows_in_time_window(self, center_time: float, halfwidth: float) -> np.ndarray:
        return np.nonzero(np.abs(self.times - center_time) <= halfwidth)[0]


def fuse_surfels(
    map_: SurfelMap, incoming: list[Surfel], merge_radius: float, max_normal_angle: float
) -> SurfelMap:
    return map_.fuse(incoming, merge_radius, max_normal_angle)


def radius_query(map_: SurfelMap, center: np.ndarray, r: float) -> list[Surfel]:
    return map_.radius_query(center, r)
