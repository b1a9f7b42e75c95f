"""File formats: PLY point clouds and surfel maps, TUM trajectories, JSON
graph/constraint documents. Writers emit binary-little-endian PLY; readers
accept ascii too."""

from __future__ import annotations

import json
import os

import numpy as np

from .deformation import (
    KIND_PIN,
    KIND_SURFEL,
    DeformationGraph,
    DeformationNode,
    EnergyWeights,
    LoopConstraint,
)
from .errors import EmptyTrajectoryError, MissingPropertyError, PlyError
from .geometry import Pose
from .surfels import SurfelMap
from .trajectory import ContinuousTrajectory, TimedPose

_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "char": "<i1",
    "int8": "<i1",
    "uchar": "<u1",
    "uint8": "<u1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}


class _PlyHeader:
    def __init__(self):
        self.binary = False
        self.n_vertices = 0
        self.properties: list[tuple[str, str]] = []  # (name, dtype)
        self.comments: dict[str, str] = {}


def _read_ply_header(f) -> _PlyHeader:
    header = _PlyHeader()
    magic = f.readline().strip()
    if magic != b"ply":
        raise PlyError("line 1: not a PLY file (missing 'ply' magic)")
    in_vertex = False
    line_no = 1
    while True:
        raw = f.readline()
        line_no += 1
        if not raw:
            raise PlyError(f"line {line_no}: unexpected end of header")
        line = raw.decode("ascii", errors="replace").strip()
        if line == "end_header":
            return header
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] == "ascii":
                header.binary = False
            elif parts[1] == "binary_little_endian":
                header.binary = True
            else:
                raise PlyError(f"line {line_no}: unsupported format '{parts[1]}'")
        elif parts[0] == "comment":
            if len(parts) >= 3:
                header.comments[parts[1]] = parts[2]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                header.n_vertices = int(parts[2])
            elif int(parts[2]) != 0:
                raise PlyError(f"line {line_no}: unsupported element '{parts[1]}'")
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyError(f"line {line_no}: list properties not supported")
            if parts[1] not in _PLY_DTYPES:
                raise PlyError(f"line {line_no}: unknown property type '{parts[1]}'")
            header.properties.append((parts[2], _PLY_DTYPES[parts[1]]))


def _read_ply_vertices(path: str, required: list[str]) -> tuple[np.ndarray, dict[str, str]]:
    with open(path, "rb") as f:
        header = _read_ply_header(f)
        names = [n for n, _ in header.properties]
        for name in required:
            if name not in names:
                raise MissingPropertyError(name)
        dtype = np.dtype(header.properties)
        if header.binary:
            data = np.fromfile(f, dtype=dtype, count=header.n_vertices)
            if len(data) != header.n_vertices:
                raise PlyError(
                    f"offset {f.tell()}: expected {header.n_vertices} vertices, got {len(data)}"
                )
        else:
            rows = []
            for i in range(header.n_vertices):
                line = f.readline()
                if not line:
                    raise PlyError(f"vertex {i}: unexpected end of file")
                fields = line.split()
                if len(fields) != len(header.properties):
                    raise PlyError(
                        f"vertex {i}: expected {len(header.properties)} values, got {len(fields)}"
                    )
                rows.append(tuple(float(v) for v in fields))
            data = np.array(rows, dtype=dtype)
    return data, header.comments


def _write_ply(path: str, arrays: dict[str, np.ndarray], types: dict[str, str],
               comments: dict[str, str] | None = None) -> None:
    n = len(next(iter(arrays.values()))) if arrays else 0
    dtype = np.dtype([(name, types[name]) for name in arrays])
    out = np.empty(n, dtype=dtype)
    for name, values in arrays.items():
        out[name] = values
    type_names = {"<f4": "float", "<f8": "double"}
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        for key, value in (comments or {}).items():
            f.write(f"comment {key} {value}\n".encode("ascii"))
        f.write(f"element vertex {n}\n".encode("ascii"))
        for name in arrays:
            f.write(f"property {type_names[types[name]]} {name}\n".encode("ascii"))
        f.write(b"end_header\n")
        out.tofile(f)


def write_points(path: str, points: np.ndarray, times: np.ndarray,
                 comments: dict[str, str] | None = None) -> None:
    """Point cloud PLY: x,y,z float32 plus a float64 time per vertex."""
    points = np.atleast_2d(np.asarray(points, float)).reshape(-1, 3)
    times = np.asarray(times, float).reshape(-1)
    if len(points) != len(times):
        raise ValueError("points and times must have matching length")
    _write_ply(
        path,
        {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2], "time": times},
        {"x": "<f4", "y": "<f4", "z": "<f4", "time": "<f8"},
        comments,
    )


def read_points(path: str) -> tuple[np.ndarray, np.ndarray, dict[str, str]]:
    """Returns (points (N,3) float64, times (N,), header comments)."""
    data, comments = _read_ply_vertices(path, ["x", "y", "z", "time"])
    pts = np.column_stack([data["x"], data["y"], data["z"]]).astype(float)
    return pts, data["time"].astype(float), comments


def write_surfel_map(map_: SurfelMap, path: str) -> None:
    _write_ply(
        path,
        {
            "x": map_.positions[:, 0], "y": map_.positions[:, 1], "z": map_.positions[:, 2],
            "nx": map_.normals[:, 0], "ny": map_.normals[:, 1], "nz": map_.normals[:, 2],
            "radius": map_.radii, "confidence": map_.confidences, "time": map_.times,
        },
        {
            "x": "<f4", "y": "<f4", "z": "<f4", "nx": "<f4", "ny": "<f4", "nz": "<f4",
            "radius": "<f4", "confidence": "<f4", "time": "<f8",
        },
        {"voxel_size": repr(float(map_.voxel_size))},
    )


def read_surfel_map(path: str, voxel_size: float | None = None) -> SurfelMap:
    data, comments = _read_ply_vertices(
        path, ["x", "y", "z", "nx", "ny", "nz", "radius", "confidence", "time"]
    )
    if voxel_size is None:
        voxel_size = float(comments.get("voxel_size", 0.5))
    normals = np.column_stack([data["nx"], data["ny"], data["nz"]]).astype(float)
    if len(normals):
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(norms < 1e-6):
            raise PlyError("surfel map holds a zero normal")
        normals = normals / norms  # restore the unit invariant lost to float32
    return SurfelMap(
        np.column_stack([data["x"], data["y"], data["z"]]).astype(float),
        normals,
        data["radius"].astype(float),
        data["confidence"].astype(float),
        data["time"].astype(float),
        voxel_size,
    )


def write_trajectory_tum(traj: ContinuousTrajectory, path: str) -> None:
    """One line per control: `timestamp tx ty tz qx qy qz qw`, 9 significant
    digits on the pose values. Raises before creating the file when empty."""
    if len(traj) == 0:
        raise EmptyTrajectoryError("refusing to write an empty trajectory")
    lines = []
    for c in traj.controls:
        t = c.pose.t
        w, x, y, z = c.pose.q
        vals = " ".join(f"{v:.9g}" for v in (t[0], t[1], t[2], x, y, z, w))
        lines.append(f"{c.time:.8f} {vals}\n")
    with open(path, "w") as f:
        f.writelines(lines)


def read_trajectory_tum(path: str) -> ContinuousTrajectory:
    traj = ContinuousTrajectory()
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{line_no}: expected 8 fields, got {len(parts)}")
            t, tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts)
            traj.append_control(TimedPose(t, Pose([qw, qx, qy, qz], [tx, ty, tz])))
    return traj


# ---------------------------------------------------------------------------
# deformation graph / constraint JSON documents


def graph_to_dict(graph: DeformationGraph, constraints: list[LoopConstraint] | None = None) -> dict:
    doc = {
        "nodes": [
            {"g": n.g.tolist(), "time": n.time, "A": n.A.tolist(), "t": n.t.tolist()}
            for n in graph.nodes
        ],
        "edges": [[j, k] for j, k in graph.edges],
        "k_bind": graph.k_bind,
        "weights": {
            "w_rot": graph.weights.w_rot,
            "w_reg": graph.weights.w_reg,
            "w_con": graph.weights.w_con,
            "w_pin": graph.weights.w_pin,
        },
    }
    if constraints is not None:
        doc["constraints"] = [constraint_to_dict(c) for c in constraints]
    return doc


def constraint_to_dict(c: LoopConstraint) -> dict:
    out = {"source": np.asarray(c.source, float).tolist(),
           "target": np.asarray(c.target, float).tolist(),
           "kind": c.kind}
    if c.kind == KIND_PIN:
        out["node"] = c.node
    elif c.source_time is not None:
        out["source_time"] = c.source_time
    return out


def constraint_from_dict(d: dict) -> LoopConstraint:
    kind = d.get("kind", KIND_SURFEL)
    if kind not in (KIND_SURFEL, KIND_PIN):
        raise ValueError(f"unknown constraint kind '{kind}'")
    return LoopConstraint(
        source=np.asarray(d["source"], float),
        target=np.asarray(d["target"], float),
        kind=kind,
        node=d.get("node"),
        source_time=d.get("source_time"),
    )


def graph_from_dict(doc: dict) -> tuple[DeformationGraph, list[LoopConstraint]]:
    nodes = [
        DeformationNode(
            g=np.asarray(n["g"], float),
            time=float(n["time"]),
            A=np.asarray(n.get("A", np.eye(3)), float),
            t=np.asarray(n.get("t", np.zeros(3)), float),
        )
        for n in doc["nodes"]
    ]
    edges = [(int(j), int(k)) for j, k in doc.get("edges", [])]
    weights = EnergyWeights(**doc["weights"]) if "weights" in doc else None
    graph = DeformationGraph(nodes, edges, k_bind=int(doc.get("k_bind", 4)), weights=weights)
    constraints = [constraint_from_dict(c) for c in doc.get("constraints", [])]
    return graph, constraints


def write_json(path: str, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str) -> dict:
    with open(path) as f:
        return json.load(f)


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path
