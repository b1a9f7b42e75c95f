"""Embedded deformation graph sampled along the trajectory.

Nodes carry a free 3x3 linear map A (driven toward a rotation by the rotation
energy) and a translation t. A point v bound to nodes j with weights w_j warps
to sum_j w_j * (A_j (v - g_j) + g_j + t_j). The energy combines per-node
rotation penalties, edge regularization, point constraints, and node pins; it
is minimized with damped Gauss-Newton over 12 parameters per node.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (
    EmptyGraphError,
    EmptyTrajectoryError,
    NoConstraintsError,
    NumericalFailureError,
    SingularNodeError,
)
from .geometry import Pose, matrix_to_quat, polar_rotation, quat_multiply
from .surfels import SurfelMap
from .trajectory import ContinuousTrajectory, TimedPose

KIND_SURFEL = "surfel-constraint"
KIND_PIN = "node-pin"

# six rotation penalties per node: three column dot products, three unit norms
_ROT_PAIRS = ((0, 1), (0, 2), (1, 2), (0, 0), (1, 1), (2, 2))


@dataclass
class DeformationNode:
    g: np.ndarray
    time: float
    A: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class EnergyWeights:
    w_rot: float = 1.0
    w_reg: float = 10.0
    w_con: float = 100.0
    w_pin: float = 100.0


@dataclass(frozen=True)
class Binding:
    """Blend of up to k_bind nodes; weights are nonnegative and sum to 1."""

    nodes: np.ndarray
    weights: np.ndarray


@dataclass
class LoopConstraint:
    """Pins a source position to a target position (surfel constraint) or a
    node's parameters to identity (node pin, identified by `node`)."""

    source: np.ndarray
    target: np.ndarray
    kind: str = KIND_SURFEL
    node: int | None = None
    source_time: float | None = None


@dataclass(frozen=True)
class EnergyBreakdown:
    e_rot: float
    e_reg: float
    e_con: float
    e_pin: float
    total: float


@dataclass
class GraphOptimParams:
    max_iters: int = 50
    rel_tol: float = 1e-6
    lam_init: float = 1e-6
    lam_max: float = 1e12
    time_window: float = 30.0  # fallback binding window when none precomputed


@dataclass(frozen=True)
class IterationRecord:
    breakdown: EnergyBreakdown
    lam: float


class DeformationGraph:
    def __init__(self, nodes: list[DeformationNode], edges, k_bind: int = 4,
                 weights: EnergyWeights | None = None):
        if any(b.time <= a.time for a, b in zip(nodes, nodes[1:])):
            raise ValueError("node times must be strictly increasing")
        self.nodes = nodes
        self.edges = sorted({(min(j, k), max(j, k)) for j, k in edges})
        for j, k in self.edges:
            if j == k or not (0 <= j < len(nodes) and 0 <= k < len(nodes)):
                raise ValueError(f"invalid edge ({j},{k})")
        self.k_bind = int(k_bind)
        self.weights = weights or EnergyWeights()
        self.node_positions = np.array([n.g for n in nodes], float).reshape(-1, 3)
        self.node_times = np.array([n.time for n in nodes], float)

    def __len__(self) -> int:
        return len(self.nodes)

    def parameters(self) -> np.ndarray:
        """Flat parameter vector: per node, A row-major (9) then t (3)."""
        return np.concatenate([np.concatenate([n.A.ravel(), n.t]) for n in self.nodes])

    def with_parameters(self, x: np.ndarray) -> "DeformationGraph":
        a, t = unpack_parameters(x, len(self))
        nodes = [
            replace(n, A=a[i].copy(), t=t[i].copy()) for i, n in enumerate(self.nodes)
        ]
        return DeformationGraph(nodes, self.edges, self.k_bind, self.weights)


def unpack_parameters(x: np.ndarray, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, float).reshape(n_nodes, 12)
    return x[:, :9].reshape(n_nodes, 3, 3), x[:, 9:]


def build_graph(
    traj: ContinuousTrajectory,
    node_spacing: float,
    k_edge: int,
    k_bind: int = 4,
    weights: EnergyWeights | None = None,
) -> DeformationGraph:
    """Sample nodes along the trajectory every node_spacing meters of arc
    length (the first control always becomes a node) and chain each node to
    its k_edge temporal neighbors on both sides."""
    if len(traj) == 0:
        raise EmptyTrajectoryError("cannot build a graph from an empty trajectory")
    if node_spacing <= 0:
        raise ValueError("node_spacing must be > 0")
    if k_edge < 1:
        raise ValueError("k_edge must be >= 1")
    controls = traj.controls
    nodes = [DeformationNode(g=controls[0].pose.t.copy(), time=controls[0].time)]
    acc = 0.0
    for prev, cur in zip(controls, controls[1:]):
        acc += float(np.linalg.norm(cur.pose.t - prev.pose.t))
        if acc >= node_spacing:
            nodes.append(DeformationNode(g=cur.pose.t.copy(), time=cur.time))
            acc = 0.0
    edges = []
    for i in range(len(nodes)):
        for d in range(1, k_edge + 1):
            if i + d < len(nodes):
                edges.append((i, i + d))
    return DeformationGraph(nodes, edges, k_bind=k_bind, weights=weights)


def bind_point(graph: DeformationGraph, v: np.ndarray, v_time: float, time_window: float) -> Binding:
    """Blend weights of the k_bind spatially nearest nodes among those within
    the temporal window (all nodes when the window excludes everything).

    Weights are (1 - d/d_max)^2 normalized to sum 1, with d_max the distance
    of the (k_bind+1)-th candidate, or 1.1x the largest candidate distance
    when fewer candidates exist.
    """
    if len(graph) == 0:
        raise EmptyGraphError("cannot bind against an empty graph")
    v = np.asarray(v, float)
    cand = np.nonzero(np.abs(graph.node_times - v_time) <= time_window)[0]
    if cand.size == 0:
        cand = np.arange(len(graph))
    dists = np.linalg.norm(graph.node_positions[cand] - v, axis=1)
    order = np.lexsort((cand, dists))
    k = graph.k_bind
    if cand.size > k:
        sel = order[:k]
        d_max = float(dists[order[k]])
    else:
        sel = order
        d_max = 1.1 * float(dists[order[-1]])
    d_sel = dists[sel]
    if d_max <= 1e-12:
        w = np.full(len(sel), 1.0 / len(sel))
    else:
        w = (1.0 - d_sel / d_max) ** 2
        s = w.sum()
        if s <= 1e-300:  # all selected candidates equidistant at d_max
            w = np.full(len(sel), 1.0 / len(sel))
        else:
            w = w / s
    return Binding(nodes=cand[sel].copy(), weights=w)


def deform_point(graph: DeformationGraph, binding: Binding, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, float)
    out = np.zeros(3)
    for j, w in zip(binding.nodes, binding.weights):
        node = graph.nodes[int(j)]
        out += w * (node.A @ (v - node.g) + node.g + node.t)
    return out


def deform_normal(graph: DeformationGraph, binding: Binding, n: np.ndarray) -> np.ndarray:
    """Transform a unit normal by the blended inverse-transpose linear maps."""
    n = np.asarray(n, float)
    acc = np.zeros(3)
    for j, w in zip(binding.nodes, binding.weights):
        node = graph.nodes[int(j)]
        det = float(np.linalg.det(node.A))
        if abs(det) < 1e-9:
            raise SingularNodeError(f"node {int(j)} has |det A| = {abs(det):.2e}")
        acc += w * np.linalg.inv(node.A).T @ n
    norm = np.linalg.norm(acc)
    if norm < 1e-12:
        raise SingularNodeError("blended normal collapsed to zero")
    return acc / norm


def blended_rotation(graph: DeformationGraph, binding: Binding) -> np.ndarray:
    """Proper rotation closest to the weight-blended node maps."""
    s = np.zeros((3, 3))
    for j, w in zip(binding.nodes, binding.weights):
        s += w * graph.nodes[int(j)].A
    return polar_rotation(s)


def bind_constraints(
    graph: DeformationGraph, constraints: list[LoopConstraint], time_window: float
) -> list[Binding | None]:
    """Bindings parallel to `constraints` (None at node pins). Surfel
    constraints without a source_time bind against all nodes."""
    out: list[Binding | None] = []
    for c in constraints:
        if c.kind == KIND_PIN:
            out.append(None)
        elif c.source_time is None:
            out.append(bind_point(graph, c.source, 0.0, np.inf))
        else:
            out.append(bind_point(graph, c.source, c.source_time, time_window))
    return out


# ---------------------------------------------------------------------------
# residual blocks over the flat parameter vector


def rot_residuals(x: np.ndarray, n_nodes: int) -> np.ndarray:
    a, _ = unpack_parameters(x, n_nodes)
    res = np.empty(6 * n_nodes)
    for p in range(n_nodes):
        cols = a[p]
        for r, (i, j) in enumerate(_ROT_PAIRS):
            val = float(cols[:, i] @ cols[:, j])
            res[6 * p + r] = val - 1.0 if i == j else val
    return res


def rot_jacobian(x: np.ndarray, n_nodes: int) -> sp.csr_matrix:
    a, _ = unpack_parameters(x, n_nodes)
    rows, cols, vals = [], [], []
    for p in range(n_nodes):
        base = 12 * p
        for r, (i, j) in enumerate(_ROT_PAIRS):
            row = 6 * p + r
            for m in range(3):
                if i == j:
                    rows.append(row)
                    cols.append(base + 3 * m + i)
                    vals.append(2.0 * a[p, m, i])
                else:
                    rows.append(row)
                    cols.append(base + 3 * m + i)
                    vals.append(a[p, m, j])
                    rows.append(row)
                    cols.append(base + 3 * m + j)
                    vals.append(a[p, m, i])
    return sp.csr_matrix((vals, (rows, cols)), shape=(6 * n_nodes, 12 * n_nodes))


def _directed_edges(edges) -> list[tuple[int, int]]:
    out = []
    for j, k in edges:
        out.append((j, k))
        out.append((k, j))
    return out


def reg_residuals(x: np.ndarray, node_positions: np.ndarray, edges) -> np.ndarray:
    n = len(node_positions)
    a, t = unpack_parameters(x, n)
    directed = _directed_edges(edges)
    res = np.empty(3 * len(directed))
    for e, (j, k) in enumerate(directed):
        d = node_positions[k] - node_positions[j]
        res[3 * e : 3 * e + 3] = a[j] @ d + node_positions[j] + t[j] - node_positions[k] - t[k]
    return res


def reg_jacobian(x: np.ndarray, node_positions: np.ndarray, edges) -> sp.csr_matrix:
    n = len(node_positions)
    directed = _directed_edges(edges)
    rows, cols, vals = [], [], []
    for e, (j, k) in enumerate(directed):
        d = node_positions[k] - node_positions[j]
        for m in range(3):
            row = 3 * e + m
            for c in range(3):
                rows.append(row)
                cols.append(12 * j + 3 * m + c)
                vals.append(d[c])
            rows.append(row)
            cols.append(12 * j + 9 + m)
            vals.append(1.0)
            rows.append(row)
            cols.append(12 * k + 9 + m)
            vals.append(-1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(3 * len(directed), 12 * n))


def con_residuals(
    x: np.ndarray,
    node_positions: np.ndarray,
    sources: np.ndarray,
    targets: np.ndarray,
    bindings: list[Binding],
) -> np.ndarray:
    n = len(node_positions)
    a, t = unpack_parameters(x, n)
    res = np.empty(3 * len(sources))
    for l, (v, q, b) in enumerate(zip(sources, targets, bindings)):
        acc = -q.astype(float).copy()
        for j, w in zip(b.nodes, b.weights):
            j = int(j)
            acc += w * (a[j] @ (v - node_positions[j]) + node_positions[j] + t[j])
        res[3 * l : 3 * l + 3] = acc
    return res


def con_jacobian(
    x: np.ndarray,
    node_positions: np.ndarray,
    sources: np.ndarray,
    targets: np.ndarray,
    bindings: list[Binding],
) -> sp.csr_matrix:
    n = len(node_positions)
    rows, cols, vals = [], [], []
    for l, (v, b) in enumerate(zip(sources, bindings)):
        for j, w in zip(b.nodes, b.weights):
            j = int(j)
            d = np.asarray(v, float) - node_positions[j]
            for m in range(3):
                row = 3 * l + m
                for c in range(3):
                    rows.append(row)
                    cols.append(12 * j + 3 * m + c)
                    vals.append(w * d[c])
                rows.append(row)
                cols.append(12 * j + 9 + m)
                vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(3 * len(sources), 12 * n))


def pin_residuals(x: np.ndarray, n_nodes: int, pinned: list[int]) -> np.ndarray:
    a, t = unpack_parameters(x, n_nodes)
    eye = np.eye(3)
    res = np.empty(12 * len(pinned))
    for i, p in enumerate(pinned):
        res[12 * i : 12 * i + 9] = (a[p] - eye).ravel()
        res[12 * i + 9 : 12 * i + 12] = t[p]
    return res


def pin_jacobian(x: np.ndarray, n_nodes: int, pinned: list[int]) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i, p in enumerate(pinned):
        for c in range(12):
            rows.append(12 * i + c)
            cols.append(12 * p + c)
            vals.append(1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(12 * len(pinned), 12 * n_nodes))


def _split_constraints(constraints, bindings):
    sources, targets, surfel_bindings, pinned = [], [], [], []
    for i, c in enumerate(constraints):
        if c.kind == KIND_PIN:
            if c.node is None:
                raise ValueError("node-pin constraint requires a node index")
            pinned.append(int(c.node))
        elif c.kind == KIND_SURFEL:
            b = bindings[i] if bindings is not None else None
            if b is None:
                raise ValueError("surfel constraint requires a binding")
            sources.append(np.asarray(c.source, float))
            targets.append(np.asarray(c.target, float))
            surfel_bindings.append(b)
        else:
            raise ValueError(f"unknown constraint kind '{c.kind}'")
    src = np.array(sources).reshape(-1, 3)
    tgt = np.array(targets).reshape(-1, 3)
    return src, tgt, surfel_bindings, pinned


def energy(
    graph: DeformationGraph,
    constraints: list[LoopConstraint],
    bindings: list[Binding | None] | None = None,
) -> EnergyBreakdown:
    """Raw (unweighted) energy terms plus the weighted total."""
    x = graph.parameters()
    src, tgt, sb, pinned = _split_constraints(constraints, bindings)
    return _breakdown(x, graph, src, tgt, sb, pinned)


def _breakdown(x, graph, src, tgt, surfel_bindings, pinned) -> EnergyBreakdown:
    n = len(graph)
    e_rot = float(np.sum(rot_residuals(x, n) ** 2))
    e_reg = float(np.sum(reg_residuals(x, graph.node_positions, graph.edges) ** 2))
    e_con = float(np.sum(con_residuals(x, graph.node_positions, src, tgt, surfel_bindings) ** 2))
    e_pin = float(np.sum(pin_residuals(x, n, pinned) ** 2))
    w = graph.weights
    total = w.w_rot * e_rot + w.w_reg * e_reg + w.w_con * e_con + w.w_pin * e_pin
    return EnergyBreakdown(e_rot, e_reg, e_con, e_pin, total)


def optimize_graph(
    graph: DeformationGraph,
    constraints: list[LoopConstraint],
    params: GraphOptimParams | None = None,
    bindings: list[Binding | None] | None = None,
) -> tuple[DeformationGraph, list[IterationRecord]]:
    """Minimize the weighted deformation energy with damped Gauss-Newton.

    Levenberg damping lambda is multiplied by 10 on a rejected step and
    divided by 10 on an accepted one; accepted-step energies are strictly
    decreasing. The log holds the initial state plus one record per accepted
    step. Raises NumericalFailureError when the damped normal equations
    cannot be factorized even at maximum damping.
    """
    params = params or GraphOptimParams()
    if not constraints:
        raise NoConstraintsError("optimize_graph requires at least one constraint")
    if params.max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if bindings is None:
        bindings = bind_constraints(graph, constraints, params.time_window)
    src, tgt, sb, pinned = _split_constraints(constraints, bindings)
    n = len(graph)
    w = graph.weights
    s_rot, s_reg, s_con, s_pin = (np.sqrt(w.w_rot), np.sqrt(w.w_reg),
                                  np.sqrt(w.w_con), np.sqrt(w.w_pin))

    def residuals(x):
        return np.concatenate([
            s_rot * rot_residuals(x, n),
            s_reg * reg_residuals(x, graph.node_positions, graph.edges),
            s_con * con_residuals(x, graph.node_positions, src, tgt, sb),
            s_pin * pin_residuals(x, n, pinned),
        ])

    def jacobian(x):
        return sp.vstack([
            s_rot * rot_jacobian(x, n),
            s_reg * reg_jacobian(x, graph.node_positions, graph.edges),
            s_con * con_jacobian(x, graph.node_positions, src, tgt, sb),
            s_pin * pin_jacobian(x, n, pinned),
        ]).tocsr()

    x = graph.parameters()
    lam = params.lam_init
    e = _breakdown(x, graph, src, tgt, sb, pinned)
    log = [IterationRecord(e, lam)]
    if e.total < 1e-15:
        return graph.with_parameters(x), log
    eye = sp.identity(12 * n, format="csc")

    for _ in range(params.max_iters):
        r = residuals(x)
        jac = jacobian(x)
        grad = jac.T @ r
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-14:
            break
        hess = (jac.T @ jac).tocsc()
        accepted = False
        while True:
            damped = (hess + lam * eye).tocsc()
            step = None
            solve_ok = False
            try:
                step = splu(damped).solve(-grad)
                solve_ok = bool(np.all(np.isfinite(step))) and (
                    float(np.linalg.norm(damped @ step + grad)) <= 1e-10 * gnorm
                )
            except RuntimeError:
                solve_ok = False
            if solve_ok:
                e_cand = _breakdown(x + step, graph, src, tgt, sb, pinned)
                if e_cand.total < e.total:
                    prev = e.total
                    x = x + step
                    e = e_cand
                    lam = max(lam * 0.1, 1e-15)
                    log.append(IterationRecord(e, lam))
                    accepted = True
                    rel_drop = (prev - e.total) / prev
                    break
            lam *= 10.0
            if lam > params.lam_max:
                if not solve_ok and step is None:
                    raise NumericalFailureError(
                        "normal-equation factorization failed at maximum damping"
                    )
                break
        if not accepted:
            break
        if rel_drop < params.rel_tol or e.total < 1e-15:
            break
    return graph.with_parameters(x), log


# ---------------------------------------------------------------------------
# applying an optimized deformation


def deform_trajectory(
    traj: ContinuousTrajectory, graph: DeformationGraph, time_window: float
) -> ContinuousTrajectory:
    """Warp every control: translation through deform_point, rotation
    left-multiplied by the polar-projected blend of the bound node maps.
    Timestamps are unchanged."""
    out = ContinuousTrajectory()
    for c in traj.controls:
        binding = bind_point(graph, c.pose.t, c.time, time_window)
        new_t = deform_point(graph, binding, c.pose.t)
        r_blend = blended_rotation(graph, binding)
        new_q = quat_multiply(matrix_to_quat(r_blend), c.pose.q)
        out.append_control(TimedPose(c.time, Pose(new_q, new_t)))
    return out


def apply_deformation(
    map_: SurfelMap,
    traj: ContinuousTrajectory,
    graph: DeformationGraph,
    time_window: float,
) -> tuple[SurfelMap, ContinuousTrajectory]:
    """Deform every surfel (position, normal) through its time-aware binding
    and the trajectory alongside; radius, confidence, creation time, and
    anchors are untouched. The map index is rebuilt."""
    n = len(map_)
    new_pos = np.empty((n, 3))
    new_nrm = np.empty((n, 3))
    inv_t = {}
    for i in range(n):
        binding = bind_point(graph, map_.positions[i], float(map_.times[i]), time_window)
        new_pos[i] = deform_point(graph, binding, map_.positions[i])
        acc = np.zeros(3)
        for j, w in zip(binding.nodes, binding.weights):
            j = int(j)
            if j not in inv_t:
                a = graph.nodes[j].A
                det = float(np.linalg.det(a))
                if abs(det) < 1e-9:
                    raise SingularNodeError(f"node {j} has |det A| = {abs(det):.2e}")
                inv_t[j] = np.linalg.inv(a).T
            acc += w * inv_t[j] @ map_.normals[i]
        norm = np.linalg.norm(acc)
        if norm < 1e-12:
            raise SingularNodeError("blended normal collapsed to zero")
        new_nrm[i] = acc / norm
    new_map = SurfelMap(
        new_pos, new_nrm, map_.radii.copy(), map_.confidences.copy(),
        map_.times.copy(), map_.voxel_size, map_.anchors.copy(),
    )
    return new_map, deform_trajectory(traj, graph, time_window)
