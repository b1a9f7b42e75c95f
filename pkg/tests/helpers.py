"""Shared test utilities: independent oracles and scenario builders."""

import numpy as np
from scipy.spatial.transform import Rotation

from surfelslam import DeformationGraph, Pose, Surfel, SurfelMap
from surfelslam.deformation import DeformationNode, EnergyWeights


def random_pose(rng, trans_scale=2.0):
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.normal(scale=trans_scale, size=3))


def rotation_of(pose):
    """Pose rotation as a matrix via scipy (independent of geometry.py math)."""
    w, x, y, z = pose.q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def axis_angle_power(r_a, r_b, alpha):
    """Oracle for slerp: R_a * exp(alpha * log(R_aᵀ R_b)) via axis-angle."""
    rel = r_a.T @ r_b
    rotvec = Rotation.from_matrix(rel).as_rotvec()
    return r_a @ Rotation.from_rotvec(alpha * rotvec).as_matrix()


def brute_force_knn(points, ids, query, k):
    d = np.linalg.norm(points - np.asarray(query, float), axis=1)
    order = np.lexsort((ids, d))[: min(k, len(points))]
    return [(int(ids[i]), float(d[i])) for i in order]


def fd_jacobian(fun, x, h=1e-6):
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, float)
    f0 = np.asarray(fun(x))
    jac = np.empty((len(f0), len(x)))
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h)
    return jac


def chain_graph(node_positions, node_times=None, k_edge=1, k_bind=2, weights=None):
    node_positions = np.atleast_2d(np.asarray(node_positions, float))
    n = len(node_positions)
    if node_times is None:
        node_times = np.arange(n, dtype=float)
    nodes = [DeformationNode(g=node_positions[i].copy(), time=float(node_times[i])) for i in range(n)]
    edges = [(i, i + d) for i in range(n) for d in range(1, k_edge + 1) if i + d < n]
    return DeformationGraph(nodes, edges, k_bind=k_bind, weights=weights or EnergyWeights())


def rigid_encoding(graph, rotation, translation):
    """Graph parameters encoding the global rigid motion x -> R x + t."""
    rotation = np.asarray(rotation, float)
    translation = np.asarray(translation, float)
    params = []
    for node in graph.nodes:
        t_j = rotation @ node.g + translation - node.g
        params.append(np.concatenate([rotation.ravel(), t_j]))
    return graph.with_parameters(np.concatenate(params))


def random_rotation(rng):
    return Rotation.random(random_state=np.random.RandomState(rng.integers(2**31))).as_matrix()


def surfel_grid_from_world(world, spacing=0.4, time=0.0):
    """Exact surfels sampled on the world patches (positions on the plane,
    true normals). Serves as a perfect reference map for registration tests."""
    surfels = []
    for patch in world.patches:
        lu = np.linalg.norm(patch.edge_u)
        lv = np.linalg.norm(patch.edge_v)
        nu = max(2, int(np.ceil(lu / spacing)) + 1)
        nv = max(2, int(np.ceil(lv / spacing)) + 1)
        for a in np.linspace(0.0, 1.0, nu):
            for b in np.linspace(0.0, 1.0, nv):
                pos = patch.corner + a * patch.edge_u + b * patch.edge_v
                surfels.append(
                    Surfel(position=pos, normal=patch.normal.copy(), radius=spacing,
                           confidence=5.0, time=time)
                )
    return surfels


def grid_map_from_world(world, spacing=0.4, voxel=0.5):
    return SurfelMap.from_surfels(surfel_grid_from_world(world, spacing), voxel)
