import numpy as np
import pytest

from surfelslam import (
    Binding,
    ContinuousTrajectory,
    GraphOptimParams,
    LoopConstraint,
    Pose,
    SurfelMap,
    TimedPose,
    apply_deformation,
    bind_constraints,
    bind_point,
    build_graph,
    deform_normal,
    deform_point,
    deform_trajectory,
    energy,
    optimize_graph,
)
from surfelslam.deformation import (
    KIND_PIN,
    EnergyWeights,
    con_jacobian,
    con_residuals,
    pin_jacobian,
    pin_residuals,
    reg_jacobian,
    reg_residuals,
    rot_jacobian,
    rot_residuals,
)
from surfelslam.errors import EmptyGraphError, NoConstraintsError, SingularNodeError
from surfelslam.geometry import quat_rotation_angle
from surfelslam.surfels import Surfel

from helpers import chain_graph, fd_jacobian, random_pose, random_rotation, rigid_encoding


def _straight_traj(length=10.0, step=0.1):
    times = np.arange(0.0, length + step / 2, step)
    poses = [Pose(np.array([1.0, 0, 0, 0]), np.array([t, 0.0, 0.0])) for t in times]
    return ContinuousTrajectory.from_poses(times, poses)


def test_build_graph_straight_line_spacing():
    graph = build_graph(_straight_traj(), node_spacing=1.0, k_edge=1)
    assert len(graph) == 11
    xs = graph.node_positions[:, 0]
    assert np.allclose(xs, np.arange(11.0), atol=1e-9)
    assert graph.edges == [(i, i + 1) for i in range(10)]


def test_build_graph_short_trajectory_single_node():
    graph = build_graph(_straight_traj(length=0.5), node_spacing=1.0, k_edge=2)
    assert len(graph) == 1
    assert graph.edges == []


def test_build_graph_loop_keeps_coincident_nodes():
    times = np.arange(0.0, 4.01, 0.1)
    xs = np.concatenate([np.linspace(0, 2, 21), np.linspace(1.9, 0, 20)])
    poses = [Pose(np.array([1.0, 0, 0, 0]), np.array([x, 0.0, 0.0])) for x in xs]
    traj = ContinuousTrajectory.from_poses(times, poses)
    graph = build_graph(traj, node_spacing=1.0, k_edge=1)
    pos = graph.node_positions[:, 0]
    assert len(graph) == 5
    assert np.allclose(pos, [0, 1, 2, 1, 0], atol=1e-9)
    assert np.all(np.diff(graph.node_times) > 0)


def _bind_oracle(node_positions, node_times, k_bind, v, v_time, window):
    cand = [i for i in range(len(node_times)) if abs(node_times[i] - v_time) <= window]
    if not cand:
        cand = list(range(len(node_times)))
    ranked = sorted((np.linalg.norm(node_positions[i] - v), i) for i in cand)
    if len(cand) > k_bind:
        sel = ranked[:k_bind]
        d_max = ranked[k_bind][0]
    else:
        sel = ranked
        d_max = 1.1 * ranked[-1][0]
    w = np.array([(1.0 - d / d_max) ** 2 for d, _ in sel])
    w = w / w.sum()
    return [i for _, i in sel], w


def test_bind_point_at_node():
    graph = chain_graph([[0, 0, 0], [1, 0, 0], [2, 0, 0]], k_bind=1)
    b = bind_point(graph, [1.0, 0, 0], 1.0, time_window=np.inf)
    assert b.nodes.tolist() == [1]
    assert b.weights.tolist() == [1.0]


def test_bind_point_equidistant_pair():
    graph = chain_graph([[0, 0, 0], [2, 0, 0]], k_bind=2)
    b = bind_point(graph, [1.0, 0.5, 0], 0.5, time_window=np.inf)
    assert np.allclose(sorted(b.weights), [0.5, 0.5], atol=1e-12)


def test_bind_point_matches_formula_oracle():
    rng = np.random.default_rng(0)
    pos = rng.uniform(-3, 3, size=(10, 3))
    times = np.sort(rng.uniform(0, 20, size=10))
    graph = chain_graph(pos, node_times=times, k_bind=4)
    for _ in range(100):
        v = rng.uniform(-3, 3, size=3)
        vt = rng.uniform(0, 20)
        window = rng.choice([2.0, 5.0, np.inf])
        b = bind_point(graph, v, vt, window)
        nodes, weights = _bind_oracle(pos, times, 4, v, vt, window)
        assert b.nodes.tolist() == nodes
        assert np.allclose(b.weights, weights, atol=1e-12)
        assert abs(b.weights.sum() - 1.0) < 1e-12
        assert np.all(b.weights >= 0)


def test_bind_point_time_window_excludes_far_nodes():
    rng = np.random.default_rng(1)
    pos = rng.uniform(-2, 2, size=(8, 3))
    times = np.arange(8.0) * 10.0
    graph = chain_graph(pos, node_times=times, k_bind=3)
    for _ in range(50):
        v = rng.uniform(-2, 2, size=3)
        vt = rng.uniform(0, 70)
        b = bind_point(graph, v, vt, time_window=15.0)
        admissible = np.abs(times - vt) <= 15.0
        if np.any(admissible):
            assert np.all(np.abs(times[b.nodes] - vt) <= 15.0)


def test_bind_empty_graph_raises():
    from surfelslam.deformation import DeformationGraph

    graph = DeformationGraph([], [], k_bind=2)
    with pytest.raises(EmptyGraphError):
        bind_point(graph, [0, 0, 0], 0.0, np.inf)


def test_deform_point_identity():
    graph = chain_graph([[0, 0, 0], [1, 0, 0], [2, 0, 0]], k_bind=2)
    v = np.array([0.7, 0.3, -0.2])
    b = bind_point(graph, v, 1.0, np.inf)
    assert np.allclose(deform_point(graph, b, v), v, atol=1e-12)


def test_deform_point_single_node_translation():
    graph = chain_graph([[0, 0, 0]], k_bind=1)
    graph.nodes[0].t = np.array([0.0, 0.0, 1.0])
    b = Binding(np.array([0]), np.array([1.0]))
    assert np.allclose(deform_point(graph, b, [3, 4, 5]), [3, 4, 6], atol=1e-15)


def test_deform_point_two_node_hand_blend():
    graph = chain_graph([[0, 0, 0], [2, 0, 0]], k_bind=2)
    graph.nodes[0].A = np.diag([2.0, 1.0, 1.0])
    graph.nodes[0].t = np.array([0.1, 0.0, 0.0])
    graph.nodes[1].A = np.eye(3)
    graph.nodes[1].t = np.array([0.0, 0.3, 0.0])
    b = Binding(np.array([0, 1]), np.array([0.5, 0.5]))
    v = np.array([1.0, 1.0, 0.0])
    # node 0: diag(2,1,1) @ (1,1,0) + (0,0,0) + (0.1,0,0) = (2.1, 1, 0)
    # node 1: (1,1,0) - (2,0,0) + (2,0,0) + (0,0.3,0)   = (1, 1.3, 0)
    want = 0.5 * np.array([2.1, 1.0, 0.0]) + 0.5 * np.array([1.0, 1.3, 0.0])
    assert np.allclose(deform_point(graph, b, v), want, atol=1e-15)


def test_deform_normal_identity_and_rotation():
    graph = chain_graph([[0, 0, 0]], k_bind=1)
    b = Binding(np.array([0]), np.array([1.0]))
    n = np.array([0.0, 0.6, 0.8])
    assert np.allclose(deform_normal(graph, b, n), n, atol=1e-12)
    rot = random_rotation(np.random.default_rng(3))
    graph.nodes[0].A = rot
    assert np.allclose(deform_normal(graph, b, n), rot @ n, atol=1e-12)


def test_deform_normal_diag_inverse_transpose():
    graph = chain_graph([[0, 0, 0]], k_bind=1)
    graph.nodes[0].A = np.diag([2.0, 1.0, 1.0])
    b = Binding(np.array([0]), np.array([1.0]))
    out = deform_normal(graph, b, [1.0, 0.0, 0.0])
    assert np.allclose(out, [1.0, 0.0, 0.0], atol=1e-15)


def test_deform_normal_singular_node_raises():
    graph = chain_graph([[0, 0, 0]], k_bind=1)
    graph.nodes[0].A = np.diag([1.0, 1.0, 0.0])
    b = Binding(np.array([0]), np.array([1.0]))
    with pytest.raises(SingularNodeError):
        deform_normal(graph, b, [0.0, 0.0, 1.0])


def test_energy_identity_graph_zero():
    graph = chain_graph([[0, 0, 0], [1, 0, 0], [2, 0.5, 0]], k_edge=2)
    e = energy(graph, [LoopConstraint(np.zeros(3), np.zeros(3), KIND_PIN, node=0)])
    assert e.e_rot == 0 and e.e_reg == 0 and e.e_pin == 0
    assert e.total == 0


def test_energy_unit_constraint():
    graph = chain_graph([[0, 0, 0], [1, 0, 0]], k_bind=2)
    v = np.array([0.5, 0.2, 0.0])
    c = LoopConstraint(v, v + np.array([1.0, 0, 0]), source_time=0.5)
    e = energy(graph, [c], bind_constraints(graph, [c], np.inf))
    assert e.e_con == pytest.approx(1.0, abs=1e-12)
    assert e.e_rot == 0 and e.e_reg == 0 and e.e_pin == 0
    assert e.total == pytest.approx(graph.weights.w_con, abs=1e-9)


def test_energy_rigid_encoding_is_free():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pos = rng.uniform(-3, 3, size=(6, 3))
        graph = chain_graph(pos, k_edge=2, k_bind=3)
        rigid = rigid_encoding(graph, random_rotation(rng), rng.uniform(-2, 2, 3))
        e = energy(rigid, [LoopConstraint(np.zeros(3), np.zeros(3), KIND_PIN, node=0)])
        assert e.e_rot < 1e-12
        assert e.e_reg < 1e-12


def test_energy_breakdown_total_invariant():
    rng = np.random.default_rng(6)
    pos = rng.uniform(-2, 2, size=(4, 3))
    graph = chain_graph(pos, k_edge=2, k_bind=2,
                        weights=EnergyWeights(0.7, 3.0, 50.0, 11.0))
    graph = graph.with_parameters(graph.parameters() + 0.1 * rng.normal(size=48))
    cons = [
        LoopConstraint(rng.normal(size=3), rng.normal(size=3), source_time=1.0),
        LoopConstraint(pos[2], pos[2].copy(), KIND_PIN, node=2),
    ]
    e = energy(graph, cons, bind_constraints(graph, cons, np.inf))
    w = graph.weights
    want = w.w_rot * e.e_rot + w.w_reg * e.e_reg + w.w_con * e.e_con + w.w_pin * e.e_pin
    assert e.total == pytest.approx(want, rel=1e-12)


def _random_graph_cons_bindings(rng, n_nodes=6, n_cons=5):
    pos = rng.uniform(-2, 2, size=(n_nodes, 3))
    graph = chain_graph(pos, k_edge=2, k_bind=min(3, n_nodes))
    x = graph.parameters() + 0.3 * rng.normal(size=12 * n_nodes)
    cons = [LoopConstraint(rng.normal(size=3), rng.normal(size=3), source_time=float(i))
            for i in range(n_cons)]
    bindings = bind_constraints(graph, cons, np.inf)
    return graph, x, cons, bindings


def test_rot_jacobian_matches_fd():
    rng = np.random.default_rng(7)
    graph, x, _, _ = _random_graph_cons_bindings(rng)
    n = len(graph)
    jac = rot_jacobian(x, n).toarray()
    fd = fd_jacobian(lambda y: rot_residuals(y, n), x)
    assert np.linalg.norm(fd - jac) / np.linalg.norm(jac) < 1e-7


def test_reg_jacobian_matches_fd():
    rng = np.random.default_rng(8)
    graph, x, _, _ = _random_graph_cons_bindings(rng)
    jac = reg_jacobian(x, graph.node_positions, graph.edges).toarray()
    fd = fd_jacobian(lambda y: reg_residuals(y, graph.node_positions, graph.edges), x)
    assert np.linalg.norm(fd - jac) / np.linalg.norm(jac) < 1e-7


def test_con_jacobian_matches_fd():
    rng = np.random.default_rng(9)
    graph, x, cons, bindings = _random_graph_cons_bindings(rng)
    src = np.array([c.source for c in cons])
    tgt = np.array([c.target for c in cons])
    sb = [b for b in bindings if b is not None]
    jac = con_jacobian(x, graph.node_positions, src, tgt, sb).toarray()
    fd = fd_jacobian(lambda y: con_residuals(y, graph.node_positions, src, tgt, sb), x)
    assert np.linalg.norm(fd - jac) / np.linalg.norm(jac) < 1e-7


def test_pin_jacobian_matches_fd():
    rng = np.random.default_rng(10)
    graph, x, _, _ = _random_graph_cons_bindings(rng)
    jac = pin_jacobian(x, len(graph), [0, 3]).toarray()
    fd = fd_jacobian(lambda y: pin_residuals(y, len(graph), [0, 3]), x)
    assert np.linalg.norm(fd - jac) / np.linalg.norm(jac) < 1e-7


def test_optimize_satisfied_constraints_is_noop():
    graph = chain_graph([[0, 0, 0], [1, 0, 0]], k_bind=2)
    v = np.array([0.5, 0.0, 0.0])
    cons = [LoopConstraint(v, v.copy(), source_time=0.5)]
    out, log = optimize_graph(graph, cons)
    assert len(log) <= 2
    assert np.allclose(out.parameters(), graph.parameters(), atol=1e-12)


def test_optimize_single_node_translation():
    # constraint source at the node makes this a pure translation problem
    # with the unique closed-form answer t = target - source, A = I
    graph = chain_graph([[0.4, -0.2, 0.1]], k_bind=1,
                        weights=EnergyWeights(w_rot=100.0, w_reg=10.0, w_con=100.0))
    v = np.array([0.4, -0.2, 0.1])
    cons = [LoopConstraint(v, v + np.array([0.0, 0.0, 2.0]), source_time=0.0)]
    out, log = optimize_graph(graph, cons, GraphOptimParams(max_iters=50, rel_tol=1e-14))
    e = log[-1].breakdown
    assert e.e_con < 1e-10
    assert np.allclose(out.nodes[0].t, [0, 0, 2], atol=1e-5)
    assert np.allclose(out.nodes[0].A, np.eye(3), atol=1e-6)
    assert len(log) - 1 <= 10  # accepted steps


def test_optimize_log_energy_non_increasing():
    rng = np.random.default_rng(11)
    pos = rng.uniform(-2, 2, size=(6, 3))
    graph = chain_graph(pos, k_edge=2, k_bind=3)
    cons = [LoopConstraint(pos[i], pos[i] + rng.normal(scale=0.5, size=3),
                           source_time=float(i)) for i in range(6)]
    _, log = optimize_graph(graph, cons, GraphOptimParams(max_iters=40))
    totals = [rec.breakdown.total for rec in log]
    assert all(b <= a + 1e-15 for a, b in zip(totals, totals[1:]))
    assert totals[-1] < totals[0]


def test_optimize_requires_constraints():
    graph = chain_graph([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(NoConstraintsError):
        optimize_graph(graph, [])


def test_optimize_chain_recovers_rigid_motion_from_end_constraints():
    rng = np.random.default_rng(12)
    pos = np.array([[0, 0, 0], [1, 0.5, 0.2], [2, -0.3, 0.1], [3, 0.4, -0.2], [4, 0, 0.3]], float)
    graph = chain_graph(pos, k_edge=2, k_bind=3)
    rot = random_rotation(rng)
    # keep the motion moderate so Gauss-Newton starts inside the basin
    from scipy.spatial.transform import Rotation

    rot = Rotation.from_rotvec(0.25 * Rotation.from_matrix(rot).as_rotvec()).as_matrix()
    trans = np.array([0.4, -0.3, 0.2])
    cons = []
    for end in (0, 4):
        for _ in range(6):
            p = pos[end] + rng.normal(scale=0.4, size=3)
            cons.append(LoopConstraint(p, rot @ p + trans, source_time=float(end)))
    out, log = optimize_graph(
        graph, cons, GraphOptimParams(max_iters=200, rel_tol=0.0, lam_init=1e-8)
    )
    assert log[-1].breakdown.total < 1e-12
    for _ in range(30):
        v = rng.uniform(-0.5, 4.5, size=3) * np.array([1.0, 0.3, 0.3])
        b = bind_point(out, v, rng.uniform(0, 4), np.inf)
        got = deform_point(out, b, v)
        assert np.linalg.norm(got - (rot @ v + trans)) < 1e-6


def test_rigid_deform_point_identity_for_any_binding():
    rng = np.random.default_rng(13)
    pos = rng.uniform(-3, 3, size=(7, 3))
    graph = chain_graph(pos, k_edge=2, k_bind=4)
    rot = random_rotation(rng)
    trans = rng.uniform(-2, 2, size=3)
    rigid = rigid_encoding(graph, rot, trans)
    for _ in range(50):
        v = rng.uniform(-4, 4, size=3)
        k = rng.integers(1, 7)
        nodes = rng.choice(7, size=k, replace=False)
        w = rng.uniform(0.1, 1.0, size=k)
        b = Binding(nodes, w / w.sum())
        got = deform_point(rigid, b, v)
        assert np.linalg.norm(got - (rot @ v + trans)) < 1e-9


def _toy_map(rng, n=40):
    surfels = []
    for _ in range(n):
        nrm = rng.normal(size=3)
        surfels.append(Surfel(rng.uniform(-2, 2, 3), nrm / np.linalg.norm(nrm),
                              0.3, 2.0, rng.uniform(0, 5)))
    return SurfelMap.from_surfels(surfels, 0.5)


def _toy_traj(rng, n=6):
    times = np.linspace(0, 5, n)
    return ContinuousTrajectory.from_poses(times, [random_pose(rng) for _ in range(n)])


def test_apply_deformation_identity():
    rng = np.random.default_rng(14)
    m = _toy_map(rng)
    traj = _toy_traj(rng)
    graph = chain_graph(rng.uniform(-2, 2, size=(4, 3)), node_times=[0, 2, 4, 5], k_bind=2)
    m2, traj2 = apply_deformation(m, traj, graph, time_window=np.inf)
    assert np.allclose(m2.positions, m.positions, atol=1e-12)
    assert np.allclose(m2.normals, m.normals, atol=1e-12)
    assert np.array_equal(m2.times, m.times)
    for c1, c2 in zip(traj.controls, traj2.controls):
        assert c1.time == c2.time
        assert np.allclose(c1.pose.t, c2.pose.t, atol=1e-12)
        assert quat_rotation_angle(c1.pose.q, c2.pose.q) < 1e-12


def test_apply_deformation_rigid_preserves_distances():
    rng = np.random.default_rng(15)
    m = _toy_map(rng)
    traj = _toy_traj(rng)
    graph = chain_graph(rng.uniform(-2, 2, size=(5, 3)), node_times=[0, 1, 2, 4, 5], k_bind=3)
    rot = random_rotation(rng)
    trans = rng.uniform(-1, 1, 3)
    rigid = rigid_encoding(graph, rot, trans)
    m2, traj2 = apply_deformation(m, traj, rigid, time_window=np.inf)
    d_before = np.linalg.norm(m.positions[:, None] - m.positions[None, :], axis=2)
    d_after = np.linalg.norm(m2.positions[:, None] - m2.positions[None, :], axis=2)
    assert np.max(np.abs(d_before - d_after)) < 1e-9
    # trajectory controls are left-composed by the rigid motion
    rigid_pose = Pose.from_matrix(np.block([[rot, trans[:, None]], [np.zeros((1, 3)), 1.0]]))
    for c_old, c_new in zip(traj.controls, traj2.controls):
        want = rigid_pose.compose(c_old.pose)
        assert np.linalg.norm(c_new.pose.t - want.t) < 1e-9
        assert quat_rotation_angle(c_new.pose.q, want.q) < 1e-9


def test_apply_deformation_translation_only():
    rng = np.random.default_rng(16)
    m = _toy_map(rng)
    traj = _toy_traj(rng)
    graph = chain_graph([[0.0, 0, 0]], node_times=[2.5], k_bind=1)
    graph.nodes[0].t = np.array([0.5, -1.0, 2.0])
    m2, traj2 = apply_deformation(m, traj, graph, time_window=np.inf)
    assert np.allclose(m2.positions, m.positions + [0.5, -1.0, 2.0], atol=1e-12)
    assert np.allclose(m2.normals, m.normals, atol=1e-12)
    for c_old, c_new in zip(traj.controls, traj2.controls):
        assert np.allclose(c_new.pose.t, c_old.pose.t + [0.5, -1.0, 2.0], atol=1e-12)
        assert quat_rotation_angle(c_new.pose.q, c_old.pose.q) < 1e-12


def test_deform_trajectory_preserves_times_and_count():
    rng = np.random.default_rng(17)
    traj = _toy_traj(rng, n=9)
    graph = chain_graph(rng.uniform(-1, 1, size=(3, 3)), node_times=[0, 2, 5], k_bind=2)
    graph = graph.with_parameters(graph.parameters() + 0.05 * rng.normal(size=36))
    out = deform_trajectory(traj, graph, time_window=np.inf)
    assert len(out) == len(traj)
    assert np.array_equal(out.times, traj.times)
