import numpy as np
import pytest

from surfelslam import (
    LoopParams,
    Pose,
    Surfel,
    SurfelMap,
    build_constraints,
    detect_candidates,
    path_trajectory,
    preset_trajectory,
    verify_candidate,
)
from surfelslam.deformation import KIND_PIN, KIND_SURFEL
from surfelslam.errors import LoopRejected
from surfelslam.loops import LoopCandidate, VerifiedLoop

from helpers import chain_graph


def test_detect_straight_line_has_no_candidates():
    traj = path_trajectory(np.array([[0, 0], [30, 0]], float), speed=1.0)
    assert detect_candidates(traj, min_time_gap=5.0, max_detect_dist=1.0) == []


def test_detect_square_loop_single_candidate():
    traj = preset_trajectory("corridor-loop")
    out = detect_candidates(traj, min_time_gap=20.0, max_detect_dist=2.0)
    assert len(out) == 1
    cand = out[0]
    assert cand.time_a < cand.time_b
    assert cand.time_a == pytest.approx(0.0, abs=1e-9)
    assert cand.time_b == pytest.approx(traj.last.time, abs=1e-9)
    assert cand.separation < 1e-9


def test_detect_figure_eight_two_candidates():
    traj = preset_trajectory("figure-eight")
    out = detect_candidates(traj, min_time_gap=6.0, max_detect_dist=1.0)
    assert len(out) == 2
    total = traj.last.time
    closure, crossing = out  # sorted by time_a: (0, T) first
    # final closure: start/end at (4,0)
    assert closure.time_a == pytest.approx(0.0, abs=1e-9)
    assert closure.time_b == pytest.approx(total, abs=1e-9)
    # center crossing: both visits to (0,0)
    assert crossing.time_a == pytest.approx(total * 0.25, rel=0.05)
    assert crossing.time_b == pytest.approx(total * 0.75, rel=0.05)
    for c in out:
        assert c.time_a < c.time_b


def _corner_submap_surfels(rng, n_per_plane=60, offset=np.zeros(3), time_lo=0.0, time_hi=2.0):
    """Surfels on three orthogonal planes meeting near the origin."""
    surfels = []
    planes = [
        (np.array([0.0, 0, 1]), lambda u, v: np.array([u, v, 0.0])),
        (np.array([0.0, 1, 0]), lambda u, v: np.array([u, 2.0, v])),
        (np.array([1.0, 0, 0]), lambda u, v: np.array([2.0, u, v])),
    ]
    for normal, param in planes:
        for _ in range(n_per_plane):
            pos = param(rng.uniform(-2, 2), rng.uniform(-2, 2)) + offset
            surfels.append(Surfel(pos, normal.copy(), 0.3, 3.0,
                                  rng.uniform(time_lo, time_hi)))
    return surfels


def _with_second_pass(surfels, offset=np.zeros(3), dt=30.0):
    """Map holding the given submap plus an exact copy shifted in space/time."""
    second = [Surfel(s.position + offset, s.normal.copy(), s.radius, s.confidence,
                     s.time + dt) for s in surfels]
    return SurfelMap.from_surfels(surfels + second, 0.5)


def test_verify_identical_submaps():
    rng = np.random.default_rng(0)
    m = _with_second_pass(_corner_submap_surfels(rng, time_lo=0.0, time_hi=2.0))
    cand = LoopCandidate(time_a=1.0, time_b=31.0, separation=0.0)
    loop = verify_candidate(m, None, cand, LoopParams(submap_halfwidth=5.0))
    assert loop.fitness < 1e-6
    assert np.linalg.norm(loop.relative.t) < 1e-6
    assert loop.relative.rotation_angle_to(Pose.identity()) < 1e-6


def test_verify_recovers_known_offset():
    rng = np.random.default_rng(1)
    offset = np.array([0.3, 0.0, 0.0])
    m = _with_second_pass(_corner_submap_surfels(rng, time_lo=0.0, time_hi=2.0), offset)
    cand = LoopCandidate(1.0, 31.0, float(np.linalg.norm(offset)))
    loop = verify_candidate(m, None, cand, LoopParams(submap_halfwidth=5.0))
    # relative maps the later (offset) submap back onto the earlier one
    assert np.linalg.norm(loop.relative.t + offset) < 1e-3
    assert loop.fitness < 0.01
    # accepted loops cut the B->A nearest-surfel RMS by at least half
    rows_a = m.rows_in_time_window(1.0, 5.0)
    rows_b = m.rows_in_time_window(31.0, 5.0)
    sub_a = SurfelMap.from_surfels([m.surfel(int(i)) for i in rows_a], 0.5)
    before = np.sqrt(np.mean(sub_a.index.nearest_rows(m.positions[rows_b])[0] ** 2))
    moved = loop.relative.transform(m.positions[rows_b])
    after = np.sqrt(np.mean(sub_a.index.nearest_rows(moved)[0] ** 2))
    assert after <= 0.5 * before


def test_verify_unrelated_submaps_rejected():
    rng = np.random.default_rng(2)
    surfels = _corner_submap_surfels(rng, time_lo=0.0, time_hi=2.0)
    surfels += _corner_submap_surfels(rng, offset=np.array([50.0, 0, 0]),
                                      time_lo=30.0, time_hi=32.0)
    m = SurfelMap.from_surfels(surfels, 0.5)
    with pytest.raises(LoopRejected) as exc:
        verify_candidate(m, None, LoopCandidate(1.0, 31.0, 2.0), LoopParams())
    assert exc.value.reason == "inliers"


def test_verify_empty_submap_rejected():
    rng = np.random.default_rng(3)
    m = SurfelMap.from_surfels(_corner_submap_surfels(rng, time_lo=0.0, time_hi=2.0), 0.5)
    with pytest.raises(LoopRejected) as exc:
        verify_candidate(m, None, LoopCandidate(1.0, 31.0, 0.5), LoopParams())
    assert exc.value.reason == "empty submap"


def _verified_loop(rng, relative):
    surfels = _corner_submap_surfels(rng, time_lo=0.0, time_hi=2.0)
    surfels += _corner_submap_surfels(rng, time_lo=30.0, time_hi=32.0)
    m = SurfelMap.from_surfels(surfels, 0.5)
    cand = LoopCandidate(1.0, 31.0, 0.0)
    return m, VerifiedLoop(cand, relative, 0.001, 0.9)


def test_build_constraints_identity_targets():
    rng = np.random.default_rng(4)
    m, loop = _verified_loop(rng, Pose.identity())
    graph = chain_graph(rng.uniform(-2, 2, (6, 3)), node_times=[0, 1, 2, 30, 31, 32])
    cons = build_constraints(loop, m, graph, n_samples=20, submap_halfwidth=5.0,
                             rng=np.random.default_rng(9))
    surf = [c for c in cons if c.kind == KIND_SURFEL]
    pins = [c for c in cons if c.kind == KIND_PIN]
    assert len(surf) == 20
    for c in surf:
        assert np.allclose(c.target, c.source, atol=1e-12)
        assert c.source_time is not None
    assert sorted(c.node for c in pins) == [0, 1, 2]  # earlier window pins


def test_build_constraints_translation_targets():
    rng = np.random.default_rng(5)
    d = np.array([0.0, 0.25, 0.0])
    m, loop = _verified_loop(rng, Pose(np.array([1.0, 0, 0, 0]), d))
    graph = chain_graph(rng.uniform(-2, 2, (4, 3)), node_times=[0, 1, 30, 31])
    cons = build_constraints(loop, m, graph, n_samples=10, submap_halfwidth=5.0,
                             rng=np.random.default_rng(9))
    for c in cons:
        if c.kind == KIND_SURFEL:
            assert np.allclose(c.target, c.source + d, atol=1e-12)


def test_build_constraints_clamps_to_submap_size():
    rng = np.random.default_rng(6)
    m, loop = _verified_loop(rng, Pose.identity())
    graph = chain_graph(rng.uniform(-2, 2, (4, 3)), node_times=[0, 1, 30, 31])
    n_b = len(m.rows_in_time_window(31.0, 5.0))
    cons = build_constraints(loop, m, graph, n_samples=10 * n_b, submap_halfwidth=5.0)
    surf = [c for c in cons if c.kind == KIND_SURFEL]
    pins = [c for c in cons if c.kind == KIND_PIN]
    assert len(surf) == n_b
    srcs = {tuple(c.source) for c in surf}
    assert len(srcs) == n_b  # no duplicates
    assert len(cons) == n_b + len(pins)
