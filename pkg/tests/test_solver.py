import math

import numpy as np
import pytest

from defmark.errors import InputError, NumericalError
from defmark.geometry import PointCloud, SpatialIndex, TriMesh, axis_angle_rotation
from defmark.graph import (
    DeformationGraph,
    NodeAdjacency,
    NodeSet,
    NodeTransformSet,
    VertexBindings,
    bind_vertices,
    build_node_graph,
)
from defmark.model_io import LandmarkSet
from defmark.solver import (
    CorrespondenceSet,
    SolverParams,
    build_node_system,
    energy_align,
    energy_smooth,
    energy_total,
    find_correspondences,
    register,
    solve_node,
)
from defmark.synthetic import quadratic_bend, sample_rigid_transform

from conftest import rotation_angle
from oracle_utils import BlockObjective, brute_force_minimum


def _two_node_graph(rot2=None):
    """Two nodes on the x axis linked both ways; each node bound to itself."""
    nodes = NodeSet([[0.0, 0, 0], [1.0, 0, 0]], [0, 1], 0)
    adjacency = NodeAdjacency([0, 1, 2], [1, 0])
    bindings = VertexBindings(np.array([[0], [1]]), np.ones((2, 1)))
    graph = DeformationGraph(nodes, adjacency, bindings, 1)
    rots = np.stack([np.eye(3), rot2 if rot2 is not None else np.eye(3)])
    transforms = NodeTransformSet(rots, np.zeros((2, 3)))
    return graph, transforms


def _identity_correspondences(n):
    return CorrespondenceSet(np.arange(n), np.arange(n), np.zeros(n))


class TestFindCorrespondences:
    def test_identical_clouds(self):
        pts = PointCloud(np.random.default_rng(0).normal(size=(50, 3)))
        corr = find_correspondences(pts, SpatialIndex(pts))
        assert len(corr) == 50
        assert corr.rejected_count == 0
        assert np.array_equal(corr.distances, np.zeros(50))
        assert np.array_equal(corr.source_ids, corr.target_ids)

    def test_two_point_target(self):
        target = SpatialIndex(np.array([[0.0, 0, 0], [10.0, 0, 0]]))
        corr = find_correspondences(PointCloud([[1.0, 0.0, 0.0]]), target)
        assert corr.target_ids[0] == 0
        assert corr.distances[0] == 1.0

    @pytest.mark.parametrize("multiplier", [1.2, 3.0])
    def test_median_filter_matches_brute_force(self, multiplier):
        rng = np.random.default_rng(1)
        src = rng.normal(size=(80, 3))
        tgt = rng.normal(size=(60, 3))
        index = SpatialIndex(tgt)
        corr = find_correspondences(PointCloud(src), index, reject_multiplier=multiplier)
        d = np.sqrt(((src[:, None, :] - tgt[None, :, :]) ** 2).sum(axis=2))
        nearest = d.argmin(axis=1)
        dist = d[np.arange(80), nearest]
        keep = dist <= multiplier * np.median(dist)
        assert np.array_equal(corr.source_ids, np.nonzero(keep)[0])
        assert np.array_equal(corr.target_ids, nearest[keep])
        assert corr.rejected_count == int((~keep).sum())

    def test_all_rejected_raises(self):
        target = SpatialIndex(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        src = PointCloud(np.full((4, 3), 50.0))
        with pytest.raises(NumericalError, match="cannot proceed"):
            find_correspondences(src, target, reject_multiplier=1e-9)

    def test_duplicate_source_rejected(self):
        with pytest.raises(InputError):
            CorrespondenceSet([0, 0], [1, 2], [0.0, 0.0])


class TestEnergies:
    def test_align_zero_distance(self):
        pts = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
        corr = _identity_correspondences(10)
        assert energy_align(corr, pts, pts) == 0.0

    def test_align_single_pair(self):
        deformed = PointCloud([[0.0, 0.0, 0.0]])
        target = PointCloud([[2.0, 0.0, 0.0]])
        corr = CorrespondenceSet([0], [0], [2.0])
        assert energy_align(corr, deformed, target) == 4.0

    def test_align_matches_fsum_oracle(self):
        rng = np.random.default_rng(2)
        deformed = PointCloud(rng.normal(size=(100, 3)))
        target = PointCloud(rng.normal(size=(100, 3)))
        perm = rng.permutation(100)
        corr = CorrespondenceSet(np.arange(100), perm, np.zeros(100))
        got = energy_align(corr, deformed, target)
        ref = math.fsum(
            (deformed.points[i, k] - target.points[perm[i], k]) ** 2
            for i in range(100)
            for k in range(3)
        )
        assert got == pytest.approx(ref, rel=1e-9)

    def test_smooth_identity_zero(self):
        graph, transforms = _two_node_graph()
        assert energy_smooth(graph, transforms) == 0.0

    def test_smooth_common_translation_zero(self):
        graph, _ = _two_node_graph()
        transforms = NodeTransformSet(
            np.broadcast_to(np.eye(3), (2, 3, 3)), np.tile([3.0, -1.0, 2.0], (2, 1))
        )
        assert energy_smooth(graph, transforms) == 0.0

    def test_smooth_hand_computed_case(self):
        # node 2 rotated 90 deg about z: its influence moves node 1's position
        # to (1, -1, 0), contributing 2; the reverse direction contributes 0
        rot2 = axis_angle_rotation([0, 0, 1], np.pi / 2)
        graph, transforms = _two_node_graph(rot2)
        assert energy_smooth(graph, transforms) == pytest.approx(2.0, abs=1e-12)

    def test_total_zero(self):
        graph, transforms = _two_node_graph()
        pts = PointCloud(np.zeros((2, 3)) + np.array([[0, 0, 0], [1, 0, 0]], float))
        corr = _identity_correspondences(2)
        assert energy_total(graph, transforms, corr, pts, pts, 2000.0) == 0.0

    def test_total_arithmetic(self):
        rot2 = axis_angle_rotation([0, 0, 1], np.pi / 2)
        graph, transforms = _two_node_graph(rot2)  # E_smooth = 2
        deformed = PointCloud([[0.0, 0.0, 0.0]])
        target = PointCloud([[1.0, 1.0, 1.0]])
        corr = CorrespondenceSet([0], [0], [np.sqrt(3.0)])  # E_align = 3
        assert energy_total(graph, transforms, corr, deformed, target, 2000.0) == 6002.0

    def test_total_is_sum_of_parts(self):
        rng = np.random.default_rng(3)
        graph, _ = _two_node_graph()
        rots = np.stack(
            [axis_angle_rotation(rng.normal(size=3), rng.uniform(0, 1)) for _ in range(2)]
        )
        transforms = NodeTransformSet(rots, rng.normal(size=(2, 3)))
        deformed = PointCloud(rng.normal(size=(5, 3)))
        target = PointCloud(rng.normal(size=(5, 3)))
        corr = _identity_correspondences(5)
        total = energy_total(graph, transforms, corr, deformed, target, 123.0)
        parts = energy_smooth(graph, transforms) + 123.0 * energy_align(
            corr, deformed, target
        )
        assert total == pytest.approx(parts, rel=1e-12)


def _micro_instance(rng, n_nodes=None, n_points=None):
    n_nodes = n_nodes or int(rng.integers(1, 4))
    n_points = n_points or int(rng.integers(6, 31))
    node_pos = rng.uniform(-1, 1, (n_nodes, 3))
    nodes = NodeSet(node_pos, np.arange(n_nodes), 0)
    k_inf = int(rng.integers(1, n_nodes + 1))
    src = PointCloud(rng.uniform(-1, 1, (n_points, 3)))
    bindings = bind_vertices(src, nodes, k_inf)
    if n_nodes > 1:
        adjacency = build_node_graph(nodes, int(rng.integers(1, n_nodes)))
    else:
        adjacency = NodeAdjacency([0, 0], [])
    graph = DeformationGraph(nodes, adjacency, bindings, k_inf)
    rots = np.stack(
        [
            axis_angle_rotation(rng.normal(size=3), rng.uniform(0, 1.0))
            for _ in range(n_nodes)
        ]
    )
    transforms = NodeTransformSet(rots, rng.uniform(-0.5, 0.5, (n_nodes, 3)))
    target = PointCloud(src.points + rng.normal(scale=0.3, size=(n_points, 3)))
    keep = rng.uniform(size=n_points) < 0.85
    keep[: max(1, n_points // 3)] = True
    sv = np.nonzero(keep)[0]
    corr = CorrespondenceSet(sv, sv, np.zeros(len(sv)))
    alpha = float(rng.uniform(0.5, 5.0))
    j = int(rng.integers(n_nodes))
    return graph, transforms, corr, src, target, alpha, j


class TestSolveNode:
    def test_perfect_fit_returns_identity(self):
        rng = np.random.default_rng(4)
        n_nodes, n_pts = 3, 20
        nodes = NodeSet(rng.uniform(-1, 1, (n_nodes, 3)), np.arange(n_nodes), 0)
        src = PointCloud(rng.uniform(-1, 1, (n_pts, 3)))
        bindings = bind_vertices(src, nodes, 2)
        graph = DeformationGraph(nodes, build_node_graph(nodes, 1), bindings, 2)
        transforms = NodeTransformSet.identity(n_nodes)
        corr = _identity_correspondences(n_pts)
        rot, trans = solve_node(0, graph, transforms, corr, src, src, 2000.0)
        assert np.abs(rot - np.eye(3)).max() <= 1e-9
        assert np.abs(trans).max() <= 1e-9

    def test_single_node_recovers_rigid_motion(self):
        rng = np.random.default_rng(5)
        src = PointCloud(rng.uniform(-1, 1, (6, 3)))
        nodes = NodeSet([[0.0, 0.0, 0.0]], [0], 0)
        bindings = VertexBindings(np.zeros((6, 1), dtype=np.int64), np.ones((6, 1)))
        graph = DeformationGraph(nodes, NodeAdjacency([0, 0], []), bindings, 1)
        truth = sample_rigid_transform(rng, np.deg2rad(50.0), 0.5)
        target = PointCloud(truth.apply(src.points))
        corr = _identity_correspondences(6)
        rot, trans = solve_node(
            0, graph, NodeTransformSet.identity(1), corr, src, target, 1.0
        )
        # node sits at the origin, so the block transform is the rigid motion
        assert np.abs(rot - truth.rotation).max() <= 1e-9
        assert np.abs(trans - truth.translation).max() <= 1e-9

    @pytest.mark.parametrize("seed", [11, 12, 13])
    def test_beats_coarse_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        graph, transforms, corr, src, target, alpha, j = _micro_instance(rng)
        objective = BlockObjective(graph, transforms, corr, src, target, alpha, j)
        rot, trans = solve_node(j, graph, transforms, corr, src, target, alpha)
        e_closed = objective.energy(rot, trans)
        e_brute, _, _ = brute_force_minimum(objective, step_deg=12.0)
        assert e_closed <= e_brute + 1e-6

    def test_translation_elimination_consistency(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            graph, transforms, corr, src, target, alpha, j = _micro_instance(rng)
            system = build_node_system(j, graph, transforms, corr, src, target, alpha)
            rot, trans = solve_node(j, graph, transforms, corr, src, target, alpha)
            rebuilt = system.mu_v - rot @ system.mu_y
            assert np.abs(rebuilt - trans).max() <= 1e-9

    def test_node_system_energy_identity(self):
        rng = np.random.default_rng(7)
        graph, transforms, corr, src, target, alpha, j = _micro_instance(rng)
        system = build_node_system(j, graph, transforms, corr, src, target, alpha)
        objective = BlockObjective(graph, transforms, corr, src, target, alpha, j)
        for _ in range(5):
            rot = axis_angle_rotation(rng.normal(size=3), rng.uniform(0, np.pi))
            trans = system.mu_v - rot @ system.mu_y
            # block energy (minus the terms untouched by node j) matches the
            # reduced form  Z - 2 tr(H R)
            reduced = system.constant - 2.0 * float(
                np.einsum("ij,ji->", system.cross_covariance, rot)
            )
            direct = objective.energy(rot, trans) - objective.const
            assert direct == pytest.approx(reduced, rel=1e-9, abs=1e-9)

    def test_never_increases_block_energy(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            graph, transforms, corr, src, target, alpha, j = _micro_instance(rng)
            objective = BlockObjective(graph, transforms, corr, src, target, alpha, j)
            e_before = objective.energy(
                transforms.rotations[j], transforms.translations[j]
            )
            rot, trans = solve_node(j, graph, transforms, corr, src, target, alpha)
            assert objective.energy(rot, trans) <= e_before + 1e-9 * max(1.0, e_before)


class TestRegister:
    def test_self_registration(self, small_foot):
        mesh, lms = small_foot
        params = SolverParams(node_count=120, k_influence=8, seed=1)
        result = register(mesh, lms, mesh, params=params)
        assert result.outer_iterations_run <= 5
        assert result.converged
        err = np.linalg.norm(result.predicted_landmarks.positions - lms.positions, axis=1)
        assert err.mean() <= 1e-3

    def test_rigid_recovery(self, small_foot):
        mesh, lms = small_foot
        from defmark.geometry import bbox_diagonal

        diag = bbox_diagonal(mesh.vertices)
        rng = np.random.default_rng(9)
        truth_t = sample_rigid_transform(rng, np.deg2rad(30.0), 0.2 * diag)
        target = TriMesh(truth_t.apply(mesh.vertices.points), mesh.faces)
        truth_lms = truth_t.apply(lms.positions)
        params = SolverParams(node_count=120, k_influence=8, seed=2)
        result = register(mesh, lms, target, params=params)
        err = np.linalg.norm(result.predicted_landmarks.positions - truth_lms, axis=1)
        assert err.mean() <= 1e-3 * diag

    def test_bend_recovery(self, small_foot):
        mesh, lms = small_foot
        from defmark.geometry import bbox_diagonal

        diag = bbox_diagonal(mesh.vertices)
        target = TriMesh(
            quadratic_bend(mesh.vertices.points, mesh.vertices, 0.05), mesh.faces
        )
        truth_lms = quadratic_bend(lms.positions, mesh.vertices, 0.05)
        params = SolverParams(node_count=120, k_influence=8, seed=3)
        result = register(mesh, lms, target, params=params)
        err = np.linalg.norm(result.predicted_landmarks.positions - truth_lms, axis=1)
        assert err.mean() <= 0.01 * diag

    def test_debug_checks_record_monotonicity(self, small_foot):
        mesh, lms = small_foot
        params = SolverParams(
            node_count=100, k_influence=6, max_outer_iterations=8, seed=4,
            debug_checks=True,
        )
        target = TriMesh(
            quadratic_bend(mesh.vertices.points, mesh.vertices, 0.04), mesh.faces
        )
        result = register(mesh, lms, target, params=params)
        assert result.diagnostics["monotonicity_violations"] == 0
        assert result.diagnostics["max_rotation_orthogonality_error"] <= 1e-9

    def test_energy_trace_decomposition(self, small_foot):
        mesh, lms = small_foot
        params = SolverParams(node_count=100, k_influence=6, max_outer_iterations=6, seed=5)
        target = TriMesh(
            quadratic_bend(mesh.vertices.points, mesh.vertices, 0.03), mesh.faces
        )
        result = register(mesh, lms, target, params=params)
        for _, e_total, e_align, e_smooth in result.energy_trace:
            assert e_total == pytest.approx(e_smooth + params.alpha * e_align, rel=1e-12)

    def test_deterministic_given_seed(self, small_foot):
        mesh, lms = small_foot
        params = SolverParams(node_count=90, k_influence=6, max_outer_iterations=5, seed=6)
        target = TriMesh(
            quadratic_bend(mesh.vertices.points, mesh.vertices, 0.03), mesh.faces
        )
        a = register(mesh, lms, target, params=params)
        b = register(mesh, lms, target, params=params)
        assert np.array_equal(
            a.predicted_landmarks.positions, b.predicted_landmarks.positions
        )
        assert a.energy_trace == b.energy_trace

    def test_no_rigid_init_skips_cpd(self, small_foot):
        mesh, lms = small_foot
        params = SolverParams(node_count=90, k_influence=6, max_outer_iterations=3, seed=7)
        result = register(mesh, lms, mesh, params=params, rigid_init=False)
        assert result.rigid is None
        err = np.linalg.norm(result.predicted_landmarks.positions - lms.positions, axis=1)
        assert err.mean() <= 1e-6

    def test_randomized_order_still_converges(self, small_foot):
        mesh, lms = small_foot
        params = SolverParams(
            node_count=90, k_influence=6, max_outer_iterations=10, seed=8,
            randomize_node_order=True,
        )
        result = register(mesh, lms, mesh, params=params)
        err = np.linalg.norm(result.predicted_landmarks.positions - lms.positions, axis=1)
        assert err.mean() <= 1e-3

    def test_param_validation(self):
        with pytest.raises(InputError):
            SolverParams(alpha=0.0)
        with pytest.raises(InputError):
            SolverParams(node_count=0)
        with pytest.raises(InputError):
            SolverParams(correspondence_reject_multiplier=-1.0)

    def test_non_finite_energy_aborts_with_diagnostics(self, small_foot):
        mesh, lms = small_foot
        # per-pair squared distances stay finite but their sum overflows,
        # driving the alignment energy to infinity
        target = TriMesh(mesh.vertices.points + 1e153, mesh.faces)
        params = SolverParams(node_count=60, k_influence=5, max_outer_iterations=2, seed=0)
        with pytest.raises(NumericalError, match="non-finite energy at outer iteration"):
            register(mesh, lms, target, params=params, rigid_init=False)


def finite_difference_block_gradient(result, target_cloud, alpha, node_id, h=1e-5):
    """Central-difference gradient of E_total (fixed correspondences) w.r.t.
    one node's axis-angle perturbation and translation."""
    from defmark.graph import deform_points

    graph = result.graph
    corr = find_correspondences(result.deformed_source, SpatialIndex(target_cloud))
    rots = result.transforms.rotations.copy()
    trans = result.transforms.translations.copy()

    def total(r_all, t_all):
        tf = NodeTransformSet(r_all, t_all)
        deformed = deform_points(result.aligned_source, graph.bindings, graph.nodes, tf)
        return energy_total(graph, tf, corr, deformed, target_cloud, alpha)

    grad = []
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        r_plus = rots.copy()
        r_plus[node_id] = axis_angle_rotation(step, h) @ rots[node_id]
        r_minus = rots.copy()
        r_minus[node_id] = axis_angle_rotation(-step, h) @ rots[node_id]
        grad.append((total(r_plus, trans) - total(r_minus, trans)) / (2 * h))
        t_plus = trans.copy()
        t_plus[node_id] += step
        t_minus = trans.copy()
        t_minus[node_id] -= step
        grad.append((total(rots, t_plus) - total(rots, t_minus)) / (2 * h))
    return np.asarray(grad)


class TestSolverStationarity:
    def test_converged_self_fit_is_stationary(self, small_foot):
        mesh, lms = small_foot
        params = SolverParams(node_count=80, k_influence=6, seed=10)
        result = register(mesh, lms, mesh, params=params)
        corr = find_correspondences(result.deformed_source, SpatialIndex(mesh.vertices))
        e0 = energy_total(
            result.graph, result.transforms, corr, result.deformed_source,
            mesh.vertices, params.alpha,
        )
        scale = max(1.0, e0)
        rng = np.random.default_rng(0)
        for j in rng.choice(len(result.graph.nodes), size=5, replace=False):
            grad = finite_difference_block_gradient(result, mesh.vertices, params.alpha, int(j))
            assert np.linalg.norm(grad) <= 1e-3 * scale
