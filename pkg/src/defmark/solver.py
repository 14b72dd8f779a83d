"""Non-rigid registration core: alternate closest-point correspondence search
with Gauss-Seidel per-node closed-form updates of the deformation-graph
transforms, minimizing

    E_total = E_smooth + alpha * E_align

where E_align sums squared distances between deformed source vertices and
their matched target vertices, and E_smooth penalizes disagreement between
the influences neighboring nodes exert on each other.

Block updates never increase E_total while correspondences are held fixed
(the closed form is the block optimum; a candidate that loses to the
incumbent numerically is discarded). Energy recorded after re-matching may
legitimately rise and is not asserted monotone.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import InputError, NumericalError
from .geometry import (
    PointCloud,
    SpatialIndex,
    TriMesh,
    bbox_diagonal,
    rotation_from_cross_covariance,
)
from .graph import (
    DeformationGraph,
    NodeTransformSet,
    _blend,
    build_deformation_graph,
    transfer_landmarks,
)
from .model_io import LandmarkSet
from .rigid import CpdParams, apply_rigid, rigid_cpd

__all__ = [
    "CorrespondenceSet",
    "NodeSystem",
    "RegistrationResult",
    "SolverParams",
    "build_node_system",
    "energy_align",
    "energy_smooth",
    "energy_total",
    "find_correspondences",
    "register",
    "solve_node",
]

_log = logging.getLogger("defmark")

# Per-update energy growth tolerated before a sweep counts as non-monotone.
MONOTONICITY_SLACK = 1e-9


@dataclass
class SolverParams:
    """Non-rigid solver configuration (defaults follow the method's standard
    operating point: 500 nodes, 10 influence nodes, alpha = 2000)."""

    alpha: float = 2000.0
    node_count: int = 500
    k_influence: int = 10
    k_node: int = 6
    max_outer_iterations: int = 50
    sweeps_per_outer: int = 1
    relative_energy_tolerance: float = 1e-5
    correspondence_reject_multiplier: float | None = None
    seed: int = 0
    randomize_node_order: bool = False
    debug_checks: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise InputError(f"alpha must be > 0, got {self.alpha}")
        for name in ("node_count", "k_influence", "k_node", "max_outer_iterations",
                     "sweeps_per_outer"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.relative_energy_tolerance <= 0:
            raise InputError(
                f"relative_energy_tolerance must be > 0, got {self.relative_energy_tolerance}"
            )
        m = self.correspondence_reject_multiplier
        if m is not None and m <= 0:
            raise InputError(f"correspondence_reject_multiplier must be > 0, got {m}")


class CorrespondenceSet:
    """Closest-pair matches from source vertices into the target cloud."""

    __slots__ = ("source_ids", "target_ids", "distances", "rejected_count")

    def __init__(self, source_ids, target_ids, distances, rejected_count=0):
        s = np.ascontiguousarray(source_ids, dtype=np.int64)
        t = np.ascontiguousarray(target_ids, dtype=np.int64)
        d = np.ascontiguousarray(distances, dtype=np.float64)
        if not (s.shape == t.shape == d.shape) or s.ndim != 1:
            raise InputError("correspondence arrays must share one 1-D shape")
        if len(np.unique(s)) != len(s):
            raise InputError("a source vertex appears in more than one correspondence")
        if (d < 0).any():
            raise InputError("correspondence distances must be non-negative")
        for arr in (s, t, d):
            arr.setflags(write=False)
        self.source_ids = s
        self.target_ids = t
        self.distances = d
        self.rejected_count = int(rejected_count)

    def __len__(self):
        return self.source_ids.shape[0]


def find_correspondences(deformed_source, target_index, reject_multiplier=None):
    """Match every deformed source vertex to its closest target vertex.

    With `reject_multiplier` m set, pairs farther than m times the median pair
    distance are dropped (and counted); useful against partial scans.
    """
    pts = (
        deformed_source.points
        if isinstance(deformed_source, PointCloud)
        else np.asarray(deformed_source, dtype=np.float64)
    )
    ids, dist = target_index.query_nearest(pts)
    source_ids = np.arange(len(pts), dtype=np.int64)
    rejected = 0
    if reject_multiplier is not None:
        cutoff = reject_multiplier * float(np.median(dist))
        keep = dist <= cutoff
        rejected = int((~keep).sum())
        if not keep.any():
            raise NumericalError(
                f"correspondence rejection dropped all {len(pts)} pairs "
                f"(cutoff {cutoff:.6g} mm); registration cannot proceed"
            )
        source_ids, ids, dist = source_ids[keep], ids[keep], dist[keep]
    return CorrespondenceSet(source_ids, ids, dist, rejected)


def energy_align(correspondences, deformed_source, target):
    """Sum of squared distances between matched pairs (mm^2), evaluated at the
    current deformed positions."""
    diff = (
        deformed_source.points[correspondences.source_ids]
        - target.points[correspondences.target_ids]
    )
    return float(np.einsum("ij,ij->", diff, diff))


def energy_smooth(graph, transforms):
    """Sum over stored directed node links of the squared disagreement between
    the influence a node exerts on itself and the one its neighbor exerts on it."""
    r = transforms.rotations
    t = transforms.translations
    return _energy_smooth_arrays(graph, r, t)


def _energy_smooth_arrays(graph, r, t):
    adj = graph.adjacency
    pos = graph.nodes.positions
    j_idx = np.repeat(np.arange(len(adj)), np.diff(adj.indptr))
    k_idx = adj.indices
    i_j = pos[j_idx] + t[j_idx]
    i_k = (
        np.einsum("eab,eb->ea", r[k_idx], pos[j_idx] - pos[k_idx])
        + pos[k_idx]
        + t[k_idx]
    )
    diff = i_j - i_k
    return float(np.einsum("ij,ij->", diff, diff))


def energy_total(graph, transforms, correspondences, deformed_source, target, alpha):
    """E_smooth + alpha * E_align."""
    return energy_smooth(graph, transforms) + alpha * energy_align(
        correspondences, deformed_source, target
    )


@dataclass
class NodeSystem:
    """Accumulators of one node's block solve: total weight mass sum(b g^2),
    the residual centroids eliminating the translation, the centered
    cross-covariance driving the rotation, and the constant completing the
    identity  E_block(R) = constant - 2 trace(H R)  at the optimal translation."""

    weight_mass: float
    mu_v: np.ndarray
    mu_y: np.ndarray
    cross_covariance: np.ndarray
    constant: float


class _BlockProblem:
    """Mutable Gauss-Seidel workspace for one registration: flat arrays for the
    sweep kernels plus the incrementally maintained deformed positions."""

    def __init__(self, graph, source_points, target_points, alpha):
        self.graph = graph
        self.alpha = float(alpha)
        self.src = np.ascontiguousarray(source_points, dtype=np.float64)
        self.tgt = np.ascontiguousarray(target_points, dtype=np.float64)
        self.nodes = np.ascontiguousarray(graph.nodes.positions)
        self.bind_ids = np.ascontiguousarray(graph.bindings.node_ids)
        self.bind_w = np.ascontiguousarray(graph.bindings.weights)
        v, k = self.bind_ids.shape
        j = len(graph.nodes)
        # invert the (vertex -> nodes) table into per-node incidence lists
        flat = self.bind_ids.ravel()
        order = np.argsort(flat, kind="stable")
        self.nv_verts = np.ascontiguousarray(order // k, dtype=np.int64)
        self.nv_slots = np.ascontiguousarray(order % k, dtype=np.int64)
        counts = np.bincount(flat, minlength=j)
        self.nv_indptr = np.zeros(j + 1, dtype=np.int64)
        np.cumsum(counts, out=self.nv_indptr[1:])
        self.adj_indptr = np.ascontiguousarray(graph.adjacency.indptr)
        self.adj_indices = np.ascontiguousarray(graph.adjacency.indices)
        self.R = np.tile(np.eye(3), (j, 1, 1))
        self.T = np.zeros((j, 3))
        self.corr_tgt = np.zeros((v, 3))
        self.corr_mask = np.zeros(v, dtype=np.uint8)
        self.D = self.blend()

    @property
    def node_count(self):
        return self.R.shape[0]

    def blend(self):
        """Deformed source positions recomputed from scratch."""
        return np.ascontiguousarray(
            _blend(self.src, self.bind_ids, self.bind_w, self.nodes, self.R, self.T)
        )

    def resync(self):
        self.D = self.blend()

    def set_transforms(self, rotations, translations):
        self.R = np.ascontiguousarray(rotations, dtype=np.float64).copy()
        self.T = np.ascontiguousarray(translations, dtype=np.float64).copy()
        self.resync()

    def set_correspondences(self, corr):
        self.corr_tgt.fill(0.0)
        self.corr_mask.fill(0)
        self.corr_tgt[corr.source_ids] = self.tgt[corr.target_ids]
        self.corr_mask[corr.source_ids] = 1

    def sweep(self, order, sweep_fn=None):
        fn = sweep_fn if sweep_fn is not None else backend.sweep_nodes
        return fn(
            np.ascontiguousarray(order, dtype=np.int64),
            self.src, self.nodes, self.bind_w,
            self.nv_indptr, self.nv_verts, self.nv_slots,
            self.adj_indptr, self.adj_indices,
            self.corr_tgt, self.corr_mask, self.alpha,
            self.R, self.T, self.D,
        )

    def node_terms(self, j):
        from . import _native_py

        return _native_py.node_terms(
            j, self.src, self.nodes, self.bind_w,
            self.nv_indptr, self.nv_verts, self.nv_slots,
            self.adj_indptr, self.adj_indices,
            self.corr_tgt, self.corr_mask, self.alpha,
            self.R, self.T, self.D,
        )

    def energy_align(self):
        mask = self.corr_mask.astype(bool)
        diff = self.D[mask] - self.corr_tgt[mask]
        return float(np.einsum("ij,ij->", diff, diff))

    def energy_smooth(self):
        return _energy_smooth_arrays(self.graph, self.R, self.T)

    def energy_total(self):
        return self.energy_smooth() + self.alpha * self.energy_align()


def _problem_from_state(graph, transforms, correspondences, source, target, alpha):
    prob = _BlockProblem(graph, source.points, target.points, alpha)
    prob.set_transforms(transforms.rotations, transforms.translations)
    prob.set_correspondences(correspondences)
    return prob


def solve_node(node_id, graph, transforms, correspondences, source, target, alpha):
    """Closed-form block update of one node with all others held fixed.

    Returns the (rotation, translation) pair for `node_id` that minimizes the
    total energy over that node's terms; the incumbent pair is returned
    unchanged if the candidate cannot beat it numerically or the node touches
    no energy term.
    """
    if not 0 <= node_id < len(graph.nodes):
        raise InputError(f"node id {node_id} out of range 0..{len(graph.nodes) - 1}")
    prob = _problem_from_state(graph, transforms, correspondences, source, target, alpha)
    _, skipped = prob.sweep(np.array([node_id], dtype=np.int64))
    if skipped:
        _log.warning("node %d touches no energy term; transform left unchanged", node_id)
    return prob.R[node_id].copy(), prob.T[node_id].copy()


def build_node_system(node_id, graph, transforms, correspondences, source, target, alpha):
    """Accumulate one node's block-solve quantities (diagnostic view of the
    same reduction the sweep kernels perform)."""
    prob = _problem_from_state(graph, transforms, correspondences, source, target, alpha)
    beta, gamma, p, q = prob.node_terms(node_id)
    bg2 = beta * gamma * gamma
    s = float(bg2.sum())
    if s <= 0.0:
        raise NumericalError(f"node {node_id} touches no energy term (zero weight mass)")
    mu_y = (bg2 @ p) / s
    mu_v = ((beta * gamma) @ q) / s
    cp = gamma[:, None] * (p - mu_y)
    cq = q - gamma[:, None] * mu_v
    h = (beta[:, None] * cp).T @ cq
    z = float(beta @ ((cp * cp).sum(axis=1) + (cq * cq).sum(axis=1)))
    return NodeSystem(s, mu_v, mu_y, h, z)


@dataclass
class RegistrationResult:
    """Full output of one registration run."""

    transforms: NodeTransformSet
    deformed_source: PointCloud
    predicted_landmarks: LandmarkSet
    energy_trace: list  # (iteration, e_total, e_align, e_smooth)
    outer_iterations_run: int
    converged: bool
    rigid: object = None  # CpdResult when rigid init ran
    graph: DeformationGraph = None
    aligned_source: PointCloud = None  # rigidly pre-aligned cloud the graph binds
    diagnostics: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)


def register(source, source_landmarks, target, params=None, cpd_params=None,
             rigid_init=True):
    """Register `source` (with landmarks) onto `target` and transfer the
    landmarks.

    Pipeline: rigid CPD pre-alignment of source + landmarks, deformation-graph
    construction on the aligned source, then alternation of closest-point
    matching with full Gauss-Seidel node sweeps until the relative total-energy
    change falls under the tolerance. Landmarks ride through the final
    deformation.
    """
    params = params if params is not None else SolverParams()
    cpd_params = cpd_params if cpd_params is not None else CpdParams()
    src_cloud = source.vertices if isinstance(source, TriMesh) else source
    tgt_cloud = target.vertices if isinstance(target, TriMesh) else target
    if len(src_cloud) == 0 or len(tgt_cloud) == 0:
        raise InputError("registration needs non-empty source and target")

    timings = {}
    t_start = time.perf_counter()
    cpd_result = None
    if rigid_init:
        cpd_result = rigid_cpd(src_cloud, tgt_cloud, cpd_params, seed=params.seed)
        tf = cpd_result.transform
        if cpd_result.scale == 1.0:
            aligned = apply_rigid(src_cloud, tf)
            moved = tf.apply(source_landmarks.positions)
        else:
            # estimated scale folds into the map as s R p + t
            aligned = PointCloud(
                cpd_result.scale * (src_cloud.points @ tf.rotation.T) + tf.translation
            )
            moved = (
                cpd_result.scale * (source_landmarks.positions @ tf.rotation.T)
                + tf.translation
            )
        landmarks = LandmarkSet(source_landmarks.names, moved)
    else:
        aligned = src_cloud
        landmarks = source_landmarks
    timings["rigid_init"] = (time.perf_counter() - t_start) * 1e3

    t_mark = time.perf_counter()
    graph = build_deformation_graph(
        aligned, params.node_count, params.k_influence, params.k_node, params.seed
    )
    target_index = SpatialIndex(tgt_cloud)
    prob = _BlockProblem(graph, aligned.points, tgt_cloud.points, params.alpha)
    timings["graph_build"] = (time.perf_counter() - t_mark) * 1e3
    target_diag = bbox_diagonal(tgt_cloud)

    t_mark = time.perf_counter()
    rng = np.random.default_rng(params.seed + 1)
    trace = []
    diagnostics = {
        "backend": backend.BACKEND,
        "accepted_updates": 0,
        "skipped_nodes": 0,
        "rejected_correspondences": 0,
    }
    if params.debug_checks:
        diagnostics["monotonicity_violations"] = 0
        diagnostics["max_monotonicity_excess"] = 0.0
        diagnostics["max_rotation_orthogonality_error"] = 0.0
    e_prev = None
    converged = False
    iterations_run = 0
    for it in range(1, params.max_outer_iterations + 1):
        iterations_run = it
        prob.resync()
        corr = find_correspondences(
            PointCloud(prob.D), target_index, params.correspondence_reject_multiplier
        )
        prob.set_correspondences(corr)
        diagnostics["rejected_correspondences"] = corr.rejected_count
        for _ in range(params.sweeps_per_outer):
            order = (
                rng.permutation(prob.node_count)
                if params.randomize_node_order
                else np.arange(prob.node_count)
            )
            if params.debug_checks:
                _instrumented_sweep(prob, order, diagnostics)
            else:
                accepted, skipped = prob.sweep(order)
                diagnostics["accepted_updates"] += accepted
                diagnostics["skipped_nodes"] += skipped
        prob.resync()
        e_align = prob.energy_align()
        e_smooth = prob.energy_smooth()
        e_total = e_smooth + params.alpha * e_align
        if not np.isfinite(e_total):
            raise NumericalError(
                f"non-finite energy at outer iteration {it}: "
                f"E_align={e_align!r}, E_smooth={e_smooth!r}, "
                f"pairs={len(corr)}, rejected={corr.rejected_count}, "
                f"accepted_updates={diagnostics['accepted_updates']}"
            )
        trace.append((it, e_total, e_align, e_smooth))
        _log.debug(
            "outer %d: E_total=%.6g E_align=%.6g E_smooth=%.6g", it, e_total, e_align, e_smooth
        )
        # an energy below the square of a 1e-12*diag per-pair misfit is pure fp
        # noise around a perfect fit: already at the global optimum
        zero_floor = params.alpha * max(len(corr), 1) * (1e-12 * target_diag) ** 2
        if e_total < zero_floor:
            converged = True
            break
        if e_prev is not None:
            rel = abs(e_total - e_prev) / max(abs(e_prev), zero_floor)
            if rel < params.relative_energy_tolerance:
                converged = True
                break
        e_prev = e_total
    timings["solve"] = (time.perf_counter() - t_mark) * 1e3

    transforms = NodeTransformSet(prob.R, prob.T)
    deformed = PointCloud(prob.blend())
    predicted = transfer_landmarks(landmarks, graph.nodes, transforms, params.k_influence)
    timings["total"] = (time.perf_counter() - t_start) * 1e3
    return RegistrationResult(
        transforms=transforms,
        deformed_source=deformed,
        predicted_landmarks=predicted,
        energy_trace=trace,
        outer_iterations_run=iterations_run,
        converged=converged,
        rigid=cpd_result,
        graph=graph,
        aligned_source=aligned,
        diagnostics=diagnostics,
        timings_ms=timings,
    )


def _instrumented_sweep(prob, order, diagnostics):
    """Debug path: step node by node, checking that the total energy (at fixed
    correspondences) never grows past the allowed slack."""
    e_before = prob.energy_total()
    for j in order:
        accepted, skipped = prob.sweep(np.array([j], dtype=np.int64))
        diagnostics["accepted_updates"] += accepted
        diagnostics["skipped_nodes"] += skipped
        e_after = prob.energy_total()
        excess = e_after - e_before - MONOTONICITY_SLACK * max(1.0, e_before)
        if excess > 0.0:
            diagnostics["monotonicity_violations"] += 1
            diagnostics["max_monotonicity_excess"] = max(
                diagnostics["max_monotonicity_excess"], excess
            )
            _log.warning("energy rose by %.3e after updating node %d", excess, j)
        e_before = e_after
    gram = np.einsum("jab,jac->jbc", prob.R, prob.R)
    ortho = float(np.abs(gram - np.eye(3)).max())
    det = float(np.abs(np.linalg.det(prob.R) - 1.0).max())
    diagnostics["max_rotation_orthogonality_error"] = max(
        diagnostics["max_rotation_orthogonality_error"], ortho, det
    )
