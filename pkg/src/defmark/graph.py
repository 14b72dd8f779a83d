"""Deformation graph over a source model: node sampling, node adjacency,
per-point inverse-distance bindings, and application of per-node rigid
transforms to arbitrary points (vertices or landmarks).

A point moves as the weight-blended result of its k nearest nodes, each node
contributing a rotation about its own position plus a translation. Weights are
normalized inverse distances; a point sitting on a node follows that node
exactly (the inverse-distance limit concentrates all weight there).
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np

from .errors import InputError
from .geometry import PointCloud, SpatialIndex, as_points, bbox_diagonal, ROTATION_TOL
from .model_io import LandmarkSet

__all__ = [
    "DeformationGraph",
    "NodeAdjacency",
    "NodeSet",
    "NodeTransformSet",
    "VertexBinding",
    "VertexBindings",
    "bind_vertices",
    "build_deformation_graph",
    "build_node_graph",
    "deform_points",
    "sample_nodes",
    "transfer_landmarks",
]

# A bound point closer than this fraction of the node-set bbox diagonal to its
# nearest node counts as coincident with it.
COINCIDENT_EPS_FRACTION = 1e-9


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


class NodeSet:
    """Deformation nodes: a subset of source vertices acting as local handles."""

    __slots__ = ("positions", "vertex_indices", "sampling_seed")

    def __init__(self, positions, vertex_indices, sampling_seed):
        self.positions = _frozen(as_points(positions, "node positions"), np.float64)
        idx = np.asarray(vertex_indices, dtype=np.int64).reshape(-1)
        if idx.shape[0] != len(self.positions):
            raise InputError("node position / vertex index count mismatch")
        if len(np.unique(idx)) != len(idx):
            raise InputError("node vertex indices must be distinct")
        self.vertex_indices = _frozen(idx, np.int64)
        self.sampling_seed = int(sampling_seed)

    def __len__(self):
        return self.positions.shape[0]

    def __repr__(self):
        return f"NodeSet({len(self)} nodes, seed={self.sampling_seed})"


def sample_nodes(source, node_count, seed, method="uniform"):
    """Sample `node_count` distinct source vertices as deformation nodes.

    `method` is "uniform" (random without replacement) or "farthest"
    (greedy farthest-point coverage, seeded start). Deterministic per seed.
    """
    cloud = source if isinstance(source, PointCloud) else PointCloud(source)
    n = len(cloud)
    if node_count < 1:
        raise InputError(f"node_count must be >= 1, got {node_count}")
    if node_count > n:
        raise InputError(
            f"node_count {node_count} exceeds the {n} source vertices; "
            f"decimate the source less or lower the node budget"
        )
    rng = np.random.default_rng(seed)
    if method == "uniform":
        idx = rng.choice(n, size=node_count, replace=False)
    elif method == "farthest":
        idx = _farthest_point_indices(cloud.points, node_count, rng)
    else:
        raise InputError(f"unknown sampling method {method!r}")
    idx = np.sort(idx)
    return NodeSet(cloud.points[idx], idx, seed)


def _farthest_point_indices(points, count, rng):
    n = len(points)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(d2))  # argmax takes the lowest index on ties
        chosen[i] = nxt
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


VertexBinding = namedtuple("VertexBinding", ["node_ids", "weights"])


class VertexBindings:
    """Per-point node bindings stored as (n, k) arrays: node ids sorted by
    ascending distance (ties by id) and their normalized influence weights."""

    __slots__ = ("node_ids", "weights")

    def __init__(self, node_ids, weights):
        ids = np.asarray(node_ids, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)
        if ids.shape != w.shape or ids.ndim != 2:
            raise InputError("binding ids/weights must share an (n, k) shape")
        if not np.isfinite(w).all() or (w < 0).any():
            raise InputError("binding weights must be finite and non-negative")
        self.node_ids = _frozen(ids, np.int64)
        self.weights = _frozen(w, np.float64)

    @property
    def k_influence(self):
        return self.node_ids.shape[1]

    def __len__(self):
        return self.node_ids.shape[0]

    def __getitem__(self, i):
        return VertexBinding(self.node_ids[i], self.weights[i])


def bind_vertices(points, nodes, k_influence):
    """Bind each point to its k nearest nodes with normalized inverse-distance
    weights. A point coincident with a node (distance below 1e-9 of the node
    bbox diagonal) gets weight 1 on that node and 0 elsewhere."""
    pts = points.points if isinstance(points, PointCloud) else as_points(
        points, "points", allow_empty=True
    )
    j = len(nodes)
    if k_influence < 1:
        raise InputError(f"k_influence must be >= 1, got {k_influence}")
    if k_influence > j:
        raise InputError(f"k_influence {k_influence} exceeds the {j} nodes")
    if len(pts) == 0:
        return VertexBindings(
            np.zeros((0, k_influence), dtype=np.int64), np.zeros((0, k_influence))
        )
    index = SpatialIndex(nodes.positions)
    ids, dist = index.query_k(pts, k_influence)
    eps = COINCIDENT_EPS_FRACTION * bbox_diagonal(nodes.positions)
    coincident = (dist[:, 0] < eps) | (dist[:, 0] == 0.0)
    weights = np.zeros_like(dist)
    free = ~coincident
    if free.any():
        inv = 1.0 / dist[free]
        weights[free] = inv / inv.sum(axis=1)[:, None]
    weights[coincident, 0] = 1.0
    return VertexBindings(ids, weights)


class NodeAdjacency:
    """Symmetrized node neighborhoods in CSR form; every undirected link is
    stored in both directions."""

    __slots__ = ("indptr", "indices")

    def __init__(self, indptr, indices):
        self.indptr = _frozen(np.asarray(indptr), np.int64)
        self.indices = _frozen(np.asarray(indices), np.int64)

    def __len__(self):
        return self.indptr.shape[0] - 1

    @property
    def directed_edge_count(self):
        return self.indices.shape[0]

    def neighbors(self, j):
        return self.indices[self.indptr[j]:self.indptr[j + 1]]

    def degree(self, j):
        return int(self.indptr[j + 1] - self.indptr[j])


def build_node_graph(nodes, k_node):
    """Link each node to its k_node nearest nodes, then symmetrize (union of
    directed links)."""
    j = len(nodes)
    if k_node < 1:
        raise InputError(f"k_node must be >= 1, got {k_node}")
    if k_node >= j:
        raise InputError(f"k_node {k_node} must be smaller than the node count {j}")
    index = SpatialIndex(nodes.positions)
    ids, _ = index.query_k(nodes.positions, k_node + 1)
    rows = []
    cols = []
    for a in range(j):
        neigh = ids[a][ids[a] != a][:k_node]
        rows.append(np.full(len(neigh), a, dtype=np.int64))
        cols.append(neigh)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    # symmetrize: add the reversed edges, then de-duplicate
    all_rows = np.concatenate([rows, cols])
    all_cols = np.concatenate([cols, rows])
    keys = np.unique(all_rows * j + all_cols)
    out_rows = keys // j
    out_cols = keys % j
    indptr = np.zeros(j + 1, dtype=np.int64)
    np.add.at(indptr, out_rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return NodeAdjacency(indptr, out_cols)


class NodeTransformSet:
    """One rotation (about the node position) and translation per node; every
    rotation must be a proper rotation within 1e-9."""

    __slots__ = ("rotations", "translations")

    def __init__(self, rotations, translations):
        r = np.asarray(rotations, dtype=np.float64)
        t = np.asarray(translations, dtype=np.float64)
        if r.ndim != 3 or r.shape[1:] != (3, 3):
            raise InputError(f"rotations: expected shape (n, 3, 3), got {r.shape}")
        if t.shape != (r.shape[0], 3):
            raise InputError(f"translations: expected shape ({r.shape[0]}, 3), got {t.shape}")
        if not (np.isfinite(r).all() and np.isfinite(t).all()):
            raise InputError("node transforms must be finite")
        gram = np.einsum("jab,jac->jbc", r, r)
        ortho_err = np.abs(gram - np.eye(3)).max() if len(r) else 0.0
        det_err = np.abs(np.linalg.det(r) - 1.0).max() if len(r) else 0.0
        if ortho_err > ROTATION_TOL or det_err > ROTATION_TOL:
            raise InputError(
                f"node rotations leave SO(3): |R^T R - I| = {ortho_err:.3e}, "
                f"|det R - 1| = {det_err:.3e}"
            )
        self.rotations = _frozen(r, np.float64)
        self.translations = _frozen(t, np.float64)

    @classmethod
    def identity(cls, count):
        return cls(np.broadcast_to(np.eye(3), (count, 3, 3)), np.zeros((count, 3)))

    def __len__(self):
        return self.rotations.shape[0]


class DeformationGraph:
    """Nodes + symmetrized adjacency + per-source-vertex bindings."""

    __slots__ = ("nodes", "adjacency", "bindings", "k_influence")

    def __init__(self, nodes, adjacency, bindings, k_influence):
        if bindings.k_influence != k_influence:
            raise InputError(
                f"bindings carry k={bindings.k_influence}, expected {k_influence}"
            )
        if len(adjacency) != len(nodes):
            raise InputError("adjacency size does not match node count")
        self.nodes = nodes
        self.adjacency = adjacency
        self.bindings = bindings
        self.k_influence = int(k_influence)

    @property
    def node_count(self):
        return len(self.nodes)

    def __repr__(self):
        return (
            f"DeformationGraph({self.node_count} nodes, "
            f"{len(self.bindings)} bound points, k={self.k_influence})"
        )


def build_deformation_graph(source, node_count, k_influence, k_node, seed, method="uniform"):
    """Sample nodes on `source`, bind every source vertex, and link nodes."""
    if node_count < k_influence:
        raise InputError(
            f"node_count {node_count} must be at least k_influence {k_influence}"
        )
    nodes = sample_nodes(source, node_count, seed, method=method)
    bindings = bind_vertices(source, nodes, k_influence)
    adjacency = build_node_graph(nodes, k_node)
    return DeformationGraph(nodes, adjacency, bindings, k_influence)


def _blend(points, node_ids, weights, node_positions, rotations, translations):
    """Apply the node-anchored transform blend to raw arrays.

    Written as p + sum_k w_k * [(R_k - I)(p - n_k) + T_k], which equals the
    blend of R_k (p - n_k) + n_k + T_k because the weights sum to 1, but stays
    exact (not merely close) under identity transforms.
    """
    if len(points) == 0:
        return np.zeros((0, 3))
    local = points[:, None, :] - node_positions[node_ids]
    delta = (
        np.einsum("vkab,vkb->vka", rotations[node_ids] - np.eye(3), local)
        + translations[node_ids]
    )
    return points + np.einsum("vk,vka->va", weights, delta)


def deform_points(points, bindings, nodes, transforms):
    """Deform a cloud: each point is the weighted blend of its bound nodes'
    rotations about the node positions plus the nodes' translations."""
    cloud = points if isinstance(points, PointCloud) else PointCloud(points)
    if len(bindings) != len(cloud):
        raise InputError(
            f"binding count {len(bindings)} does not match point count {len(cloud)}"
        )
    if len(transforms) != len(nodes):
        raise InputError(
            f"transform count {len(transforms)} does not match node count {len(nodes)}"
        )
    out = _blend(
        cloud.points,
        bindings.node_ids,
        bindings.weights,
        nodes.positions,
        transforms.rotations,
        transforms.translations,
    )
    return PointCloud(out)


def transfer_landmarks(landmarks, nodes, transforms, k_influence):
    """Bind landmark positions to the nodes like vertices and push them through
    the deformation; names and order are preserved."""
    if len(transforms) != len(nodes):
        raise InputError(
            f"transform count {len(transforms)} does not match node count {len(nodes)}"
        )
    if len(landmarks) == 0:
        return LandmarkSet((), np.zeros((0, 3)))
    bindings = bind_vertices(landmarks.positions, nodes, k_influence)
    moved = _blend(
        landmarks.positions,
        bindings.node_ids,
        bindings.weights,
        nodes.positions,
        transforms.rotations,
        transforms.translations,
    )
    return LandmarkSet(landmarks.names, moved)
