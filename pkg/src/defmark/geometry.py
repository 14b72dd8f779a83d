"""Core 3D primitives: point clouds, triangle meshes, rigid transforms, exact
nearest-neighbor search and the weighted SVD rotation solver shared by the
rigid initializer and the non-rigid block solver.

Units are millimetres throughout. Every wrapped array is copied and marked
read-only, so all objects here are immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import InputError, NumericalError

__all__ = [
    "PointCloud",
    "TriMesh",
    "RigidTransform",
    "SpatialIndex",
    "as_points",
    "as_point3",
    "axis_angle_rotation",
    "bbox_diagonal",
    "effective_rank",
    "kabsch_rotation",
    "rotation_from_cross_covariance",
]

# Orthogonality / determinant slack accepted for a proper rotation.
ROTATION_TOL = 1e-9
# Singular values below this fraction of the largest count as zero.
RANK_REL_TOL = 1e-12


def as_points(arr, what="points", allow_empty=False):
    """Return `arr` as a C-contiguous (n, 3) float64 array, validating finiteness."""
    pts = np.asarray(arr, dtype=np.float64)
    if pts.size == 0:
        if not allow_empty:
            raise InputError(f"{what}: need at least one point")
        return np.zeros((0, 3), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"{what}: expected shape (n, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise InputError(f"{what}: coordinates must be finite (no NaN/Inf)")
    return np.ascontiguousarray(pts)


def as_point3(p, what="point"):
    """Return `p` as a (3,) float64 array, validating finiteness."""
    v = np.asarray(p, dtype=np.float64).reshape(-1)
    if v.shape != (3,):
        raise InputError(f"{what}: expected 3 components, got shape {np.shape(p)}")
    if not np.isfinite(v).all():
        raise InputError(f"{what}: components must be finite")
    return v


def _frozen(arr):
    out = np.array(arr, dtype=arr.dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


class PointCloud:
    """Ordered, immutable set of 3D points with dense indices 0..n-1."""

    __slots__ = ("points",)

    def __init__(self, points):
        self.points = _frozen(as_points(points, "point cloud"))

    def __len__(self):
        return self.points.shape[0]

    def __repr__(self):
        return f"PointCloud({len(self)} points)"


class TriMesh:
    """Triangle mesh: a PointCloud plus integer faces. Faces may be empty."""

    __slots__ = ("vertices", "faces")

    def __init__(self, vertices, faces=None):
        self.vertices = vertices if isinstance(vertices, PointCloud) else PointCloud(vertices)
        if faces is None or len(faces) == 0:
            f = np.zeros((0, 3), dtype=np.int64)
        else:
            f = np.asarray(faces, dtype=np.int64)
            if f.ndim != 2 or f.shape[1] != 3:
                raise InputError(f"faces: expected shape (m, 3), got {f.shape}")
            if f.min() < 0 or f.max() >= len(self.vertices):
                raise InputError(
                    f"faces reference vertex indices outside 0..{len(self.vertices) - 1}"
                )
        self.faces = _frozen(np.ascontiguousarray(f))

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def face_count(self):
        return self.faces.shape[0]

    def __repr__(self):
        return f"TriMesh({self.vertex_count} vertices, {self.face_count} faces)"


class RigidTransform:
    """Proper rigid motion p -> R p + t. Construction validates R in SO(3)."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        r = np.asarray(rotation, dtype=np.float64)
        t = as_point3(translation, "translation")
        if r.shape != (3, 3):
            raise InputError(f"rotation: expected shape (3, 3), got {r.shape}")
        if not np.isfinite(r).all():
            raise InputError("rotation: entries must be finite")
        ortho_err = np.abs(r.T @ r - np.eye(3)).max()
        det_err = abs(np.linalg.det(r) - 1.0)
        if ortho_err > ROTATION_TOL or det_err > ROTATION_TOL:
            raise InputError(
                f"rotation is not in SO(3): |R^T R - I| = {ortho_err:.3e}, "
                f"|det R - 1| = {det_err:.3e}"
            )
        self.rotation = _frozen(np.ascontiguousarray(r))
        self.translation = _frozen(t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Apply to a (n, 3) array or a single (3,) point; returns the same shape."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other):
        """Transform equal to applying `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __repr__(self):
        return f"RigidTransform(t={np.array2string(self.translation, precision=3)})"


def bbox_diagonal(cloud):
    """Length of the axis-aligned bounding-box diagonal of a cloud (mm)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud, "cloud")
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


class SpatialIndex:
    """Exact nearest-neighbor index over a point-cloud snapshot.

    Results are identical to an exhaustive scan: sorted ascending by Euclidean
    distance, ties broken by the lower point index. A k-d tree generates
    candidates; distances are recomputed with the same arithmetic a brute-force
    scan would use, and boundary ties fall back to a radius query so no tied
    point can be missed.
    """

    __slots__ = ("_points", "_tree")

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else as_points(cloud, "cloud")
        self._points = _frozen(pts)
        self._tree = cKDTree(self._points)

    def __len__(self):
        return self._points.shape[0]

    def query_k(self, queries, k):
        """k nearest indexed points for each query row.

        Returns (ids, distances), both (n_queries, k), rows sorted by
        (distance, id).
        """
        q = as_points(queries, "queries", allow_empty=True)
        n = len(self)
        if k < 1:
            raise InputError(f"k must be >= 1, got {k}")
        if k > n:
            raise InputError(f"k={k} exceeds the {n} points held by the index")
        if len(q) == 0:
            return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
        kq = min(n, k + 1)
        _, cand = self._tree.query(q, k=kq)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(q), kq)
        if cand.max() >= n:  # scipy's missing-neighbor sentinel: distances overflowed
            raise NumericalError(
                "nearest-neighbor search failed: coordinates too large to measure"
            )
        d = np.sqrt(((self._points[cand] - q[:, None, :]) ** 2).sum(axis=2))
        order = np.lexsort((cand, d), axis=-1)
        rows = np.arange(len(q))[:, None]
        cand = cand[rows, order]
        d = d[rows, order]
        ids = np.ascontiguousarray(cand[:, :k])
        dist = np.ascontiguousarray(d[:, :k])
        if kq > k:
            # A tie across the k-th/(k+1)-th boundary needs every point at that
            # radius before the id tie-break can pick the right ones.
            for r in np.nonzero(d[:, k - 1] == d[:, k])[0]:
                ids[r], dist[r] = self._resolve_boundary_tie(q[r], d[r, k - 1], k)
        return ids, dist

    def _resolve_boundary_tie(self, query, radius, k):
        cand = np.asarray(
            self._tree.query_ball_point(query, radius * (1.0 + 1e-12)), dtype=np.int64
        )
        if len(cand) < k:  # fp disagreement at the radius boundary: scan everything
            cand = np.arange(len(self), dtype=np.int64)
        d = np.sqrt(((self._points[cand] - query) ** 2).sum(axis=1))
        order = np.lexsort((cand, d))[:k]
        return cand[order], d[order]

    def k_nearest(self, query, k):
        """k nearest points to a single query, as a list of (id, distance)."""
        ids, dist = self.query_k(as_point3(query, "query")[None, :], k)
        return list(zip(ids[0].tolist(), dist[0].tolist()))

    def nearest(self, query):
        """(id, distance) of the closest indexed point to `query`."""
        return self.k_nearest(query, 1)[0]

    def query_nearest(self, queries):
        """Closest indexed point per query row; returns (ids, distances)."""
        ids, dist = self.query_k(queries, 1)
        return ids[:, 0], dist[:, 0]


def effective_rank(matrix, rel_tol=RANK_REL_TOL):
    """Number of singular values above rel_tol times the largest."""
    s = np.linalg.svd(np.asarray(matrix, dtype=np.float64), compute_uv=False)
    if s[0] <= 0.0:
        return 0
    return int((s >= rel_tol * s[0]).sum())


def rotation_from_cross_covariance(h):
    """Proper rotation R maximizing trace(H @ R) for a 3x3 cross-covariance H.

    Computed from the SVD of H^T with the smallest singular direction flipped
    when needed, so det(R) = +1 even for mirrored/planar inputs. A rank-0 H
    has no preferred rotation: returns (identity, True).
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise InputError(f"cross-covariance: expected shape (3, 3), got {h.shape}")
    if not np.isfinite(h).all():
        raise NumericalError("cross-covariance accumulated non-finite entries")
    u, s, vt = np.linalg.svd(h.T)
    if s[0] <= 0.0:
        return np.eye(3), True
    flip = 1.0 if np.linalg.det(u @ vt) > 0.0 else -1.0
    r = (u * np.array([1.0, 1.0, flip])) @ vt
    return r, False


def kabsch_rotation(source, target, weights=None):
    """Optimal proper rotation for weighted, pre-centered point pairs.

    Maximizes sum_i w_i * target_i . (R source_i), i.e. trace(H R) with
    H = sum_i w_i source_i target_i^T. Centroid subtraction is the caller's
    job; this routine uses the pairs as given. Returns (R, degenerate) where
    `degenerate` marks a rank-0 accumulation (R is then the identity).
    """
    s = as_points(source, "source pairs")
    t = as_points(target, "target pairs")
    if len(s) != len(t):
        raise InputError(f"pair count mismatch: {len(s)} source vs {len(t)} target")
    if weights is None:
        w = np.ones(len(s))
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != len(s):
            raise InputError(f"weights: expected {len(s)} values, got {w.shape[0]}")
        if not np.isfinite(w).all() or (w < 0).any():
            raise InputError("weights must be finite and non-negative")
    if not (w > 0).any():
        raise InputError("need at least one pair with positive weight")
    h = (s * w[:, None]).T @ t
    return rotation_from_cross_covariance(h)


def axis_angle_rotation(axis, angle):
    """Rotation matrix for a right-handed rotation of `angle` radians about `axis`."""
    a = as_point3(axis, "axis")
    norm = np.linalg.norm(a)
    if norm == 0.0:
        raise InputError("rotation axis must be non-zero")
    x, y, z = a / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
