"""Deterministic synthetic fixtures: a foot-like closed surface with named
landmarks, a smooth quadratic bend, and random rigid motions. Used by the test
suite and the backend benchmark; no scanner data is required to exercise the
pipeline end to end."""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud, RigidTransform, TriMesh, axis_angle_rotation, bbox_diagonal
from .model_io import LandmarkSet

__all__ = [
    "foot_mesh",
    "foot_landmarks",
    "quadratic_bend",
    "sample_rigid_transform",
]

# half-axes of the base ellipsoid (mm): foot-ish proportions, ~240 mm long
_HALF_AXES = (120.0, 42.0, 36.0)


def _foot_surface(theta, phi):
    """Map spherical parameters onto the foot surface.

    theta in (0, pi) runs from the toe pole to the heel pole along +x -> -x;
    phi in [0, 2pi) wraps around. The base ellipsoid is tapered toward the
    heel, flattened into a sole underneath, the toe box is bent down, and a
    side bump breaks the remaining mirror symmetry.
    """
    a, b, c = _HALF_AXES
    x = a * np.cos(theta)
    # taper: narrower toward the heel (x < 0), fuller at the forefoot
    girth = 1.0 + 0.18 * np.tanh(x / (0.45 * a))
    y = b * girth * np.sin(theta) * np.cos(phi)
    z = c * girth * np.sin(theta) * np.sin(phi)
    # flat-ish sole: compress everything below the midline
    z = np.where(z < 0.0, 0.45 * z, z)
    # bent toe box: curl the front of the foot downward, quadratically in x
    front = np.clip(x / a - 0.35, 0.0, None)
    z = z - 0.9 * c * front**2
    # side bump (bunion-like) kills the y -> -y mirror symmetry
    bump = 0.22 * b * np.exp(-(((x - 0.38 * a) / (0.22 * a)) ** 2 + (z / (0.8 * c)) ** 2))
    y = y + bump * (1.0 / (1.0 + np.exp(-y / (0.25 * b))))
    return np.stack([x, y, z], axis=-1)


def foot_mesh(n_theta=71, n_phi=70):
    """Closed triangulated foot-like surface with ~n_theta*n_phi + 2 vertices
    (defaults give 4,972), centered on its vertex centroid."""
    thetas = np.linspace(0.0, np.pi, n_theta + 2)[1:-1]
    phis = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    ring_pts = _foot_surface(tt.ravel(), pp.ravel())
    toe = _foot_surface(np.array([1e-6]), np.array([0.0]))[0]
    heel = _foot_surface(np.array([np.pi - 1e-6]), np.array([0.0]))[0]
    verts = np.vstack([ring_pts, toe, heel])

    def ring(i, j):
        return i * n_phi + (j % n_phi)

    faces = []
    for i in range(n_theta - 1):
        for j in range(n_phi):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    toe_id = n_theta * n_phi
    heel_id = toe_id + 1
    for j in range(n_phi):
        faces.append((toe_id, ring(0, j + 1), ring(0, j)))
        faces.append((heel_id, ring(n_theta - 1, j), ring(n_theta - 1, j + 1)))
    verts = verts - verts.mean(axis=0)
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


def foot_landmarks(mesh=None, count=21):
    """Named landmarks on the foot surface at fixed parametric positions
    (between grid vertices, so they are not mesh vertices). When `mesh` is
    given they are shifted by the same centering applied to its vertices."""
    rng = np.random.default_rng(2021)
    thetas = rng.uniform(0.12 * np.pi, 0.88 * np.pi, size=count)
    phis = rng.uniform(0.0, 2.0 * np.pi, size=count)
    pts = _foot_surface(thetas, phis)
    if mesh is None:
        mesh = foot_mesh()
    # reproduce the centering used by foot_mesh for the default resolution
    pts = pts - _uncentered_mean()
    names = [f"lm_{i + 1:02d}" for i in range(count)]
    return LandmarkSet(names, pts)


def _uncentered_mean(n_theta=71, n_phi=70):
    thetas = np.linspace(0.0, np.pi, n_theta + 2)[1:-1]
    phis = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    ring_pts = _foot_surface(tt.ravel(), pp.ravel())
    toe = _foot_surface(np.array([1e-6]), np.array([0.0]))[0]
    heel = _foot_surface(np.array([np.pi - 1e-6]), np.array([0.0]))[0]
    return np.vstack([ring_pts, toe, heel]).mean(axis=0)


def quadratic_bend(points, reference_cloud, max_fraction=0.05):
    """Displace points by a quadratic-in-x vertical bend whose largest
    displacement over `reference_cloud` is `max_fraction` of its bbox diagonal.
    Returns a new array; apply to meshes and landmarks alike."""
    ref = reference_cloud.points if isinstance(reference_cloud, PointCloud) else reference_cloud
    pts = np.asarray(points, dtype=np.float64)
    diag = bbox_diagonal(ref)
    x0 = ref[:, 0].min()
    span = ref[:, 0].max() - x0
    peak = max_fraction * diag
    out = pts.copy()
    out[:, 2] += peak * ((pts[:, 0] - x0) / span) ** 2
    return out


def sample_rigid_transform(rng, max_angle, max_translation):
    """Random rigid motion: uniform axis, angle in (0, max_angle], translation
    uniform in the ball of radius max_translation."""
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    angle = rng.uniform(0.0, 1.0) * max_angle
    direction = rng.normal(size=3)
    direction /= max(np.linalg.norm(direction), 1e-12)
    radius = max_translation * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
    return RigidTransform(axis_angle_rotation(axis, angle), radius * direction)
