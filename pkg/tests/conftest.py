import numpy as np
import pytest

from defmark import synthetic


@pytest.fixture(scope="session")
def foot():
    """Full-size foot fixture (~5k vertices) with 21 landmarks."""
    mesh = synthetic.foot_mesh()
    landmarks = synthetic.foot_landmarks(mesh)
    return mesh, landmarks


@pytest.fixture(scope="session")
def small_foot():
    """Reduced foot fixture (~930 vertices) for fast unit tests."""
    mesh = synthetic.foot_mesh(31, 30)
    landmarks = synthetic.foot_landmarks(mesh)
    return mesh, landmarks


def brute_force_knn(points, query, k):
    """Reference k-NN: full scan, sorted by (distance, index)."""
    d = np.sqrt(((points - query) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(points)), d))[:k]
    return order, d[order]


def rotation_angle(r_a, r_b=None):
    """Angle (rad) of the relative rotation between two matrices."""
    rel = r_a if r_b is None else r_a @ r_b.T
    return float(np.arccos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)))
