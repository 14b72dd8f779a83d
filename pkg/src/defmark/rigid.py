"""Global rigid pre-alignment of the source model onto the target via
rigid-mode coherent point drift.

The target cloud is treated as draws from a Gaussian mixture centered on the
(rigidly transformed) source points plus a uniform outlier component. EM
alternates soft correspondences (E-step) with a closed-form weighted rigid fit
(M-step) until the mixture variance stops changing.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometryError, InputError, NumericalError
from .geometry import (
    PointCloud,
    RigidTransform,
    bbox_diagonal,
    rotation_from_cross_covariance,
)

__all__ = ["CpdParams", "CpdResult", "apply_rigid", "rigid_cpd"]

# relative bbox^2 floor below which the mixture variance counts as collapsed
SIGMA2_FLOOR_FRACTION = 1e-12
# third singular value below this fraction of the first marks a coplanar cloud
COPLANAR_REL_TOL = 1e-9


@dataclass
class CpdParams:
    """Knobs for the rigid CPD initializer.

    outlier_weight: prior mass of the uniform outlier component, in [0, 1).
    subsample_cap: per-cloud point budget for the dense posterior (None = all).
    estimate_scale: also fit a global scale (off for strictly rigid scans).
    """

    outlier_weight: float = 0.1
    max_iterations: int = 100
    sigma_tolerance: float = 1e-6
    subsample_cap: int | None = 3000
    estimate_scale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.outlier_weight < 1.0:
            raise InputError(f"outlier_weight must be in [0, 1), got {self.outlier_weight}")
        if self.max_iterations < 1:
            raise InputError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.sigma_tolerance <= 0.0:
            raise InputError(f"sigma_tolerance must be > 0, got {self.sigma_tolerance}")
        if self.subsample_cap is not None and self.subsample_cap < 4:
            raise InputError(f"subsample_cap must be >= 4, got {self.subsample_cap}")


@dataclass
class CpdResult:
    """Fit result; `transform` maps source coordinates into target coordinates.
    `scale` is 1.0 unless scale estimation was requested."""

    transform: RigidTransform
    final_sigma2: float
    iterations_run: int
    converged: bool
    scale: float = 1.0
    nll_trace: list = field(default_factory=list)


def apply_rigid(cloud, transform):
    """Apply a rigid transform to every point of a cloud."""
    return PointCloud(transform.apply(cloud.points))


def _maybe_subsample(points, cap, seed):
    """Seeded uniform subsample whose indices also depend on the cloud content,
    so byte-identical clouds are thinned identically regardless of which
    argument slot they arrive in (keeps self-registration exact)."""
    if cap is None or len(points) <= cap:
        return points
    digest = hashlib.blake2b(points.tobytes(), digest_size=8).digest()
    rng = np.random.default_rng(
        np.random.SeedSequence([seed, int.from_bytes(digest, "little")])
    )
    idx = np.sort(rng.choice(len(points), size=cap, replace=False))
    return points[idx]


def _check_not_coplanar(points, label):
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[0] <= 0.0 or s[2] < COPLANAR_REL_TOL * s[0]:
        raise DegenerateGeometryError(
            f"{label} cloud is collinear/coplanar (singular values {s}); "
            f"rigid CPD needs non-coplanar geometry"
        )


def rigid_cpd(source, target, params=None, seed=0, track_likelihood=False):
    """Estimate the rigid transform aligning `source` onto `target`.

    Runs EM on the source-as-mixture model: posteriors of every target point
    against every transformed source point with uniform-outlier mixing, then a
    closed-form weighted rigid update and variance refresh. Stops when the
    relative variance change drops under sigma_tolerance, the variance
    collapses to the resolution floor, or max_iterations is hit.

    `track_likelihood` records the negative log-likelihood each iteration
    (an EM invariant: it never increases).
    """
    params = params if params is not None else CpdParams()
    y_full = source.points if isinstance(source, PointCloud) else np.asarray(source, float)
    x_full = target.points if isinstance(target, PointCloud) else np.asarray(target, float)
    y = _maybe_subsample(y_full, params.subsample_cap, seed)
    x = _maybe_subsample(x_full, params.subsample_cap, seed)
    m, n = len(y), len(x)
    if m < 4 or n < 4:
        raise InputError(f"rigid CPD needs >= 4 points per cloud, got {m} source / {n} target")
    _check_not_coplanar(y, "source")
    _check_not_coplanar(x, "target")

    # condition the EM: shift by the centroids and divide by one common spread,
    # which keeps the relation rigid (and any true scale drift intact) while
    # putting the mixture densities on a sane footing against the uniform
    # outlier component
    mu_x0 = x.mean(axis=0)
    mu_y0 = y.mean(axis=0)
    s_norm = math.sqrt(
        (((x - mu_x0) ** 2).sum() + ((y - mu_y0) ** 2).sum()) / (n + m)
    )
    x = (x - mu_x0) / s_norm
    y = (y - mu_y0) / s_norm

    w = params.outlier_weight
    sigma2_floor = SIGMA2_FLOOR_FRACTION * bbox_diagonal(x) ** 2
    # all-pairs mean squared distance via moments (no m*n intermediate)
    sum_x = x.sum(axis=0)
    sum_y = y.sum(axis=0)
    sigma2 = float(
        (m * (x * x).sum() + n * (y * y).sum() - 2.0 * sum_x @ sum_y) / (3.0 * m * n)
    )

    r = np.eye(3)
    t = np.zeros(3)
    scale = 1.0
    nll_trace = []
    converged = False
    iterations = 0
    x_sq = (x * x).sum(axis=1)
    for iterations in range(1, params.max_iterations + 1):
        yt = scale * (y @ r.T) + t
        # |yt - x|^2 via GEMM; cancellation can leave tiny negatives
        sqd = (yt * yt).sum(axis=1)[:, None] + x_sq[None, :] - 2.0 * (yt @ x.T)
        np.maximum(sqd, 0.0, out=sqd)
        sqd *= -1.0 / (2.0 * sigma2)
        with np.errstate(under="ignore"):
            p = np.exp(sqd, out=sqd)
        c = 0.0
        if w > 0.0:
            c = (2.0 * math.pi * sigma2) ** 1.5 * w / (1.0 - w) * m / n
        den = p.sum(axis=0) + c
        if track_likelihood:
            nll = float(
                -np.log(np.maximum(den, 1e-300)).sum()
                + n * (1.5 * math.log(2.0 * math.pi * sigma2) + math.log(m) - math.log1p(-w))
            )
            nll_trace.append(nll)
        if not (den > 0.0).all():
            raise NumericalError(
                "CPD posterior vanished for some target points "
                f"(sigma^2 = {sigma2:.3e}); clouds may be disjoint at this scale"
            )
        p /= den
        p_row = p.sum(axis=1)
        p_col = p.sum(axis=0)
        n_p = float(p_col.sum())
        if n_p <= 1e-12:
            raise NumericalError(
                "CPD assigned all target points to the outlier component; "
                "try a smaller outlier_weight or better pre-alignment"
            )
        mu_y = (p_row @ y) / n_p
        mu_x = (p_col @ x) / n_p
        yc = y - mu_y
        xc = x - mu_x
        h = yc.T @ (p @ xc)  # 3x3 posterior-weighted cross-covariance
        r_new, degenerate = rotation_from_cross_covariance(h)
        if degenerate:
            raise DegenerateGeometryError(
                "posterior-weighted geometry collapsed to rank 0 during CPD"
            )
        tr_hr = float(np.einsum("ij,ji->", h, r_new))
        s_xx = float(p_col @ (xc * xc).sum(axis=1))
        s_yy = float(p_row @ (yc * yc).sum(axis=1))
        if params.estimate_scale:
            scale = tr_hr / s_yy
            sigma2_new = (s_xx - scale * tr_hr) / (3.0 * n_p)
        else:
            scale = 1.0
            sigma2_new = (s_xx + s_yy - 2.0 * tr_hr) / (3.0 * n_p)
        r = r_new
        t = mu_x - scale * (r @ mu_y)
        sigma2_new = max(sigma2_new, 0.0)
        if sigma2_new < sigma2_floor:
            sigma2 = sigma2_new
            converged = True  # variance at resolution floor: clean convergence
            break
        if abs(sigma2_new - sigma2) / max(sigma2, 1e-300) < params.sigma_tolerance:
            sigma2 = sigma2_new
            converged = True
            break
        sigma2 = sigma2_new

    # undo the conditioning: x0 = s_norm * x' + mu_x0, y' = (y0 - mu_y0)/s_norm
    t_orig = s_norm * t + mu_x0 - scale * (r @ mu_y0)
    return CpdResult(
        transform=RigidTransform(r, t_orig),
        final_sigma2=float(sigma2 * s_norm * s_norm),
        iterations_run=iterations,
        converged=converged,
        scale=float(scale),
        nll_trace=nll_trace,
    )
