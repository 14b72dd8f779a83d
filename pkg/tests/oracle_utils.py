"""Independent brute-force oracle for the per-node block solve.

Everything here is transcribed directly from the deformation and energy
definitions (blend of node-anchored transforms; closest-pair squared
distances; per-link influence disagreement) and shares no code with the
solver's gather/closed-form machinery. The translation is eliminated per
candidate rotation by completing the square of the quadratic (every residual
is linear in T with a scalar coefficient, so the Hessian is isotropic).
"""

import numpy as np
from scipy.optimize import minimize

from defmark.geometry import axis_angle_rotation


class BlockObjective:
    """E_total as a function of one node's (rotation, translation), all other
    nodes held fixed."""

    def __init__(self, graph, transforms, corr, source, target, alpha, j):
        self.alpha = float(alpha)
        ids = graph.bindings.node_ids
        w = graph.bindings.weights
        pos = graph.nodes.positions
        rot = transforms.rotations
        tr = transforms.translations
        src = source.points
        tgt = target.points
        n_j = pos[j]

        # --- alignment rows: deformed vertex,  blend with node j's slot split out
        sv = corr.source_ids
        c = tgt[corr.target_ids]
        vb = src[sv]
        idsb = ids[sv]
        wb = w[sv]
        local = vb[:, None, :] - pos[idsb]
        moved = np.einsum("vkab,vkb->vka", rot[idsb], local) + pos[idsb] + tr[idsb]
        jmask = idsb == j
        base = np.einsum("vk,vka->va", np.where(jmask, 0.0, wb), moved)
        wj = np.where(jmask, wb, 0.0).sum(axis=1)
        movable = wj > 0.0
        # constant part of E_align: matched vertices not influenced by node j
        fixed_res = base[~movable] - c[~movable]
        self.const = self.alpha * float((fixed_res**2).sum())
        self.a_kappa = wj[movable]
        self.a_p = vb[movable] - n_j
        self.a_a0 = base[movable] + self.a_kappa[:, None] * n_j - c[movable]

        # --- smoothness rows over the stored directed links
        adj = graph.adjacency
        s_kappa = []
        s_p = []
        s_a0 = []
        for a in range(len(adj)):
            for b in adj.neighbors(a):
                if a != j and b != j:
                    i_a = pos[a] + tr[a]
                    i_b = rot[b] @ (pos[a] - pos[b]) + pos[b] + tr[b]
                    self.const += float(((i_a - i_b) ** 2).sum())
                elif a == j:
                    i_b = rot[b] @ (n_j - pos[b]) + pos[b] + tr[b]
                    s_kappa.append(1.0)
                    s_p.append(np.zeros(3))
                    s_a0.append(n_j - i_b)
                else:  # b == j
                    s_kappa.append(1.0)
                    s_p.append(pos[a] - n_j)
                    s_a0.append(-(pos[a] + tr[a] - n_j))
        s_kappa = np.asarray(s_kappa) if s_kappa else np.zeros(0)
        s_p = np.asarray(s_p) if s_p else np.zeros((0, 3))
        s_a0 = np.asarray(s_a0) if s_a0 else np.zeros((0, 3))
        # merge alignment and smoothness rows: beta carries the energy weight
        self.beta = np.concatenate([np.full(len(self.a_kappa), self.alpha), np.ones(len(s_kappa))])
        self.kappa = np.concatenate([self.a_kappa, s_kappa])
        self.p = np.concatenate([self.a_p, s_p])
        self.a0 = np.concatenate([self.a_a0, s_a0])
        # total quadratic coefficient of |T|^2 (isotropic)
        self.q2 = float((self.beta * self.kappa**2).sum())

    def _residuals_at_zero(self, rots):
        """Per-term residual vectors at T = 0 for a batch of rotations."""
        return (
            self.kappa[None, :, None] * np.einsum("gab,tb->gta", rots, self.p)
            + self.a0[None, :, :]
        )

    def energy(self, rot, trans):
        """E_total at one explicit (rotation, translation)."""
        res = self._residuals_at_zero(rot[None])[0] + np.outer(self.kappa, trans)
        return self.const + float(self.beta @ (res**2).sum(axis=1))

    def best_translation_energy(self, rots):
        """Minimum over T (by completing the square) for a batch of rotations.

        Returns (energies, translations) of shape (g,), (g, 3).
        """
        u = self._residuals_at_zero(rots)
        e0 = self.const + np.einsum("t,gta,gta->g", self.beta, u, u)
        gvec = np.einsum("t,gta->ga", self.beta * self.kappa, u)
        if self.q2 <= 0.0:
            return e0, np.zeros((len(rots), 3))
        t_best = -gvec / self.q2
        e_best = e0 - (gvec**2).sum(axis=1) / self.q2
        return e_best, t_best


def axis_angle_grid(step_deg):
    """All axis-angle vectors on a cubic grid inside the |theta| <= pi ball."""
    axis = np.deg2rad(np.arange(-180.0, 180.0 + 1e-9, step_deg))
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    vecs = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return vecs[np.linalg.norm(vecs, axis=1) <= np.pi + 1e-12]


def rotvecs_to_matrices(vecs):
    """Batched Rodrigues formula; the zero vector maps to the identity."""
    angles = np.linalg.norm(vecs, axis=1)
    safe = np.where(angles > 0.0, angles, 1.0)
    u = vecs / safe[:, None]
    zeros = np.zeros(len(vecs))
    k = np.stack(
        [
            np.stack([zeros, -u[:, 2], u[:, 1]], axis=1),
            np.stack([u[:, 2], zeros, -u[:, 0]], axis=1),
            np.stack([-u[:, 1], u[:, 0], zeros], axis=1),
        ],
        axis=1,
    )
    kk = np.einsum("gij,gjk->gik", k, k)
    sin = np.sin(angles)[:, None, None]
    cos1 = (1.0 - np.cos(angles))[:, None, None]
    return np.eye(3)[None, :, :] + sin * k + cos1 * kk


def brute_force_minimum(objective, step_deg, chunk=100_000, refine=True):
    """Dense axis-angle grid search with per-rotation optimal translation,
    then local refinement. Returns (energy, rotation, translation)."""
    grid = axis_angle_grid(step_deg)
    best_e = np.inf
    best_vec = np.zeros(3)
    best_t = np.zeros(3)
    for lo in range(0, len(grid), chunk):
        vecs = grid[lo:lo + chunk]
        energies, trans = objective.best_translation_energy(rotvecs_to_matrices(vecs))
        i = int(np.argmin(energies))
        if energies[i] < best_e:
            best_e = float(energies[i])
            best_vec = vecs[i]
            best_t = trans[i]
    if refine:
        def f(x):
            ang = np.linalg.norm(x[:3])
            rot = np.eye(3) if ang == 0.0 else axis_angle_rotation(x[:3], ang)
            return objective.energy(rot, x[3:])

        res = minimize(
            f,
            np.concatenate([best_vec, best_t]),
            method="Nelder-Mead",
            options={"maxiter": 2000, "xatol": 1e-10, "fatol": 1e-12},
        )
        if res.fun < best_e:
            best_e = float(res.fun)
            best_vec = res.x[:3]
            best_t = res.x[3:]
    ang = np.linalg.norm(best_vec)
    rot = np.eye(3) if ang == 0.0 else axis_angle_rotation(best_vec, ang)
    return best_e, rot, best_t
