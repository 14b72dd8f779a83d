"""Pure-numpy Gauss-Seidel node sweep: the fallback backend for the block
solver hot loop. Semantics are mirrored exactly by the compiled extension in
`_native.pyx`; `tests/test_backends.py` holds the two to each other.

Each node update gathers every energy term the node touches into the weighted
residual form  beta * |gamma * R p + gamma * T - q|^2 :

  alignment   (per bound vertex with a correspondence)
      gamma = w, p = v - n_j, q = c - w n_j - (rest of the vertex blend)
  smoothness, node rotating toward neighbor m
      gamma = 1, p = n_m - n_j, q = n_m + T_m - n_j
  smoothness, node pulled by neighbor k's influence
      gamma = 1, p = 0,         q = R_k (n_j - n_k) + n_k + T_k - n_j

Translation is eliminated in closed form (T = mu_v - R mu_y), the rotation
comes from the SVD of the centered cross-covariance, and a candidate is only
committed when its local energy does not exceed the incumbent's.
"""

from __future__ import annotations

import numpy as np

from .geometry import rotation_from_cross_covariance

__all__ = ["node_terms", "sweep_nodes"]


def node_terms(j, src, nodes, bind_w, nv_indptr, nv_verts, nv_slots,
               adj_indptr, adj_indices, corr_tgt, corr_mask, alpha, R, T, D):
    """Gather (beta, gamma, p, q) for every energy term touching node j."""
    n_j = nodes[j]
    lo, hi = nv_indptr[j], nv_indptr[j + 1]
    vs = nv_verts[lo:hi]
    slots = nv_slots[lo:hi]
    wv = bind_w[vs, slots]
    p_all = src[vs] - n_j
    mask = corr_mask[vs].astype(bool)

    wa = wv[mask]
    pa = p_all[mask]
    va = vs[mask]
    # remove node j's own contribution from the cached blend, leaving the
    # fixed remainder contributed by the other bound nodes
    contrib = wa[:, None] * (pa @ R[j].T + n_j + T[j])
    qa = corr_tgt[va] - wa[:, None] * n_j - (D[va] - contrib)

    ks = adj_indices[adj_indptr[j]:adj_indptr[j + 1]]
    pb = nodes[ks] - n_j
    qb = nodes[ks] + T[ks] - n_j
    i_k = np.einsum("kab,kb->ka", R[ks], n_j - nodes[ks]) + nodes[ks] + T[ks]
    qc = i_k - n_j

    deg = len(ks)
    beta = np.concatenate([np.full(len(wa), alpha), np.ones(2 * deg)])
    gamma = np.concatenate([wa, np.ones(2 * deg)])
    p = np.concatenate([pa, pb, np.zeros((deg, 3))])
    q = np.concatenate([qa, qb, qc])
    return beta, gamma, p, q


def _local_energy(beta, gamma, p, q, rot, trans):
    res = gamma[:, None] * (p @ rot.T) + gamma[:, None] * trans - q
    return float(beta @ (res * res).sum(axis=1))


def sweep_nodes(order, src, nodes, bind_w, nv_indptr, nv_verts, nv_slots,
                adj_indptr, adj_indices, corr_tgt, corr_mask, alpha, R, T, D):
    """Run one Gauss-Seidel pass over `order`, updating R, T and the cached
    deformed positions D in place. Returns (accepted, skipped) counts."""
    accepted = 0
    skipped = 0
    for j in order:
        beta, gamma, p, q = node_terms(
            j, src, nodes, bind_w, nv_indptr, nv_verts, nv_slots,
            adj_indptr, adj_indices, corr_tgt, corr_mask, alpha, R, T, D,
        )
        bg2 = beta * gamma * gamma
        s = float(bg2.sum())
        if s <= 0.0:
            skipped += 1
            continue
        a = bg2 @ p
        b = (beta * gamma) @ q
        m1 = ((beta * gamma)[:, None] * p).T @ q
        h = m1 - np.outer(a, b) / s
        r_new, _ = rotation_from_cross_covariance(h)
        t_new = b / s - r_new @ (a / s)
        l_inc = _local_energy(beta, gamma, p, q, R[j], T[j])
        l_new = _local_energy(beta, gamma, p, q, r_new, t_new)
        if np.isfinite(l_new) and l_new <= l_inc:
            lo, hi = nv_indptr[j], nv_indptr[j + 1]
            vs = nv_verts[lo:hi]
            wv = bind_w[vs, nv_slots[lo:hi]]
            p_all = src[vs] - nodes[j]
            D[vs] += wv[:, None] * (p_all @ (r_new - R[j]).T + (t_new - T[j]))
            R[j] = r_new
            T[j] = t_new
            accepted += 1
    return accepted, skipped
