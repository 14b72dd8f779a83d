# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Gauss-Seidel node sweep (hot loop of the non-rigid solver).

Semantics mirror `defmark._native_py.sweep_nodes` exactly: same term gather,
same closed-form block update (translation elimination + SVD rotation via
LAPACK dgesvd), same incumbent protection rule. `tests/test_backends.py`
holds the two implementations to each other.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport isfinite
from scipy.linalg.cython_lapack cimport dgesvd

ctypedef cnp.int64_t i64


cdef inline double _det3(const double* m) noexcept nogil:
    # determinant is transpose-invariant, so buffer order does not matter
    return (
        m[0] * (m[4] * m[8] - m[5] * m[7])
        - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6])
    )


cdef int _rotation_from_h(const double* h, double* r_out) noexcept nogil:
    """R (row-major) maximizing trace(H R); returns 1 when H has rank 0 or the
    SVD fails (r_out is then the identity)."""
    cdef double a[9]
    cdef double s[3]
    cdef double u[9]
    cdef double vt[9]
    cdef double work[64]
    cdef int m = 3, n = 3, lda = 3, ldu = 3, ldvt = 3, lwork = 64, info = 0
    cdef int i, j, k
    cdef double flip, ck
    for i in range(9):
        a[i] = h[i]
    # a holds H row-major; LAPACK reads it column-major, i.e. as H^T
    dgesvd("A", "A", &m, &n, a, &lda, s, u, &ldu, vt, &ldvt, work, &lwork, &info)
    if info != 0 or s[0] <= 0.0:
        for i in range(9):
            r_out[i] = 0.0
        r_out[0] = r_out[4] = r_out[8] = 1.0
        return 1
    flip = 1.0 if _det3(u) * _det3(vt) > 0.0 else -1.0
    # u/vt buffers are column-major: U[i][k] = u[k*3+i], VT[k][j] = vt[j*3+k]
    for i in range(3):
        for j in range(3):
            r_out[i * 3 + j] = 0.0
            for k in range(3):
                ck = flip if k == 2 else 1.0
                r_out[i * 3 + j] += u[k * 3 + i] * ck * vt[j * 3 + k]
    return 0


cdef inline double _local_energy(
    const double* beta, const double* gam,
    const double* ps, const double* qs, Py_ssize_t count,
    const double* r, const double* t,
) noexcept nogil:
    cdef double e = 0.0, g, rx, ry, rz
    cdef Py_ssize_t i
    cdef const double* p
    cdef const double* q
    for i in range(count):
        g = gam[i]
        p = ps + 3 * i
        q = qs + 3 * i
        rx = g * (r[0] * p[0] + r[1] * p[1] + r[2] * p[2]) + g * t[0] - q[0]
        ry = g * (r[3] * p[0] + r[4] * p[1] + r[5] * p[2]) + g * t[1] - q[1]
        rz = g * (r[6] * p[0] + r[7] * p[1] + r[8] * p[2]) + g * t[2] - q[2]
        e += beta[i] * (rx * rx + ry * ry + rz * rz)
    return e


def sweep_nodes(
    const i64[::1] order,
    const double[:, ::1] src,
    const double[:, ::1] nodes,
    const double[:, ::1] bind_w,
    const i64[::1] nv_indptr,
    const i64[::1] nv_verts,
    const i64[::1] nv_slots,
    const i64[::1] adj_indptr,
    const i64[::1] adj_indices,
    const double[:, ::1] corr_tgt,
    const cnp.uint8_t[::1] corr_mask,
    double alpha,
    double[:, :, ::1] R,
    double[:, ::1] T,
    double[:, ::1] D,
):
    """One Gauss-Seidel pass over `order`; updates R, T and the cached deformed
    positions D in place. Returns (accepted, skipped)."""
    cdef Py_ssize_t n_nodes = nodes.shape[0]
    cdef i64 max_terms = 1
    cdef Py_ssize_t jj
    for jj in range(n_nodes):
        if (nv_indptr[jj + 1] - nv_indptr[jj]) + 2 * (adj_indptr[jj + 1] - adj_indptr[jj]) > max_terms:
            max_terms = (nv_indptr[jj + 1] - nv_indptr[jj]) + 2 * (adj_indptr[jj + 1] - adj_indptr[jj])
    beta_arr = np.empty(max_terms, dtype=np.float64)
    gam_arr = np.empty(max_terms, dtype=np.float64)
    ps_arr = np.empty((max_terms, 3), dtype=np.float64)
    qs_arr = np.empty((max_terms, 3), dtype=np.float64)
    cdef double[::1] beta = beta_arr
    cdef double[::1] gam = gam_arr
    cdef double[:, ::1] ps = ps_arr
    cdef double[:, ::1] qs = qs_arr

    cdef Py_ssize_t oi, ii, ee, i0, i1, e0, e1, t_count
    cdef i64 j, v, slot, k
    cdef int d, r_, c_, degen
    cdef double w, aw, aw2, s_mass, l_inc, l_new
    cdef double p[3]
    cdef double q[3]
    cdef double rp[3]
    cdef double acc_a[3]
    cdef double acc_b[3]
    cdef double m1[9]
    cdef double h[9]
    cdef double rc[9]
    cdef double tc[3]
    cdef double mu_y[3]
    cdef double dkj[3]
    cdef double delta[3]
    cdef double r_old[9]
    cdef double t_old[3]
    cdef int accepted = 0, skipped = 0

    with nogil:
        for oi in range(order.shape[0]):
            j = order[oi]
            i0 = nv_indptr[j]
            i1 = nv_indptr[j + 1]
            e0 = adj_indptr[j]
            e1 = adj_indptr[j + 1]
            s_mass = 0.0
            for d in range(3):
                acc_a[d] = 0.0
                acc_b[d] = 0.0
            for r_ in range(9):
                m1[r_] = 0.0
            t_count = 0
            for r_ in range(3):
                for c_ in range(3):
                    r_old[r_ * 3 + c_] = R[j, r_, c_]
                t_old[r_] = T[j, r_]

            # alignment terms: bound vertices carrying a correspondence
            for ii in range(i0, i1):
                v = nv_verts[ii]
                if corr_mask[v] == 0:
                    continue
                slot = nv_slots[ii]
                w = bind_w[v, slot]
                for d in range(3):
                    p[d] = src[v, d] - nodes[j, d]
                for r_ in range(3):
                    rp[r_] = (
                        r_old[r_ * 3] * p[0]
                        + r_old[r_ * 3 + 1] * p[1]
                        + r_old[r_ * 3 + 2] * p[2]
                    )
                for d in range(3):
                    # remove node j's own contribution from the cached blend
                    q[d] = corr_tgt[v, d] - w * nodes[j, d] - (
                        D[v, d] - w * (rp[d] + nodes[j, d] + t_old[d])
                    )
                aw = alpha * w
                aw2 = aw * w
                s_mass += aw2
                for d in range(3):
                    acc_a[d] += aw2 * p[d]
                    acc_b[d] += aw * q[d]
                for r_ in range(3):
                    for c_ in range(3):
                        m1[r_ * 3 + c_] += aw * p[r_] * q[c_]
                beta[t_count] = alpha
                gam[t_count] = w
                for d in range(3):
                    ps[t_count, d] = p[d]
                    qs[t_count, d] = q[d]
                t_count += 1

            # smoothness terms, both directions of every stored link
            for ee in range(e0, e1):
                k = adj_indices[ee]
                for d in range(3):
                    p[d] = nodes[k, d] - nodes[j, d]
                    q[d] = nodes[k, d] + T[k, d] - nodes[j, d]
                s_mass += 1.0
                for d in range(3):
                    acc_a[d] += p[d]
                    acc_b[d] += q[d]
                for r_ in range(3):
                    for c_ in range(3):
                        m1[r_ * 3 + c_] += p[r_] * q[c_]
                beta[t_count] = 1.0
                gam[t_count] = 1.0
                for d in range(3):
                    ps[t_count, d] = p[d]
                    qs[t_count, d] = q[d]
                t_count += 1
                # neighbor k's influence on node j's position: rotation-free term
                for d in range(3):
                    dkj[d] = nodes[j, d] - nodes[k, d]
                for r_ in range(3):
                    rp[r_] = (
                        R[k, r_, 0] * dkj[0]
                        + R[k, r_, 1] * dkj[1]
                        + R[k, r_, 2] * dkj[2]
                    )
                for d in range(3):
                    q[d] = rp[d] + nodes[k, d] + T[k, d] - nodes[j, d]
                s_mass += 1.0
                for d in range(3):
                    acc_b[d] += q[d]
                beta[t_count] = 1.0
                gam[t_count] = 1.0
                for d in range(3):
                    ps[t_count, d] = 0.0
                    qs[t_count, d] = q[d]
                t_count += 1

            if s_mass <= 0.0:
                skipped += 1
                continue

            for r_ in range(3):
                for c_ in range(3):
                    h[r_ * 3 + c_] = m1[r_ * 3 + c_] - acc_a[r_] * acc_b[c_] / s_mass
            degen = _rotation_from_h(h, rc)
            for d in range(3):
                mu_y[d] = acc_a[d] / s_mass
            for d in range(3):
                tc[d] = acc_b[d] / s_mass - (
                    rc[d * 3] * mu_y[0] + rc[d * 3 + 1] * mu_y[1] + rc[d * 3 + 2] * mu_y[2]
                )

            l_inc = _local_energy(&beta[0], &gam[0], &ps[0, 0], &qs[0, 0], t_count,
                                  r_old, t_old)
            l_new = _local_energy(&beta[0], &gam[0], &ps[0, 0], &qs[0, 0], t_count,
                                  rc, tc)
            if isfinite(l_new) and l_new <= l_inc:
                for ii in range(i0, i1):
                    v = nv_verts[ii]
                    slot = nv_slots[ii]
                    w = bind_w[v, slot]
                    for d in range(3):
                        p[d] = src[v, d] - nodes[j, d]
                    for r_ in range(3):
                        delta[r_] = (
                            (rc[r_ * 3] - r_old[r_ * 3]) * p[0]
                            + (rc[r_ * 3 + 1] - r_old[r_ * 3 + 1]) * p[1]
                            + (rc[r_ * 3 + 2] - r_old[r_ * 3 + 2]) * p[2]
                            + (tc[r_] - t_old[r_])
                        )
                    for d in range(3):
                        D[v, d] += w * delta[d]
                for r_ in range(3):
                    for c_ in range(3):
                        R[j, r_, c_] = rc[r_ * 3 + c_]
                    T[j, r_] = tc[r_]
                accepted += 1
    return accepted, skipped
