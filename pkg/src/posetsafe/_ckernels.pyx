# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled projection kernels; same contract as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.float cimport DBL_EPSILON

cnp.import_array()

cdef double EPS_NORM2 = 1e-18
cdef double ROUNDING_SLACK = 64 * DBL_EPSILON


def project_heads(A, c, orders, U, bint record=False):
    cdef double[:, :, ::1] a_v = np.ascontiguousarray(A, dtype=np.float64)
    cdef double[:, ::1] c_v = np.ascontiguousarray(c, dtype=np.float64)
    cdef long[:, ::1] o_v = np.ascontiguousarray(orders, dtype=np.int64)
    out = np.array(U, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] u_v = out
    cdef Py_ssize_t B = u_v.shape[0], H = u_v.shape[1], m = u_v.shape[2]
    cdef Py_ssize_t N = o_v.shape[1]
    active = np.zeros((B, H, N), dtype=np.uint8)
    infeasible = np.zeros((B, H), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] act_v = active
    cdef unsigned char[:, ::1] inf_v = infeasible
    steps = np.empty((B, H, N + 1, m)) if record else np.empty((0, 0, 0, 0))
    cdef double[:, :, :, ::1] s_v = steps
    cdef Py_ssize_t b, h, k, i, j
    cdef double au, absau, nrm2, r, tol, scale, ai, ck
    with nogil:
        for b in range(B):
            for h in range(H):
                if record:
                    for i in range(m):
                        s_v[b, h, 0, i] = u_v[b, h, i]
                for k in range(N):
                    j = o_v[h, k]
                    ck = c_v[b, j]
                    au = 0.0
                    absau = 0.0
                    nrm2 = 0.0
                    for i in range(m):
                        ai = a_v[b, j, i]
                        au = au + ai * u_v[b, h, i]
                        absau = absau + fabs(ai * u_v[b, h, i])
                        nrm2 = nrm2 + ai * ai
                    r = ck - au
                    tol = ROUNDING_SLACK * (fabs(ck) + absau)
                    if r > tol:
                        if nrm2 < EPS_NORM2:
                            inf_v[b, h] = 1
                        else:
                            scale = r / nrm2
                            for i in range(m):
                                u_v[b, h, i] = u_v[b, h, i] + scale * a_v[b, j, i]
                            act_v[b, h, k] = 1
                    if record:
                        for i in range(m):
                            s_v[b, h, k + 1, i] = u_v[b, h, i]
    return out, active, infeasible, (steps if record else None)


def project_heads_backward(A, c, orders, active, G):
    cdef double[:, :, ::1] a_v = np.ascontiguousarray(A, dtype=np.float64)
    cdef long[:, ::1] o_v = np.ascontiguousarray(orders, dtype=np.int64)
    cdef unsigned char[:, :, ::1] act_v = np.ascontiguousarray(active, dtype=np.uint8)
    gu = np.array(G, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] g_v = gu
    cdef Py_ssize_t B = g_v.shape[0], H = g_v.shape[1], m = g_v.shape[2]
    cdef Py_ssize_t N = o_v.shape[1]
    gc = np.zeros((B, N))
    cdef double[:, ::1] gc_v = gc
    cdef Py_ssize_t b, h, k, i, j
    cdef double dot, nrm2, s, ai
    with nogil:
        for b in range(B):
            for h in range(H):
                for k in range(N - 1, -1, -1):
                    if not act_v[b, h, k]:
                        continue
                    j = o_v[h, k]
                    dot = 0.0
                    nrm2 = 0.0
                    for i in range(m):
                        ai = a_v[b, j, i]
                        dot = dot + ai * g_v[b, h, i]
                        nrm2 = nrm2 + ai * ai
                    s = dot / nrm2
                    gc_v[b, j] = gc_v[b, j] + s
                    for i in range(m):
                        g_v[b, h, i] = g_v[b, h, i] - s * a_v[b, j, i]
    return gu, gc
