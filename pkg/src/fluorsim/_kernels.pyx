# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled integration kernels (see ``_kernels_py`` for the reference versions)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, exp, fabs

cnp.import_array()


def propagate_affine(g, delta, gamma1, gamma2, field, step_dt, record_idx):
    cdef const double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[::1] dv = np.ascontiguousarray(delta, dtype=np.float64)
    cdef const double[::1] g1v = np.ascontiguousarray(gamma1, dtype=np.float64)
    cdef const double[::1] g2v = np.ascontiguousarray(gamma2, dtype=np.float64)
    fa = np.asarray(field, dtype=np.complex128)
    cdef const double[::1] fre = np.ascontiguousarray(fa.real)
    cdef const double[::1] fim = np.ascontiguousarray(fa.imag)
    cdef const double[::1] hv = np.ascontiguousarray(step_dt, dtype=np.float64)
    cdef const long long[::1] rec = np.ascontiguousarray(record_idx, dtype=np.int64)
    cdef Py_ssize_t P = gv.shape[0], S = hv.shape[0], NR = rec.shape[0]
    out_arr = np.empty((NR, P, 12))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t p, k, r, i, j
    cdef double M[9]
    cdef double c[3]
    cdef double R[9]
    cdef double T[9]
    cdef double t3[3]
    cdef double ox, oy, oz, w, nx, ny, nz, th, cs, sn, oc, h, e1, e2, gp
    with nogil:
        for p in range(P):
            for i in range(9):
                M[i] = 0.0
            M[0] = 1.0
            M[4] = 1.0
            M[8] = 1.0
            c[0] = 0.0
            c[1] = 0.0
            c[2] = 0.0
            gp = gv[p]
            r = 0
            while r < NR and rec[r] == 0:
                for i in range(9):
                    out[r, p, i] = M[i]
                for i in range(3):
                    out[r, p, 9 + i] = c[i]
                r += 1
            for k in range(S):
                h = hv[k]
                ox = 2.0 * gp * fre[k]
                oy = -2.0 * gp * fim[k]
                oz = dv[p]
                w = sqrt(ox * ox + oy * oy + oz * oz)
                if w > 0:
                    nx = ox / w
                    ny = oy / w
                    nz = oz / w
                else:
                    nx = 0.0
                    ny = 0.0
                    nz = 0.0
                th = w * h
                cs = cos(th)
                sn = sin(th)
                oc = 1.0 - cs
                R[0] = cs + nx * nx * oc
                R[1] = nx * ny * oc - nz * sn
                R[2] = nx * nz * oc + ny * sn
                R[3] = ny * nx * oc + nz * sn
                R[4] = cs + ny * ny * oc
                R[5] = ny * nz * oc - nx * sn
                R[6] = nz * nx * oc - ny * sn
                R[7] = nz * ny * oc + nx * sn
                R[8] = cs + nz * nz * oc
                for i in range(3):
                    for j in range(3):
                        T[3 * i + j] = R[3 * i] * M[j] + R[3 * i + 1] * M[3 + j] + R[3 * i + 2] * M[6 + j]
                    t3[i] = R[3 * i] * c[0] + R[3 * i + 1] * c[1] + R[3 * i + 2] * c[2]
                e1 = exp(-g1v[p] * h)
                e2 = exp(-g2v[p] * h)
                for j in range(3):
                    M[j] = T[j] * e2
                    M[3 + j] = T[3 + j] * e2
                    M[6 + j] = T[6 + j] * e1
                c[0] = t3[0] * e2
                c[1] = t3[1] * e2
                c[2] = t3[2] * e1 - 0.5 * (1.0 - e1)
                while r < NR and rec[r] == k + 1:
                    for i in range(9):
                        out[r, p, i] = M[i]
                    for i in range(3):
                        out[r, p, 9 + i] = c[i]
                    r += 1
    return out_arr


def transverse_sums(delta, lam, B, u):
    cdef const double[::1] dv = np.ascontiguousarray(delta, dtype=np.float64)
    cdef const double[::1] lv = np.ascontiguousarray(lam, dtype=np.float64)
    Ba = np.asarray(B, dtype=np.complex128)
    cdef const double[:, :, ::1] bre = np.ascontiguousarray(Ba.real)
    cdef const double[:, :, ::1] bim = np.ascontiguousarray(Ba.imag)
    cdef const double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t C = bre.shape[0], Mo = bre.shape[1], K = bre.shape[2], NR = uv.shape[0]
    acc_re_a = np.zeros((NR, C))
    acc_im_a = np.zeros((NR, C))
    comp_re_a = np.zeros((NR, C))
    comp_im_a = np.zeros((NR, C))
    cdef double[:, ::1] acc_re = acc_re_a
    cdef double[:, ::1] acc_im = acc_im_a
    cdef double[:, ::1] comp_re = comp_re_a
    cdef double[:, ::1] comp_im = comp_im_a
    cdef Py_ssize_t k, r, ch, m
    cdef int since_sync
    cdef double ph_re, ph_im, f_re, f_im, du, du_prev, x, pr, pi_, tr, ti, mag, ang
    cdef double y, t
    with nogil:
        for k in range(K):
            du_prev = -1.0
            since_sync = 0
            ph_re = 0.0
            ph_im = 0.0
            f_re = 0.0
            f_im = 0.0
            for r in range(NR):
                if r == 0 or since_sync >= 64:
                    mag = exp(-lv[k] * uv[r])
                    ang = -dv[k] * uv[r]
                    ph_re = mag * cos(ang)
                    ph_im = mag * sin(ang)
                    since_sync = 0
                else:
                    du = uv[r] - uv[r - 1]
                    if fabs(du - du_prev) > 1e-9 * du:
                        mag = exp(-lv[k] * du)
                        f_re = mag * cos(-dv[k] * du)
                        f_im = mag * sin(-dv[k] * du)
                        du_prev = du
                    tr = ph_re * f_re - ph_im * f_im
                    ph_im = ph_re * f_im + ph_im * f_re
                    ph_re = tr
                    since_sync += 1
                x = -0.5 * uv[r]
                for ch in range(C):
                    pr = bre[ch, Mo - 1, k]
                    pi_ = bim[ch, Mo - 1, k]
                    for m in range(Mo - 2, -1, -1):
                        pr = pr * x + bre[ch, m, k]
                        pi_ = pi_ * x + bim[ch, m, k]
                    tr = pr * ph_re - pi_ * ph_im
                    ti = pr * ph_im + pi_ * ph_re
                    y = tr - comp_re[r, ch]
                    t = acc_re[r, ch] + y
                    comp_re[r, ch] = (t - acc_re[r, ch]) - y
                    acc_re[r, ch] = t
                    y = ti - comp_im[r, ch]
                    t = acc_im[r, ch] + y
                    comp_im[r, ch] = (t - acc_im[r, ch]) - y
                    acc_im[r, ch] = t
    return acc_re_a + 1j * acc_im_a


def decay_sums(rates, A, u):
    cdef const double[::1] rv = np.ascontiguousarray(rates, dtype=np.float64)
    cdef const double[:, ::1] av = np.ascontiguousarray(A, dtype=np.float64)
    cdef const double[::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t C = av.shape[0], P = av.shape[1], NR = uv.shape[0]
    out_a = np.zeros((NR, C))
    comp_a = np.zeros((NR, C))
    cdef double[:, ::1] out = out_a
    cdef double[:, ::1] cmp = comp_a
    cdef Py_ssize_t r, p, ch
    cdef double e, y, t
    with nogil:
        for r in range(NR):
            for p in range(P):
                e = exp(-rv[p] * uv[r])
                for ch in range(C):
                    y = av[ch, p] * e - cmp[r, ch]
                    t = out[r, ch] + y
                    cmp[r, ch] = (t - out[r, ch]) - y
                    out[r, ch] = t
    return out_a
