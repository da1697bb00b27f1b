"""Pure numpy implementation of the integration kernels.

Same signatures and semantics as the compiled ``_kernels`` module; used
when the extension is unavailable or ``FLUORSIM_PURE_PYTHON=1``.
"""
import numpy as np


def propagate_affine(g, delta, gamma1, gamma2, field, step_dt, record_idx):
    """Step affine Bloch maps of independent packets through a driven block.

    Each step applies the exact rotation about ``(2g Re a, -2g Im a, delta)``
    followed by exact relaxation (transverse ``gamma2``, longitudinal
    ``gamma1`` toward s_z = -1/2).

    Parameters
    ----------
    g, delta, gamma1, gamma2 : ndarray, shape (P,)
        Packet coupling, detuning and relaxation rates.
    field : complex ndarray, shape (S,)
        Intracavity field at the step midpoints.
    step_dt : ndarray, shape (S,)
        Step durations.
    record_idx : int ndarray, shape (R,)
        Number of completed steps at which the map is recorded.

    Returns
    -------
    ndarray, shape (R, P, 12)
        Row-major 3x3 matrix followed by the offset vector.
    """
    g = np.asarray(g, dtype=float)
    P = g.size
    M = np.zeros((P, 3, 3))
    M[:, 0, 0] = M[:, 1, 1] = M[:, 2, 2] = 1.0
    c = np.zeros((P, 3))
    record_idx = np.asarray(record_idx, dtype=np.int64)
    out = np.empty((record_idx.size, P, 12))
    r = 0
    while r < record_idx.size and record_idx[r] == 0:
        out[r, :, :9] = M.reshape(P, 9)
        out[r, :, 9:] = c
        r += 1
    R = np.empty((P, 3, 3))
    for k in range(len(step_dt)):
        h = step_dt[k]
        a = field[k]
        ox = 2.0 * g * a.real
        oy = -2.0 * g * a.imag
        oz = delta
        w = np.sqrt(ox * ox + oy * oy + oz * oz)
        safe = np.where(w > 0, w, 1.0)
        nx, ny, nz = ox / safe, oy / safe, oz / safe
        th = w * h
        cs, sn = np.cos(th), np.sin(th)
        oc = 1.0 - cs
        R[:, 0, 0] = cs + nx * nx * oc
        R[:, 0, 1] = nx * ny * oc - nz * sn
        R[:, 0, 2] = nx * nz * oc + ny * sn
        R[:, 1, 0] = ny * nx * oc + nz * sn
        R[:, 1, 1] = cs + ny * ny * oc
        R[:, 1, 2] = ny * nz * oc - nx * sn
        R[:, 2, 0] = nz * nx * oc - ny * sn
        R[:, 2, 1] = nz * ny * oc + nx * sn
        R[:, 2, 2] = cs + nz * nz * oc
        M = np.matmul(R, M)
        c = np.einsum("pij,pj->pi", R, c)
        e1 = np.exp(-gamma1 * h)
        e2 = np.exp(-gamma2 * h)
        M[:, 0, :] *= e2[:, None]
        M[:, 1, :] *= e2[:, None]
        M[:, 2, :] *= e1[:, None]
        c[:, 0] *= e2
        c[:, 1] *= e2
        c[:, 2] = c[:, 2] * e1 - 0.5 * (1.0 - e1)
        while r < record_idx.size and record_idx[r] == k + 1:
            out[r, :, :9] = M.reshape(P, 9)
            out[r, :, 9:] = c
            r += 1
    return out


def transverse_sums(delta, lam, B, u):
    """Free-precession sums ``sum_k exp(-(i delta_k + lam_k) u) poly_k(-u/2)``.

    Parameters
    ----------
    delta, lam : ndarray, shape (K,)
        Precession frequency and decay rate of each term.
    B : complex ndarray, shape (C, M, K)
        Polynomial coefficients per channel ``C`` and order ``M``.
    u : ndarray, shape (R,)
        Evolution times (>= 0).

    Returns
    -------
    complex ndarray, shape (R, C)
    """
    B = np.asarray(B, dtype=complex)
    C, M, _ = B.shape
    out = np.empty((len(u), C), dtype=complex)
    rate = 1j * np.asarray(delta, dtype=float) + np.asarray(lam, dtype=float)
    for r, ur in enumerate(u):
        ph = np.exp(-rate * ur)
        x = -0.5 * ur
        poly = B[:, M - 1, :]
        for m in range(M - 2, -1, -1):
            poly = poly * x + B[:, m, :]
        out[r] = (poly * ph).sum(axis=1)
    return out


def decay_sums(rates, A, u):
    """Exponential sums ``sum_p A[c, p] exp(-rates_p u_r)``.

    Parameters
    ----------
    rates : ndarray, shape (P,)
    A : ndarray, shape (C, P)
    u : ndarray, shape (R,)

    Returns
    -------
    ndarray, shape (R, C)
    """
    rates = np.asarray(rates, dtype=float)
    A = np.asarray(A, dtype=float)
    u = np.asarray(u, dtype=float)
    out = np.empty((u.size, A.shape[0]))
    chunk = max(1, int(4_000_000 // max(rates.size, 1)))
    for s in range(0, u.size, chunk):
        E = np.exp(-np.outer(u[s:s + chunk], rates))
        out[s:s + chunk] = E @ A.T
    return out
