# cython: language_level=3
"""Compiled versions of the kernels in ``_fallback``.

Same signatures and return conventions; see that module for semantics.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log, fabs, sin, cos, atan2, hypot, M_PI, isnan, INFINITY

cnp.import_array()

cdef double LOG2PI = log(2.0 * M_PI)
cdef double DEG = M_PI / 180.0


def abs_diff(a, b):
    cdef const double[::1] av = np.ascontiguousarray(a, dtype=np.float64).ravel()
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64).ravel()
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(m):
            o[i, j] = fabs(av[i] - bv[j])
    return out


def angular_distance(lat1, lon1, lat2, lon2):
    cdef const double[::1] a1 = np.ascontiguousarray(lat1, dtype=np.float64).ravel()
    cdef const double[::1] o1 = np.ascontiguousarray(lon1, dtype=np.float64).ravel()
    cdef const double[::1] a2 = np.ascontiguousarray(lat2, dtype=np.float64).ravel()
    cdef const double[::1] o2 = np.ascontiguousarray(lon2, dtype=np.float64).ravel()
    cdef Py_ssize_t n = a1.shape[0], m = a2.shape[0], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] o = out
    cdef double sp1, cp1, sp2, cp2, dl, sdl, cdl, num, den
    s2_arr = np.sin(np.asarray(a2) * DEG)
    c2_arr = np.cos(np.asarray(a2) * DEG)
    cdef const double[::1] s2v = s2_arr
    cdef const double[::1] c2v = c2_arr
    for i in range(n):
        sp1 = sin(a1[i] * DEG)
        cp1 = cos(a1[i] * DEG)
        for j in range(m):
            sp2 = s2v[j]
            cp2 = c2v[j]
            dl = (o2[j] - o1[i]) * DEG
            sdl = sin(dl)
            cdl = cos(dl)
            num = hypot(cp2 * sdl, cp1 * sp2 - sp1 * cp2 * cdl)
            den = sp1 * sp2 + cp1 * cp2 * cdl
            o[i, j] = atan2(num, den) / DEG
    return out


def matern(r, double s2, double length, int nu2):
    if nu2 != 1 and nu2 != 3 and nu2 != 5:
        raise ValueError(f"unsupported Matérn order {nu2}/2")
    arr = np.ascontiguousarray(r, dtype=np.float64)
    out = np.empty_like(arr)
    cdef const double[::1] rv = arr.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = rv.shape[0]
    cdef double a
    cdef double c3 = sqrt(3.0) / length
    cdef double c5 = sqrt(5.0) / length
    if nu2 == 1:
        for i in range(n):
            ov[i] = s2 * exp(-rv[i] / length)
    elif nu2 == 3:
        for i in range(n):
            a = c3 * rv[i]
            ov[i] = s2 * (1.0 + a) * exp(-a)
    else:
        for i in range(n):
            a = c5 * rv[i]
            ov[i] = s2 * (1.0 + a + a * a / 3.0) * exp(-a)
    return out


def matern_sym(r, double s2, double length, int nu2):
    """Matérn of a symmetric distance matrix, evaluating one triangle."""
    if nu2 != 1 and nu2 != 3 and nu2 != 5:
        raise ValueError(f"unsupported Matérn order {nu2}/2")
    cdef const double[:, ::1] rv = np.ascontiguousarray(r, dtype=np.float64)
    cdef Py_ssize_t n = rv.shape[0], i, j, bi, bj, ie, je
    cdef Py_ssize_t B = 64
    out = np.empty((n, n))
    cdef double[:, ::1] o = out
    cdef double a, v
    cdef double c3 = sqrt(3.0) / length
    cdef double c5 = sqrt(5.0) / length
    for i in range(n):
        for j in range(i, n):
            if nu2 == 1:
                v = s2 * exp(-rv[i, j] / length)
            elif nu2 == 3:
                a = c3 * rv[i, j]
                v = s2 * (1.0 + a) * exp(-a)
            else:
                a = c5 * rv[i, j]
                v = s2 * (1.0 + a + a * a / 3.0) * exp(-a)
            o[i, j] = v
    # mirror in tiles; a plain column walk thrashes the cache once n outgrows it
    for bi in range(0, n, B):
        ie = min(bi + B, n)
        for bj in range(bi, n, B):
            je = min(bj + B, n)
            for i in range(bi, ie):
                for j in range(max(bj, i + 1), je):
                    o[j, i] = o[i, j]
    return out


cdef inline void _design_row(double t, const double[::1] g, Py_ssize_t m, double* row) noexcept nogil:
    cdef Py_ssize_t j
    cdef double lo, hi, v
    row[0] = 1.0
    row[1] = (t if t < g[0] else g[0]) - g[0]
    for j in range(1, m + 1):
        lo = g[j - 1]
        hi = g[j] if j < m else INFINITY
        v = t
        if v < lo:
            v = lo
        elif v > hi:
            v = hi
        row[j + 1] = v - lo


def changepoint_eval(t, gammas, double alpha1, betas):
    cdef const double[::1] tv = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[::1] g = np.ascontiguousarray(gammas, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(betas, dtype=np.float64)
    cdef Py_ssize_t n = tv.shape[0], m = g.shape[0], i, j
    out = np.empty(n)
    cdef double[::1] o = out
    cdef double row[64]
    cdef double acc
    if m + 2 > 64:
        raise ValueError("too many change points for the compiled kernel")
    for i in range(n):
        _design_row(tv[i], g, m, row)
        acc = alpha1
        for j in range(m + 1):
            acc += b[j] * row[j + 1]
        o[i] = acc
    return out


def changepoint_normal_eq(t, y, w, gammas):
    cdef const double[::1] tv = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] g = np.ascontiguousarray(gammas, dtype=np.float64)
    cdef Py_ssize_t n = tv.shape[0], m = g.shape[0], p = m + 2, i, a, c
    if p > 64:
        raise ValueError("too many change points for the compiled kernel")
    XtX = np.zeros((p, p))
    Xty = np.zeros(p)
    cdef double[:, ::1] A = XtX
    cdef double[::1] bvec = Xty
    cdef double row[64]
    cdef double yy = 0.0, wi
    for i in range(n):
        _design_row(tv[i], g, m, row)
        wi = wv[i]
        yy += wi * yv[i] * yv[i]
        for a in range(p):
            bvec[a] += wi * row[a] * yv[i]
            for c in range(a, p):
                A[a, c] += wi * row[a] * row[c]
    for a in range(p):
        for c in range(a):
            A[a, c] = A[c, a]
    return XtX, Xty, yy


# ---------------------------------------------------------------------------
# small dense linear algebra on row-major buffers

cdef int _lu_solve(double* A, Py_ssize_t n, double* B, Py_ssize_t c) noexcept nogil:
    """Gaussian elimination with partial pivoting; A destroyed, B <- A^{-1} B."""
    cdef Py_ssize_t i, j, k, piv, col
    cdef double amax, f, tmp
    for k in range(n):
        piv = k
        amax = fabs(A[k * n + k])
        for i in range(k + 1, n):
            if fabs(A[i * n + k]) > amax:
                amax = fabs(A[i * n + k])
                piv = i
        if amax == 0.0:
            return -1
        if piv != k:
            for j in range(n):
                tmp = A[k * n + j]
                A[k * n + j] = A[piv * n + j]
                A[piv * n + j] = tmp
            for col in range(c):
                tmp = B[k * c + col]
                B[k * c + col] = B[piv * c + col]
                B[piv * c + col] = tmp
        for i in range(k + 1, n):
            f = A[i * n + k] / A[k * n + k]
            if f != 0.0:
                for j in range(k, n):
                    A[i * n + j] -= f * A[k * n + j]
                for col in range(c):
                    B[i * c + col] -= f * B[k * c + col]
    for k in range(n - 1, -1, -1):
        for col in range(c):
            tmp = B[k * c + col]
            for j in range(k + 1, n):
                tmp -= A[k * n + j] * B[j * c + col]
            B[k * c + col] = tmp / A[k * n + k]
    return 0


cdef int _chol_sub(double[:, ::1] A, Py_ssize_t n) noexcept:
    """Cholesky of the leading n x n block of a larger square buffer."""
    cdef Py_ssize_t i, j, k
    cdef double s
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not (s > 0.0):
            return -1
        s = sqrt(s)
        A[j, j] = s
        for i in range(j + 1, n):
            for k in range(j):
                A[i, j] -= A[i, k] * A[j, k]
            A[i, j] /= s
        for i in range(j):
            A[i, j] = 0.0
    return 0


cdef void _lsolve_sub(double[:, ::1] L, Py_ssize_t n, double[:, ::1] B, Py_ssize_t c) noexcept:
    cdef Py_ssize_t i, k, col
    cdef double s
    for col in range(c):
        for i in range(n):
            s = B[i, col]
            for k in range(i):
                s -= L[i, k] * B[k, col]
            B[i, col] = s / L[i, i]


cdef void _lsolve_vec(double[:, ::1] L, Py_ssize_t n, double[::1] b) noexcept:
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * b[k]
        b[i] = s / L[i, i]


def kalman_forward(Phi, Bu, Q, H, R, Z, x0, P0):
    cdef const double[:, ::1] F = np.ascontiguousarray(Phi, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(Bu, dtype=np.float64)
    cdef const double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef const double[:, ::1] Hv = np.ascontiguousarray(H, dtype=np.float64)
    cdef const double[:, ::1] Rv = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, ::1] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    cdef Py_ssize_t N = Zv.shape[0], m = Zv.shape[1], n = F.shape[0]
    cdef Py_ssize_t k, i, j, a, b, mo
    xp_a = np.empty((N, n)); Pp_a = np.empty((N, n, n))
    xf_a = np.empty((N, n)); Pf_a = np.empty((N, n, n))
    ll_a = np.zeros(N)
    cdef double[:, ::1] xp = xp_a
    cdef double[:, :, ::1] Pp = Pp_a
    cdef double[:, ::1] xf = xf_a
    cdef double[:, :, ::1] Pf = Pf_a
    cdef double[::1] ll = ll_a
    cdef double[::1] x = np.array(x0, dtype=np.float64).ravel()
    cdef double[:, ::1] P = np.array(P0, dtype=np.float64).reshape(n, n).copy()
    cdef double[::1] xt = np.empty(n)
    cdef double[:, ::1] T = np.empty((n, n))
    cdef double[:, ::1] P2 = np.empty((n, n))
    cdef long[::1] idx = np.empty(max(m, 1), dtype=np.int64)
    cdef double[:, ::1] HP = np.empty((max(m, 1), n))
    cdef double[:, ::1] S = np.empty((max(m, 1), max(m, 1)))
    cdef double[::1] v = np.empty(max(m, 1))
    cdef double acc, logdet, q
    for k in range(N):
        if k > 0:
            for i in range(n):
                acc = U[k, i]
                for j in range(n):
                    acc += F[i, j] * x[j]
                xt[i] = acc
            for i in range(n):
                x[i] = xt[i]
            # T = F P ; P = T F^T + Q
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for a in range(n):
                        acc += F[i, a] * P[a, j]
                    T[i, j] = acc
            for i in range(n):
                for j in range(i, n):
                    acc = Qv[i, j]
                    for a in range(n):
                        acc += T[i, a] * F[j, a]
                    P2[i, j] = acc
            for i in range(n):
                for j in range(i, n):
                    P[i, j] = P2[i, j]
                    P[j, i] = P2[i, j]
        for i in range(n):
            xp[k, i] = x[i]
            for j in range(n):
                Pp[k, i, j] = P[i, j]
        mo = 0
        for i in range(m):
            if not isnan(Zv[k, i]):
                idx[mo] = i
                mo += 1
        if mo > 0:
            # HP = H_o P   (mo x n)
            for a in range(mo):
                for j in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc += Hv[idx[a], b] * P[b, j]
                    HP[a, j] = acc
            # S = HP H_o^T + R_oo
            for a in range(mo):
                for b in range(a, mo):
                    acc = Rv[idx[a], idx[b]]
                    for j in range(n):
                        acc += HP[a, j] * Hv[idx[b], j]
                    S[a, b] = acc
                    S[b, a] = acc
            # innovation
            for a in range(mo):
                acc = Zv[k, idx[a]]
                for j in range(n):
                    acc -= Hv[idx[a], j] * x[j]
                v[a] = acc
            if _chol_sub(S, mo) != 0:
                return xp_a, Pp_a, xf_a, Pf_a, ll_a, k
            _lsolve_sub(S, mo, HP, n)
            _lsolve_vec(S, mo, v)
            logdet = 0.0
            q = 0.0
            for a in range(mo):
                logdet += log(S[a, a])
                q += v[a] * v[a]
            for j in range(n):
                acc = 0.0
                for a in range(mo):
                    acc += HP[a, j] * v[a]
                x[j] += acc
            for i in range(n):
                for j in range(i, n):
                    acc = 0.0
                    for a in range(mo):
                        acc += HP[a, i] * HP[a, j]
                    P[i, j] -= acc
                    if j > i:
                        P[j, i] = P[i, j]
            ll[k] = -0.5 * (mo * LOG2PI + 2.0 * logdet + q)
        for i in range(n):
            xf[k, i] = x[i]
            for j in range(n):
                Pf[k, i, j] = P[i, j]
    return xp_a, Pp_a, xf_a, Pf_a, ll_a, -1


def information_backward(Phi, Bu, Q, H, R, Z):
    cdef const double[:, ::1] F = np.ascontiguousarray(Phi, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(Bu, dtype=np.float64)
    cdef const double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef const double[:, ::1] Hv = np.ascontiguousarray(H, dtype=np.float64)
    cdef const double[:, ::1] Rv = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, ::1] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    cdef Py_ssize_t N = Zv.shape[0], m = Zv.shape[1], n = F.shape[0]
    cdef Py_ssize_t k, i, j, a, b, mo
    S_a = np.zeros((N, n, n))
    s_a = np.zeros((N, n))
    cdef double[:, :, ::1] Sv = S_a
    cdef double[:, ::1] sv = s_a
    cdef double[:, ::1] J = np.zeros((n, n))
    cdef double[::1] jv = np.zeros(n)
    cdef double[:, ::1] M = np.empty((n, n))
    cdef double[:, ::1] RHS = np.empty((n, n + 1))
    cdef double[:, ::1] T = np.empty((n, n))
    cdef double[::1] tv = np.empty(n)
    cdef long[::1] idx = np.empty(max(m, 1), dtype=np.int64)
    cdef double[:, ::1] Lr = np.empty((max(m, 1), max(m, 1)))
    cdef double[:, ::1] A = np.empty((max(m, 1), n))
    cdef double[::1] bz = np.empty(max(m, 1))
    cdef double acc
    for k in range(N - 1, -1, -1):
        for i in range(n):
            sv[k, i] = jv[i]
            for j in range(n):
                Sv[k, i, j] = J[i, j]
        mo = 0
        for i in range(m):
            if not isnan(Zv[k, i]):
                idx[mo] = i
                mo += 1
        if mo > 0:
            for a in range(mo):
                bz[a] = Zv[k, idx[a]]
                for b in range(mo):
                    Lr[a, b] = Rv[idx[a], idx[b]]
                for j in range(n):
                    A[a, j] = Hv[idx[a], j]
            if _chol_sub(Lr, mo) != 0:
                return S_a, s_a, k
            _lsolve_sub(Lr, mo, A, n)
            _lsolve_vec(Lr, mo, bz)
            for i in range(n):
                acc = 0.0
                for a in range(mo):
                    acc += A[a, i] * bz[a]
                jv[i] += acc
                for j in range(i, n):
                    acc = 0.0
                    for a in range(mo):
                        acc += A[a, i] * A[a, j]
                    J[i, j] += acc
                    if j > i:
                        J[j, i] = J[i, j]
        if k == 0:
            break
        # M = I + J Q ; solve M [Jt | jt] = [J | j]
        for i in range(n):
            for j in range(n):
                acc = 1.0 if i == j else 0.0
                for a in range(n):
                    acc += J[i, a] * Qv[a, j]
                M[i, j] = acc
                RHS[i, j] = J[i, j]
            RHS[i, n] = jv[i]
        if _lu_solve(&M[0, 0], n, &RHS[0, 0], n + 1) != 0:
            return S_a, s_a, k
        # symmetrise Jt, form jt - Jt c_k
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.5 * (RHS[i, j] + RHS[j, i])
                RHS[i, j] = acc
                RHS[j, i] = acc
        for i in range(n):
            acc = RHS[i, n]
            for j in range(n):
                acc -= RHS[i, j] * U[k, j]
            tv[i] = acc
        # J = F^T Jt F ; j = F^T tv
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for a in range(n):
                    acc += RHS[i, a] * F[a, j]
                T[i, j] = acc
        for i in range(n):
            acc = 0.0
            for a in range(n):
                acc += F[a, i] * tv[a]
            jv[i] = acc
            for j in range(i, n):
                acc = 0.0
                for a in range(n):
                    acc += F[a, i] * T[a, j]
                J[i, j] = acc
                J[j, i] = acc
    return S_a, s_a, -1
