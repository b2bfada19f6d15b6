"""Pure-numpy implementations of the hot kernels.

These are the reference semantics; ``_core.pyx`` must agree with them to
round-off.  Selected automatically when the compiled extension is missing or
``RSLKIT_PURE_PYTHON=1`` is set.
"""

import numpy as np

_LOG2PI = np.log(2.0 * np.pi)


def abs_diff(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a[:, None] - b[None, :])


def angular_distance(lat1, lon1, lat2, lon2):
    """Great-circle separation in degrees (Vincenty form, stable at 0 and 180)."""
    p1 = np.radians(np.asarray(lat1, dtype=float))[:, None]
    p2 = np.radians(np.asarray(lat2, dtype=float))[None, :]
    dl = np.radians(np.asarray(lon2, dtype=float)[None, :] - np.asarray(lon1, dtype=float)[:, None])
    sp1, cp1 = np.sin(p1), np.cos(p1)
    sp2, cp2 = np.sin(p2), np.cos(p2)
    sdl, cdl = np.sin(dl), np.cos(dl)
    num = np.hypot(cp2 * sdl, cp1 * sp2 - sp1 * cp2 * cdl)
    den = sp1 * sp2 + cp1 * cp2 * cdl
    return np.degrees(np.arctan2(num, den))


def matern(r, s2, length, nu2):
    """Matérn covariance from distances; ``nu2`` is twice the order (1, 3 or 5)."""
    r = np.asarray(r, dtype=float)
    if nu2 == 1:
        return s2 * np.exp(-r / length)
    if nu2 == 3:
        a = np.sqrt(3.0) * r / length
        return s2 * (1.0 + a) * np.exp(-a)
    if nu2 == 5:
        a = np.sqrt(5.0) * r / length
        return s2 * (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise ValueError(f"unsupported Matérn order {nu2}/2")


def matern_sym(r, s2, length, nu2):
    """Matérn of a symmetric distance matrix (same values as ``matern``)."""
    return matern(r, s2, length, nu2)


def _segment_design(t, gammas):
    t = np.asarray(t, dtype=float)
    m = len(gammas)
    X = np.empty((t.size, m + 2))
    X[:, 0] = 1.0
    X[:, 1] = np.minimum(t, gammas[0]) - gammas[0]
    for j in range(1, m + 1):
        lo = gammas[j - 1]
        hi = gammas[j] if j < m else np.inf
        X[:, j + 1] = np.clip(t, lo, hi) - lo
    return X


def changepoint_eval(t, gammas, alpha1, betas):
    X = _segment_design(t, gammas)
    return X @ np.concatenate(([alpha1], betas))


def changepoint_normal_eq(t, y, w, gammas):
    """Return (XᵀWX, XᵀWy, yᵀWy) for the continuous piecewise-linear design."""
    X = _segment_design(t, gammas)
    Xw = X * w[:, None]
    return Xw.T @ X, Xw.T @ y, float(np.dot(w * y, y))


def kalman_forward(Phi, Bu, Q, H, R, Z, x0, P0):
    """Forward filter with NaN-masked observations.

    The prior ``(x0, P0)`` describes the state at step 0; control row ``Bu[k]``
    enters the transition from step k-1 to k.  Returns predicted and filtered
    moments plus the per-step innovation log-likelihood.  A non-positive
    innovation covariance is reported as ``fail`` (the failing step index).
    """
    N, m = Z.shape
    n = Phi.shape[0]
    xp = np.empty((N, n))
    Pp = np.empty((N, n, n))
    xf = np.empty((N, n))
    Pf = np.empty((N, n, n))
    ll = np.zeros(N)
    x = np.array(x0, dtype=float)
    P = np.array(P0, dtype=float)
    for k in range(N):
        if k > 0:
            x = Phi @ x + Bu[k]
            P = Phi @ P @ Phi.T + Q
            P = 0.5 * (P + P.T)
        xp[k] = x
        Pp[k] = P
        obs = ~np.isnan(Z[k])
        if obs.any():
            Ho = H[obs]
            S = Ho @ P @ Ho.T + R[np.ix_(obs, obs)]
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                return xp, Pp, xf, Pf, ll, k
            HP = Ho @ P
            U = np.linalg.solve(L, HP)
            v = np.linalg.solve(L, Z[k, obs] - Ho @ x)
            x = x + U.T @ v
            P = P - U.T @ U
            P = 0.5 * (P + P.T)
            ll[k] = -0.5 * (obs.sum() * _LOG2PI + 2.0 * np.log(np.diag(L)).sum() + v @ v)
        xf[k] = x
        Pf[k] = P
    return xp, Pp, xf, Pf, ll, -1


def information_backward(Phi, Bu, Q, H, R, Z):
    """Backward information filter.

    ``S[k], s[k]`` summarise what observations at steps k+1..N-1 say about the
    state at step k, in information form (no prior).  Returns ``fail`` = step
    index if a linear solve breaks down, else -1.
    """
    N, m = Z.shape
    n = Phi.shape[0]
    S = np.zeros((N, n, n))
    s = np.zeros((N, n))
    J = np.zeros((n, n))
    j = np.zeros(n)
    eye = np.eye(n)
    for k in range(N - 1, -1, -1):
        S[k] = J
        s[k] = j
        obs = ~np.isnan(Z[k])
        Jk = J.copy()
        jk = j.copy()
        if obs.any():
            Ho = H[obs]
            try:
                Lr = np.linalg.cholesky(R[np.ix_(obs, obs)])
            except np.linalg.LinAlgError:
                return S, s, k
            A = np.linalg.solve(Lr, Ho)
            b = np.linalg.solve(Lr, Z[k, obs])
            Jk = Jk + A.T @ A
            jk = jk + A.T @ b
        if k == 0:
            break
        M = eye + Jk @ Q
        try:
            sol = np.linalg.solve(M, np.column_stack([Jk, jk]))
        except np.linalg.LinAlgError:
            return S, s, k
        Jt = sol[:, :n]
        Jt = 0.5 * (Jt + Jt.T)
        jt = sol[:, n]
        J = Phi.T @ Jt @ Phi
        J = 0.5 * (J + J.T)
        j = Phi.T @ (jt - Jt @ Bu[k])
    return S, s, -1
